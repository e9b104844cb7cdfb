// Copyright (c) 2026 The compose-probe Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <chrono>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "compose_probe/codec.hpp"
#include "compose_probe/crop_planner.hpp"
#include "compose_probe/embedding.hpp"
#include "compose_probe/error.hpp"
#include "compose_probe/image_io.hpp"

namespace compose_probe {

struct EndpointConfig {
  /// e.g. "http://127.0.0.1:8750"
  std::string base_url;
  /// Upper bound on concurrently issued requests from one client.
  int max_in_flight = 4;
  /// Extra attempts after a transport failure or a 503.
  int max_retries = 3;
  std::chrono::milliseconds retry_backoff{200};
  std::chrono::seconds timeout{60};
};

enum class EncodeMode { Global, Sequence };

/// Client for the encoder wire protocol:
///   GET  /v1/descriptor
///   POST /v1/encode/text   {"texts": [...], "mode": "global"|"tokens"}
///   POST /v1/encode/image  {"images_b64": [...], "mode": "global"|"patches"}
/// Both encode routes answer {"embeddings": [[...], ...], "rows_per_item": [...]}.
/// Safe to share between threads; at most max_in_flight requests are open.
class EncoderClient {
 public:
  explicit EncoderClient(EndpointConfig config)
      : config_(std::move(config)),
        slots_(std::max(1, config_.max_in_flight)) {
    if (config_.base_url.empty()) throw Error(ErrorKind::Config, "encoder endpoint URL is empty");
  }

  const EndpointConfig& config() const { return config_; }

  const EncoderDescriptor& descriptor() {
    std::lock_guard lock(descriptor_mutex_);
    if (!descriptor_) {
      const auto body = request("GET", "/v1/descriptor", "");
      descriptor_ = descriptor_from_json(body);
    }
    return *descriptor_;
  }

  /// One matrix per text, in request order.
  std::vector<EmbeddingMatrix> encode_texts(std::span<const std::string> texts, EncodeMode mode) {
    if (texts.empty()) throw Error(ErrorKind::Precondition, "encode batch is empty");
    nlohmann::json req = {{"texts", std::vector<std::string>(texts.begin(), texts.end())},
                          {"mode", mode == EncodeMode::Global ? "global" : "tokens"}};
    return split_response(request("POST", "/v1/encode/text", req.dump()), texts.size(), mode);
  }

  /// Images travel as base64 PNG. One matrix per image, in request order.
  std::vector<EmbeddingMatrix> encode_images(std::span<const ImageRaster> images, EncodeMode mode) {
    if (images.empty()) throw Error(ErrorKind::Precondition, "encode batch is empty");
    std::vector<std::string> payload;
    payload.reserve(images.size());
    for (const auto& img : images) payload.push_back(base64_encode(encode_png(img)));
    nlohmann::json req = {{"images_b64", payload},
                          {"mode", mode == EncodeMode::Global ? "global" : "patches"}};
    return split_response(request("POST", "/v1/encode/image", req.dump()), images.size(), mode);
  }

 private:
  nlohmann::json request(const std::string& method, const std::string& path, const std::string& body) {
    slots_.acquire();
    struct Release {
      std::counting_semaphore<>& s;
      ~Release() { s.release(); }
    } release{slots_};

    std::string last_failure;
    for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
      if (attempt > 0) std::this_thread::sleep_for(config_.retry_backoff * attempt);
      httplib::Client cli(config_.base_url);
      cli.set_connection_timeout(config_.timeout);
      cli.set_read_timeout(config_.timeout);
      cli.set_write_timeout(config_.timeout);
      auto res = method == "GET" ? cli.Get(path) : cli.Post(path, body, "application/json");
      if (!res) {
        last_failure = "request to " + config_.base_url + path + " failed: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status == 503) {
        last_failure = "endpoint " + config_.base_url + path + " returned 503 (model not loaded)";
        continue;
      }
      if (res->status != 200) {
        std::string msg = "HTTP " + std::to_string(res->status);
        try {
          msg += ": " + nlohmann::json::parse(res->body).at("error").get<std::string>();
        } catch (const nlohmann::json::exception&) {
        }
        throw Error(ErrorKind::Protocol, path + " " + msg);
      }
      try {
        return nlohmann::json::parse(res->body);
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::Protocol, path + " returned invalid JSON: " + e.what());
      }
    }
    throw Error(ErrorKind::Transport, last_failure);
  }

  std::vector<EmbeddingMatrix> split_response(const nlohmann::json& body, std::size_t items,
                                              EncodeMode mode) {
    const std::size_t dim = descriptor().embedding_dim;
    std::vector<std::vector<float>> rows;
    std::vector<std::size_t> rows_per_item;
    try {
      rows = body.at("embeddings").get<std::vector<std::vector<float>>>();
      rows_per_item = body.at("rows_per_item").get<std::vector<std::size_t>>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Protocol, std::string("malformed encode response: ") + e.what());
    }
    if (rows_per_item.size() != items) {
      throw Error(ErrorKind::Protocol, "response describes " + std::to_string(rows_per_item.size()) +
                                           " items, expected " + std::to_string(items));
    }
    std::size_t total = 0;
    for (auto r : rows_per_item) {
      if (r == 0) throw Error(ErrorKind::Protocol, "response item with zero rows");
      if (mode == EncodeMode::Global && r != 1) {
        throw Error(ErrorKind::Protocol, "global encode returned more than one row per item");
      }
      total += r;
    }
    if (total != rows.size()) throw Error(ErrorKind::Protocol, "rows_per_item does not sum to row count");
    std::vector<EmbeddingMatrix> out;
    std::size_t at = 0;
    for (auto r : rows_per_item) {
      EmbeddingMatrix m(r, dim);
      for (std::size_t i = 0; i < r; ++i, ++at) {
        if (rows[at].size() != dim) {
          throw Error(ErrorKind::Protocol, "embedding of dim " + std::to_string(rows[at].size()) +
                                               " but descriptor declares " + std::to_string(dim));
        }
        std::copy(rows[at].begin(), rows[at].end(), m.row(i).begin());
      }
      m.validate();
      out.push_back(std::move(m));
    }
    return out;
  }

  EndpointConfig config_;
  std::counting_semaphore<> slots_;
  std::mutex descriptor_mutex_;
  std::optional<EncoderDescriptor> descriptor_;
};

}  // namespace compose_probe
