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

// compose-probe: command-line front end for crop planning, caption
// segmentation, retrieval evaluation, dataset construction and training of
// the alignment transformer.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "compose_probe.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace compose_probe;

namespace {

constexpr const char* kToolVersion = "0.1.0";

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// One per run that writes artifacts: flags, seeds, input and output hashes.
class RunManifest {
 public:
  RunManifest(const CLI::App& sub) : started_(utc_now()) {
    doc_["subcommand"] = sub.get_name();
    doc_["tool_version"] = kToolVersion;
    json flags = json::object();
    for (const auto* opt : sub.get_options()) {
      const auto name = opt->get_name();
      if (name.empty() || name == "--help" || name == "-h") continue;
      if (opt->count() > 0) {
        const auto& r = opt->results();
        flags[name] = r.size() == 1 ? json(r.front()) : json(r);
      } else {
        flags[name] = opt->get_default_str();
      }
    }
    doc_["flags"] = flags;
    doc_["seeds"] = json::object();
    doc_["inputs"] = json::object();
    doc_["artifacts"] = json::object();
  }

  void seed(const std::string& name, std::uint64_t v) { doc_["seeds"][name] = v; }
  void input(const fs::path& p) {
    if (fs::is_regular_file(p)) doc_["inputs"][p.string()] = sha256_file(p.string());
  }
  void artifact(const fs::path& p, const fs::path& root) {
    doc_["artifacts"][fs::relative(p, root).generic_string()] = sha256_file(p.string());
  }
  void note(const std::string& key, json value) { doc_[key] = std::move(value); }

  void write(const fs::path& path) {
    doc_["started_at"] = started_;
    doc_["finished_at"] = utc_now();
    std::ofstream f(path);
    if (!f) throw Error(ErrorKind::Io, "cannot write " + path.string());
    f << doc_.dump(2) << '\n';
  }

 private:
  std::string started_;
  json doc_;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::Io, "cannot write " + path.string());
  f << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::Io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<CropSize> parse_sizes(const std::string& spec) {
  std::vector<CropSize> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    int w = 0, h = 0;
    char x = 0;
    std::istringstream is(item);
    if (!(is >> w >> x >> h) || x != 'x' || w <= 0 || h <= 0) {
      throw Error(ErrorKind::Config, "bad crop size '" + item + "' (expected WxH)");
    }
    out.push_back({w, h});
  }
  return out;
}

Placement parse_placement(const std::string& s) { return s == "grid" ? Placement::Grid : Placement::Overlap; }

SegmentationStrategy parse_strategy(const std::string& source, const std::string& granularity) {
  SegmentationStrategy st;
  st.source = source == "structured"  ? SegmentSource::Structured
              : source == "automatic" ? SegmentSource::Automatic
                                      : SegmentSource::CaptionOnly;
  st.granularity = granularity == "fine" ? Granularity::FineGrained : Granularity::CoarseGrained;
  return st;
}

std::shared_ptr<const Lexicon> lexicon_from(const std::string& dir) {
  return std::make_shared<const Lexicon>(dir.empty() ? Lexicon::builtin() : Lexicon::load_dir(dir));
}

/// URL -> remote encoder (cached under COMPOSE_PROBE_CACHE when set),
/// "hash[:DIM]" -> deterministic hashing encoder, anything else -> EMB1 store.
std::shared_ptr<EmbeddingSource> open_source(const std::string& spec) {
  if (spec.rfind("http://", 0) == 0 || spec.rfind("https://", 0) == 0) {
    EndpointConfig cfg;
    cfg.base_url = spec;
    std::shared_ptr<EmbeddingSource> remote = std::make_shared<RemoteSource>(std::make_shared<EncoderClient>(cfg));
    if (auto dir = CachingSource::env_cache_dir()) return std::make_shared<CachingSource>(remote, *dir);
    return remote;
  }
  if (spec == "hash" || spec.rfind("hash:", 0) == 0) {
    const std::size_t dim = spec == "hash" ? 64 : std::stoul(spec.substr(5));
    return std::make_shared<HashingEncoder>(dim);
  }
  return std::make_shared<StoreSource>(std::make_shared<const EmbeddingStore>(store_read(spec)), spec);
}

// ---------------------------------------------------------------------------

struct PlanCropsArgs {
  int width = 0, height = 0;
  std::string placement = "grid";
  std::string sizes;
  bool full_image = false;
  std::string out;
};

int cmd_plan_crops(const PlanCropsArgs& a, const CLI::App& sub) {
  CropConfig cfg;
  cfg.placement = parse_placement(a.placement);
  if (!a.sizes.empty()) cfg.sizes = parse_sizes(a.sizes);
  cfg.include_full_image = a.full_image;
  const auto crops = plan_crops(a.width, a.height, cfg);
  if (a.full_image) std::cout << "full: 1\n";
  const std::size_t first_sized = a.full_image ? 1 : 0;
  for (const auto& s : cfg.sizes) {
    const auto n = std::count_if(crops.begin() + static_cast<std::ptrdiff_t>(first_sized), crops.end(),
                                 [&](const CropRect& r) { return r.w == s.w && r.h == s.h; });
    std::cout << s.w << "x" << s.h << ": " << n << "\n";
  }
  std::cout << "total: " << crops.size() << "\n";
  if (!a.out.empty()) {
    json doc = {{"width", a.width}, {"height", a.height}, {"placement", a.placement}, {"crops", json::array()}};
    for (const auto& r : crops) doc["crops"].push_back({{"x", r.x}, {"y", r.y}, {"w", r.w}, {"h", r.h}});
    const fs::path out(a.out);
    write_text(out, doc.dump(2) + "\n");
    RunManifest m(sub);
    m.artifact(out, out.parent_path().empty() ? fs::path(".") : out.parent_path());
    m.write(out.string() + ".manifest.json");
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct SegmentArgs {
  std::string caption;
  std::string strategy = "structured";
  std::string granularity = "coarse";
  std::string annotation;
  std::string corpus;
  std::string expected;
  std::string lexicon;
  std::string out;
};

json segment_one(const std::string& caption, const std::optional<SegmentAnnotation>& ann,
                 const SegmentationStrategy& st, const Lexicon& lex) {
  return segment_caption(caption, ann ? &*ann : nullptr, st, lex).segments;
}

int cmd_segment(const SegmentArgs& a, const CLI::App& sub) {
  const auto lex = lexicon_from(a.lexicon);
  const auto st = parse_strategy(a.strategy, a.granularity);
  std::string output;
  if (!a.corpus.empty()) {
    // Corpus lines: {"caption", optional "annotation", "strategy", "granularity"}.
    std::ifstream in(a.corpus);
    if (!in) throw Error(ErrorKind::Io, "cannot read corpus " + a.corpus);
    json results = json::array();
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& e) {
        throw Error(ErrorKind::Format, a.corpus + ":" + std::to_string(n) + ": " + e.what());
      }
      std::optional<SegmentAnnotation> ann;
      if (j.contains("annotation")) ann = annotation_from_json(j.at("annotation"));
      const auto line_st = parse_strategy(j.value("strategy", a.strategy), j.value("granularity", a.granularity));
      const auto caption = j.at("caption").get<std::string>();
      results.push_back({{"caption", caption}, {"segments", segment_one(caption, ann, line_st, *lex)}});
    }
    output = results.dump(2) + "\n";
  } else {
    if (a.caption.empty()) throw Error(ErrorKind::Precondition, "caption is empty");
    std::optional<SegmentAnnotation> ann;
    if (!a.annotation.empty()) {
      try {
        ann = annotation_from_json(json::parse(read_text(a.annotation)));
      } catch (const json::exception& e) {
        throw Error(ErrorKind::Format, a.annotation + ": " + e.what());
      }
    }
    output = segment_one(a.caption, ann, st, *lex).dump() + "\n";
  }
  std::cout << output;
  if (!a.out.empty()) {
    const fs::path out(a.out);
    write_text(out, output);
    RunManifest m(sub);
    m.input(a.corpus);
    m.artifact(out, out.parent_path().empty() ? fs::path(".") : out.parent_path());
    m.write(out.string() + ".manifest.json");
  }
  if (!a.expected.empty()) {
    const auto want = read_text(a.expected);
    if (want != output) {
      std::size_t i = 0;
      while (i < want.size() && i < output.size() && want[i] == output[i]) ++i;
      std::cerr << "golden mismatch at byte " << i << " of " << a.expected << "\n";
      return 3;
    }
    std::cerr << "golden match: " << a.expected << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string dataset;
  std::string scorer = "global";
  std::string encoder = "hash";
  std::string checkpoint;
  std::string images_root;
  std::string placement = "overlap";
  std::string segmentation = "structured";
  std::string granularity = "coarse";
  bool full_image = false;
  std::string lexicon;
  std::size_t synthetic = 0;
  std::uint64_t seed = 0;
  bool lenient = false;
  unsigned jobs = 1;
  std::string out_dir = "eval_out";
};

std::vector<RetrievalInstance> synthetic_instances(std::size_t n) {
  std::vector<RetrievalInstance> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "synthetic-%06zu", i);
    out[i].id = id;
    out[i].category = "synthetic";
    out[i].image = std::string("synthetic/") + id + ".png";
    out[i].negative_image = std::string("synthetic/") + id + "_neg.png";
    out[i].caption = "caption " + std::to_string(i);
    out[i].negative_caption = "negative caption " + std::to_string(i);
  }
  return out;
}

void print_report(const EvalReport& r) {
  std::printf("%-12s %8s %8s %8s %8s\n", "category", "count", "I2T", "T2I", "Group");
  auto row = [&](const CategoryScores& c) {
    if (r.one_directional) {
      std::printf("%-12s %8zu %8.1f %8s %8s\n", c.category.c_str(), c.count, c.i2t, "-", "-");
    } else {
      std::printf("%-12s %8zu %8.1f %8.1f %8.1f\n", c.category.c_str(), c.count, c.i2t, c.t2i, c.group);
    }
  };
  for (const auto& c : r.categories) row(c);
  row(r.average);
  const auto rb = random_baseline();
  std::printf("%-12s %8s %8.1f %8.1f %8.1f\n", "random", "-", rb.i2t, rb.t2i, rb.group);
  if (r.skipped) std::printf("skipped: %zu\n", r.skipped);
}

int cmd_eval(const EvalArgs& a, const CLI::App& sub) {
  RunManifest manifest(sub);
  std::vector<RetrievalInstance> data;
  fs::path root = a.images_root;
  if (a.synthetic > 0) {
    data = synthetic_instances(a.synthetic);
  } else {
    if (a.dataset.empty()) throw Error(ErrorKind::Config, "--dataset or --synthetic is required");
    data = load_dataset_jsonl(a.dataset);
    manifest.input(a.dataset);
    if (root.empty()) root = fs::path(a.dataset).parent_path();
  }
  manifest.seed("scorer", a.seed);

  Scorer scorer;
  std::shared_ptr<EmbeddingSource> source;
  auto need_source = [&] {
    if (!source) {
      source = open_source(a.encoder);
      manifest.input(a.encoder);
      manifest.note("encoder", to_json(source->descriptor()));
    }
    return source;
  };
  const auto resolve = file_image_resolver(root);
  if (a.scorer == "random") {
    scorer = random_scorer(a.seed);
  } else if (a.scorer == "global") {
    scorer = global_scorer(need_source(), resolve);
  } else if (a.scorer == "sgi") {
    SgiConfig cfg;
    cfg.crops = CropConfig::with_placement(parse_placement(a.placement));
    cfg.crops.include_full_image = a.full_image;
    cfg.segmentation = parse_strategy(a.segmentation, a.granularity);
    scorer = sgi_scorer(need_source(), resolve, cfg, lexicon_from(a.lexicon));
  } else {
    if (a.checkpoint.empty()) throw Error(ErrorKind::Config, "--scorer transformer needs --checkpoint");
    auto params = std::make_shared<const ModelParams<float>>(load_checkpoint<float>(a.checkpoint));
    manifest.input(a.checkpoint);
    scorer = as_scorer<float>(params, need_source(), resolve);
  }

  EvalOptions opt;
  opt.scorer_name = a.scorer;
  opt.lenient = a.lenient;
  opt.jobs = a.jobs;
  const auto report = evaluate(data, scorer, opt);
  if (auto* caching = dynamic_cast<CachingSource*>(source.get())) caching->flush();

  const fs::path out(a.out_dir);
  fs::create_directories(out);
  write_text(out / "report.json", to_json(report).dump(2) + "\n");
  write_text(out / "report.csv", to_csv(report));
  manifest.artifact(out / "report.json", out);
  manifest.artifact(out / "report.csv", out);
  manifest.write(out / "manifest.json");
  print_report(report);
  return 0;
}

// ---------------------------------------------------------------------------

struct BuildArgs {
  std::string clevr_scenes;
  std::size_t synthetic_scenes = 0;
  std::string clevr_split = "val";
  std::string category = "all";
  std::size_t n = 1000;
  std::uint64_t seed = 0;
  std::string out = "biscor_out";
  std::string templates;
  unsigned jobs = 1;
  bool verify = false;
};

std::vector<std::string> checker_tokens(const std::string& caption) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char ch : caption) {
    if (std::isalnum(ch) || ch == '\'' || ch == '-') {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    } else if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  std::sort(out.begin(), out.end());
  return out;
}

/// Re-reads written dataset files and checks each line on its own: the two
/// captions are permutations of the same words, they differ, ids are
/// unique and no base scene is used twice within a file.
std::size_t verify_outputs(const std::vector<fs::path>& files) {
  std::size_t lines = 0;
  std::set<std::string> ids;
  for (const auto& f : files) {
    std::ifstream in(f);
    std::set<std::string> scenes;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      const auto j = json::parse(line);
      const auto where = f.string() + ":" + std::to_string(n);
      const auto cap = j.at("caption").get<std::string>();
      const auto neg = j.at("negative_caption").get<std::string>();
      if (checker_tokens(cap) != checker_tokens(neg)) throw Error(ErrorKind::Consistency, where + ": word multisets differ");
      if (cap == neg) throw Error(ErrorKind::Consistency, where + ": negative caption equals the caption");
      if (!ids.insert(j.at("id").get<std::string>()).second) throw Error(ErrorKind::Consistency, where + ": duplicate id");
      if (!scenes.insert(j.at("scene_id").get<std::string>()).second) {
        throw Error(ErrorKind::Consistency, where + ": base scene reused");
      }
      ++lines;
    }
  }
  return lines;
}

int cmd_build_biscor(const BuildArgs& a, const CLI::App& sub) {
  RunManifest manifest(sub);
  manifest.seed("build", a.seed);
  std::vector<SceneGraph> scenes;
  if (a.synthetic_scenes > 0) {
    scenes = synthesize_clevr_scenes(a.synthetic_scenes, parse_clevr_split(a.clevr_split), a.seed);
    manifest.seed("synthetic_scenes", a.seed);
  } else {
    if (a.clevr_scenes.empty()) throw Error(ErrorKind::Config, "--clevr-scenes or --synthetic-scenes is required");
    scenes = load_clevr_scenes(a.clevr_scenes);
    manifest.input(a.clevr_scenes);
  }
  BuildOptions opt;
  opt.jobs = a.jobs;
  if (!a.templates.empty()) {
    opt.templates = CaptionTemplates::load(a.templates);
    manifest.input(a.templates);
  }
  std::vector<SwapCategory> cats;
  if (a.category == "all") {
    cats.assign(all_categories().begin(), all_categories().end());
  } else {
    cats.push_back(parse_swap_category(a.category));
  }
  const fs::path out(a.out);
  fs::create_directories(out);
  std::vector<InstanceRecord> all;
  std::vector<fs::path> files;
  for (auto cat : cats) {
    auto records = build_split(scenes, cat, a.n, a.seed, opt);
    const auto split = to_string(records.front().split);
    const auto path = out / (to_string(cat) + "_" + split + ".jsonl");
    std::ostringstream ss;
    write_records_jsonl(ss, records);
    write_text(path, ss.str());
    files.push_back(path);
    std::cout << to_string(cat) << " " << split << ": " << records.size() << " records -> " << path.string() << "\n";
    for (auto& r : records) all.push_back(std::move(r));
  }
  emit_render_jobs(all, out);
  for (const auto& f : files) manifest.artifact(f, out);
  manifest.artifact(out / "render_jobs.jsonl", out);
  manifest.note("templates", opt.templates.to_json());
  manifest.write(out / "manifest.json");
  if (a.verify) {
    const auto n = verify_outputs(files);
    std::cout << "verify: " << n << " lines pass\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::size_t count = 100;
  std::string split = "val";
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_synth_scenes(const SynthArgs& a, const CLI::App& sub) {
  const auto scenes = synthesize_clevr_scenes(a.count, parse_clevr_split(a.split), a.seed);
  const fs::path out(a.out);
  write_text(out, scenes_document(scenes).dump() + "\n");
  RunManifest m(sub);
  m.seed("scenes", a.seed);
  m.artifact(out, out.parent_path().empty() ? fs::path(".") : out.parent_path());
  m.write(out.string() + ".manifest.json");
  std::cout << "scenes: " << scenes.size() << " -> " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string variant = "local";
  std::size_t layers = 4;
  std::size_t model_dim = 512, heads = 8, ff_dim = 2048;
  std::size_t max_patches = 50, max_tokens = 77, visual_dim = 768, text_dim = 512;
  std::string preset;
  std::string data;
  std::string val;
  std::string encoder = "hash";
  std::uint64_t seed = 0;
  double lr = 1e-4;
  std::size_t epochs = 5;
  std::size_t batch = 50;
  bool hard_negatives = false;
  bool freeze_temperature = false;
  std::size_t eval_every = 0;
  double target_accuracy = -1.0;
  double init_std = 0.02;
  unsigned jobs = 1;
  bool dry_run = false;
  std::string out = "train_out";
};

TransformerConfig model_config(TrainArgs& a) {
  if (a.preset == "tiny") {
    a.model_dim = 32;
    a.heads = 4;
    a.ff_dim = 64;
    a.max_patches = 8;
    a.max_tokens = 8;
    a.visual_dim = 16;
    a.text_dim = 16;
  }
  TransformerConfig c = a.variant == "global" ? TransformerConfig::global(a.visual_dim) : TransformerConfig::local();
  c.layers = a.layers;
  c.model_dim = a.model_dim;
  c.heads = a.heads;
  c.ff_dim = a.ff_dim;
  if (c.variant == Variant::Local) {
    c.max_patches = a.max_patches;
    c.max_tokens = a.max_tokens;
    c.visual_dim = a.visual_dim;
    c.text_dim = a.text_dim;
  } else if (a.text_dim != a.visual_dim && a.variant == "global") {
    c.text_dim = a.text_dim;
  }
  c.validate();
  return c;
}

/// Pairs from a retrieval dataset: image/caption are positives and the
/// negative image/caption their hard negatives.
TrainData<float> dataset_pairs(const std::string& path, EmbeddingSource& source, Variant variant,
                               const fs::path& root) {
  const auto data = load_dataset_jsonl(path);
  const auto resolve = file_image_resolver(root);
  const auto mode = variant == Variant::Local ? EncodeMode::Sequence : EncodeMode::Global;
  const int side = source.descriptor().input_side;
  auto image = [&](const std::string& img) {
    const auto ref = resolve(img);
    auto pre = std::make_shared<detail::PreprocessedImage>(ref, side);
    const std::vector<ImageJob> job{{mode == EncodeMode::Sequence ? keys::image_patches(ref.id) : keys::image_global(ref.id),
                                     [pre] { return pre->get(); }}};
    return to_sequence<float>(source.images(job, mode).at(0));
  };
  auto text = [&](const std::string& t) {
    const std::vector<std::string> v{t};
    return to_sequence<float>(source.texts(v, mode).at(0));
  };
  TrainData<float> d;
  for (const auto& inst : data) {
    d.images.push_back(image(inst.image));
    d.texts.push_back(text(inst.caption));
    if (inst.negative_image) {
      d.negative_images.push_back(image(*inst.negative_image));
      d.negative_texts.push_back(text(inst.negative_caption));
    }
  }
  return d;
}

struct TrainOutcome {
  TrainResult<float> result;
  std::size_t params = 0;
};

TrainOutcome run_training(TrainArgs& a, const TransformerConfig& mc, RunManifest& manifest) {
  TrainData<float> data;
  TrainConfig tc;
  tc.lr = a.lr;
  tc.epochs = a.epochs;
  tc.batch_size = a.batch;
  tc.hard_negatives = a.hard_negatives;
  tc.learn_temperature = !a.freeze_temperature;
  tc.eval_every = a.eval_every;
  tc.jobs = a.jobs;
  tc.seed = a.seed;
  if (a.target_accuracy >= 0.0) tc.target_accuracy = a.target_accuracy;
  if (a.data.rfind("synthetic:", 0) == 0) {
    const std::size_t n = std::stoul(a.data.substr(10));
    data = separable_pairs<float>(mc, n, a.seed);
    tc.batch_size = std::min(tc.batch_size, n);
  } else {
    auto source = open_source(a.encoder);
    manifest.input(a.data);
    manifest.input(a.encoder);
    data = dataset_pairs(a.data, *source, mc.variant, fs::path(a.data).parent_path());
    if (!a.val.empty()) {
      const auto v = dataset_pairs(a.val, *source, mc.variant, fs::path(a.val).parent_path());
      data.val_images = v.images;
      data.val_texts = v.texts;
      manifest.input(a.val);
    } else {
      data.val_images = data.images;
      data.val_texts = data.texts;
    }
  }
  InitOptions init;
  init.seed = a.seed;
  init.std = a.init_std;
  auto params = init_params<float>(mc, init);
  manifest.seed("train", a.seed);
  manifest.note("model_config", to_json(mc));
  manifest.note("train_config", to_json(tc));
  TrainOutcome o;
  o.params = param_count(params);
  o.result = train(tc, std::move(params), data);
  return o;
}

int cmd_train(TrainArgs a, const CLI::App& sub) {
  if (a.layers < 1) throw Error(ErrorKind::Config, "--layers must be at least 1");
  const auto mc = model_config(a);
  std::cout << "parameters: " << param_count(mc) << " (" << to_string(mc.variant) << ", " << mc.layers
            << " layers, d=" << mc.model_dim << ")\n";
  if (a.dry_run) return 0;
  if (a.data.empty()) throw Error(ErrorKind::Config, "--data is required unless --dry-run is given");
  RunManifest manifest(sub);
  auto o = run_training(a, mc, manifest);
  const auto& r = o.result;
  const fs::path out(a.out);
  fs::create_directories(out);
  std::ostringstream hist;
  write_history_csv(hist, r.history);
  write_text(out / "history.csv", hist.str());
  save_checkpoint(out / "checkpoint.emb1", r.best, {{"best_step", r.best_step}, {"best_accuracy", r.best_accuracy}});
  json summary = {{"parameters", o.params},     {"steps", r.steps},
                  {"total_steps", r.total_steps}, {"best_step", r.best_step},
                  {"best_accuracy", r.best_accuracy}};
  write_text(out / "summary.json", summary.dump(2) + "\n");
  for (const auto* f : {"history.csv", "checkpoint.emb1", "checkpoint.emb1.json", "summary.json"}) {
    manifest.artifact(out / f, out);
  }
  manifest.write(out / "manifest.json");
  std::cout << "steps: " << r.steps << "/" << r.total_steps << "\n";
  std::cout << "best validation accuracy: " << r.best_accuracy << " at step " << r.best_step << "\n";
  if (a.target_accuracy >= 0.0 && r.best_accuracy < a.target_accuracy) {
    std::cerr << "target accuracy " << a.target_accuracy << " not reached\n";
    return 3;
  }
  return 0;
}

int cmd_sweep(TrainArgs a, std::size_t max_layers, const CLI::App& sub) {
  if (a.data.empty()) throw Error(ErrorKind::Config, "--data is required");
  RunManifest manifest(sub);
  const fs::path out(a.out);
  fs::create_directories(out);
  std::ostringstream csv;
  csv << "layers,parameters,best_accuracy,best_step,steps\n";
  std::printf("%-7s %12s %14s %10s\n", "layers", "parameters", "best val acc", "best step");
  for (std::size_t l = 1; l <= max_layers; ++l) {
    a.layers = l;
    const auto mc = model_config(a);
    auto o = run_training(a, mc, manifest);
    std::printf("%-7zu %12zu %14.4f %10zu\n", l, o.params, o.result.best_accuracy, o.result.best_step);
    csv << l << "," << o.params << "," << o.result.best_accuracy << "," << o.result.best_step << "," << o.result.steps
        << "\n";
  }
  write_text(out / "sweep.csv", csv.str());
  manifest.artifact(out / "sweep.csv", out);
  manifest.write(out / "manifest.json");
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_report(const std::string& in) {
  json j;
  try {
    j = json::parse(read_text(in));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Format, in + ": " + e.what());
  }
  auto num = [](const json& v) { return v.is_null() ? std::string("-") : ([&] {
    char b[32];
    std::snprintf(b, sizeof b, "%.1f", v.get<double>());
    return std::string(b);
  })(); };
  std::printf("scorer: %s  instances: %zu\n", j.value("scorer", "?").c_str(), j.value("instances", std::size_t{0}));
  std::printf("%-12s %8s %8s %8s %8s\n", "category", "count", "I2T", "T2I", "Group");
  auto row = [&](const json& c) {
    std::printf("%-12s %8zu %8s %8s %8s\n", c.value("category", "?").c_str(), c.value("count", std::size_t{0}),
                num(c.at("i2t")).c_str(), num(c.at("t2i")).c_str(), num(c.at("group")).c_str());
  };
  for (const auto& c : j.at("categories")) row(c);
  row(j.at("average"));
  if (j.contains("random_baseline")) row(j.at("random_baseline"));
  return 0;
}

int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::Config:
    case ErrorKind::Precondition:
      return 2;
    case ErrorKind::Format:
    case ErrorKind::Corruption:
      return 4;
    default:
      return 3;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"compose-probe: compositional image-text retrieval toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  PlanCropsArgs pc;
  auto* plan = app.add_subcommand("plan-crops", "List the crops planned for an image size");
  plan->add_option("--width", pc.width, "Image width")->required()->check(CLI::PositiveNumber);
  plan->add_option("--height", pc.height, "Image height")->required()->check(CLI::PositiveNumber);
  plan->add_option("--placement", pc.placement, "grid or overlap")
      ->capture_default_str()->check(CLI::IsMember({"grid", "overlap"}));
  plan->add_option("--sizes", pc.sizes, "Comma-separated WxH list (default: six sizes from 32x32 to 224x224)");
  plan->add_flag("--full-image", pc.full_image, "Also emit the whole image as the first crop");
  plan->add_option("--out", pc.out, "Write the crop list as JSON");

  SegmentArgs sg;
  auto* seg = app.add_subcommand("segment", "Split a caption into matching segments");
  seg->add_option("--caption", sg.caption, "Caption text");
  seg->add_option("--strategy", sg.strategy, "structured, automatic or caption-only")
      ->capture_default_str()->check(CLI::IsMember({"structured", "automatic", "caption-only"}));
  seg->add_option("--granularity", sg.granularity, "coarse or fine")
      ->capture_default_str()->check(CLI::IsMember({"coarse", "fine"}));
  seg->add_option("--annotation", sg.annotation, "JSON file with the caption's phrases and relation");
  seg->add_option("--corpus", sg.corpus, "JSONL corpus to segment instead of --caption");
  seg->add_option("--expected", sg.expected, "Golden output to compare byte for byte");
  seg->add_option("--lexicon", sg.lexicon, "Directory of word lists overriding the built-in lexicon");
  seg->add_option("--out", sg.out, "Also write the output here");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Score a retrieval dataset");
  eval->add_option("--dataset", ev.dataset, "Dataset JSONL");
  eval->add_option("--scorer", ev.scorer, "global, sgi, transformer or random")
      ->capture_default_str()->check(CLI::IsMember({"global", "sgi", "transformer", "random"}));
  eval->add_option("--encoder", ev.encoder, "Encoder URL, EMB1 store path, or hash[:DIM]")->capture_default_str();
  eval->add_option("--checkpoint", ev.checkpoint, "Transformer checkpoint (EMB1)");
  eval->add_option("--images-root", ev.images_root, "Directory image paths are relative to");
  eval->add_option("--placement", ev.placement, "SGI crop placement")
      ->capture_default_str()->check(CLI::IsMember({"grid", "overlap"}));
  eval->add_option("--segmentation", ev.segmentation, "SGI segment source")
      ->capture_default_str()->check(CLI::IsMember({"structured", "automatic", "caption-only"}));
  eval->add_option("--granularity", ev.granularity, "SGI segment granularity")
      ->capture_default_str()->check(CLI::IsMember({"coarse", "fine"}));
  eval->add_flag("--full-image", ev.full_image, "Add the whole image to the SGI crops");
  eval->add_option("--lexicon", ev.lexicon, "Lexicon directory");
  eval->add_option("--synthetic", ev.synthetic, "Score N synthetic instances instead of a dataset");
  eval->add_option("--seed", ev.seed, "Seed of the random scorer")->capture_default_str();
  eval->add_flag("--lenient", ev.lenient, "Skip failing instances instead of aborting");
  eval->add_option("--jobs", ev.jobs, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  eval->add_option("--out-dir", ev.out_dir, "Output directory")->capture_default_str();

  BuildArgs bb;
  auto* build = app.add_subcommand("build-biscor", "Generate swap instances from CLEVR scenes");
  build->add_option("--clevr-scenes", bb.clevr_scenes, "CLEVR scenes JSON");
  build->add_option("--synthetic-scenes", bb.synthetic_scenes, "Generate N CLEVR-like scenes instead");
  build->add_option("--clevr-split", bb.clevr_split, "Split of synthetic scenes (train -> dev, val -> test)")
      ->capture_default_str()->check(CLI::IsMember({"train", "val"}));
  build->add_option("--category", bb.category, "color, size, material, quantity or all")
      ->capture_default_str()->check(CLI::IsMember({"color", "size", "material", "quantity", "all"}));
  build->add_option("--n", bb.n, "Records per category")->capture_default_str()->check(CLI::PositiveNumber);
  build->add_option("--seed", bb.seed, "Seed")->capture_default_str();
  build->add_option("--out", bb.out, "Output directory")->capture_default_str();
  build->add_option("--templates", bb.templates, "JSON caption templates");
  build->add_option("--jobs", bb.jobs, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  build->add_flag("--verify", bb.verify, "Re-read the outputs and check every line");

  SynthArgs sy;
  auto* synth = app.add_subcommand("synth-scenes", "Write CLEVR-like scene graphs");
  synth->add_option("--count", sy.count, "Number of scenes")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--split", sy.split, "train or val")->capture_default_str()->check(CLI::IsMember({"train", "val"}));
  synth->add_option("--seed", sy.seed, "Seed")->capture_default_str();
  synth->add_option("--out", sy.out, "Output JSON")->required();

  TrainArgs ta;
  std::size_t sweep_max = 4;
  auto add_train_options = [&](CLI::App* s) {
    s->add_option("--variant", ta.variant, "local or global")
        ->capture_default_str()->check(CLI::IsMember({"local", "global"}));
    s->add_option("--model-dim", ta.model_dim, "Model width")->capture_default_str();
    s->add_option("--heads", ta.heads, "Attention heads")->capture_default_str();
    s->add_option("--ff-dim", ta.ff_dim, "Feed-forward width")->capture_default_str();
    s->add_option("--max-patches", ta.max_patches, "Longest visual sequence")->capture_default_str();
    s->add_option("--max-tokens", ta.max_tokens, "Longest text sequence")->capture_default_str();
    s->add_option("--visual-dim", ta.visual_dim, "Width of visual inputs")->capture_default_str();
    s->add_option("--text-dim", ta.text_dim, "Width of text inputs")->capture_default_str();
    s->add_option("--preset", ta.preset, "tiny: small dims for smoke runs")->check(CLI::IsMember({"tiny"}));
    s->add_option("--data", ta.data, "synthetic:N or a dataset JSONL");
    s->add_option("--val", ta.val, "Validation dataset JSONL");
    s->add_option("--encoder", ta.encoder, "Embedding source for dataset inputs")->capture_default_str();
    s->add_option("--seed", ta.seed, "Seed")->capture_default_str();
    s->add_option("--lr", ta.lr, "Base learning rate")->capture_default_str();
    s->add_option("--epochs", ta.epochs, "Epochs")->capture_default_str();
    s->add_option("--batch", ta.batch, "Batch size")->capture_default_str();
    s->add_flag("--hard-negatives", ta.hard_negatives, "Half positives, half hard negatives per batch");
    s->add_flag("--freeze-temperature", ta.freeze_temperature, "Keep the logit scale at its initial value");
    s->add_option("--eval-every", ta.eval_every, "Validate every N steps (0: per epoch)")->capture_default_str();
    s->add_option("--target-accuracy", ta.target_accuracy, "Stop once validation accuracy reaches this");
    s->add_option("--init-std", ta.init_std, "Init standard deviation")->capture_default_str();
    s->add_option("--jobs", ta.jobs, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--out", ta.out, "Output directory")->capture_default_str();
  };
  auto* train_cmd = app.add_subcommand("train", "Train the alignment transformer");
  add_train_options(train_cmd);
  train_cmd->add_option("--layers", ta.layers, "Transformer blocks")->capture_default_str();
  train_cmd->add_flag("--dry-run", ta.dry_run, "Only print the parameter count");
  auto* sweep = app.add_subcommand("sweep", "Train with 1..N layers and tabulate");
  add_train_options(sweep);
  sweep->add_option("--max-layers", sweep_max, "Largest layer count")->capture_default_str()->check(CLI::Range(1, 12));

  std::string report_in;
  auto* report = app.add_subcommand("report", "Print an evaluation report as a table");
  report->add_option("--in", report_in, "report.json")->required();

  std::string lexicon_out;
  auto* lexicon = app.add_subcommand("lexicon", "Write the built-in word lists");
  lexicon->add_option("--out", lexicon_out, "Directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*plan) return cmd_plan_crops(pc, *plan);
    if (*seg) return cmd_segment(sg, *seg);
    if (*eval) return cmd_eval(ev, *eval);
    if (*build) return cmd_build_biscor(bb, *build);
    if (*synth) return cmd_synth_scenes(sy, *synth);
    if (*train_cmd) return cmd_train(ta, *train_cmd);
    if (*sweep) return cmd_sweep(ta, sweep_max, *sweep);
    if (*report) return cmd_report(report_in);
    if (*lexicon) {
      Lexicon::builtin().write_dir(lexicon_out);
      std::cout << "lexicon written to " << lexicon_out << "\n";
      return 0;
    }
  } catch (const CacheMissError& e) {
    std::cerr << "error: " << e.what() << "\n";
    for (const auto& k : e.keys()) std::cerr << "  missing: " << k << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed JSON: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
