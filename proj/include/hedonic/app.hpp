#pragma once

// Subcommands behind the `hedonic` binary. Each command takes a RunConfig,
// writes its artifacts into one run directory and returns a process exit code.
//
// Exit codes
//   0  success
//   1  usage, configuration, image or other errors
//   2  manifest errors (malformed JSON, schema violations, empty manifest)
//   3  non-finite loss during pretraining
//   4  extraction produced no properties
//   5  split, shape, weight or cache inconsistencies

#include <algorithm>
#include <array>
#include <cctype>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hedonic/dino.hpp"
#include "hedonic/errors.hpp"
#include "hedonic/features.hpp"
#include "hedonic/ridge.hpp"
#include "hedonic/tabular.hpp"
#include "hedonic/vit.hpp"
#include "hedonic/weights_io.hpp"

namespace hedonic {

enum ExitCode : int {
  kExitOk = 0,
  kExitError = 1,
  kExitManifest = 2,
  kExitNonFinite = 3,
  kExitNoFeatures = 4,
  kExitInconsistent = 5,
};

struct RunConfig {
  std::string manifest;
  std::string images;  // image directory (pretrain) or base for relative paths (extract)
  std::string preset = "vit-s/16";
  std::string weights;
  std::vector<std::string> caches;
  std::string out = "runs";
  std::string run_name;  // empty: UTC timestamp
  std::uint64_t seed = kDefaultSplitSeed;
  std::array<double, 3> split{0.70, 0.15, 0.15};
  std::string alpha_grid = "default";
  double winsor_lower = 1.0;
  double winsor_upper = 99.0;
  std::size_t threads = 1;

  // DINO overrides; unset fields keep the preset's defaults.
  std::optional<std::size_t> steps;
  std::optional<std::size_t> batch_size;
  std::optional<std::size_t> prototypes;
  std::optional<std::size_t> head_hidden;
  std::optional<std::size_t> local_views;
  std::optional<double> learning_rate;
  std::optional<double> student_temperature;
  std::optional<double> teacher_temperature;
  std::optional<double> ema_momentum;
  std::optional<double> center_momentum;

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

inline std::string number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string parse_string(const std::string& v, const std::string& key) {
  if (v.size() < 2 || v.front() != '"' || v.back() != '"') {
    throw ConfigError("config: " + key + " must be a quoted string");
  }
  std::string out;
  for (std::size_t i = 1; i + 1 < v.size(); ++i) {
    if (v[i] == '\\' && i + 2 < v.size()) ++i;
    out += v[i];
  }
  return out;
}

inline double parse_double(const std::string& v, const std::string& key) {
  std::size_t used = 0;
  double d = 0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError("config: " + key + " must be a number, got " + v);
  return d;
}

inline std::uint64_t parse_unsigned(const std::string& v, const std::string& key) {
  if (v.empty() || !std::all_of(v.begin(), v.end(), [](unsigned char c) { return std::isdigit(c); })) {
    throw ConfigError("config: " + key + " must be a non-negative integer, got " + v);
  }
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " is out of range");
  }
}

/// Splits the inside of "[a, b, c]" on commas outside quotes.
inline std::vector<std::string> parse_array(const std::string& v, const std::string& key) {
  if (v.size() < 2 || v.front() != '[' || v.back() != ']') throw ConfigError("config: " + key + " must be an array");
  std::vector<std::string> items;
  std::string cur;
  bool in_quotes = false;
  for (std::size_t i = 1; i + 1 < v.size(); ++i) {
    const char c = v[i];
    if (c == '"' && (i == 1 || v[i - 1] != '\\')) in_quotes = !in_quotes;
    if (c == ',' && !in_quotes) {
      items.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!trim(cur).empty() || !items.empty()) items.push_back(trim(cur));
  return items;
}

}  // namespace detail

/// key = value lines in a fixed order; unset overrides are omitted.
inline std::string serialize_config(const RunConfig& c) {
  using detail::number;
  using detail::quote;
  std::ostringstream o;
  o << "manifest = " << quote(c.manifest) << "\n";
  o << "images = " << quote(c.images) << "\n";
  o << "preset = " << quote(c.preset) << "\n";
  o << "weights = " << quote(c.weights) << "\n";
  o << "caches = [";
  for (std::size_t i = 0; i < c.caches.size(); ++i) o << (i ? ", " : "") << quote(c.caches[i]);
  o << "]\n";
  o << "out = " << quote(c.out) << "\n";
  o << "run_name = " << quote(c.run_name) << "\n";
  o << "seed = " << c.seed << "\n";
  o << "split = [" << number(c.split[0]) << ", " << number(c.split[1]) << ", " << number(c.split[2]) << "]\n";
  o << "alpha_grid = " << quote(c.alpha_grid) << "\n";
  o << "winsorize = [" << number(c.winsor_lower) << ", " << number(c.winsor_upper) << "]\n";
  o << "threads = " << c.threads << "\n";
  auto opt_u = [&](const char* k, const std::optional<std::size_t>& v) {
    if (v) o << k << " = " << *v << "\n";
  };
  auto opt_d = [&](const char* k, const std::optional<double>& v) {
    if (v) o << k << " = " << number(*v) << "\n";
  };
  opt_u("steps", c.steps);
  opt_u("batch_size", c.batch_size);
  opt_u("prototypes", c.prototypes);
  opt_u("head_hidden", c.head_hidden);
  opt_u("local_views", c.local_views);
  opt_d("learning_rate", c.learning_rate);
  opt_d("student_temperature", c.student_temperature);
  opt_d("teacher_temperature", c.teacher_temperature);
  opt_d("ema_momentum", c.ema_momentum);
  opt_d("center_momentum", c.center_momentum);
  return o.str();
}

/// Applies the keys found in `text` on top of `base`.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  using namespace detail;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    auto size_value = [&] { return static_cast<std::size_t>(parse_unsigned(v, key)); };
    if (key == "manifest") base.manifest = parse_string(v, key);
    else if (key == "images") base.images = parse_string(v, key);
    else if (key == "preset") base.preset = parse_string(v, key);
    else if (key == "weights") base.weights = parse_string(v, key);
    else if (key == "caches") {
      base.caches.clear();
      for (const auto& item : parse_array(v, key)) base.caches.push_back(parse_string(item, key));
    }
    else if (key == "out") base.out = parse_string(v, key);
    else if (key == "run_name") base.run_name = parse_string(v, key);
    else if (key == "seed") base.seed = parse_unsigned(v, key);
    else if (key == "split") {
      const auto items = parse_array(v, key);
      if (items.size() != 3) throw ConfigError("config: split needs three ratios");
      for (std::size_t i = 0; i < 3; ++i) base.split[i] = parse_double(items[i], key);
    }
    else if (key == "alpha_grid") base.alpha_grid = parse_string(v, key);
    else if (key == "winsorize") {
      const auto items = parse_array(v, key);
      if (items.size() != 2) throw ConfigError("config: winsorize needs two percentiles");
      base.winsor_lower = parse_double(items[0], key);
      base.winsor_upper = parse_double(items[1], key);
    }
    else if (key == "threads") base.threads = size_value();
    else if (key == "steps") base.steps = size_value();
    else if (key == "batch_size") base.batch_size = size_value();
    else if (key == "prototypes") base.prototypes = size_value();
    else if (key == "head_hidden") base.head_hidden = size_value();
    else if (key == "local_views") base.local_views = size_value();
    else if (key == "learning_rate") base.learning_rate = parse_double(v, key);
    else if (key == "student_temperature") base.student_temperature = parse_double(v, key);
    else if (key == "teacher_temperature") base.teacher_temperature = parse_double(v, key);
    else if (key == "ema_momentum") base.ema_momentum = parse_double(v, key);
    else if (key == "center_momentum") base.center_momentum = parse_double(v, key);
    else throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
  }
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

/// "a,b,c" into exactly `n` numbers.
inline std::vector<double> parse_number_list(const std::string& s, std::size_t n, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(detail::parse_double(detail::trim(item), what));
  if (out.size() != n) throw ConfigError(what + ": expected " + std::to_string(n) + " comma-separated numbers");
  return out;
}

/// Preset defaults (the toy regime for vit-mini/8) with the config's overrides.
inline DinoConfig dino_config_for(const RunConfig& c, const ViTConfig& vit) {
  DinoConfig d = vit.name == "vit-mini/8" ? DinoConfig::toy() : DinoConfig{};
  if (vit.name != "vit-mini/8") {
    d.crop.global_size = vit.input_size;
    const std::size_t local = (vit.input_size * 96 + 112) / 224;
    d.crop.local_size = std::max(vit.patch_size, (local + vit.patch_size / 2) / vit.patch_size * vit.patch_size);
  }
  if (c.steps) d.steps = *c.steps;
  if (c.batch_size) d.batch_size = *c.batch_size;
  if (c.prototypes) d.prototypes = *c.prototypes;
  if (c.head_hidden) d.head_hidden = *c.head_hidden;
  if (c.local_views) d.crop.local_views = *c.local_views;
  if (c.learning_rate) d.learning_rate = *c.learning_rate;
  if (c.student_temperature) d.student_temperature = *c.student_temperature;
  if (c.teacher_temperature) d.teacher_temperature = *c.teacher_temperature;
  if (c.ema_momentum) d.ema_momentum = *c.ema_momentum;
  if (c.center_momentum) d.center_momentum = *c.center_momentum;
  d.validate();
  return d;
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

/// out/<run_name>, or out/<timestamp>[-k] when no name is given.
inline std::filesystem::path make_run_dir(const RunConfig& c) {
  namespace fs = std::filesystem;
  fs::path dir;
  if (!c.run_name.empty()) {
    dir = fs::path(c.out) / c.run_name;
  } else {
    const std::string stamp = utc_timestamp();
    dir = fs::path(c.out) / stamp;
    for (int k = 2; fs::exists(dir); ++k) dir = fs::path(c.out) / (stamp + "-" + std::to_string(k));
  }
  fs::create_directories(dir);
  return dir;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::vector<PropertyRecord> load_manifest(const std::string& path) {
  if (path.empty()) throw ConfigError("no manifest given (--manifest)");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ManifestError("cannot open manifest " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ingest(ss.str());
}

/// Sorted .png/.ppm files directly inside `dir`.
inline std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ImageError("image directory " + dir.string() + " does not exist");
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".png" || ext == ".ppm") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct CommandIo {
  std::ostream& out = std::cout;
  std::ostream& err = std::cerr;
};

inline int cmd_describe(const RunConfig& c, CommandIo io = {}) {
  const auto records = load_manifest(c.manifest);
  if (records.empty()) throw ManifestError("manifest " + c.manifest + " has no records");
  io.out << format_describe(describe(records));
  return kExitOk;
}

/// Trains a backbone with DINO on every image in c.images and writes the
/// teacher backbone (weights.vhw1) and one log line per step (train_log.tsv).
inline int cmd_pretrain(const RunConfig& c, CommandIo io = {}) {
  const ViTConfig vit = preset(c.preset);
  const DinoConfig dcfg = dino_config_for(c, vit);
  std::vector<RasterImage> images;
  for (const auto& p : list_images(c.images)) images.push_back(load_image(p));
  if (images.size() < dcfg.batch_size) {
    throw ConfigError("pretrain needs at least batch_size (" + std::to_string(dcfg.batch_size) +
                      ") images, found " + std::to_string(images.size()));
  }
  const auto dir = make_run_dir(c);
  write_text(dir / "config.toml", serialize_config(c));
  std::ofstream log(dir / "train_log.tsv", std::ios::binary);
  Rng rng(c.seed);
  const auto result = pretrain(images, vit, dcfg, rng, [&](const DinoState&, const StepStats& s) {
    log << format_log_line(s) << "\n";
    log.flush();
  });
  save_weights(result.backbone, dir / "weights.vhw1");
  io.out << "pretrained " << display_name(vit.name) << " for " << dcfg.steps << " steps on " << images.size()
         << " images -> " << (dir / "weights.vhw1").string() << "\n";
  return kExitOk;
}

/// Loads c.weights, or initializes a random backbone from c.seed when no
/// weight file is given.
inline WeightStore backbone_weights(const RunConfig& c, const ViTConfig& vit) {
  if (!c.weights.empty()) {
    WeightStore w = load_weights(c.weights);
    validate_backbone(w, vit);
    return w;
  }
  Rng rng(c.seed);
  return init_backbone<float>(vit, rng);
}

/// Pools backbone features for every manifest property into features.vhfc1
/// and lists skipped properties in exclusions.tsv.
inline int cmd_extract(const RunConfig& c, CommandIo io = {}) {
  const ViTConfig vit = preset(c.preset);
  const auto records = load_manifest(c.manifest);
  const WeightStore weights = backbone_weights(c, vit);
  const std::string id = backbone_id(c.preset, weights);
  std::vector<PropertyImageSet> sets;
  for (const auto& r : records) sets.push_back({r.id, r.images});
  const std::filesystem::path base =
      c.images.empty() ? std::filesystem::path(c.manifest).parent_path() : std::filesystem::path(c.images);
  const auto result = build_cache(sets, weights, vit, id, base, c.threads);

  const auto dir = make_run_dir(c);
  write_text(dir / "config.toml", serialize_config(c));
  save_cache(result.cache, dir / "features.vhfc1");
  write_text(dir / "exclusions.tsv", encode_exclusions(result.excluded));
  for (const auto& w : result.warnings) io.err << "warning: " << w << "\n";
  io.out << "cached " << result.cache.size() << " of " << records.size() << " properties (dim "
         << result.cache.dim() << ") -> " << (dir / "features.vhfc1").string() << "\n";
  if (result.cache.size() == 0) {
    io.err << "error: no property yielded image features\n";
    return kExitNoFeatures;
  }
  return kExitOk;
}

/// Architecture label for a cache: the display name of its preset.
inline std::string architecture_name(const std::string& backbone) {
  const std::string preset_part = backbone.substr(0, backbone.find(':'));
  const auto& names = preset_names();
  if (std::find(names.begin(), names.end(), preset_part) != names.end()) return display_name(preset_part);
  return preset_part;
}

/// Baseline plus one ridge model per feature cache; writes report.txt,
/// report.csv, sweep.csv and split.tsv.
inline int cmd_fit(const RunConfig& c, CommandIo io = {}) {
  auto records = load_manifest(c.manifest);
  if (records.empty()) throw ManifestError("manifest " + c.manifest + " has no records");
  std::vector<FeatureCache> caches;
  for (const auto& p : c.caches) caches.push_back(load_cache(p));
  if (!c.weights.empty() && !caches.empty()) {
    const std::string expected = backbone_id(c.preset, load_weights(c.weights));
    for (const auto& cache : caches) {
      if (cache.backbone_id() != expected) {
        throw CacheError("cache backbone " + cache.backbone_id() + " does not match " + expected);
      }
    }
  }
  if (!caches.empty()) {
    std::vector<PropertyRecord> kept;
    for (auto& r : records) {
      const bool everywhere = std::all_of(caches.begin(), caches.end(),
                                          [&](const FeatureCache& fc) { return fc.contains(r.id); });
      if (everywhere) kept.push_back(std::move(r));
    }
    records = std::move(kept);
  }

  PipelineOptions opt;
  opt.winsor_lower = c.winsor_lower;
  opt.winsor_upper = c.winsor_upper;
  opt.split_ratios = c.split;
  opt.seed = c.seed;
  const auto grid = parse_alpha_grid(c.alpha_grid);

  std::vector<Architecture> archs;
  archs.push_back({kBaselineName, prepare_dataset(records, opt)});
  std::set<std::string> used{kBaselineName};
  for (const auto& cache : caches) {
    std::string name = architecture_name(cache.backbone_id());
    for (int k = 2; used.count(name); ++k) name = architecture_name(cache.backbone_id()) + "#" + std::to_string(k);
    used.insert(name);
    archs.push_back({name, prepare_dataset(records, opt, &cache)});
    const auto& a = archs.back().data.split;
    const auto& b = archs.front().data.split;
    if (a.train != b.train || a.validation != b.validation || a.test != b.test) {
      throw ShapeError("split for " + name + " differs from the baseline split");
    }
  }
  const EvalReport report = evaluate(archs, grid, c.threads);

  const auto dir = make_run_dir(c);
  write_text(dir / "config.toml", serialize_config(c));
  const std::string table = format_report_table(report);
  write_text(dir / "report.txt", table);
  write_text(dir / "report.csv", format_report_csv(report));
  write_text(dir / "sweep.csv", format_sweep_csv(report));
  std::string split;
  const auto& s = archs.front().data.split;
  for (const auto& id : s.train) split += id + "\ttrain\n";
  for (const auto& id : s.validation) split += id + "\tvalidation\n";
  for (const auto& id : s.test) split += id + "\ttest\n";
  write_text(dir / "split.tsv", split);
  io.out << table;
  return kExitOk;
}

/// Runs a command, mapping library errors onto the documented exit codes.
template <class F>
int run_with_exit_codes(F&& command, std::ostream& err = std::cerr) {
  try {
    return command();
  } catch (const ManifestError& e) {
    err << "manifest error: " << e.what() << "\n";
    return kExitManifest;
  } catch (const NonFiniteError& e) {
    err << "non-finite value: " << e.what() << "\n";
    return kExitNonFinite;
  } catch (const ShapeError& e) {
    err << "inconsistent inputs: " << e.what() << "\n";
    return kExitInconsistent;
  } catch (const CacheError& e) {
    err << "inconsistent inputs: " << e.what() << "\n";
    return kExitInconsistent;
  } catch (const WeightFormatError& e) {
    err << "inconsistent inputs: " << e.what() << "\n";
    return kExitInconsistent;
  } catch (const NotPositiveDefiniteError& e) {
    err << "inconsistent inputs: " << e.what() << "\n";
    return kExitInconsistent;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
}

}  // namespace hedonic
