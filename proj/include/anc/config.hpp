#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "anc/conv4d.hpp"
#include "anc/dataset.hpp"
#include "anc/errors.hpp"
#include "anc/eval.hpp"
#include "anc/model.hpp"
#include "anc/training.hpp"

namespace anc {

/// Every setting a command can read. Defaults match the library defaults.
struct RunConfig {
  std::uint64_t seed = 0;
  int stride = kDefaultStride;
  int window = 5;
  AncVariant anc_variant = AncVariant::d;
  std::vector<std::size_t> channels{1, 16, 16, 1};
  Conv4dAlgo algo = Conv4dAlgo::fft;
  double alpha = 0.001;
  double lr = 0.001;
  double gaussian_sigma = 0.0;
  std::vector<Phase> phases{{10, 5}, {5, 3}, {5, 0}};
  std::string dataset;
  std::string out;
  std::string checkpoint;
  SynthDatasetOptions synth;
  double pck_alpha = 0.1;
  PckReference reference = PckReference::image;

  ModelConfig model_config() const {
    ModelConfig m;
    m.selfsim = SelfSimConfig::with_window(window);
    m.anc.variant = anc_variant;
    m.anc.channels = channels;
    m.validate();
    return m;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.phases = phases;
    t.lr = lr;
    t.alpha = alpha;
    t.gaussian_sigma = gaussian_sigma;
    t.seed = seed;
    t.stride = stride;
    t.validate();
    return t;
  }

  SynthDatasetOptions synth_options() const {
    SynthDatasetOptions o = synth;
    o.seed = seed;
    o.stride = stride;
    o.validate();
    return o;
  }

  PckConfig pck_config() const {
    PckConfig p{pck_alpha, reference};
    p.validate();
    return p;
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw InvalidArgument("bad value for " + key + ": '" + v + "'");
  return out;
}

inline std::vector<std::size_t> parse_channels(const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<std::size_t>("channels", trim(item)));
  if (out.empty()) throw InvalidArgument("channels list is empty");
  return out;
}

}  // namespace detail

/// Keys accepted in config files and as --key flags.
inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "seed",       "stride",      "window",      "anc_variant", "channels",        "algo",
      "alpha",      "lr",          "gaussian_sigma", "phases",   "dataset",         "out",
      "checkpoint", "n_pairs",     "grid",        "depth",       "noise_std",       "max_translation",
      "flip_prob",  "scale_prob",  "n_keypoints", "pck_alpha",   "reference"};
  return keys;
}

/// Sets one key from its textual value. Unknown keys are rejected.
inline void config_set(RunConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_number;
  const std::string v = detail::trim(value);
  if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "stride") c.stride = parse_number<int>(key, v);
  else if (key == "window") c.window = parse_number<int>(key, v);
  else if (key == "anc_variant") c.anc_variant = parse_variant(v);
  else if (key == "channels") c.channels = detail::parse_channels(v);
  else if (key == "algo") c.algo = parse_algo(v);
  else if (key == "alpha") c.alpha = parse_number<double>(key, v);
  else if (key == "lr") c.lr = parse_number<double>(key, v);
  else if (key == "gaussian_sigma") c.gaussian_sigma = parse_number<double>(key, v);
  else if (key == "phases") c.phases = parse_phases(v);
  else if (key == "dataset") c.dataset = v;
  else if (key == "out") c.out = v;
  else if (key == "checkpoint") c.checkpoint = v;
  else if (key == "n_pairs") c.synth.n_pairs = parse_number<std::size_t>(key, v);
  else if (key == "grid") c.synth.grid = parse_number<std::size_t>(key, v);
  else if (key == "depth") c.synth.depth = parse_number<std::size_t>(key, v);
  else if (key == "noise_std") c.synth.noise_std = parse_number<double>(key, v);
  else if (key == "max_translation") c.synth.max_translation = parse_number<int>(key, v);
  else if (key == "flip_prob") c.synth.flip_prob = parse_number<double>(key, v);
  else if (key == "scale_prob") c.synth.scale_prob = parse_number<double>(key, v);
  else if (key == "n_keypoints") c.synth.n_keypoints = parse_number<std::size_t>(key, v);
  else if (key == "pck_alpha") c.pck_alpha = parse_number<double>(key, v);
  else if (key == "reference") c.reference = parse_reference(v);
  else throw InvalidArgument("unknown config key '" + key + "'");
}

/// Parses `key = value` lines; '#' starts a comment. Later lines win.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text,
                                                                         const std::string& source = "<config>") {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream is(text);
  std::string line;
  for (int n = 1; std::getline(is, line); ++n) {
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw FormatError(source + ":" + std::to_string(n) + ": expected 'key = value'");
    std::string key = detail::trim(std::string_view(t).substr(0, eq));
    std::string value = detail::trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) throw FormatError(source + ":" + std::to_string(n) + ": empty key");
    if (std::find(config_keys().begin(), config_keys().end(), key) == config_keys().end())
      throw InvalidArgument(source + ":" + std::to_string(n) + ": unknown config key '" + key + "'");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

inline void apply_config_file(RunConfig& c, const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw IoError("cannot open config", file.string());
  std::stringstream ss;
  ss << is.rdbuf();
  for (const auto& [k, v] : parse_config_text(ss.str(), file.string())) config_set(c, k, v);
}

}  // namespace anc
