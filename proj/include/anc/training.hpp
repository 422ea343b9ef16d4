#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "anc/autodiff.hpp"
#include "anc/dataset.hpp"
#include "anc/errors.hpp"
#include "anc/model.hpp"
#include "anc/rng.hpp"
#include "anc/tns_io.hpp"

namespace anc {

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t t = 0;
  std::vector<DenseTensor> m, v;

  static AdamState init(const std::vector<NamedParam>& params, double lr = 0.001) {
    AdamState s;
    s.lr = lr;
    for (const auto& p : params) {
      s.m.emplace_back(p.var.shape());
      s.v.emplace_back(p.var.shape());
    }
    return s;
  }
};

/// Bias-corrected Adam update of every parameter, then zeroes the
/// gradients. A non-finite gradient aborts the step before anything changes.
inline void adam_step(AdamState& s, std::vector<NamedParam>& params) {
  if (s.m.size() != params.size()) throw InvalidArgument("optimizer state does not match the parameter list");
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!(s.m[p].shape() == params[p].var.shape())) throw InvalidArgument("optimizer moment shape mismatch for " + params[p].name);
    if (params[p].var.has_grad() && !all_finite(params[p].var.grad().data()))
      throw NumericError("non-finite gradient in " + params[p].name);
  }
  ++s.t;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  for (std::size_t p = 0; p < params.size(); ++p) {
    Variable& var = params[p].var;
    const bool has = var.has_grad();
    auto m = s.m[p].data();
    auto v = s.v[p].data();
    auto theta = var.mutable_value().data();
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double g = has ? var.grad()[i] : 0.0;
      m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g;
      v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g * g;
      const double mh = m[i] / c1, vh = v[i] / c2;
      theta[i] -= s.lr * mh / (std::sqrt(vh) + s.eps);
    }
    var.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Schedule

struct Phase {
  int epochs = 1;
  int gaussian_kernel = 0;
  friend bool operator==(const Phase&, const Phase&) = default;
};

struct TrainConfig {
  std::vector<Phase> phases{{10, 5}, {5, 3}, {5, 0}};
  double lr = 0.001;
  double alpha = 0.001;
  double gaussian_sigma = 0.0;
  std::uint64_t seed = 0;
  int stride = kDefaultStride;

  void validate() const {
    if (phases.empty()) throw InvalidArgument("training needs at least one phase");
    for (const auto& p : phases) {
      if (p.epochs < 1) throw InvalidArgument("every phase needs >= 1 epoch");
      if (p.gaussian_kernel < 0 || (p.gaussian_kernel != 0 && p.gaussian_kernel % 2 == 0))
        throw InvalidArgument("phase kernel must be 0 or odd");
    }
    if (!(lr > 0.0)) throw InvalidArgument("lr must be > 0");
    if (!(alpha >= 0.0)) throw InvalidArgument("alpha must be >= 0");
    if (stride < 1) throw InvalidArgument("stride must be >= 1");
  }

  std::size_t total_epochs() const {
    std::size_t n = 0;
    for (const auto& p : phases) n += static_cast<std::size_t>(p.epochs);
    return n;
  }

  std::size_t phase_of(std::size_t epoch) const {
    std::size_t e = 0;
    for (std::size_t i = 0; i < phases.size(); ++i) {
      e += static_cast<std::size_t>(phases[i].epochs);
      if (epoch < e) return i;
    }
    return phases.size() - 1;
  }

  LossConfig loss_for(std::size_t epoch) const {
    return {alpha, phases[phase_of(epoch)].gaussian_kernel, gaussian_sigma};
  }
};

inline std::string phases_to_string(const std::vector<Phase>& ph) {
  std::string s;
  for (std::size_t i = 0; i < ph.size(); ++i)
    s += (i ? "," : "") + std::to_string(ph[i].epochs) + ":" + std::to_string(ph[i].gaussian_kernel);
  return s;
}

/// "10:5,5:3,5:0" -> phases of (epochs, gaussian kernel).
inline std::vector<Phase> parse_phases(const std::string& s) {
  std::vector<Phase> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw InvalidArgument("phase '" + item + "' must be epochs:kernel");
    try {
      std::size_t used = 0;
      Phase p;
      p.epochs = std::stoi(item.substr(0, colon), &used);
      p.gaussian_kernel = std::stoi(item.substr(colon + 1));
      out.push_back(p);
    } catch (const std::logic_error&) {
      throw InvalidArgument("phase '" + item + "' must be epochs:kernel");
    }
  }
  if (out.empty()) throw InvalidArgument("empty phase list");
  return out;
}

// ---------------------------------------------------------------------------
// Epochs

struct EpochReport {
  std::size_t epoch = 0;
  std::size_t phase = 0;
  int gaussian_kernel = 0;
  double mean_lk = 0.0;
  double mean_lo = 0.0;
  std::size_t pairs = 0;
};

inline constexpr std::uint64_t kShuffleStream = 0x7368756666ULL;

/// Visiting order of the dataset in a given epoch; depends only on (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng(seed, kShuffleStream).split(epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

/// One shuffled pass with batch size one: forward, backward, Adam.
inline EpochReport train_epoch(const Dataset& data, Model& model, const TrainConfig& cfg, AdamState& state,
                               std::size_t epoch) {
  if (data.empty()) throw InvalidArgument("training dataset is empty");
  cfg.validate();
  const LossConfig lc = cfg.loss_for(epoch);
  auto params = model.parameters();
  EpochReport r;
  r.epoch = epoch;
  r.phase = cfg.phase_of(epoch);
  r.gaussian_kernel = lc.gaussian_kernel;
  double sk = 0.0, so = 0.0;
  for (std::size_t idx : epoch_order(data.size(), cfg.seed, epoch)) {
    const TrainPair& p = data[idx];
    try {
      Tape tape;
      const ForwardResult f = model_forward(tape, model, p.source, p.target);
      const PairLoss l = pair_loss(tape, f.c_hat, p.annotation, cfg.stride, lc);
      const double lk = l.lk.value()[0], lo = l.lo.value()[0];
      if (!std::isfinite(lk) || !std::isfinite(lo)) throw NumericError("non-finite loss");
      tape.backward(l.total);
      adam_step(state, params);
      sk += lk;
      so += lo;
    } catch (const NumericError& e) {
      throw NumericError("epoch " + std::to_string(epoch) + ", pair " + std::to_string(idx) + ": " + e.what());
    }
  }
  r.pairs = data.size();
  r.mean_lk = sk / static_cast<double>(data.size());
  r.mean_lo = so / static_cast<double>(data.size());
  return r;
}

/// Mean losses over a dataset without updating anything.
inline std::pair<double, double> evaluate_losses(const Dataset& data, const Model& model, const LossConfig& lc,
                                                 int stride) {
  if (data.empty()) throw InvalidArgument("dataset is empty");
  double sk = 0.0, so = 0.0;
  for (const auto& p : data) {
    Tape tape(false);
    const ForwardResult f = model_forward(tape, model, p.source, p.target);
    const PairLoss l = pair_loss(tape, f.c_hat, p.annotation, stride, lc);
    sk += l.lk.value()[0];
    so += l.lo.value()[0];
  }
  return {sk / static_cast<double>(data.size()), so / static_cast<double>(data.size())};
}

// ---------------------------------------------------------------------------
// Checkpoints: manifest.json plus one TNS file per tensor.

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json model_config_json(const ModelConfig& c) {
  return {{"window", c.selfsim.window},
          {"conv_kernel", c.selfsim.conv_kernel},
          {"channels_1", c.selfsim.channels_1},
          {"channels_2", c.selfsim.channels_2},
          {"anc_variant", variant_name(c.anc.variant)},
          {"channels", c.anc.channels}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.selfsim.window = j.at("window").get<int>();
  c.selfsim.conv_kernel = j.at("conv_kernel").get<int>();
  c.selfsim.channels_1 = j.at("channels_1").get<int>();
  c.selfsim.channels_2 = j.at("channels_2").get<int>();
  c.anc.variant = parse_variant(j.at("anc_variant").get<std::string>());
  c.anc.channels = j.at("channels").get<std::vector<std::size_t>>();
  return c;
}

inline nlohmann::json train_config_json(const TrainConfig& c) {
  return {{"phases", phases_to_string(c.phases)},
          {"lr", c.lr},
          {"alpha", c.alpha},
          {"gaussian_sigma", c.gaussian_sigma},
          {"seed", c.seed},
          {"stride", c.stride}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.phases = parse_phases(j.at("phases").get<std::string>());
  c.lr = j.at("lr").get<double>();
  c.alpha = j.at("alpha").get<double>();
  c.gaussian_sigma = j.at("gaussian_sigma").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.stride = j.at("stride").get<int>();
  return c;
}

/// FNV-1a of the canonical model and training configuration.
inline std::string config_hash(const ModelConfig& m, const TrainConfig& t) {
  const std::string s = model_config_json(m).dump() + train_config_json(t).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct Checkpoint {
  Model model;
  AdamState adam;
  TrainConfig train;
  std::size_t next_epoch = 0;
  std::string hash;
};

namespace detail {
inline std::string tensor_file(const std::string& name) {
  std::string f = name;
  for (auto& c : f)
    if (c == '/' || c == '\\') c = '_';
  return f + ".tns";
}
}  // namespace detail

inline void checkpoint_save(const std::filesystem::path& dir, const Model& model, const AdamState& adam,
                            const TrainConfig& train, std::size_t next_epoch) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory", dir.string());
  const auto params = model.parameters();
  if (adam.m.size() != params.size()) throw InvalidArgument("optimizer state does not match the model");
  nlohmann::json tensors = nlohmann::json::array();
  auto put = [&](const std::string& name, const DenseTensor& t) {
    const std::string file = detail::tensor_file(name);
    tns_write(t, dir / file);
    std::vector<std::size_t> dims(t.shape().extents().begin(), t.shape().extents().end());
    tensors.push_back({{"name", name}, {"file", file}, {"dims", dims}});
  };
  for (std::size_t i = 0; i < params.size(); ++i) {
    put(params[i].name, params[i].var.value());
    put("adam.m." + params[i].name, adam.m[i]);
    put("adam.v." + params[i].name, adam.v[i]);
  }
  const std::size_t phase = train.phase_of(next_epoch == 0 ? 0 : next_epoch - 1);
  const nlohmann::json manifest{
      {"schema_version", 1},
      {"format", "anc-checkpoint"},
      {"version", kCheckpointVersion},
      {"config_hash", config_hash(model.config, train)},
      {"model", model_config_json(model.config)},
      {"train", train_config_json(train)},
      {"next_epoch", next_epoch},
      {"phase", phase},
      {"step", adam.t},
      {"adam", {{"lr", adam.lr}, {"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}, {"t", adam.t}}},
      {"tensors", tensors}};
  const auto tmp = dir / "manifest.json.tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw IoError("cannot open for writing", tmp.string());
    os << manifest.dump(1) << '\n';
    if (!os) throw IoError("write failed", tmp.string());
  }
  std::filesystem::rename(tmp, dir / "manifest.json", ec);
  if (ec) throw IoError("cannot finalize manifest", (dir / "manifest.json").string());
}

inline Checkpoint checkpoint_load(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  std::ifstream is(mpath);
  if (!is) throw IoError("cannot open checkpoint manifest", mpath.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed checkpoint manifest " + mpath.string() + ": " + e.what());
  }
  Checkpoint c;
  try {
    if (j.value("format", "") != "anc-checkpoint") throw FormatError("not a checkpoint manifest: " + mpath.string());
    if (j.at("version").get<int>() != kCheckpointVersion)
      throw FormatError("unsupported checkpoint version " + std::to_string(j.at("version").get<int>()));
    const ModelConfig mc = model_config_from_json(j.at("model"));
    c.train = train_config_from_json(j.at("train"));
    c.hash = j.at("config_hash").get<std::string>();
    if (c.hash != config_hash(mc, c.train)) throw FormatError("checkpoint config hash does not match its contents");
    Rng unused(0);
    c.model = Model::init(mc, unused);
    c.next_epoch = j.at("next_epoch").get<std::size_t>();
    const auto& a = j.at("adam");
    auto params = c.model.parameters();
    c.adam = AdamState::init(params, a.at("lr").get<double>());
    c.adam.beta1 = a.at("beta1").get<double>();
    c.adam.beta2 = a.at("beta2").get<double>();
    c.adam.eps = a.at("eps").get<double>();
    c.adam.t = a.at("t").get<std::uint64_t>();

    std::map<std::string, std::pair<std::string, std::vector<std::size_t>>> entries;
    for (const auto& t : j.at("tensors"))
      entries[t.at("name").get<std::string>()] = {t.at("file").get<std::string>(),
                                                  t.at("dims").get<std::vector<std::size_t>>()};
    auto fetch = [&](const std::string& name, const Shape& want) {
      auto it = entries.find(name);
      if (it == entries.end()) throw FormatError("checkpoint manifest lacks tensor " + name);
      const auto path = dir / it->second.first;
      if (!std::filesystem::exists(path)) throw FormatError("checkpoint tensor file missing: " + path.string());
      DenseTensor t = tns_read(path);
      const Shape listed(std::span<const std::size_t>(it->second.second));
      if (!(t.shape() == listed) || !(t.shape() == want))
        throw FormatError("tensor " + name + " has dims " + t.shape().str() + ", expected " + want.str());
      return t;
    };
    for (std::size_t i = 0; i < params.size(); ++i) {
      params[i].var.mutable_value() = fetch(params[i].name, params[i].var.shape());
      c.adam.m[i] = fetch("adam.m." + params[i].name, params[i].var.shape());
      c.adam.v[i] = fetch("adam.v." + params[i].name, params[i].var.shape());
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed checkpoint manifest " + mpath.string() + ": " + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError("invalid checkpoint configuration in " + mpath.string() + ": " + e.what());
  }
  return c;
}

/// Runs epochs [first, cfg.total_epochs()); on_epoch sees each report after
/// its parameters are updated.
inline void train(const Dataset& data, Model& model, const TrainConfig& cfg, AdamState& state, std::size_t first,
                  const std::function<void(const EpochReport&)>& on_epoch = {}) {
  for (std::size_t e = first; e < cfg.total_epochs(); ++e) {
    const EpochReport r = train_epoch(data, model, cfg, state, e);
    if (on_epoch) on_epoch(r);
  }
}

}  // namespace anc
