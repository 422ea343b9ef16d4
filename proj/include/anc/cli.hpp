#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "anc/config.hpp"
#include "anc/dataset.hpp"
#include "anc/errors.hpp"
#include "anc/eval.hpp"
#include "anc/matching.hpp"
#include "anc/model.hpp"
#include "anc/parallel.hpp"
#include "anc/training.hpp"

namespace anc::cli {

/// Process exit code per error kind.
inline int exit_code(const std::string& kind) {
  if (kind == "invalid-argument") return 2;
  if (kind == "io-error") return 3;
  if (kind == "format-error") return 4;
  if (kind == "numeric-error") return 5;
  if (kind == "generation-error") return 6;
  return 1;
}

/// Single-line structured error record.
inline std::string error_line(const std::string& kind, const std::string& message) {
  return nlohmann::json{{"error", kind}, {"message", message}}.dump();
}

namespace detail {

inline std::pair<double, double> parse_pair(const std::string& what, const std::string& s) {
  const auto comma = s.find(',');
  if (comma == std::string::npos) throw InvalidArgument(what + " must be 'a,b', got '" + s + "'");
  try {
    std::size_t p1 = 0, p2 = 0;
    const std::string a = s.substr(0, comma), b = s.substr(comma + 1);
    const double x = std::stod(a, &p1), y = std::stod(b, &p2);
    if (p1 != a.size() || p2 != b.size()) throw std::invalid_argument(s);
    return {x, y};
  } catch (const std::logic_error&) {
    throw InvalidArgument(what + " must be 'a,b', got '" + s + "'");
  }
}

inline std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t p = 0;
      const long v = std::stol(item, &p);
      if (p != item.size() || v < 1) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::logic_error&) {
      throw InvalidArgument("bad size '" + item + "'");
    }
  }
  if (out.empty()) throw InvalidArgument("empty size list");
  return out;
}

inline void require(const std::string& value, const std::string& key) {
  if (value.empty()) throw InvalidArgument("missing required setting '" + key + "' (config key or --" + key + ")");
}

/// Model from a checkpoint directory, or nothing when none is given.
inline std::optional<Model> load_model(const RunConfig& c) {
  if (c.checkpoint.empty()) return std::nullopt;
  Checkpoint ck = checkpoint_load(c.checkpoint);
  ck.model.algo = c.algo;
  return std::move(ck.model);
}

inline ProbabilityMap4D probabilities(const std::optional<Model>& m, const FeatureMap& fs, const FeatureMap& ft) {
  return m ? predict_probabilities(*m, fs, ft) : raw_probabilities(fs, ft);
}

inline void write_json(std::ostream& out, const nlohmann::json& j) { out << j.dump(2) << '\n'; }

}  // namespace detail

inline int cmd_gen(const RunConfig& c, std::ostream& out) {
  detail::require(c.out, "out");
  const SynthDatasetOptions o = c.synth_options();
  write_synth_dataset(c.out, o);
  detail::write_json(out, {{"schema_version", 1}, {"command", "gen"}, {"pairs", o.n_pairs}, {"out", c.out}});
  return 0;
}

struct TrainFlags {
  bool resume = false;
  std::string log;
};

inline int cmd_train(const RunConfig& c, const TrainFlags& f, std::ostream& out) {
  detail::require(c.dataset, "dataset");
  detail::require(c.checkpoint, "checkpoint");
  const ModelConfig mc = c.model_config();
  const TrainConfig tc = c.train_config();
  const Dataset data = load_dataset(c.dataset, c.stride);

  Model model;
  AdamState adam;
  std::size_t first = 0;
  if (f.resume) {
    Checkpoint ck = checkpoint_load(c.checkpoint);
    if (ck.hash != config_hash(mc, tc))
      throw InvalidArgument("configuration differs from the checkpoint being resumed (" + ck.hash + ")");
    model = std::move(ck.model);
    adam = std::move(ck.adam);
    first = ck.next_epoch;
  } else {
    Rng rng = Rng(c.seed, 0x696e6974ULL);
    model = Model::init(mc, rng);
    adam = AdamState::init(model.parameters(), tc.lr);
  }
  model.algo = c.algo;

  std::ofstream log_file;
  if (!f.log.empty()) {
    log_file.open(f.log, f.resume ? std::ios::app : std::ios::trunc);
    if (!log_file) throw IoError("cannot open log", f.log);
  }
  train(data, model, tc, adam, first, [&](const EpochReport& r) {
    std::ostringstream line;
    line << "epoch " << r.epoch << " kernel " << r.gaussian_kernel << " lk " << std::setprecision(17) << r.mean_lk
         << " lo " << r.mean_lo;
    out << line.str() << std::endl;
    if (log_file) log_file << line.str() << std::endl;
    checkpoint_save(c.checkpoint, model, adam, tc, r.epoch + 1);
  });
  return 0;
}

struct EvalFlags {
  bool identity = false;
};

inline int cmd_eval(const RunConfig& c, const EvalFlags& f, std::ostream& out) {
  detail::require(c.dataset, "dataset");
  const PckConfig pc = c.pck_config();
  const Dataset data = load_dataset(c.dataset, c.stride);
  nlohmann::json j;
  if (f.identity) {
    std::vector<PairAnnotation> anns;
    for (const auto& p : data) anns.push_back(p.annotation);
    EvalReport r{identity_baseline(anns, pc), pc.alpha, pc.reference, data.size()};
    j = r.to_json();
    j["method"] = "identity";
  } else {
    const auto model = detail::load_model(c);
    j = evaluate_pck(data, model ? &*model : nullptr, c.stride, pc).to_json();
    j["method"] = model ? "model" : "raw";
  }
  detail::write_json(out, j);
  return 0;
}

struct MatchFlags {
  std::string source, target;
  std::vector<std::string> keypoints;
  bool dense = false;
};

inline int cmd_match(const RunConfig& c, const MatchFlags& f, std::ostream& out) {
  detail::require(f.source, "source");
  detail::require(f.target, "target");
  if (!f.dense && f.keypoints.empty()) throw InvalidArgument("give --keypoint x,y (repeatable) or --dense");
  const auto [fs, ft] = load_feature_pair(f.source, f.target, c.stride);
  const auto model = detail::load_model(c);
  const ProbabilityMap4D v = detail::probabilities(model, fs, ft);
  std::vector<MatchRecord> recs;
  if (f.dense) {
    recs = match_dense(v, c.stride);
  } else {
    for (const auto& k : f.keypoints) {
      const auto [x, y] = detail::parse_pair("--keypoint", k);
      recs.push_back(match_keypoint(v, {x, y}, c.stride));
    }
  }
  detail::write_json(out, matches_to_json(recs));
  return 0;
}

struct HeatmapFlags {
  std::string source, target, cell, keypoint, out;
};

inline int cmd_heatmap(const RunConfig& c, const HeatmapFlags& f, std::ostream& out) {
  detail::require(f.source, "source");
  detail::require(f.target, "target");
  if (f.out.empty()) throw InvalidArgument("missing --image (output PGM path)");
  if (f.cell.empty() == f.keypoint.empty()) throw InvalidArgument("give exactly one of --cell i,j or --keypoint x,y");
  const auto [fs, ft] = load_feature_pair(f.source, f.target, c.stride);
  Cell cell;
  if (!f.cell.empty()) {
    const auto [i, j] = detail::parse_pair("--cell", f.cell);
    if (i < 0 || j < 0 || i != std::floor(i) || j != std::floor(j))
      throw InvalidArgument("--cell needs non-negative integers");
    cell = {static_cast<std::size_t>(i), static_cast<std::size_t>(j)};
    if (cell.y >= fs.height() || cell.x >= fs.width())
      throw InvalidArgument("cell " + f.cell + " outside the " + std::to_string(fs.height()) + "x" +
                            std::to_string(fs.width()) + " source grid");
  } else {
    const auto [x, y] = detail::parse_pair("--keypoint", f.keypoint);
    cell = nearest_cell({x, y}, fs.height(), fs.width(), c.stride);
  }
  const auto model = detail::load_model(c);
  const ProbabilityMap4D v = detail::probabilities(model, fs, ft);
  write_pgm(f.out, probability_slice(v, cell));
  detail::write_json(out, {{"schema_version", 1},
                           {"command", "heatmap"},
                           {"cell", {cell.y, cell.x}},
                           {"width", ft.width()},
                           {"height", ft.height()},
                           {"out", f.out}});
  return 0;
}

struct BenchFlags {
  std::string sizes = "4,6,8";
  std::string channels = "1,4";
  int repetitions = 3;
  bool json = false;
};

inline int cmd_bench(const RunConfig& c, const BenchFlags& f, std::ostream& out) {
  std::vector<BenchCase> cases;
  for (std::size_t n : detail::parse_sizes(f.sizes))
    for (std::size_t ch : detail::parse_sizes(f.channels))
      for (const KernelShape& k : {KernelShape::isotropic(5), KernelShape{3, 3, 5, 5}, KernelShape{5, 5, 3, 3}})
        cases.push_back({n, ch, k});
  const auto rows = bench_conv4d(cases, f.repetitions, c.seed);
  if (f.json) {
    detail::write_json(out, bench_to_json(rows));
    return 0;
  }
  out << std::left << std::setw(6) << "size" << std::setw(5) << "ch" << std::setw(10) << "kernel" << std::right
      << std::setw(11) << "naive_ms" << std::setw(11) << "fast_ms" << std::setw(11) << "fft_ms" << std::setw(9)
      << "x_fast" << std::setw(9) << "x_fft" << std::setw(12) << "diff_fast" << std::setw(12) << "diff_fft" << '\n';
  for (const auto& r : rows) {
    out << std::left << std::setw(6) << r.config.size << std::setw(5) << r.config.channels << std::setw(10)
        << r.config.kernel.str() << std::right << std::fixed << std::setprecision(3) << std::setw(11) << r.naive_ms
        << std::setw(11) << r.fast_ms << std::setw(11) << r.fft_ms << std::setprecision(2) << std::setw(9)
        << r.speedup_fast() << std::setw(9) << r.speedup_fft() << std::scientific << std::setprecision(2)
        << std::setw(12) << r.max_abs_diff_fast << std::setw(12) << r.max_abs_diff_fft << std::defaultfloat << '\n';
  }
  return 0;
}

/// Entry point shared by the executable and the tests.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Adaptive neighbourhood consensus correspondence engine"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_file;
  int threads = 0;
  app.add_option("--config", config_file, "key = value settings file");
  app.add_option("--threads", threads, "worker cap (falls back to ANC_THREADS)")->check(CLI::PositiveNumber);

  std::map<std::string, std::string> overrides;
  for (const auto& key : config_keys())
    app.add_option_function<std::string>("--" + key, [&overrides, key](const std::string& v) { overrides[key] = v; },
                                         "setting '" + key + "'")
        ->group("Settings");

  auto* gen = app.add_subcommand("gen", "write a synthetic dataset");
  TrainFlags tf;
  auto* trn = app.add_subcommand("train", "train on a dataset, checkpointing every epoch");
  trn->add_flag("--resume", tf.resume, "continue from the checkpoint");
  trn->add_option("--log", tf.log, "also append epoch lines to this file");
  EvalFlags ef;
  auto* evl = app.add_subcommand("eval", "PCK of a checkpoint (or the raw correlation) on a dataset");
  evl->add_flag("--identity", ef.identity, "score the identity-mapping baseline instead");
  MatchFlags mf;
  auto* mat = app.add_subcommand("match", "match keypoints between two feature files");
  mat->add_option("--source", mf.source, "source features (.tns)");
  mat->add_option("--target", mf.target, "target features (.tns)");
  mat->add_option("--keypoint", mf.keypoints, "source pixel x,y (repeatable)");
  mat->add_flag("--dense", mf.dense, "one record per source cell");
  HeatmapFlags hf;
  auto* hm = app.add_subcommand("heatmap", "export one source cell's probability slice as PGM");
  hm->add_option("--source", hf.source, "source features (.tns)");
  hm->add_option("--target", hf.target, "target features (.tns)");
  hm->add_option("--cell", hf.cell, "source cell i,j");
  hm->add_option("--keypoint", hf.keypoint, "source pixel x,y");
  hm->add_option("--image", hf.out, "output PGM path");
  BenchFlags bf;
  auto* bn = app.add_subcommand("bench", "time the conv4d paths against the naive loop");
  bn->add_option("--sizes", bf.sizes, "comma-separated extents");
  bn->add_option("--channels", bf.channels, "comma-separated channel counts");
  bn->add_option("--reps", bf.repetitions, "repetitions per path (>= 3)");
  bn->add_flag("--json", bf.json, "emit JSON");

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      out << app.help();
      return 0;
    } catch (const CLI::CallForAllHelp& e) {
      out << app.help("", CLI::AppFormatMode::All);
      return 0;
    } catch (const CLI::ParseError& e) {
      throw InvalidArgument(e.what());
    }
    RunConfig cfg;
    if (!config_file.empty()) apply_config_file(cfg, config_file);
    for (const auto& [k, v] : overrides) config_set(cfg, k, v);
    const int n = threads > 0 ? threads : threads_from_env();
    if (n > 0) set_num_threads(n);

    if (gen->parsed()) return cmd_gen(cfg, out);
    if (trn->parsed()) return cmd_train(cfg, tf, out);
    if (evl->parsed()) return cmd_eval(cfg, ef, out);
    if (mat->parsed()) return cmd_match(cfg, mf, out);
    if (hm->parsed()) return cmd_heatmap(cfg, hf, out);
    if (bn->parsed()) return cmd_bench(cfg, bf, out);
    throw InvalidArgument("no command given");
  } catch (const Error& e) {
    err << error_line(e.kind(), e.what()) << std::endl;
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << error_line("error", e.what()) << std::endl;
    return 1;
  }
}

}  // namespace anc::cli
