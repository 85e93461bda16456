#pragma once

// Command-line front end. `run` is the whole tool; main() only forwards to it
// so the commands can be exercised in-process.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cgh/dataset.hpp"
#include "cgh/error.hpp"
#include "cgh/evaluate.hpp"
#include "cgh/image.hpp"
#include "cgh/metrics.hpp"
#include "cgh/propagation.hpp"
#include "cgh/train.hpp"
#include "cgh/unfold.hpp"
#include "cgh/weights_io.hpp"

namespace cgh::cli {

enum ExitCode : int { kOk = 0, kOther = 1, kConfig = 2, kIo = 3, kNumeric = 4 };

// ---------------------------------------------------------------------------
// Config file: `[section]` headers and `key = value` lines; '#' or ';' start
// comments. Keys are the long flag names and may be written as section.key.

using ConfigMap = std::map<std::string, std::string>;

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline ConfigMap parse_config(std::istream& is, const std::string& origin) {
  ConfigMap out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    line = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(origin + ":" + std::to_string(lineno) + ": bad section header");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    const auto dot = key.rfind('.');
    if (dot != std::string::npos) key = key.substr(dot + 1);
    std::replace(key.begin(), key.end(), '_', '-');
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

inline ConfigMap load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file '" + path + "'");
  return parse_config(is, path);
}

/// Fills options not given on the command line from the config map. Keys no
/// option of the active command recognises are rejected.
inline void apply_config(const ConfigMap& cfg, std::vector<CLI::App*> scopes) {
  for (const auto& [key, value] : cfg) {
    bool known = false;
    for (CLI::App* app : scopes)
      for (CLI::Option* opt : app->get_options()) {
        if (!opt->check_lname(key)) continue;
        known = true;
        if (opt->count() == 0) {
          opt->add_result(value);
          opt->run_callback();
        }
      }
    if (!known) throw ConfigError("config key '" + key + "' is not an option of this command");
  }
}

// ---------------------------------------------------------------------------

struct Options {
  std::string config;
  // optics
  double wavelength = 520e-9, pitch = 8e-6, distance = 0.20;
  std::size_t width = 1920, height = 1080;
  std::string regime = "auto";
  // solvers
  int iters = 50, stages = 3;
  double step = 1.0, tv_weight = 0.02;
  int tv_iters = 50;
  std::string denoiser = "PCD";
  // training
  double lr = 1e-4;
  int epochs = 30, batch = 1;
  std::size_t channels = kDefaultChannels, blocks = 1;
  double val_fraction = 0.2;
  std::size_t synthetic = 0, count = 100;
  // paths
  std::string input, out = "out", weights, csv, data, input_kind = "phase";
  std::vector<std::string> csvs;
  std::uint64_t seed = 0;

  OpticalConfig optics() const {
    OpticalConfig c;
    c.wavelength = wavelength;
    c.pitch = pitch;
    c.distance = distance;
    c.width = width;
    c.height = height;
    c.validate();
    return c;
  }

  PropagationPlan plan() const {
    const OpticalConfig c = optics();
    if (regime == "auto") return build_plan(c);
    if (regime == "ASM") return build_plan(c, Regime::Asm);
    if (regime == "IR_MID") return build_plan(c, Regime::IrMid);
    if (regime == "IR_FAR") return build_plan(c, Regime::IrFar);
    throw ConfigError("regime must be auto, ASM, IR_MID or IR_FAR");
  }

  UnfoldConfig unfold() const {
    UnfoldConfig u;
    u.stages = stages;
    u.step = step;
    u.tv_weight = tv_weight;
    u.tv_iters = tv_iters;
    u.denoiser = parse_denoiser(denoiser);
    u.validate();
    return u;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.lr = lr;
    t.epochs = epochs;
    t.batch = batch;
    t.seed = seed;
    t.channels = channels;
    t.blocks = blocks;
    t.validate();
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    return t;
  }
};

namespace detail {

namespace fs = std::filesystem;

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir + "'");
}

inline void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string(what) + " path is required");
  if (!fs::exists(path)) throw IoError(std::string(what) + " not found: " + path);
}

/// Targets from a PNG file or a directory of PNGs, fitted to the grid.
inline std::vector<Sample> load_targets(const Options& o) {
  require_file(o.input, "input");
  if (fs::is_directory(o.input)) return load_image_dir(o.input, o.height, o.width);
  return {{fs::path(o.input).stem().string(), fit(read_png(o.input), o.height, o.width)}};
}

inline std::string format_row(const std::string& method, const std::string& image, double psnr,
                              double ssim, double wall_ms) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%s,%.2f,%.4f,%.1f", method.c_str(), image.c_str(), psnr, ssim, wall_ms);
  return buf;
}

inline constexpr const char* kMetricsHeader = "method,image,psnr,ssim,wall_ms";

inline void append_rows(const std::string& path, const std::vector<std::string>& rows) {
  const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  std::ofstream os(path, std::ios::app);
  if (!os) throw IoError("cannot open metrics file '" + path + "'");
  if (fresh) os << kMetricsHeader << '\n';
  for (const auto& r : rows) os << r << '\n';
}

inline std::string fmt_m(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace detail

inline std::string regime_sidecar(const PropagationPlan& plan) {
  return "regime=" + std::string(regime_name(plan.regime)) + " z1=" + detail::fmt_m(plan.z1) + " z2=" +
         detail::fmt_m(plan.z2);
}

inline int cmd_propagate(const Options& o, std::ostream& log) {
  const PropagationPlan plan = o.plan();
  detail::require_file(o.input, "input");
  detail::ensure_dir(o.out);
  const Image8 in = fit(read_png(o.input), o.height, o.width);
  ComplexField field(o.height, o.width, o.pitch);
  if (o.input_kind == "phase") {
    field = dequantize_phase(in, o.pitch).field();
  } else if (o.input_kind == "amplitude") {
    for (std::size_t i = 0; i < in.size(); ++i) field[i] = in.data[i] / 255.0;
  } else {
    throw ConfigError("input-kind must be 'phase' or 'amplitude'");
  }
  const ComplexField u = propagate(field, plan);
  const std::string stem = (std::filesystem::path(o.out) / std::filesystem::path(o.input).stem()).string();
  write_png(stem + "_amplitude.png", amplitude_to_image(abs(u)));
  write_png(stem + "_phase.png", phase_to_image(u));
  std::ofstream side(stem + "_propagate.txt");
  if (!side) throw IoError("cannot write sidecar in '" + o.out + "'");
  side << regime_sidecar(plan) << '\n';
  log << regime_sidecar(plan) << '\n';
  return kOk;
}

inline int cmd_solve(const Options& o, Method method, std::ostream& log) {
  const PropagationPlan plan = o.plan();
  MethodSpec spec;
  spec.method = method;
  spec.iters = o.iters;
  spec.unfold = o.unfold();
  if (method == Method::Gs && o.iters < 1) throw ConfigError("iters must be >= 1");
  std::vector<PcdWeights> weights;
  if (method == Method::Unfold && spec.unfold.denoiser == DenoiserKind::Pcd) {
    if (o.weights.empty()) throw ConfigError("weights required for unfold-infer with the PCD denoiser");
    detail::require_file(o.weights, "weights");
    check_pcd_input(o.height, o.width);
    weights = load_weights(o.weights);
    if (weights.size() != std::size_t(spec.unfold.stages))
      throw ConfigError("weights file has " + std::to_string(weights.size()) + " stages but --stages is " +
                        std::to_string(spec.unfold.stages));
    spec.weights = &weights;
  }
  const std::vector<Sample> targets = detail::load_targets(o);
  detail::ensure_dir(o.out);
  const std::string csv = o.csv.empty() ? (std::filesystem::path(o.out) / "metrics.csv").string() : o.csv;
  std::vector<std::string> rows;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const Evaluation e = evaluate(spec, targets[i].image, plan, eval_seed(o.seed, i));
    const auto base = std::filesystem::path(o.out) / targets[i].id;
    write_png(base.string() + "_" + spec.name() + "_hologram.png", e.phase_levels);
    write_png(base.string() + "_" + spec.name() + "_recon.png", e.reconstruction);
    rows.push_back(detail::format_row(spec.name(), targets[i].id, e.psnr, e.ssim, e.wall_ms));
    log << rows.back() << '\n';
  }
  detail::append_rows(csv, rows);
  return kOk;
}

inline int cmd_train(const Options& o, std::ostream& log) {
  const PropagationPlan plan = o.plan();
  const TrainConfig tc = o.train();
  UnfoldConfig uc = o.unfold();
  uc.denoiser = DenoiserKind::Pcd;
  check_pcd_input(o.height, o.width);
  if (!(o.val_fraction >= 0.0 && o.val_fraction < 1.0)) throw ConfigError("val-fraction must be in [0, 1)");
  std::vector<Sample> data;
  if (o.synthetic > 0)
    data = synthetic_dataset(o.synthetic, o.height, o.width, o.seed);
  else if (!o.data.empty())
    data = load_image_dir(o.data, o.height, o.width);
  else
    throw ConfigError("unfold-train needs --data DIR or --synthetic N");
  if (data.empty()) throw ConfigError("dataset is empty");
  const std::size_t n_val = std::size_t(std::floor(double(data.size()) * o.val_fraction));
  const std::vector<Sample> train_set(data.begin(), data.end() - std::ptrdiff_t(n_val));
  const std::vector<Sample> val_set(data.end() - std::ptrdiff_t(n_val), data.end());
  if (train_set.empty()) throw ConfigError("dataset is empty after the validation split");
  detail::ensure_dir(o.out);
  const std::string weights = o.weights.empty() ? (std::filesystem::path(o.out) / "weights.cghw").string() : o.weights;
  const std::string log_path = (std::filesystem::path(o.out) / "train_log.csv").string();
  std::ofstream csv(log_path, std::ios::trunc);
  if (!csv) throw IoError("cannot write '" + log_path + "'");
  csv << kTrainLogHeader << '\n';
  log << "training on " << train_set.size() << " images, validating on " << val_set.size() << '\n';
  const auto w = train(train_set, val_set, plan, tc, uc, [&](const EpochLog& e) {
    write_log_row(csv, e);
    csv.flush();
    write_log_row(log, e);
  });
  save_weights(weights, w);
  log << "weights written to " << weights << '\n';
  return kOk;
}

struct MethodSummary {
  std::size_t n = 0;
  double psnr = 0.0, ssim = 0.0, wall_ms = 0.0;
};

/// Per-method means over metrics CSV rows; malformed rows are counted and skipped.
inline std::map<std::string, MethodSummary> summarize(const std::vector<std::string>& files,
                                                      std::size_t& skipped) {
  std::map<std::string, MethodSummary> out;
  skipped = 0;
  for (const auto& f : files) {
    std::ifstream is(f);
    if (!is) throw IoError("cannot open metrics file '" + f + "'");
    std::string line;
    while (std::getline(is, line)) {
      line = trim(line);
      if (line.empty() || line == detail::kMetricsHeader) continue;
      std::vector<std::string> cells;
      std::stringstream ss(line);
      for (std::string c; std::getline(ss, c, ',');) cells.push_back(trim(c));
      double p = 0, s = 0, w = 0;
      try {
        if (cells.size() != 5 || cells[0].empty()) throw std::invalid_argument("columns");
        std::size_t k1 = 0, k2 = 0, k3 = 0;
        p = std::stod(cells[2], &k1);
        s = std::stod(cells[3], &k2);
        w = std::stod(cells[4], &k3);
        if (k1 != cells[2].size() || k2 != cells[3].size() || k3 != cells[4].size())
          throw std::invalid_argument("number");
      } catch (const std::exception&) {
        ++skipped;
        continue;
      }
      MethodSummary& m = out[cells[0]];
      ++m.n;
      m.psnr += p;
      m.ssim += s;
      m.wall_ms += w;
    }
  }
  for (auto& [k, m] : out) {
    m.psnr /= double(m.n);
    m.ssim /= double(m.n);
    m.wall_ms /= double(m.n);
  }
  return out;
}

inline int cmd_eval(const Options& o, std::ostream& log) {
  std::vector<std::string> files = o.csvs;
  if (!o.csv.empty()) files.push_back(o.csv);
  if (files.empty()) throw ConfigError("eval needs at least one metrics CSV");
  for (const auto& f : files) detail::require_file(f, "metrics CSV");
  std::size_t skipped = 0;
  const auto summary = summarize(files, skipped);
  if (summary.empty()) throw ConfigError("no valid metrics rows found");
  if (skipped) std::cerr << "warning: skipped " << skipped << " malformed row(s)\n";
  char buf[256];
  log << "method,count,mean_psnr,mean_ssim,mean_wall_ms\n";
  for (const auto& [name, m] : summary) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%.2f,%.4f,%.1f\n", name.c_str(), m.n, m.psnr, m.ssim, m.wall_ms);
    log << buf;
  }
  return kOk;
}

inline int cmd_synth(const Options& o, std::ostream& log) {
  detail::ensure_dir(o.out);
  const auto data = synthetic_dataset(o.count, o.height, o.width, o.seed);
  for (const auto& s : data) write_png((std::filesystem::path(o.out) / (s.id + ".png")).string(), s.image);
  log << "wrote " << data.size() << " images to " << o.out << '\n';
  return kOk;
}

inline int run(int argc, const char* const* argv, std::ostream& log = std::cout) {
  Options o;
  CLI::App app{"Phase-only hologram synthesis: propagation, GS/GD baselines, and unfolded PCD networks"};
  app.require_subcommand(1);
  app.add_option("--config", o.config, "INI file of option defaults ([section] + key = value)");

  auto optics = [&](CLI::App* c) {
    c->add_option("--wavelength", o.wavelength, "wavelength in meters")->capture_default_str();
    c->add_option("--pitch", o.pitch, "SLM pixel pitch in meters")->capture_default_str();
    c->add_option("--distance", o.distance, "propagation distance in meters")->capture_default_str();
    c->add_option("--width", o.width, "grid width in pixels")->capture_default_str();
    c->add_option("--height", o.height, "grid height in pixels")->capture_default_str();
    c->add_option("--regime", o.regime, "auto, ASM, IR_MID or IR_FAR")->capture_default_str();
    c->add_option("--seed", o.seed, "random seed")->capture_default_str();
    c->add_option("--out", o.out, "output directory")->capture_default_str();
  };
  auto unfolding = [&](CLI::App* c) {
    c->add_option("--stages", o.stages, "unfolding stages")->capture_default_str();
    c->add_option("--step", o.step, "gradient step rho")->capture_default_str();
    c->add_option("--tv-weight", o.tv_weight, "complex TV weight")->capture_default_str();
    c->add_option("--tv-iters", o.tv_iters, "complex TV dual iterations")->capture_default_str();
  };
  auto target = [&](CLI::App* c) {
    c->add_option("--input", o.input, "target PNG or directory of PNGs");
    c->add_option("--csv", o.csv, "metrics CSV to append to (default OUT/metrics.csv)");
  };

  CLI::App* prop = app.add_subcommand("propagate", "propagate a phase (or amplitude) image");
  optics(prop);
  prop->add_option("--input", o.input, "input PNG");
  prop->add_option("--input-kind", o.input_kind, "phase or amplitude")->capture_default_str();

  CLI::App* gs = app.add_subcommand("gs", "Gerchberg-Saxton baseline");
  optics(gs);
  target(gs);
  gs->add_option("--iters", o.iters, "iterations")->capture_default_str();

  CLI::App* gd = app.add_subcommand("gd", "unfolding without a denoiser (pure gradient steps)");
  optics(gd);
  target(gd);
  unfolding(gd);

  CLI::App* infer = app.add_subcommand("unfold-infer", "unfolded network with a denoiser");
  optics(infer);
  target(infer);
  unfolding(infer);
  infer->add_option("--denoiser", o.denoiser, "PCD, COMPLEX_TV or NONE")->capture_default_str();
  infer->add_option("--weights", o.weights, "CGHW weights (PCD)");

  CLI::App* tr = app.add_subcommand("unfold-train", "train per-stage PCD weights");
  optics(tr);
  unfolding(tr);
  tr->add_option("--data", o.data, "directory of PNG training images");
  tr->add_option("--synthetic", o.synthetic, "use N generated scenes instead of --data");
  tr->add_option("--weights", o.weights, "output weights (default OUT/weights.cghw)");
  tr->add_option("--lr", o.lr, "Adam learning rate")->capture_default_str();
  tr->add_option("--epochs", o.epochs, "epochs")->capture_default_str();
  tr->add_option("--batch", o.batch, "images per optimizer step")->capture_default_str();
  tr->add_option("--channels", o.channels, "PCD channels")->capture_default_str();
  tr->add_option("--blocks", o.blocks, "CDAT blocks per stage")->capture_default_str();
  tr->add_option("--val-fraction", o.val_fraction, "held-out fraction")->capture_default_str();

  CLI::App* ev = app.add_subcommand("eval", "summarise metrics CSVs per method");
  ev->add_option("--csv", o.csvs, "metrics CSV file(s)");

  CLI::App* syn = app.add_subcommand("synth-data", "write generated test scenes as PNGs");
  syn->add_option("--count", o.count, "number of images")->capture_default_str();
  syn->add_option("--width", o.width, "width")->capture_default_str();
  syn->add_option("--height", o.height, "height")->capture_default_str();
  syn->add_option("--seed", o.seed, "seed")->capture_default_str();
  syn->add_option("--out", o.out, "output directory")->capture_default_str();

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e, log, std::cerr);
    } catch (const CLI::ParseError& e) {
      app.exit(e, log, std::cerr);
      return kConfig;
    }
    CLI::App* cmd = app.get_subcommands().front();
    if (!o.config.empty()) apply_config(load_config(o.config), {&app, cmd});
    const std::string name = cmd->get_name();
    if (name == "propagate") return cmd_propagate(o, log);
    if (name == "gs") return cmd_solve(o, Method::Gs, log);
    if (name == "gd") return cmd_solve(o, Method::Gd, log);
    if (name == "unfold-infer") return cmd_solve(o, Method::Unfold, log);
    if (name == "unfold-train") return cmd_train(o, log);
    if (name == "eval") return cmd_eval(o, log);
    if (name == "synth-data") return cmd_synth(o, log);
    return kOther;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
}

}  // namespace cgh::cli
