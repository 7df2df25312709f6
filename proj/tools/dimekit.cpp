// dimekit command-line front end.

#include <CLI/CLI.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dimekit/bench.hpp"
#include "dimekit/checkpoint.hpp"
#include "dimekit/datakit.hpp"
#include "dimekit/extxyz.hpp"
#include "dimekit/trainer.hpp"
#include "dimekit/uncertainty.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dimekit;

namespace {

// ---- run configuration ----

json default_run_config() {
  return {{"seed", 0},
          {"model", ModelConfig{}},
          {"train", TrainConfig{}},
          {"toy", ToyPotentialConfig{}},
          {"data", {{"train", 800}, {"val", 100}, {"test", 100}}},
          {"ensemble", {{"k", 3}}},
          {"calibrate", {{"cov_samples", 10}}},
          {"stats", {{"bins", 20}}},
          {"bench", {{"triplets", 100000}, {"repeats", 3}}}};
}

// objects whose keys are data (element symbols), not schema
const std::set<std::string> kFreeFormKeys{"/toy/atom_energies"};

void check_known_keys(const json& given, const json& defaults, const std::string& path) {
  if (!given.is_object()) throw InputError("config: " + (path.empty() ? "root" : path) + " must be an object");
  for (const auto& [key, value] : given.items()) {
    const std::string here = path + "/" + key;
    if (!defaults.contains(key)) throw InputError("config: unknown key " + here.substr(1));
    const json& d = defaults.at(key);
    if (d.is_object() && !kFreeFormKeys.count(here)) check_known_keys(value, d, here);
  }
}

void apply_set(json& cfg, const json& defaults, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw InputError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  std::string pointer;
  for (std::size_t start = 0;;) {
    const auto dot = key.find('.', start);
    pointer += "/" + key.substr(start, dot - start);
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  const json::json_pointer ptr(pointer);
  // every path component must exist, except inside free-form objects
  bool known = defaults.contains(ptr);
  for (const auto& free : kFreeFormKeys) known = known || pointer.rfind(free + "/", 0) == 0;
  if (!known) throw InputError("--set: unknown key " + key);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  cfg[ptr] = value;
}

struct RunConfig {
  json raw;
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  ToyPotentialConfig toy;
};

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& sets,
                          std::optional<std::uint64_t> seed) {
  const json defaults = default_run_config();
  json cfg = defaults;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open config " + path);
    json given;
    try {
      given = json::parse(in);
    } catch (const json::parse_error& e) {
      throw InputError("config " + path + ": " + e.what());
    }
    check_known_keys(given, defaults, "");
    cfg.merge_patch(given);
  }
  for (const auto& s : sets) apply_set(cfg, defaults, s);
  if (seed) {
    cfg["seed"] = *seed;
    cfg["train"]["seed"] = *seed;
  }
  RunConfig rc;
  rc.raw = cfg;
  try {
    rc.seed = cfg.at("seed").get<std::uint64_t>();
    rc.model = cfg.at("model").get<ModelConfig>();
    rc.train = cfg.at("train").get<TrainConfig>();
    rc.toy = cfg.at("toy").get<ToyPotentialConfig>();
    // touch the remaining sections so type errors surface before work starts
    for (const char* p : {"/data/train", "/data/val", "/data/test", "/ensemble/k", "/calibrate/cov_samples",
                          "/stats/bins", "/bench/triplets", "/bench/repeats"})
      (void)cfg.at(json::json_pointer(p)).get<int>();
  } catch (const json::exception& e) {
    throw InputError(std::string("config: ") + e.what());
  }
  rc.model.validate();
  rc.train.validate();
  rc.toy.validate();
  return rc;
}

int get_int(const RunConfig& rc, const char* pointer, int min) {
  const int v = rc.raw.at(json::json_pointer(pointer)).get<int>();
  if (v < min) throw InputError(std::string("config: ") + (pointer + 1) + " must be >= " + std::to_string(min));
  return v;
}

// ---- helpers ----

std::vector<AtomicConfiguration> read_dataset(const std::string& path) {
  auto data = read_extxyz_file(path);
  if (data.empty()) throw InputError(path + ": no configurations");
  for (const auto& c : data) c.validate();
  return data;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw InputError("write failed: " + path.string());
}

std::string num(double v) { return std::isfinite(v) ? format_double(v) : "undefined"; }

std::string opt_num(const std::optional<double>& v) { return v ? format_double(*v) : "undefined"; }

void write_train_log(const fs::path& path, const std::vector<LogEntry>& log) {
  std::ostringstream os;
  os << "step,lr,train_loss,val_mae_E,val_mae_F\n";
  for (const auto& e : log)
    os << e.step << ',' << format_double(e.learning_rate) << ',' << format_double(e.train_loss) << ','
       << num(e.val_mae_energy) << ',' << num(e.val_mae_forces) << '\n';
  write_text(path, os.str());
}

/// Predictions in the label frame: model output plus per-element reference energies.
std::vector<Prediction> predict_labels(const Checkpoint& ckpt, std::span<const AtomicConfiguration> data,
                                       bool forces) {
  const DimeNetPP model(ckpt.config);
  auto preds = predict_dataset(model, ckpt.params, data, forces);
  for (std::size_t i = 0; i < data.size(); ++i) preds[i].energy += reference_sum(data[i], ckpt.reference_energies);
  return preds;
}

bool all_have_forces(std::span<const AtomicConfiguration> data) {
  for (const auto& c : data)
    if (!c.forces) return false;
  return true;
}

struct LoadedEnsemble {
  Ensemble ensemble;
  ReferenceEnergies refs;
};

LoadedEnsemble load_ensemble(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open ensemble " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw InputError("ensemble " + path + ": " + e.what());
  }
  LoadedEnsemble le;
  try {
    const fs::path dir = fs::path(path).parent_path();
    const auto members = j.at("members").get<std::vector<std::string>>();
    if (members.empty()) throw InputError("ensemble " + path + ": no members");
    for (std::size_t i = 0; i < members.size(); ++i) {
      Checkpoint c = load_checkpoint((dir / members[i]).string());
      if (i == 0) {
        le.ensemble.config = c.config;
        le.refs = c.reference_energies;
      } else if (json(c.config) != json(le.ensemble.config) || c.reference_energies != le.refs) {
        throw InputError("ensemble " + path + ": member " + members[i] + " does not match member 0");
      }
      le.ensemble.members.push_back(std::move(c.params));
    }
    le.ensemble.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  } catch (const json::exception& e) {
    throw InputError("ensemble " + path + ": " + e.what());
  }
  return le;
}

// ---- subcommands ----

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::string out = ".";

  RunConfig load() const {
    if (threads < 1) throw InputError("--threads must be >= 1");
    return load_run_config(config, sets, seed);
  }
  fs::path out_dir() const {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw InputError("cannot create output directory " + out + ": " + ec.message());
    return fs::path(out);
  }
};

int cmd_gen_toy(const Common& common) {
  const RunConfig rc = common.load();
  const fs::path out = common.out_dir();
  const char* names[] = {"train", "val", "test"};
  json manifest = {{"seed", rc.seed}, {"generator", rc.toy}, {"splits", json::array()}};
  std::vector<std::vector<AtomicConfiguration>> splits;
  std::size_t discarded = 0;
  double drift = 0;
  for (int s = 0; s < 3; ++s) {
    const int n = get_int(rc, (std::string("/data/") + names[s]).c_str(), s == 0 ? 1 : 0);
    GenerationReport report;
    // independent stream per split
    const std::uint64_t split_seed = rc.seed * 3 + static_cast<std::uint64_t>(s);
    splits.push_back(n > 0 ? generate_collisions(rc.toy, static_cast<std::size_t>(n), split_seed, &report,
                                                 common.threads)
                           : std::vector<AtomicConfiguration>{});
    discarded += report.discarded;
    drift = std::max(drift, report.max_energy_drift);
    spdlog::info("gen-toy: {} split: {} snapshots from {} trajectories ({} discarded)", names[s], splits[s].size(),
                 report.trajectories, report.discarded);
  }
  const ReferenceEnergies refs = fit_reference_energies(splits[0]);
  for (int s = 0; s < 3; ++s) {
    write_extxyz_file((out / (std::string(names[s]) + ".xyz")).string(), splits[s]);
    manifest["splits"].push_back(to_json_value(make_manifest(names[s], splits[s], rc.model.basis.cutoff, refs)));
  }
  manifest["discarded_trajectories"] = discarded;
  manifest["max_energy_drift"] = drift;
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
  spdlog::info("gen-toy: wrote {}", out.string());
  return 0;
}

Checkpoint train_one(const RunConfig& rc, const std::vector<AtomicConfiguration>& train_raw,
                     const std::vector<AtomicConfiguration>& val_raw, TrainResult& result,
                     const TrainConfig& tcfg) {
  const ReferenceEnergies refs = fit_reference_energies(train_raw);
  const auto train_set = shift_energies(train_raw, refs);
  const auto val_set = shift_energies(val_raw, refs);
  result = train(train_set, val_set, rc.model, tcfg, [](const LogEntry& e) {
    spdlog::info("step {} lr {:.3e} loss {:.6g} val_mae_E {:.6g} val_mae_F {:.6g}", e.step, e.learning_rate,
                 e.train_loss, e.val_mae_energy, e.val_mae_forces);
  });
  Checkpoint ckpt;
  ckpt.config = rc.model;
  ckpt.params = result.params;
  ckpt.reference_energies = refs;
  return ckpt;
}

int cmd_train(const Common& common, const std::string& train_path, const std::string& val_path) {
  const RunConfig rc = common.load();
  const auto train_raw = read_dataset(train_path);
  const auto val_raw = read_dataset(val_path);
  const fs::path out = common.out_dir();
  TrainResult result;
  const Checkpoint ckpt = train_one(rc, train_raw, val_raw, result, rc.train);
  save_checkpoint((out / "model.ckpt").string(), ckpt);
  write_train_log(out / "train_log.csv", result.log);
  spdlog::info("train: {} steps in {:.1f} s, best step {}", rc.train.max_steps, result.seconds, result.best_step);
  return 0;
}

std::string eval_csv(const Metrics& m, std::size_t force_components) {
  std::ostringstream os;
  os << "metric,value,n_samples\n";
  os << "mae_energy," << num(m.mae_energy) << ',' << m.configurations << '\n';
  os << "mae_forces," << num(m.mae_forces) << ',' << (std::isfinite(m.mae_forces) ? force_components : 0) << '\n';
  os << "std_mae," << num(m.std_mae) << ',' << m.configurations << '\n';
  os << "log_mae," << num(m.log_mae) << ',' << m.configurations << '\n';
  return os.str();
}

int cmd_eval(const Common& common, const std::string& ckpt_path, const std::string& data_path) {
  (void)common.load();
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const auto data = read_dataset(data_path);
  const bool forces = all_have_forces(data);
  const auto preds = predict_labels(ckpt, data, forces);
  const Metrics m = evaluate_predictions(preds, data, forces);
  std::size_t components = 0;
  for (const auto& c : data) components += 3 * c.size();
  write_text(common.out_dir() / "eval.csv", eval_csv(m, components));
  spdlog::info("eval: mae_E {:.6g} eV, mae_F {:.6g} eV/A over {} configurations", m.mae_energy, m.mae_forces,
               m.configurations);
  return 0;
}

int cmd_predict(const Common& common, const std::string& ckpt_path, const std::string& data_path) {
  (void)common.load();
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  auto data = read_dataset(data_path);
  const auto preds = predict_labels(ckpt, data, true);
  std::ostringstream csv;
  csv << "record,n_atoms,energy\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i].energy = preds[i].energy;
    data[i].forces = preds[i].forces;
    csv << i << ',' << data[i].size() << ',' << format_double(preds[i].energy) << '\n';
  }
  const fs::path out = common.out_dir();
  write_extxyz_file((out / "predictions.xyz").string(), data);
  write_text(out / "predictions.csv", csv.str());
  spdlog::info("predict: {} configurations", data.size());
  return 0;
}

int cmd_ensemble_train(const Common& common, const std::string& train_path, const std::string& val_path) {
  const RunConfig rc = common.load();
  const int k = get_int(rc, "/ensemble/k", 1);
  const auto train_raw = read_dataset(train_path);
  const auto val_raw = read_dataset(val_path);
  const fs::path out = common.out_dir();
  const ReferenceEnergies refs = fit_reference_energies(train_raw);
  const auto train_set = shift_energies(train_raw, refs);
  const auto val_set = shift_energies(val_raw, refs);
  const auto result = ensemble_train(train_set, val_set, rc.model, rc.train, k, common.threads,
                                     [](int member, const LogEntry& e) {
                                       spdlog::info("member {} step {} loss {:.6g} val_mae_F {:.6g}", member, e.step,
                                                    e.train_loss, e.val_mae_forces);
                                     });
  json manifest = {{"members", json::array()},
                   {"seeds", result.ensemble.seeds},
                   {"seconds", result.seconds},
                   {"member_seconds", json::array()}};
  for (int i = 0; i < k; ++i) {
    const std::string name = "member_" + std::to_string(i) + ".ckpt";
    Checkpoint ckpt;
    ckpt.config = rc.model;
    ckpt.params = result.ensemble.members[i];
    ckpt.reference_energies = refs;
    save_checkpoint((out / name).string(), ckpt);
    write_train_log(out / ("train_log_" + std::to_string(i) + ".csv"), result.runs[i].log);
    manifest["members"].push_back(name);
    manifest["member_seconds"].push_back(result.runs[i].seconds);
  }
  write_text(out / "ensemble.json", manifest.dump(2) + "\n");
  spdlog::info("ensemble-train: K = {} in {:.1f} s", k, result.seconds);
  return 0;
}

int cmd_calibrate(const Common& common, const std::string& ensemble_path, const std::string& ckpt_path,
                  const std::string& data_path) {
  const RunConfig rc = common.load();
  if (ensemble_path.empty() == ckpt_path.empty())
    throw InputError("calibrate: pass exactly one of --ensemble or --checkpoint");
  const auto data = read_dataset(data_path);
  const bool forces = all_have_forces(data);
  std::vector<Prediction> preds;
  std::optional<CovarianceCheck> worst;
  std::size_t cov_samples = 0;
  std::string source;
  if (!ensemble_path.empty()) {
    const LoadedEnsemble le = load_ensemble(ensemble_path);
    preds = ensemble_predict_dataset(le.ensemble, data, forces);
    for (std::size_t i = 0; i < data.size(); ++i) preds[i].energy += reference_sum(data[i], le.refs);
    if (le.ensemble.size() >= 2) {
      const auto n = std::min<std::size_t>(data.size(), static_cast<std::size_t>(get_int(rc, "/calibrate/cov_samples", 0)));
      for (std::size_t i = 0; i < n; ++i) {
        auto c = cov_identity_check(le.ensemble, data[i]);
        if (!worst || c.relative > worst->relative) worst = std::move(c);
      }
      cov_samples = n;
    }
    source = "ensemble K=" + std::to_string(le.ensemble.size());
  } else {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    if (!ckpt.config.mve_head) throw InputError("calibrate: checkpoint has no mean-variance head");
    const DimeNetPP model(ckpt.config);
    for (const auto& c : data) {
      Prediction p = model.mve_forward(ckpt.params, c);
      p.energy += reference_sum(c, ckpt.reference_energies);
      preds.push_back(std::move(p));
    }
    source = "mve";
  }
  const CalibrationReport r = calibration(preds, data);
  std::ostringstream os;
  os << "metric,value,n_samples\n";
  os << "rho_energy," << opt_num(r.rho_energy) << ',' << r.energy_samples << '\n';
  os << "rho_forces," << (r.force_sigma_available ? opt_num(r.rho_forces) : std::string("absent")) << ','
     << (r.force_sigma_available ? r.force_samples : 0) << '\n';
  os << "rho_forces_vs_sigma_energy," << opt_num(r.rho_forces_vs_energy) << ',' << r.force_samples << '\n';
  if (worst) {
    os << "cov_identity_max_abs," << format_double(worst->max_abs) << ',' << cov_samples << '\n';
    os << "cov_identity_relative," << format_double(worst->relative) << ',' << cov_samples << '\n';
  }
  std::ostringstream samples;
  samples << "sample_id,delta_E,sigma_E\n";
  for (std::size_t i = 0; i < r.delta_energy.size(); ++i)
    samples << i << ',' << format_double(r.delta_energy[i]) << ',' << num(r.sigma_energy[i]) << '\n';
  const fs::path out = common.out_dir();
  write_text(out / "calibration.csv", os.str());
  write_text(out / "calibration_samples.csv", samples.str());
  spdlog::info("calibrate ({}): rho_E {} rho_F {}", source, opt_num(r.rho_energy),
               r.force_sigma_available ? opt_num(r.rho_forces) : "absent");
  return 0;
}

int cmd_bench(const Common& common) {
  const RunConfig rc = common.load();
  const int triplets = get_int(rc, "/bench/triplets", 1);
  const int repeats = get_int(rc, "/bench/repeats", 1);
  const BenchResult r = bench_interactions(rc.model, triplets, repeats, rc.seed);
  std::ostringstream csv;
  csv << "variant,triplets,seconds,ns_per_triplet,macs_per_triplet\n";
  for (const auto* t : {&r.bilinear, &r.hadamard})
    csv << to_string(t->kind) << ',' << t->triplets << ',' << format_double(t->seconds) << ','
        << format_double(t->per_triplet_ns) << ',' << format_double(t->macs_per_triplet) << '\n';
  write_text(common.out_dir() / "bench.csv", csv.str());
  std::cout << fmt::format("{:<10} {:>10} {:>12} {:>16}\n", "variant", "triplets", "seconds", "ns/triplet");
  for (const auto* t : {&r.bilinear, &r.hadamard})
    std::cout << fmt::format("{:<10} {:>10} {:>12.4f} {:>16.1f}\n", to_string(t->kind), t->triplets, t->seconds,
                             t->per_triplet_ns);
  std::cout << fmt::format("bilinear / hadamard = {:.2f}\n", r.ratio());
  return 0;
}

int cmd_stats(const Common& common, const std::string& data_path, const std::string& manifest_path) {
  const RunConfig rc = common.load();
  const auto data = read_dataset(data_path);
  ReferenceEnergies refs;
  if (!manifest_path.empty()) {
    std::ifstream in(manifest_path);
    if (!in) throw InputError("cannot open manifest " + manifest_path);
    json j;
    try {
      j = json::parse(in);
      // a gen-toy manifest lists splits; any of them carries the reference table
      refs = manifest_from_json(j.contains("splits") ? j.at("splits").at(0) : j).reference_energies;
    } catch (const json::exception& e) {
      throw InputError("manifest " + manifest_path + ": " + e.what());
    }
  } else {
    refs = fit_reference_energies(data);
  }
  const auto s = dataset_stats(data, refs, get_int(rc, "/stats/bins", 1));
  std::ostringstream os;
  write_histogram_csv(os, s.bins);
  write_text(common.out_dir() / "stats.csv", os.str());
  spdlog::info("stats: {} configurations in {} bins", data.size(), s.bins.size());
  return 0;
}

void setup_logging() {
  auto logger = spdlog::stderr_logger_st("dimekit");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("DIMEKIT_LOG")) {
    const std::string v = env;
    if (v == "error") spdlog::set_level(spdlog::level::err);
    else if (v == "info") spdlog::set_level(spdlog::level::info);
    else if (v == "debug") spdlog::set_level(spdlog::level::debug);
    else throw InputError("DIMEKIT_LOG must be error, info or debug (got '" + v + "')");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dimekit: directional message passing potentials with uncertainty"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  Common common;
  app.add_option("--config", common.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--set", common.sets, "override a config value, e.g. --set model.hidden_dim=64")
      ->allow_extra_args(false);
  app.add_option("--seed", common.seed, "seed for data generation, initialization and shuffling");
  app.add_option("--threads", common.threads, "worker threads (default 1)");
  app.add_option("--out", common.out, "output directory (default .)");

  std::string train_path, val_path, ckpt_path, data_path, ensemble_path, manifest_path;
  auto* gen = app.add_subcommand("gen-toy", "generate toy collision snapshots (train/val/test + manifest)");
  auto* trn = app.add_subcommand("train", "train one model");
  trn->add_option("--train", train_path, "training split (extended XYZ)")->required()->check(CLI::ExistingFile);
  trn->add_option("--val", val_path, "validation split (extended XYZ)")->required()->check(CLI::ExistingFile);
  auto* evl = app.add_subcommand("eval", "evaluate a checkpoint; writes eval.csv");
  evl->add_option("--checkpoint", ckpt_path)->required()->check(CLI::ExistingFile);
  evl->add_option("--data", data_path)->required()->check(CLI::ExistingFile);
  auto* prd = app.add_subcommand("predict", "energies and forces for every record of a file");
  prd->add_option("--checkpoint", ckpt_path)->required()->check(CLI::ExistingFile);
  prd->add_option("--data", data_path)->required()->check(CLI::ExistingFile);
  auto* ens = app.add_subcommand("ensemble-train", "train ensemble.k models differing only in seed");
  ens->add_option("--train", train_path)->required()->check(CLI::ExistingFile);
  ens->add_option("--val", val_path)->required()->check(CLI::ExistingFile);
  auto* cal = app.add_subcommand("calibrate", "error vs sigma correlations and the covariance identity");
  cal->add_option("--ensemble", ensemble_path, "ensemble.json written by ensemble-train")->check(CLI::ExistingFile);
  cal->add_option("--checkpoint", ckpt_path, "checkpoint of a model with a mean-variance head")
      ->check(CLI::ExistingFile);
  cal->add_option("--data", data_path)->required()->check(CLI::ExistingFile);
  auto* bch = app.add_subcommand("bench", "hadamard vs bilinear interaction timing");
  auto* sts = app.add_subcommand("stats", "histogram of atomization energy per atom");
  sts->add_option("--data", data_path)->required()->check(CLI::ExistingFile);
  sts->add_option("--manifest", manifest_path, "take reference energies from this manifest")
      ->check(CLI::ExistingFile);
  for (auto* sub : {gen, trn, evl, prd, ens, cal, bch, sts}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    setup_logging();
    if (*gen) return cmd_gen_toy(common);
    if (*trn) return cmd_train(common, train_path, val_path);
    if (*evl) return cmd_eval(common, ckpt_path, data_path);
    if (*prd) return cmd_predict(common, ckpt_path, data_path);
    if (*ens) return cmd_ensemble_train(common, train_path, val_path);
    if (*cal) return cmd_calibrate(common, ensemble_path, ckpt_path, data_path);
    if (*bch) return cmd_bench(common);
    if (*sts) return cmd_stats(common, data_path, manifest_path);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
