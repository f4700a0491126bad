#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "costi/costi.hpp"

namespace fs = std::filesystem;
using namespace costi;
using Real = float;

namespace {

enum Exit { ok = 0, usage = 1, data_error = 2, numeric = 3 };

struct DataArgs {
  std::string dir;
  std::string values, mask, adjacency;

  void add(CLI::App* app) {
    app->add_option("--data", dir, "Directory with values.csv, mask.csv and adjacency.csv");
    app->add_option("--values", values, "Values CSV (overrides --data)");
    app->add_option("--mask", mask, "Mask CSV (overrides --data)");
    app->add_option("--adjacency", adjacency, "Adjacency CSV (overrides --data)");
  }

  Dataset load() const {
    auto pick = [&](const std::string& explicit_path, const char* name) -> std::optional<std::string> {
      if (!explicit_path.empty()) return explicit_path;
      if (dir.empty()) return std::nullopt;
      const fs::path p = fs::path(dir) / name;
      if (fs::exists(p) || fs::exists(fs::path(dir) / (p.stem().string() + "_c0.csv"))) return p.string();
      return std::nullopt;
    };
    const auto v = pick(values, "values.csv");
    if (!v) throw DataError(dir.empty() ? "no dataset given (use --data or --values)" : "no values.csv in " + dir);
    return load_csv(*v, pick(mask, "mask.csv"), pick(adjacency, "adjacency.csv"));
  }
};

/// Options shared by commands that build or train a model; unset options keep
/// the config-file or built-in value.
struct ModelArgs {
  std::string config_path;
  std::string preset;
  std::optional<std::size_t> channels, heads, nem_layers, f_t, f_s, window, steps, epochs, batch_size, val_samples,
      val_every;
  std::optional<double> dropout, learning_rate;
  std::optional<std::string> mixer, curriculum, optimizer, mask_strategy;
  bool no_cond = false, no_stfem = false, no_nem = false, no_self_attention = false;

  void add(CLI::App* app) {
    app->add_option("--config", config_path, "Flat JSON run configuration");
    app->add_option("--preset", preset, "Dataset preset (window, compression factors, epochs)");
    app->add_option("--channels", channels, "Hidden width d");
    app->add_option("--heads", heads, "Attention heads");
    app->add_option("--nem-layers", nem_layers, "Number of noise extraction blocks");
    app->add_option("--f-t", f_t, "Temporal compression factor");
    app->add_option("--f-s", f_s, "Spatial compression factor");
    app->add_option("--dropout", dropout, "Dropout rate");
    app->add_option("--mixer", mixer, "Temporal mixer: bidir_attention | bidir_linear_scan");
    app->add_option("--window", window, "Window length L");
    app->add_option("--steps", steps, "Training steps K");
    app->add_option("--epochs", epochs, "Training epochs (K = epochs * ceil(windows / batch))");
    app->add_option("--batch-size", batch_size, "Windows per step");
    app->add_option("--lr", learning_rate, "Learning rate");
    app->add_option("--curriculum", curriculum, "linear | constant | original | exponential | pretrain_exponential");
    app->add_option("--optimizer", optimizer, "schedulefree_adamw | adamw_multistep | radam_plain");
    app->add_option("--mask-strategy", mask_strategy, "point | block_hybrid | historical_hybrid");
    app->add_option("--val-samples", val_samples, "Ensemble size of the periodic validation");
    app->add_option("--val-every", val_every, "Validation interval in steps (0: K / 50)");
    app->add_flag("--no-cond", no_cond, "Disable the conditional branch");
    app->add_flag("--no-stfem", no_stfem, "Disable the feature extraction modules");
    app->add_flag("--no-nem", no_nem, "Disable the noise extraction blocks");
    app->add_flag("--no-self-attention", no_self_attention, "Disable the final spatial self-attention");
  }

  RunConfig resolve() const {
    RunConfig c = config_path.empty() ? RunConfig{} : load_config(config_path);
    if (!preset.empty()) {
      const auto& p = find_preset(preset);
      c.window = p.window;
      c.model.f_t = p.f_t;
      c.model.f_s = p.f_s;
    }
    if (channels) c.model.channels = *channels;
    if (heads) c.model.heads = *heads;
    if (nem_layers) c.model.nem_layers = *nem_layers;
    if (f_t) c.model.f_t = *f_t;
    if (f_s) c.model.f_s = *f_s;
    if (dropout) c.model.dropout = *dropout;
    if (mixer) c.model.temporal_mixer = parse_temporal_mixer(*mixer);
    if (window) c.window = *window;
    if (steps) c.train.total_steps = *steps;
    if (batch_size) c.train.batch_size = *batch_size;
    if (learning_rate) c.train.learning_rate = *learning_rate;
    if (curriculum) c.train.curriculum.kind = parse_curriculum(*curriculum);
    if (optimizer) c.train.optimizer = parse_optimizer(*optimizer);
    if (mask_strategy) c.train.mask_strategy = parse_mask_strategy(*mask_strategy);
    if (val_samples) c.train.val_samples = *val_samples;
    if (val_every) c.train.val_every = *val_every;
    if (no_cond) c.model.use_cond = false;
    if (no_stfem) c.model.use_stfem = false;
    if (no_nem) c.model.use_nem = false;
    if (no_self_attention) c.model.use_self_attention = false;
    return c;
  }
};

/// Sampling options; σ sequence from --sigmas, else --preset with --steps 1|2,
/// else σ_max followed by geometric levels.
struct SamplerArgs {
  std::optional<std::size_t> steps, n_samples, threads;
  std::vector<double> sigmas;
  std::string preset;

  void add(CLI::App* app, bool with_steps = true) {
    if (with_steps) app->add_option("--steps", steps, "Sampling steps (1 or 2 with a preset)");
    app->add_option("--sigmas", sigmas, "Explicit decreasing noise levels")->delimiter(',');
    app->add_option("--preset", preset, "Preset providing the second-step noise level");
    app->add_option("--n-samples", n_samples, "Ensemble size");
    app->add_option("--threads", threads, "Worker threads for ensemble members");
  }

  SamplerConfig resolve(SamplerConfig c, const NoiseSchedule& schedule) const {
    const std::size_t k = steps.value_or(1);
    if (!sigmas.empty()) {
      c.sigmas = sigmas;
    } else if (!preset.empty()) {
      c.sigmas = preset_sigmas(find_preset(preset), k, schedule.sigma_max);
    } else {
      c.sigmas = k == 1 ? std::vector<double>{schedule.sigma_max} : geometric_sigmas(k, schedule.sigma_max, schedule.sigma_min);
    }
    if (n_samples) c.n_samples = *n_samples;
    if (threads) c.threads = *threads;
    c.validate(schedule);
    return c;
  }
};

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t fallback) {
  if (flag) return *flag;
  if (const char* env = std::getenv("COSTI_SEED")) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw std::invalid_argument(std::string("COSTI_SEED is not an unsigned integer: '") + env + "'");
  }
  return fallback;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::string num(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

std::string trace_csv(const std::vector<TraceRow>& rows) {
  std::string s = "step,N,sigma_i,loss,val_mae\n";
  for (const auto& r : rows) {
    s += std::to_string(r.step) + "," + std::to_string(r.n) + "," + num(r.sigma_i) + "," + num(r.loss) + ",";
    if (r.val_mae) s += num(*r.val_mae);
    s += "\n";
  }
  return s;
}

std::string hardware_description() {
  std::string model = "unknown cpu";
  std::ifstream in("/proc/cpuinfo");
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("model name", 0) == 0) {
      model = line.substr(line.find(':') + 2);
      break;
    }
  }
  return model + ", " + std::to_string(std::thread::hardware_concurrency()) + " hardware threads";
}

Checkpoint<Real> load_model(const std::string& path) { return load_checkpoint<Real>(path); }

int cmd_gen_data(const std::string& out, std::size_t nodes, std::size_t steps, std::uint64_t seed) {
  SynthConfig sc;
  sc.nodes = nodes;
  sc.steps = steps;
  sc.seed = seed;
  const Dataset ds = synth_dataset(sc);
  save_csv(ds, out);
  std::cout << "wrote " << steps << " x " << nodes << " dataset to " << out << "\n";
  return ok;
}

int cmd_train(const DataArgs& data_args, const ModelArgs& margs, const std::optional<std::uint64_t>& seed_flag,
              const std::string& out_dir, bool quiet) {
  RunConfig rc = margs.resolve();
  rc.seed = resolve_seed(seed_flag, rc.seed);
  rc.train.seed = rc.seed;
  const Dataset ds = data_args.load();
  rc.model.data_channels = ds.dims.channels;
  rc.model.validate();
  const PreparedData data = prepare_data(ds, rc.window, rc.train_stride);
  if (margs.epochs || (!margs.preset.empty() && !margs.steps)) {
    const std::size_t epochs = margs.epochs ? *margs.epochs : find_preset(margs.preset).epochs;
    const std::size_t per_epoch = (data.train.size() + rc.train.batch_size - 1) / rc.train.batch_size;
    rc.train.total_steps = epochs * per_epoch;
  }
  const Model<Real> model(rc.model);
  if (!quiet)
    std::cout << "training " << model.parameter_count() << " parameters for " << rc.train.total_steps << " steps on "
              << data.train.size() << " windows\n";
  const std::size_t report_every = std::max<std::size_t>(1, rc.train.total_steps / 20);
  auto result = train(model, data, rc.train, [&](const TraceRow& r) {
    if (!quiet && (r.step + 1) % report_every == 0)
      std::cout << "step " << r.step + 1 << "  N " << r.n << "  loss " << r.loss
                << (r.val_mae ? "  val_mae " + num(*r.val_mae) : std::string()) << "\n";
  });
  Checkpoint<Real> ck{rc.model, rc.train.schedule, data.normalizer, rc.window, std::move(result.best), {}};
  ck.extra = {{"best_step", result.best_step}, {"best_val_mae", result.best_val_mae}, {"config", config_to_json(rc)}};
  fs::create_directories(out_dir);
  const std::string hash = save_checkpoint(ck, (fs::path(out_dir) / "checkpoint.json").string());
  write_text(fs::path(out_dir) / "trace.csv", trace_csv(result.trace));
  nlohmann::json manifest = {{"seed", rc.seed},
                             {"config", config_to_json(rc)},
                             {"config_hash", config_hash(rc)},
                             {"checkpoint_hash", hash},
                             {"best_step", result.best_step},
                             {"best_val_mae", result.best_val_mae},
                             {"seconds", result.seconds}};
  write_text(fs::path(out_dir) / "train_manifest.json", manifest.dump(2) + "\n");
  if (!quiet) std::cout << "best validation MAE " << result.best_val_mae << " at step " << result.best_step << "\n";
  return ok;
}

int cmd_impute(const DataArgs& data_args, const std::string& ck_path, const SamplerArgs& sargs,
               const std::optional<std::uint64_t>& seed_flag, const std::string& out) {
  const auto ck = load_model(ck_path);
  const Dataset ds = data_args.load();
  if (ds.dims.nodes * ds.dims.channels != ck.normalizer.mean.size())
    throw DataError("dataset shape does not match the checkpoint normalization");
  SamplerConfig sc = sargs.resolve(SamplerConfig{}, ck.schedule);
  sc.seed = resolve_seed(seed_flag, 0);
  const Model<Real> model(ck.model);
  const auto filled = impute_series(model, ck.params, ck.schedule, ds, ck.normalizer, ck.window, sc);
  Dataset dense = ds;
  dense.values = filled;
  const fs::path out_path(out);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  for (std::size_t k = 0; k < ds.dims.channels; ++k) {
    const std::string path = ds.dims.channels > 1 ? csv_detail::channel_path(out, k) : out;
    write_values_csv(path, dense, dense.values, k, nullptr);
  }
  nlohmann::json manifest = {{"seed", sc.seed},
                             {"sigmas", sc.sigmas},
                             {"n_samples", sc.n_samples},
                             {"checkpoint_hash", fnv1a_hex(read_file(ck_path))}};
  write_text(out_path.string() + ".manifest.json", manifest.dump(2) + "\n");
  return ok;
}

/// Test windows with a fixed point mask (test-time hidden cells) of `rate`.
std::vector<Window> test_windows(const Dataset& ds, const Checkpoint<Real>& ck, double rate, std::uint64_t seed) {
  std::vector<Window> ws;
  for (auto& w : windowize(ds, ck.window, ck.window, ds.split.val_end, ds.dims.steps))
    ws.push_back(ck.normalizer.apply(std::move(w)));
  if (ws.empty()) throw DataError("test split is shorter than one window");
  return with_point_mask(std::move(ws), rate, seed);
}

int cmd_eval(const DataArgs& data_args, const std::string& ck_path, const SamplerArgs& sargs, double rate,
             const std::optional<std::uint64_t>& seed_flag, const std::string& out) {
  const auto ck = load_model(ck_path);
  const Dataset ds = data_args.load();
  SamplerConfig sc = sargs.resolve(SamplerConfig{}, ck.schedule);
  sc.seed = resolve_seed(seed_flag, 0);
  const auto ws = test_windows(ds, ck, rate, derive_seed(sc.seed, 1));
  const Model<Real> model(ck.model);
  std::vector<MetricReport> reports{
      evaluate_model("costi", model, ck.params, ck.schedule, ws, ck.normalizer, normalized_adjacency<Real>(ds.graph), sc),
      evaluate_baseline_mean(ws, ck.normalizer), evaluate_baseline_linear(ws, ck.normalizer)};
  for (const auto& r : reports) std::cout << r.label << "  MAE " << r.mae << "  MSE " << r.mse << "\n";
  write_text(out + ".csv", reports_to_csv(reports));
  write_text(out + ".json", reports_to_json(reports).dump(2) + "\n");
  return ok;
}

int cmd_bench(const DataArgs& data_args, const std::string& ck_path, const SamplerArgs& sargs,
              const std::optional<std::uint64_t>& seed_flag, const std::string& out_dir, bool timing, bool sensitivity,
              bool ablation, bool sigma_search_flag, const ModelArgs& margs, std::vector<std::size_t> step_counts) {
  const auto ck = load_model(ck_path);
  const Dataset ds = data_args.load();
  SamplerConfig sc = sargs.resolve(SamplerConfig{}, ck.schedule);
  sc.seed = resolve_seed(seed_flag, 0);
  const Model<Real> model(ck.model);
  const auto adjacency = normalized_adjacency<Real>(ds.graph);
  const auto ws = test_windows(ds, ck, 0.25, derive_seed(sc.seed, 1));
  fs::create_directories(out_dir);
  nlohmann::json manifest = {{"hardware", hardware_description()},
                             {"seed", sc.seed},
                             {"sigmas", sc.sigmas},
                             {"n_samples", sc.n_samples},
                             {"checkpoint_hash", fnv1a_hex(read_file(ck_path))}};
  if (ck.extra.contains("config")) {
    RunConfig rc;
    apply_config(rc, ck.extra.at("config"));
    manifest["config_hash"] = config_hash(rc);
  }

  std::vector<MetricReport> quality{evaluate_model("costi", model, ck.params, ck.schedule, ws, ck.normalizer, adjacency, sc),
                                    evaluate_baseline_mean(ws, ck.normalizer),
                                    evaluate_baseline_linear(ws, ck.normalizer)};
  write_text(fs::path(out_dir) / "baselines.csv", reports_to_csv(quality));
  manifest["baselines"] = reports_to_json(quality);
  for (const auto& r : quality) std::cout << r.label << "  MAE " << r.mae << "  MSE " << r.mse << "\n";

  if (timing) {
    const auto rows = timing_bench(model, ck.params, ck.schedule, ws, adjacency, sc, step_counts);
    std::string csv = "steps,wall_seconds,forward_passes,ratio_to_first\n";
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) {
      const double ratio = r.wall_seconds / rows.front().wall_seconds;
      csv += std::to_string(r.steps) + "," + num(r.wall_seconds) + "," + std::to_string(r.forward_passes) + "," +
             num(ratio) + "\n";
      j.push_back({{"steps", r.steps}, {"wall_seconds", r.wall_seconds}, {"forward_passes", r.forward_passes},
                   {"ratio_to_first", ratio}});
      std::cout << "steps " << r.steps << "  " << r.wall_seconds << " s  ratio " << ratio << "\n";
    }
    write_text(fs::path(out_dir) / "timing.csv", csv);
    manifest["timing"] = j;
  }
  if (sensitivity) {
    std::vector<Window> clean;
    for (auto& w : windowize(ds, ck.window, ck.window, ds.split.val_end, ds.dims.steps))
      clean.push_back(ck.normalizer.apply(std::move(w)));
    const auto rows = sensitivity_sweep(model, ck.params, ck.schedule, clean, ck.normalizer, adjacency, sc,
                                        default_missing_rates(), derive_seed(sc.seed, 2));
    std::vector<MetricReport> reps;
    for (const auto& r : rows) reps.push_back(r.report);
    write_text(fs::path(out_dir) / "sensitivity.csv", reports_to_csv(reps));
    manifest["sensitivity"] = reports_to_json(reps);
  }
  if (sigma_search_flag) {
    std::vector<Window> val;
    for (auto& w : windowize(ds, ck.window, ck.window, ds.split.train_end, ds.split.val_end))
      val.push_back(ck.normalizer.apply(std::move(w)));
    if (val.empty()) throw DataError("validation split is shorter than one window");
    val = with_point_mask(std::move(val), 0.25, derive_seed(sc.seed, 4));
    const auto rows = sigma_search(model, ck.params, ck.schedule, val, ck.normalizer, adjacency, sc,
                                   candidate_sigmas(0.05, 5.0, 9));
    std::vector<MetricReport> reps;
    for (const auto& r : rows) reps.push_back(r.report);
    write_text(fs::path(out_dir) / "sigma_search.csv", reports_to_csv(reps));
    const double best = rows[best_sigma_index(rows)].sigma;
    manifest["sigma_search"] = {{"reports", reports_to_json(reps)}, {"best_sigma", best}};
    std::cout << "best second-step sigma " << best << "\n";
  }
  if (ablation) {
    RunConfig rc = margs.resolve();
    rc.seed = sc.seed;
    rc.train.seed = sc.seed;
    rc.model.data_channels = ds.dims.channels;
    const PreparedData data = prepare_data(ds, rc.window, rc.train_stride);
    SamplerConfig one = sc;
    one.sigmas = {ck.schedule.sigma_max};
    const auto rows = ablation_suite<Real>(data, rc.model, rc.train, one, all_ablations());
    std::vector<MetricReport> reps;
    for (const auto& r : rows) reps.push_back(r.report);
    write_text(fs::path(out_dir) / "ablation.csv", reports_to_csv(reps));
    manifest["ablation"] = reports_to_json(reps);
  }
  write_text(fs::path(out_dir) / "bench_manifest.json", manifest.dump(2) + "\n");
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Consistency-model imputation of spatio-temporal time series"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed;
  bool quiet = false;

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset as CSV files");
  std::string gen_out;
  std::size_t gen_nodes = 8, gen_steps = 2000;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--nodes", gen_nodes, "Number of nodes")->capture_default_str();
  gen->add_option("--length", gen_steps, "Number of time steps")->capture_default_str();
  gen->add_option("--seed", seed, "Random seed (default: COSTI_SEED or 0)");

  auto* tr = app.add_subcommand("train", "Train a model; writes checkpoint.json, trace.csv and a manifest");
  DataArgs tr_data;
  ModelArgs tr_model;
  std::string tr_out;
  tr_data.add(tr);
  tr_model.add(tr);
  tr->add_option("--out", tr_out, "Output directory")->required();
  tr->add_option("--seed", seed, "Random seed (default: COSTI_SEED, then the config file, then 0)");
  tr->add_flag("--quiet", quiet, "Suppress progress output");

  auto* im = app.add_subcommand("impute", "Impute every missing cell and write a dense CSV");
  DataArgs im_data;
  SamplerArgs im_sampler;
  std::string im_ck, im_out;
  im_data.add(im);
  im_sampler.add(im);
  im->add_option("--checkpoint", im_ck, "Checkpoint file")->required();
  im->add_option("--out", im_out, "Output CSV")->required();
  im->add_option("--seed", seed, "Random seed (default: COSTI_SEED or 0)");

  auto* ev = app.add_subcommand("eval", "Score the test split under a point-missing mask");
  DataArgs ev_data;
  SamplerArgs ev_sampler;
  std::string ev_ck, ev_out;
  double ev_rate = 0.25;
  ev_data.add(ev);
  ev_sampler.add(ev);
  ev->add_option("--checkpoint", ev_ck, "Checkpoint file")->required();
  ev->add_option("--out", ev_out, "Report path prefix (.csv and .json are appended)")->required();
  ev->add_option("--rate", ev_rate, "Point-missing rate of the test mask")->capture_default_str();
  ev->add_option("--seed", seed, "Random seed (default: COSTI_SEED or 0)");

  auto* be = app.add_subcommand("bench", "Baselines, timing, sensitivity and ablation reports");
  DataArgs be_data;
  SamplerArgs be_sampler;
  ModelArgs be_model;
  std::string be_ck, be_out;
  bool be_timing = false, be_sensitivity = false, be_ablation = false, be_sigma_search = false;
  std::vector<std::size_t> be_steps{1, 2, 50};
  be_data.add(be);
  be_sampler.add(be, false);
  be->add_option("--checkpoint", be_ck, "Checkpoint file")->required();
  be->add_option("--out", be_out, "Output directory")->required();
  be->add_flag("--timing", be_timing, "Wall-clock imputation time per step count");
  be->add_option("--step-counts", be_steps, "Step counts for --timing")->delimiter(',')->capture_default_str();
  be->add_flag("--sensitivity", be_sensitivity, "Sweep point-missing rates 10%..90%");
  be->add_flag("--ablation", be_ablation, "Train and score the ablated models");
  be->add_flag("--sigma-search", be_sigma_search, "Grid-search the second-step noise level on the validation split");
  be->add_option("--config", be_model.config_path, "Run configuration used by --ablation");
  be->add_option("--train-steps", be_model.steps, "Training steps per ablation model");
  be->add_option("--seed", seed, "Random seed (default: COSTI_SEED or 0)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? ok : usage;
  }

  try {
    if (*gen) return cmd_gen_data(gen_out, gen_nodes, gen_steps, resolve_seed(seed, 0));
    if (*tr) return cmd_train(tr_data, tr_model, seed, tr_out, quiet);
    if (*im) return cmd_impute(im_data, im_ck, im_sampler, seed, im_out);
    if (*ev) return cmd_eval(ev_data, ev_ck, ev_sampler, ev_rate, seed, ev_out);
    if (*be)
      return cmd_bench(be_data, be_ck, be_sampler, seed, be_out, be_timing, be_sensitivity, be_ablation, be_sigma_search,
                       be_model,
                       be_steps);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return numeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return data_error;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return data_error;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return data_error;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return data_error;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return usage;
  } catch (const std::out_of_range& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return usage;
  }
  return usage;
}
