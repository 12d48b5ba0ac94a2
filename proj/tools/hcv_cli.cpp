#include <CLI11.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hcv/hcv.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kData = 3, kNumerical = 4 };

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string fmt(double x) { return hcv::io::format_number(x); }

std::string sha256_file(const fs::path& path) {
  const std::string data = hcv::io::read_file(path);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw hcv::Error("sha256 failed for " + path.string());
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---------------------------------------------------------------------------
// Estimator commands
// ---------------------------------------------------------------------------

struct KernelFlags {
  std::string kind = "gaussian";
  double gamma = 0.0;  // 0 = median heuristic

  hcv::SampleBlock block(hcv::Matrix data) const {
    if (kind == "delta") return hcv::delta_block(std::move(data));
    if (kind != "gaussian") throw hcv::ConfigError("kernel: expected gaussian or delta, got '" + kind + "'");
    if (gamma > 0.0) return {std::move(data), hcv::KernelSpec::gaussian(gamma)};
    if (gamma < 0.0) throw hcv::ConfigError("gamma: must be positive (or 0 for the median heuristic)");
    return hcv::median_block(std::move(data));
  }
};

void add_kernel_flags(CLI::App* cmd, KernelFlags& k, const std::string& suffix, const std::string& what) {
  cmd->add_option("--kernel" + suffix, k.kind, "Kernel for " + what + ": gaussian or delta")
      ->check(CLI::IsMember({"gaussian", "delta"}))
      ->capture_default_str();
  cmd->add_option("--gamma" + suffix, k.gamma, "Gaussian gamma for " + what + " (0 = median heuristic)")
      ->capture_default_str();
}

hcv::Matrix columns(const hcv::io::CsvTable& t, const std::string& spec) {
  const auto cols = split_list(spec);
  if (cols.empty()) throw hcv::ConfigError("columns: empty column list");
  return t.numeric(cols);
}

struct HsicArgs {
  std::string input, u, v;
  KernelFlags ku, kv;
  int permutations = 0;
  std::uint64_t seed = 0;
};

void run_hsic(const HsicArgs& a) {
  const auto t = hcv::io::read_csv(a.input);
  const auto u = a.ku.block(columns(t, a.u));
  const auto v = a.kv.block(columns(t, a.v));
  if (a.permutations > 0) {
    const auto r = hcv::permutation_test(u, v, a.permutations, a.seed);
    std::cout << "hsic " << fmt(r.statistic) << "\n";
    std::cout << "p_value " << fmt(r.p_value) << "\n";
  } else {
    std::cout << "hsic " << fmt(hcv::hsic_v_statistic(u, v)) << "\n";
  }
}

struct DhsicArgs {
  std::string input;
  std::vector<std::string> groups;
  KernelFlags kernel;
};

void run_dhsic(const DhsicArgs& a) {
  const auto t = hcv::io::read_csv(a.input);
  if (a.groups.size() < 2) throw hcv::ConfigError("group: at least two --group options are required");
  std::vector<hcv::SampleBlock> blocks;
  for (const auto& g : a.groups) blocks.push_back(a.kernel.block(columns(t, g)));
  std::cout << "dhsic " << fmt(hcv::dhsic_v_statistic(std::span<const hcv::SampleBlock>(blocks))) << "\n";
}

struct MmdArgs {
  std::string input, columns, label;
  bool split_half = false;
  bool weighted = false;
  KernelFlags kernel;
};

void run_mmd(const MmdArgs& a) {
  const auto t = hcv::io::read_csv(a.input);
  const hcv::Matrix z = columns(t, a.columns);
  if (a.split_half == !a.label.empty()) throw hcv::ConfigError("mmd: give exactly one of --label or --split-half");
  if (a.split_half) {
    if (a.weighted) throw hcv::ConfigError("weighted: requires --label");
    if (z.rows() < 2 || z.rows() % 2 != 0) throw hcv::InvalidInput("mmd: --split-half needs an even, nonzero row count");
    const auto half = z.rows() / 2;
    // One bandwidth for both halves, chosen on the pooled sample.
    const auto pooled = a.kernel.block(z);
    const hcv::SampleBlock x{z.topRows(half), pooled.kernel};
    const hcv::SampleBlock y{z.bottomRows(half), pooled.kernel};
    std::cout << "mmd " << fmt(hcv::mmd_v_statistic(x, y)) << "\n";
    return;
  }
  const hcv::Matrix codes = t.numeric({a.label});
  std::vector<std::int64_t> labels;
  for (Eigen::Index i = 0; i < codes.rows(); ++i) {
    if (std::floor(codes(i, 0)) != codes(i, 0)) {
      throw hcv::InvalidInput("csv: line " + std::to_string(i + 2) + ": label column must hold integers");
    }
    labels.push_back(static_cast<std::int64_t>(codes(i, 0)));
  }
  const auto pooled = a.kernel.block(z);
  if (a.weighted) {
    std::cout << "weighted_mmd_sum " << fmt(hcv::weighted_mmd_sum(pooled, labels)) << "\n";
    return;
  }
  std::vector<std::int64_t> classes(labels.begin(), labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() != 2) throw hcv::InvalidInput("mmd: --label needs exactly two classes (use --weighted for more)");
  std::vector<Eigen::Index> rows_a, rows_b;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] == classes[0] ? rows_a : rows_b).push_back(static_cast<Eigen::Index>(i));
  const hcv::SampleBlock x{z(rows_a, Eigen::all), pooled.kernel};
  const hcv::SampleBlock y{z(rows_b, Eigen::all), pooled.kernel};
  std::cout << "mmd " << fmt(hcv::mmd_v_statistic(x, y)) << "\n";
}

// ---------------------------------------------------------------------------
// Linear-Gaussian commands
// ---------------------------------------------------------------------------

hcv::LinGaussDims parse_dims(const std::string& s) {
  const auto parts = split_list(s);
  if (parts.size() != 4) throw hcv::ConfigError("dims: expected latent_v,latent_u,noise_rank,observed");
  int v[4];
  for (int i = 0; i < 4; ++i) {
    try {
      v[i] = std::stoi(parts[static_cast<std::size_t>(i)]);
    } catch (const std::exception&) {
      throw hcv::ConfigError("dims: '" + parts[static_cast<std::size_t>(i)] + "' is not an integer");
    }
  }
  return {v[0], v[1], v[2], v[3]};
}

struct GenArgs {
  std::string dims = "4,4,4,16";
  long rows = 1000;
  std::uint64_t seed = 0;
  double noise_scale = 1.0;
  std::string zero;
  std::string out_csv, out_model;
};

void run_gen(const GenArgs& a) {
  const auto dims = parse_dims(a.dims);
  auto model = hcv::sample_model(dims, hcv::detail::stream_seed(a.seed, 0), a.noise_scale);
  for (const auto& name : split_list(a.zero)) {
    if (name == "A") model.a.setZero();
    else if (name == "B") model.b.setZero();
    else if (name == "C") model.c.setZero();
    else throw hcv::ConfigError("zero: expected a subset of A,B,C, got '" + name + "'");
  }
  const auto data = hcv::generate_data(model, a.rows, hcv::detail::stream_seed(a.seed, 1));
  hcv::io::write_file_atomic(a.out_csv, hcv::io::dataset_to_csv(data));
  hcv::io::write_file_atomic(a.out_model, hcv::io::model_to_json(model, a.seed).dump(2) + "\n");
  std::cout << "wrote " << a.out_csv << " (" << a.rows << " rows) and " << a.out_model << "\n";
}

hcv::Matrix load_observations(const std::string& path, const hcv::LinGaussModel& model) {
  const hcv::Matrix x = hcv::io::observations_from_csv(hcv::io::read_csv(path));
  if (x.cols() != model.dims().observed) {
    throw hcv::InvalidInput("dataset has " + std::to_string(x.cols()) + " observed columns, model expects " +
                            std::to_string(model.dims().observed));
  }
  return x;
}

void run_loglik(const std::string& model_path, const std::string& data_path, bool per_point) {
  const auto model = hcv::io::model_from_json(hcv::io::read_json(model_path));
  const auto x = load_observations(data_path, model);
  const hcv::Vector ll = hcv::marginal_log_likelihood_per_point(model, x);
  if (per_point) {
    for (Eigen::Index i = 0; i < ll.size(); ++i) std::cout << fmt(ll(i)) << "\n";
  }
  std::cout << "loglik " << fmt(ll.mean()) << "\n";
}

void print_matrix(const std::string& name, const hcv::Matrix& m) {
  std::cout << name << " " << m.rows() << " " << m.cols() << "\n";
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) std::cout << (c ? " " : "") << fmt(m(r, c));
    std::cout << "\n";
  }
}

void run_posterior(const std::string& model_path) {
  const auto model = hcv::io::model_from_json(hcv::io::read_json(model_path));
  const auto op = hcv::posterior_operator(model);
  std::cout << "# stacked latent order: v (" << op.latent_v << "), u (" << op.latent_u << ")\n";
  print_matrix("gain", op.gain);
  print_matrix("covariance", op.covariance);
}

void run_gap(const std::string& model_path, const std::string& data_path, const std::string& checkpoint_path) {
  const auto model = hcv::io::model_from_json(hcv::io::read_json(model_path));
  const auto x = load_observations(data_path, model);
  const auto m = hcv::load_checkpoint(hcv::io::read_json(checkpoint_path));
  if (m.observed != model.dims().observed || m.latent_u != model.dims().latent_u || m.latent_v != model.dims().latent_v) {
    throw hcv::InvalidInput("checkpoint dimensions do not match the model");
  }
  const auto gap = hcv::evaluate_gap(m, x, model);
  std::cout << "total_gap " << fmt(gap.total_gap) << "\n";
  std::cout << "marginal_kl_sum " << fmt(gap.marginal_kl_sum) << "\n";
  std::cout << "coupling_term " << fmt(gap.coupling_term) << "\n";
}

// ---------------------------------------------------------------------------
// Training, sweeps and manifests
// ---------------------------------------------------------------------------

/// Config flags; each one that is given overrides the config file.
struct ConfigFlags {
  std::string config_path;
  std::optional<std::string> objective, bandwidth, grouping, decoder, dims, encoder_hidden, decoder_hidden;
  std::optional<double> beta, lambda, gamma, lr, noise_scale;
  std::optional<int> batch_size, epochs, eval_every, n_train, n_test;
  std::optional<std::uint64_t> seed, data_seed;
  bool freeze_decoder_variance = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file (flags override its fields)");
    cmd->add_option("--objective", objective, "vae, beta_vae or hcv");
    cmd->add_option("--beta", beta, "beta-VAE KL weight");
    cmd->add_option("--lambda", lambda, "HCV penalty weight");
    cmd->add_option("--bandwidth", bandwidth, "per_batch_median or fixed");
    cmd->add_option("--gamma", gamma, "Kernel gamma when --bandwidth fixed");
    cmd->add_option("--grouping", grouping, "Penalty grouping: groups or coordinates");
    cmd->add_option("--decoder", decoder, "learned or true_model");
    cmd->add_flag("--freeze-decoder-variance", freeze_decoder_variance, "Fix the learned decoder log-variance at 0");
    cmd->add_option("--batch-size", batch_size);
    cmd->add_option("--epochs", epochs);
    cmd->add_option("--lr", lr);
    cmd->add_option("--seed", seed);
    cmd->add_option("--encoder-hidden", encoder_hidden, "Comma-separated hidden widths");
    cmd->add_option("--decoder-hidden", decoder_hidden, "Comma-separated hidden widths");
    cmd->add_option("--eval-every", eval_every, "Evaluation period in steps (0 = once per epoch)");
    cmd->add_option("--dims", dims, "latent_v,latent_u,noise_rank,observed");
    cmd->add_option("--noise-scale", noise_scale);
    cmd->add_option("--n-train", n_train);
    cmd->add_option("--n-test", n_test);
    cmd->add_option("--data-seed", data_seed);
  }

  hcv::TrainConfig resolve() const {
    hcv::TrainConfig c;
    if (!config_path.empty()) c = hcv::config_from_json(hcv::io::read_json(config_path));
    json o = json::object();
    auto widths = [](const std::string& s) {
      std::vector<int> out;
      for (const auto& w : split_list(s)) {
        try {
          out.push_back(std::stoi(w));
        } catch (const std::exception&) {
          throw hcv::ConfigError("hidden widths: '" + w + "' is not an integer");
        }
      }
      return out;
    };
    if (objective) o["objective"] = *objective;
    if (beta) o["beta"] = *beta;
    if (lambda) o["penalty_weight"] = *lambda;
    if (bandwidth) o["bandwidth"] = *bandwidth;
    if (gamma) o["fixed_gamma"] = *gamma;
    if (grouping) o["grouping"] = *grouping;
    if (decoder) o["decoder"] = *decoder;
    if (freeze_decoder_variance) o["learn_decoder_variance"] = false;
    if (batch_size) o["batch_size"] = *batch_size;
    if (epochs) o["epochs"] = *epochs;
    if (lr) o["lr"] = *lr;
    if (seed) o["seed"] = *seed;
    if (encoder_hidden) o["encoder_hidden"] = widths(*encoder_hidden);
    if (decoder_hidden) o["decoder_hidden"] = widths(*decoder_hidden);
    if (eval_every) o["eval_every"] = *eval_every;
    if (dims) {
      const auto d = parse_dims(*dims);
      o["dims"] = {{"latent_v", d.latent_v}, {"latent_u", d.latent_u}, {"noise_rank", d.noise_rank}, {"observed", d.observed}};
    }
    if (noise_scale) o["noise_scale"] = *noise_scale;
    if (n_train) o["n_train"] = *n_train;
    if (n_test) o["n_test"] = *n_test;
    if (data_seed) o["data_seed"] = *data_seed;
    c = hcv::config_from_json(o, c);
    c.validate();
    return c;
  }
};

const std::vector<std::string> kTraceHeader{"step",      "epoch",     "train_elbo",   "test_elbo",
                                            "test_elbo_se", "test_hsic", "test_pearson", "penalty"};

std::string trace_csv(const std::vector<hcv::TraceRecord>& trace) {
  std::ostringstream out;
  hcv::io::write_csv_row(out, kTraceHeader);
  for (const auto& r : trace) {
    hcv::io::write_csv_row(out, {std::to_string(r.step), std::to_string(r.epoch), fmt(r.train_elbo), fmt(r.test_elbo),
                                 fmt(r.test_elbo_se), fmt(r.test_hsic), fmt(r.test_pearson), fmt(r.penalty)});
  }
  return out.str();
}

// Wall-clock lives apart from the trace so traces stay byte-reproducible.
std::string timings_csv(const std::vector<hcv::TraceRecord>& trace) {
  std::ostringstream out;
  hcv::io::write_csv_row(out, {"step", "wall_clock_seconds"});
  for (const auto& r : trace) hcv::io::write_csv_row(out, {std::to_string(r.step), hcv::io::format_number(r.wall_clock, 6)});
  return out.str();
}

struct Manifest {
  json doc;
  fs::path dir;

  Manifest(const std::string& command, const std::vector<std::string>& argv, const fs::path& out_dir) : dir(out_dir) {
    doc["command"] = command;
    doc["argv"] = argv;
    doc["version"] = hcv::kVersion;
    doc["started"] = utc_now();
    doc["inputs"] = json::object();
    doc["outputs"] = json::array();
  }

  void input(const std::string& path) { doc["inputs"][path] = sha256_file(path); }

  void output(const std::string& name, const std::string& contents) {
    hcv::io::write_file_atomic(dir / name, contents);
    doc["outputs"].push_back(name);
  }

  void finish(const std::string& status) {
    doc["status"] = status;
    doc["finished"] = utc_now();
    hcv::io::write_file_atomic(dir / "manifest.json", doc.dump(2) + "\n");
  }
};

void print_final(const hcv::TraceRecord& r) {
  std::cout << "final step " << r.step << " test_elbo " << fmt(r.test_elbo) << " test_elbo_se " << fmt(r.test_elbo_se)
            << " test_hsic " << fmt(r.test_hsic) << " test_pearson " << fmt(r.test_pearson) << "\n";
}

int execute_train(const hcv::TrainConfig& c, Manifest& manifest, bool with_reference) {
  manifest.doc["config"] = hcv::to_json(c);
  manifest.doc["seed"] = c.seed;
  const auto data = hcv::make_experiment_data(c);
  auto result = hcv::train(c, data);
  manifest.output("trace.csv", trace_csv(result.trace));
  manifest.output("timings.csv", timings_csv(result.trace));
  if (result.diverged) {
    manifest.doc["failure"] = result.failure;
    manifest.finish("diverged");
    std::cerr << "error: training diverged: " << result.failure << " (partial trace kept)\n";
    return kNumerical;
  }
  manifest.output("checkpoint.json", hcv::save_checkpoint(result.model).dump() + "\n");
  manifest.output("model.json", hcv::io::model_to_json(data.model, hcv::detail::stream_seed(c.data_seed, 0)).dump(2) + "\n");
  if (with_reference) {
    const std::uint64_t seeds[] = {c.seed};
    const auto ref = hcv::exact_reference(data, seeds);
    const json j = {{"test_loglik", ref.test_loglik}, {"test_hsic", ref.test_hsic}, {"test_pearson", ref.test_pearson}};
    manifest.output("reference.json", j.dump(2) + "\n");
    std::cout << "reference test_loglik " << fmt(ref.test_loglik) << " test_hsic " << fmt(ref.test_hsic)
              << " test_pearson " << fmt(ref.test_pearson) << "\n";
  }
  manifest.finish("ok");
  print_final(result.trace.back());
  return kOk;
}

std::vector<hcv::SweepPoint> parse_grid(const std::string& s) {
  if (s.empty() || s == "default") return hcv::default_sweep_grid();
  std::vector<hcv::SweepPoint> grid;
  for (const auto& item : split_list(s)) {
    const auto colon = item.find(':');
    hcv::SweepPoint p;
    p.objective = hcv::objective_from_string(item.substr(0, colon));
    if (p.objective != hcv::Objective::vae) {
      if (colon == std::string::npos) throw hcv::ConfigError("grid: '" + item + "' needs a weight (objective:weight)");
      try {
        p.weight = std::stod(item.substr(colon + 1));
      } catch (const std::exception&) {
        throw hcv::ConfigError("grid: bad weight in '" + item + "'");
      }
    }
    grid.push_back(p);
  }
  return grid;
}

json grid_to_json(const std::vector<hcv::SweepPoint>& grid) {
  json out = json::array();
  for (const auto& p : grid) out.push_back({{"objective", hcv::to_string(p.objective)}, {"weight", p.weight}});
  return out;
}

std::vector<hcv::SweepPoint> grid_from_json(const json& j) {
  std::vector<hcv::SweepPoint> grid;
  for (const auto& p : j) grid.push_back({hcv::objective_from_string(p.at("objective").get<std::string>()), p.at("weight").get<double>()});
  return grid;
}

std::string run_file_stem(const hcv::SweepPoint& p, std::uint64_t seed) {
  std::string s = hcv::to_string(p.objective);
  if (p.objective != hcv::Objective::vae) s += "_" + fmt(p.weight);
  return s + "_seed" + std::to_string(seed);
}

int execute_sweep(const hcv::TrainConfig& base, const std::vector<hcv::SweepPoint>& grid,
                  const std::vector<std::uint64_t>& seeds, unsigned threads, Manifest& manifest) {
  manifest.doc["config"] = {{"base", hcv::to_json(base)}, {"grid", grid_to_json(grid)}, {"seeds", seeds}};
  manifest.doc["seed"] = seeds;
  const auto result = hcv::sweep(base, grid, seeds, threads);

  std::ostringstream runs;
  hcv::io::write_csv_row(runs, {"objective", "weight", "seed", "status", "step", "test_elbo", "test_elbo_se", "test_hsic",
                                "test_pearson", "message"});
  for (const auto& r : result.runs) {
    const auto stem = run_file_stem(r.point, r.seed);
    manifest.output("traces/" + stem + ".csv", trace_csv(r.trace));
    std::vector<std::string> row{hcv::to_string(r.point.objective), fmt(r.point.weight), std::to_string(r.seed),
                                 r.failed ? "failed" : "ok"};
    if (!r.trace.empty()) {
      const auto& last = r.trace.back();
      for (auto v : {fmt(static_cast<double>(last.step)), fmt(last.test_elbo), fmt(last.test_elbo_se), fmt(last.test_hsic),
                     fmt(last.test_pearson)}) {
        row.push_back(v);
      }
    } else {
      row.insert(row.end(), 5, "");
    }
    row.push_back(r.message);
    hcv::io::write_csv_row(runs, row);
  }
  manifest.output("sweep_runs.csv", runs.str());

  std::ostringstream summary;
  hcv::io::write_csv_row(summary, {"objective", "weight", "runs", "failed", "test_elbo", "test_elbo_se", "test_hsic",
                                   "test_pearson"});
  for (const auto& row : result.rows) {
    hcv::io::write_csv_row(summary, {hcv::to_string(row.point.objective), fmt(row.point.weight), std::to_string(row.runs),
                                     std::to_string(row.failed), fmt(row.test_elbo), fmt(row.test_elbo_se),
                                     fmt(row.test_hsic), fmt(row.test_pearson)});
  }
  manifest.output("sweep_summary.csv", summary.str());
  const json ref = {{"test_loglik", result.reference.test_loglik},
                    {"test_hsic", result.reference.test_hsic},
                    {"test_pearson", result.reference.test_pearson}};
  manifest.output("reference.json", ref.dump(2) + "\n");

  int failed = 0;
  for (const auto& r : result.runs) failed += r.failed ? 1 : 0;
  manifest.doc["failed_runs"] = failed;
  manifest.finish(failed ? "partial" : "ok");

  std::cout << "reference test_loglik " << fmt(result.reference.test_loglik) << " test_hsic "
            << fmt(result.reference.test_hsic) << " test_pearson " << fmt(result.reference.test_pearson) << "\n";
  for (const auto& row : result.rows) {
    std::cout << row.point.label() << " test_elbo " << fmt(row.test_elbo) << " test_hsic " << fmt(row.test_hsic)
              << " test_pearson " << fmt(row.test_pearson) << " failed " << row.failed << "/" << row.runs << "\n";
  }
  for (const auto& r : result.runs) {
    if (r.failed) std::cerr << "warning: run " << run_file_stem(r.point, r.seed) << " failed: " << r.message << "\n";
  }
  return failed == static_cast<int>(result.runs.size()) ? kNumerical : kOk;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (const auto& item : split_list(s)) {
    try {
      out.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw hcv::ConfigError("seeds: '" + item + "' is not a non-negative integer");
    }
  }
  if (out.empty()) throw hcv::ConfigError("seeds: empty seed list");
  return out;
}

int execute_rerun(const std::string& manifest_path, const fs::path& out_dir, unsigned threads,
                  const std::vector<std::string>& argv) {
  const json old = hcv::io::read_json(manifest_path);
  const auto command = old.at("command").get<std::string>();
  Manifest manifest(command, argv, out_dir);
  manifest.doc["rerun_of"] = manifest_path;
  manifest.input(manifest_path);
  if (command == "train") {
    const auto c = hcv::config_from_json(old.at("config"));
    c.validate();
    return execute_train(c, manifest, old.at("outputs").dump().find("reference.json") != std::string::npos);
  }
  if (command == "sweep") {
    const auto& cfg = old.at("config");
    const auto base = hcv::config_from_json(cfg.at("base"));
    return execute_sweep(base, grid_from_json(cfg.at("grid")), cfg.at("seeds").get<std::vector<std::uint64_t>>(), threads,
                         manifest);
  }
  throw hcv::ConfigError("rerun: manifest command '" + command + "' cannot be rerun");
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Kernel independence estimators, linear-Gaussian oracles and HSIC-penalized VAE training"};
  app.set_version_flag("--version", std::string(hcv::kVersion));
  app.require_subcommand(1);

  HsicArgs hsic;
  auto* c_hsic = app.add_subcommand("hsic", "HSIC V-statistic between two column groups");
  c_hsic->add_option("input", hsic.input, "CSV file")->required();
  c_hsic->add_option("--u", hsic.u, "Comma-separated columns (names or indices) for U")->required();
  c_hsic->add_option("--v", hsic.v, "Comma-separated columns (names or indices) for V")->required();
  add_kernel_flags(c_hsic, hsic.ku, "-u", "U");
  add_kernel_flags(c_hsic, hsic.kv, "-v", "V");
  c_hsic->add_option("--permutations", hsic.permutations, "Permutation test size (0 = statistic only)");
  c_hsic->add_option("--seed", hsic.seed, "Permutation seed");

  DhsicArgs dhsic;
  auto* c_dhsic = app.add_subcommand("dhsic", "dHSIC V-statistic across column groups");
  c_dhsic->add_option("input", dhsic.input, "CSV file")->required();
  c_dhsic->add_option("--group", dhsic.groups, "Comma-separated columns of one group (repeat)")->required();
  add_kernel_flags(c_dhsic, dhsic.kernel, "", "every group");

  MmdArgs mmd;
  auto* c_mmd = app.add_subcommand("mmd", "Squared MMD between row subsets");
  c_mmd->add_option("input", mmd.input, "CSV file")->required();
  c_mmd->add_option("--columns", mmd.columns, "Comma-separated sample columns")->required();
  c_mmd->add_option("--label", mmd.label, "Integer label column that splits the rows");
  c_mmd->add_flag("--split-half", mmd.split_half, "Compare the first half of the rows with the second half");
  c_mmd->add_flag("--weighted", mmd.weighted, "Weighted sum of pairwise class MMDs (equals delta-kernel HSIC)");
  add_kernel_flags(c_mmd, mmd.kernel, "", "the samples");

  auto* c_lin = app.add_subcommand("lingauss", "Linear-Gaussian system tools");
  c_lin->require_subcommand(1);
  GenArgs gen;
  auto* c_gen = c_lin->add_subcommand("gen", "Sample a model and a dataset");
  c_gen->add_option("--dims", gen.dims, "latent_v,latent_u,noise_rank,observed")->capture_default_str();
  c_gen->add_option("--rows", gen.rows)->capture_default_str();
  c_gen->add_option("--seed", gen.seed)->capture_default_str();
  c_gen->add_option("--noise-scale", gen.noise_scale)->capture_default_str();
  c_gen->add_option("--zero", gen.zero, "Comma-separated subset of A,B,C to set to zero");
  c_gen->add_option("--out", gen.out_csv, "Dataset CSV")->required();
  c_gen->add_option("--model-out", gen.out_model, "Model JSON")->required();

  std::string model_path, data_path, checkpoint_path;
  bool per_point = false;
  auto* c_loglik = c_lin->add_subcommand("loglik", "Exact mean per-point marginal log-likelihood");
  c_loglik->add_option("--model", model_path)->required();
  c_loglik->add_option("--data", data_path)->required();
  c_loglik->add_flag("--per-point", per_point, "Also print every row's value");
  auto* c_post = c_lin->add_subcommand("posterior", "Posterior gain and covariance of the stacked (v, u)");
  c_post->add_option("--model", model_path)->required();
  auto* c_gap = c_lin->add_subcommand("gap", "Variational gap decomposition of a trained encoder");
  c_gap->add_option("--model", model_path)->required();
  c_gap->add_option("--data", data_path)->required();
  c_gap->add_option("--checkpoint", checkpoint_path)->required();

  ConfigFlags train_flags;
  std::string out_dir;
  bool with_reference = false;
  auto* c_train = app.add_subcommand("train", "Train one model on generated linear-Gaussian data");
  train_flags.attach(c_train);
  c_train->add_option("--out-dir", out_dir, "Output directory")->required();
  c_train->add_flag("--reference", with_reference, "Also compute the exact-posterior reference metrics");

  ConfigFlags sweep_flags;
  std::string grid_spec = "default", seeds_spec = "0,1,2,3,4";
  unsigned threads = 0;
  auto* c_sweep = app.add_subcommand("sweep", "Objective/weight sweep over several seeds");
  sweep_flags.attach(c_sweep);
  c_sweep->add_option("--grid", grid_spec, "default, or a list like vae,beta_vae:2,hcv:10")->capture_default_str();
  c_sweep->add_option("--seeds", seeds_spec, "Comma-separated training seeds")->capture_default_str();
  c_sweep->add_option("--threads", threads, "Worker threads (0 = all cores)");
  c_sweep->add_option("--out-dir", out_dir, "Output directory")->required();

  std::string manifest_path;
  auto* c_rerun = app.add_subcommand("rerun", "Repeat a train or sweep run from its manifest");
  c_rerun->add_option("manifest", manifest_path)->required();
  c_rerun->add_option("--out-dir", out_dir, "Output directory")->required();
  c_rerun->add_option("--threads", threads, "Worker threads for sweeps (0 = all cores)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*c_hsic) run_hsic(hsic);
    else if (*c_dhsic) run_dhsic(dhsic);
    else if (*c_mmd) run_mmd(mmd);
    else if (*c_gen) run_gen(gen);
    else if (*c_loglik) run_loglik(model_path, data_path, per_point);
    else if (*c_post) run_posterior(model_path);
    else if (*c_gap) run_gap(model_path, data_path, checkpoint_path);
    else if (*c_train) {
      const auto c = train_flags.resolve();
      Manifest manifest("train", args, out_dir);
      if (!train_flags.config_path.empty()) manifest.input(train_flags.config_path);
      return execute_train(c, manifest, with_reference);
    } else if (*c_sweep) {
      const auto base = sweep_flags.resolve();
      const auto grid = parse_grid(grid_spec);
      const auto seeds = parse_seeds(seeds_spec);
      Manifest manifest("sweep", args, out_dir);
      if (!sweep_flags.config_path.empty()) manifest.input(sweep_flags.config_path);
      return execute_sweep(base, grid, seeds, threads, manifest);
    } else if (*c_rerun) {
      return execute_rerun(manifest_path, out_dir, threads, args);
    }
  } catch (const hcv::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const hcv::InvalidInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const hcv::NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumerical;
  } catch (const hcv::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumerical;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kOk;
}
