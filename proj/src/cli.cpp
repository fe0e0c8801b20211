#include "critgen/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "critgen/checkpoint.hpp"
#include "critgen/config.hpp"
#include "critgen/envs.hpp"
#include "critgen/errors.hpp"
#include "critgen/evalharness.hpp"
#include "critgen/run_dir.hpp"
#include "critgen/search.hpp"
#include "critgen/training.hpp"

namespace critgen {

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_json(RunDir& dir, const std::string& name, const json& doc) {
  dir.write_text(name, doc.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Environment

struct Env {
  std::string kind;
  GmmLandscape gmm;
  IntersectionConfig sim;
  std::size_t dim = 0;
  std::size_t cond_dim = 0;
  std::vector<std::vector<double>> conditions;
  std::vector<std::string> condition_ids;
  Normalizer norm;
  RiskFn risk;

  std::string describe() const {
    return "environment '" + kind + "' has dim " + std::to_string(dim) + " / cond_dim " +
           std::to_string(cond_dim);
  }
};

Env make_env(const ConfigSection& s) {
  Env env;
  env.kind = s.get_string("kind");
  if (env.kind == "gmm") {
    s.check_keys({"kind", "landscape"});
    const auto name = s.get_string("landscape", "four_mode");
    if (name == "four_mode") {
      env.gmm = GmmLandscape::standard_four_mode();
    } else if (name == "far_two_mode") {
      env.gmm = GmmLandscape::far_two_mode();
    } else {
      throw ConfigError(s.where("landscape") + "unknown landscape '" + name +
                        "' (four_mode, far_two_mode)");
    }
    env.dim = env.gmm.dim();
    env.conditions = {{}};
    env.condition_ids = {"default"};
    env.norm = Normalizer::unit(env.dim);
    const auto g = env.gmm;
    env.risk = [g](std::span<const double> x, std::span<const double> y) {
      return gmm_risk(g, x, y);
    };
    return env;
  }
  if (env.kind != "intersection") {
    throw ConfigError(s.where("kind") + "unknown env kind '" + env.kind +
                      "' (gmm, intersection)");
  }
  s.check_keys({"kind", "dt", "steps", "collision_radius", "desired_speed", "time_headway",
                "max_accel", "comfort_decel", "min_gap", "max_decel", "routes"});
  auto& sim = env.sim;
  sim = IntersectionConfig::standard();
  sim.dt = s.get_double("dt", sim.dt);
  sim.steps = s.get_uint("steps", sim.steps);
  sim.collision_radius = s.get_double("collision_radius", sim.collision_radius);
  sim.idm.desired_speed = s.get_double("desired_speed", sim.idm.desired_speed);
  sim.idm.time_headway = s.get_double("time_headway", sim.idm.time_headway);
  sim.idm.max_accel = s.get_double("max_accel", sim.idm.max_accel);
  sim.idm.comfort_decel = s.get_double("comfort_decel", sim.idm.comfort_decel);
  sim.idm.min_gap = s.get_double("min_gap", sim.idm.min_gap);
  sim.idm.max_decel = s.get_double("max_decel", sim.idm.max_decel);
  if (s.has("routes")) {
    std::vector<Route> chosen;
    for (const auto& id : s.get_strings("routes")) {
      const auto it = std::find_if(sim.routes.begin(), sim.routes.end(),
                                   [&](const Route& r) { return r.id == id; });
      if (it == sim.routes.end()) {
        throw ConfigError(s.where("routes") + "unknown route '" + id + "'");
      }
      chosen.push_back(*it);
    }
    sim.routes = std::move(chosen);
  }
  try {
    sim.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(s.where("kind") + e.what());
  }
  env.dim = 4;
  env.cond_dim = sim.condition_dim();
  for (std::size_t i = 0; i < sim.routes.size(); ++i) {
    env.conditions.push_back(sim.condition_vector(i));
    env.condition_ids.push_back(sim.routes[i].id);
  }
  env.norm = sim.normalizer();
  env.risk = make_intersection_risk(sim);
  return env;
}

std::vector<NamedCondition> named_conditions(const Env& env) {
  std::vector<NamedCondition> out;
  for (std::size_t i = 0; i < env.conditions.size(); ++i) {
    out.push_back({env.condition_ids[i], env.conditions[i]});
  }
  return out;
}

void check_model_dims(const FlowModel& model, const std::string& path, const Env& env) {
  if (model.dim() != env.dim || model.cond_dim() != env.cond_dim) {
    throw ArtifactError("checkpoint " + path + " has dim " + std::to_string(model.dim()) +
                        " / cond_dim " + std::to_string(model.cond_dim()) + " but the " +
                        env.describe());
  }
}

// ---------------------------------------------------------------------------
// Model and training sections

FlowArchitecture make_arch(const ConfigSection& s, std::size_t dim, std::size_t cond_dim) {
  s.check_keys({"num_layers", "hidden", "scale_bound"});
  FlowArchitecture arch;
  arch.dim = dim;
  arch.cond_dim = cond_dim;
  arch.num_layers = s.get_uint("num_layers", arch.num_layers);
  if (s.has("hidden")) {
    arch.hidden_dims.clear();
    for (auto h : s.get_uints("hidden")) arch.hidden_dims.push_back(h);
  }
  arch.scale_bound = s.get_double("scale_bound", arch.scale_bound);
  try {
    arch.validate();
  } catch (const ContractError& e) {
    throw ConfigError(s.where("num_layers") + "[flow]: " + e.what());
  }
  return arch;
}

struct TrainSettings {
  TrainConfig train;
  std::size_t final_epochs = 0;
};

TrainSettings make_train(const ConfigSection& s, std::uint64_t seed) {
  s.check_keys({"epochs", "batch_size", "learning_rate", "beta", "weight_floor", "final_epochs"});
  TrainSettings out;
  auto& t = out.train;
  t.epochs = s.get_uint("epochs", t.epochs);
  t.batch_size = s.get_uint("batch_size", t.batch_size);
  t.learning_rate = s.get_double("learning_rate", t.learning_rate);
  t.beta = s.get_double("beta", t.beta);
  t.weight_floor = s.get_double("weight_floor", t.weight_floor);
  t.seed = seed;
  out.final_epochs = s.get_uint("final_epochs", 0);
  try {
    t.validate();
  } catch (const ContractError& e) {
    throw ConfigError(s.where("epochs") + "[train]: " + e.what());
  }
  return out;
}

// WMLE fit of a generator on a finished replay. Empty replays give the
// identity generator.
FlowModel fit_generator(std::vector<WeightedSample>& samples, const FlowArchitecture& arch,
                        const TrainSettings& ts, const FlowModel* prior,
                        std::vector<EpochRecord>* history) {
  if (samples.empty()) return FlowModel(arch);
  assign_weights(samples, prior, ts.train.beta, ts.train.weight_floor);
  TrainConfig tc = ts.train;
  if (ts.final_epochs > 0) tc.epochs = ts.final_epochs;
  tc.seed = mix64(ts.train.seed + 0x5eed);
  tc.batch_size = std::min(tc.batch_size, samples.size());
  auto result = train_generator(samples, arch, tc);
  if (history != nullptr) *history = result.history;
  return std::move(result.model);
}

// ---------------------------------------------------------------------------
// Sampler section

const std::set<std::string> kAdaptiveKeys = {
    "alpha",      "nes_sigma",     "nes_population",   "gamma",           "particles",
    "iterations", "retrain_every", "query_budget",     "restart_patience", "restart_quantile"};
const std::set<std::string> kUniformKeys = {"n"};
const std::set<std::string> kGridKeys = {"grid_steps", "grid_cap"};
const std::set<std::string> kHmcKeys = {"n", "hmc_step_size", "hmc_leapfrog_steps",
                                        "hmc_temperature", "hmc_fd_step"};
const std::set<std::string> kReinforceKeys = {"reinforce_iterations", "reinforce_population",
                                              "reinforce_learning_rate", "reinforce_init_std",
                                              "reinforce_min_std"};

std::set<std::string> sampler_keys(const std::string& method) {
  std::set<std::string> keys{"method"};
  const std::set<std::string>* extra = nullptr;
  if (method == "adaptive") extra = &kAdaptiveKeys;
  if (method == "uniform") extra = &kUniformKeys;
  if (method == "grid") extra = &kGridKeys;
  if (method == "hmc") extra = &kHmcKeys;
  if (method == "reinforce") extra = &kReinforceKeys;
  if (extra != nullptr) keys.insert(extra->begin(), extra->end());
  return keys;
}

SamplerConfig make_sampler(const ConfigSection& s, std::uint64_t seed, std::size_t workers) {
  SamplerConfig c;
  c.alpha = s.get_double("alpha", c.alpha);
  c.nes_sigma = s.get_double("nes_sigma", c.nes_sigma);
  c.nes_population = s.get_uint("nes_population", c.nes_population);
  c.gamma = s.get_double("gamma", c.gamma);
  c.particles = s.get_uint("particles", c.particles);
  c.iterations = s.get_uint("iterations", c.iterations);
  c.retrain_every = s.get_uint("retrain_every", c.retrain_every);
  c.query_budget = s.get_uint("query_budget", c.query_budget);
  c.restart_patience = s.get_uint("restart_patience", c.restart_patience);
  c.restart_quantile = s.get_double("restart_quantile", c.restart_quantile);
  c.seed = seed;
  c.workers = workers;
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw ConfigError(s.where("method") + "[sampler]: " + e.what());
  }
  return c;
}

HmcConfig make_hmc(const ConfigSection& s, std::uint64_t seed) {
  HmcConfig c;
  c.step_size = s.get_double("hmc_step_size", c.step_size);
  c.leapfrog_steps = s.get_uint("hmc_leapfrog_steps", c.leapfrog_steps);
  c.temperature = s.get_double("hmc_temperature", c.temperature);
  c.fd_step = s.get_double("hmc_fd_step", c.fd_step);
  c.seed = seed;
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw ConfigError(s.where("method") + "[sampler]: " + e.what());
  }
  return c;
}

ReinforceConfig make_reinforce(const ConfigSection& s, std::uint64_t seed) {
  ReinforceConfig c;
  c.population = s.get_uint("reinforce_population", c.population);
  c.learning_rate = s.get_double("reinforce_learning_rate", c.learning_rate);
  c.init_std = s.get_double("reinforce_init_std", c.init_std);
  c.min_std = s.get_double("reinforce_min_std", c.min_std);
  c.seed = seed;
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw ConfigError(s.where("method") + "[sampler]: " + e.what());
  }
  return c;
}

// Appends one per-condition run to the combined result; report ledgers are
// made cumulative across conditions.
void append_run(SearchRun& into, SearchRun&& part) {
  const std::uint64_t offset = into.ledger.total();
  const std::size_t it_offset = into.report.size();
  for (auto& r : part.report) {
    r.iteration += it_offset;
    r.ledger += offset;
    into.report.push_back(r);
  }
  for (auto& s : part.samples) into.samples.push_back(std::move(s));
  for (auto& w : part.warnings) into.warnings.push_back(std::move(w));
  into.ledger.exploration += part.ledger.exploration;
  into.ledger.nes += part.ledger.nes;
  into.ledger.evaluation += part.ledger.evaluation;
}

struct SearchOutcome {
  std::string method;
  SearchRun run;
  std::optional<FlowModel> generator;  // set by the adaptive sampler
  std::size_t retrains = 0;
  std::size_t restarts = 0;
  json extra = json::object();
};

struct SearchPlan {
  std::string method;
  SamplerConfig adaptive;
  std::size_t n = 0;
  std::size_t grid_steps = 10;
  std::uint64_t grid_cap = 1'000'000;
  HmcConfig hmc;
  std::size_t reinforce_iterations = 100;
  ReinforceConfig reinforce;
};

SearchPlan make_plan(const ConfigSection& s, std::uint64_t seed, std::size_t workers,
                     bool strict) {
  SearchPlan plan;
  plan.method = s.get_string("method");
  const auto keys = sampler_keys(plan.method);
  if (keys.size() == 1) {
    throw ConfigError(s.where("method") + "unknown sampler method '" + plan.method +
                      "' (adaptive, uniform, grid, hmc, reinforce)");
  }
  if (strict) s.check_keys(keys);
  plan.adaptive = make_sampler(s, seed, workers);
  plan.n = s.get_uint("n", 1000);
  plan.grid_steps = s.get_uint("grid_steps", plan.grid_steps);
  plan.grid_cap = s.get_uint("grid_cap", plan.grid_cap);
  plan.hmc = make_hmc(s, seed);
  plan.reinforce_iterations = s.get_uint("reinforce_iterations", plan.reinforce_iterations);
  plan.reinforce = make_reinforce(s, seed);
  return plan;
}

SearchOutcome run_search(const SearchPlan& plan, const Env& env, const RiskFn& risk,
                         const FlowArchitecture& arch, const TrainSettings& ts,
                         const FlowModel* prior) {
  SearchOutcome out;
  out.method = plan.method;
  const std::uint64_t seed = plan.adaptive.seed;
  if (plan.method == "adaptive") {
    GeneratorTrainer trainer{arch, ts.train, prior, ts.final_epochs};
    auto run = run_adaptive_sampler(risk, env.conditions, plan.adaptive, trainer);
    out.retrains = run.retrains;
    out.restarts = run.particles.restarts;
    out.generator.emplace(std::move(run.generator));
    out.run = std::move(static_cast<SearchRun&>(run));
    return out;
  }
  json reinforce_policies = json::array();
  for (std::size_t c = 0; c < env.conditions.size(); ++c) {
    const auto& y = env.conditions[c];
    const std::uint64_t cseed = mix64(seed + 0x100 + c);
    if (plan.method == "uniform") {
      RandomSource rng(cseed);
      append_run(out.run, uniform_sampler(risk, plan.n, env.dim, y, rng));
    } else if (plan.method == "grid") {
      append_run(out.run, grid_search(risk, plan.grid_steps, env.dim, y, plan.grid_cap));
    } else if (plan.method == "hmc") {
      HmcConfig hc = plan.hmc;
      hc.seed = cseed;
      append_run(out.run, hmc_sampler(risk, plan.n, env.dim, y, hc));
    } else {
      ReinforceConfig rc = plan.reinforce;
      rc.seed = cseed;
      auto run = reinforce_search(risk, plan.reinforce_iterations, env.dim, y, rc);
      reinforce_policies.push_back({{"condition", env.condition_ids[c]},
                                    {"mean", run.mean},
                                    {"stddev", run.stddev},
                                    {"converged", run.converged}});
      append_run(out.run, std::move(static_cast<SearchRun&>(run)));
    }
  }
  if (plan.method == "reinforce") out.extra["policies"] = reinforce_policies;
  return out;
}

// Counts every risk call independently of the searchers' own ledgers.
struct CountedRisk {
  std::shared_ptr<std::atomic<std::uint64_t>> calls =
      std::make_shared<std::atomic<std::uint64_t>>(0);
  RiskFn fn;

  explicit CountedRisk(RiskFn inner) {
    auto counter = calls;
    fn = [inner = std::move(inner), counter](std::span<const double> x,
                                             std::span<const double> y) {
      counter->fetch_add(1, std::memory_order_relaxed);
      return inner(x, y);
    };
  }
  std::uint64_t count() const { return calls->load(); }
};

json ledger_json(const LedgerCounts& l, std::size_t conditions) {
  return {{"total", l.total()},
          {"per_condition", l.total() / std::max<std::size_t>(1, conditions)},
          {"exploration", l.exploration},
          {"nes", l.nes},
          {"evaluation", l.evaluation}};
}

// Modes covered by the replay prefix at each report record.
void write_coverage_series(const std::string& path, const SearchRun& run,
                           const GmmLandscape& landscape) {
  std::vector<double> xs, ys;
  std::vector<std::vector<double>> prefix;
  std::size_t next = 0;
  for (const auto& r : run.report) {
    while (next < run.samples.size() && next < r.ledger) prefix.push_back(run.samples[next++].x);
    if (prefix.empty()) continue;
    xs.push_back(static_cast<double>(r.ledger));
    ys.push_back(static_cast<double>(mode_coverage(prefix, landscape).covered));
  }
  write_series_csv(path, "queries", "replay_modes_covered", xs, ys);
}

// ---------------------------------------------------------------------------
// Commands

struct Common {
  ConfigDocument doc;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::string out;
};

Common load_common(const CliOptions& o) {
  Common c;
  c.doc = ConfigDocument::load(o.config_path);
  const auto& run = c.doc.section_or_empty("run");
  run.check_keys({"seed", "out"});
  c.seed = o.seed ? *o.seed : run.get_uint("seed", 0);
  c.workers = std::max<std::size_t>(1, o.workers);
  if (o.out) {
    c.out = *o.out;
  } else if (run.has("out")) {
    c.out = c.doc.resolve_path(run.get_string("out"));
  } else {
    throw ConfigError(c.doc.source() + ": no output directory: set [run] out or pass --out");
  }
  return c;
}

std::string existing_file(const ConfigDocument& doc, const ConfigSection& s,
                          const std::string& key) {
  const auto path = doc.resolve_path(s.get_string(key));
  if (!fs::is_regular_file(path)) {
    throw ConfigError(s.where(key) + "referenced file does not exist: " + path);
  }
  return path;
}

void finish(RunDir& dir, const Common& c) {
  dir.write_text("config.ini", c.doc.text());
  dir.write_manifest();
}

int cmd_train_prior(const CliOptions& o) {
  auto c = load_common(o);
  c.doc.check_schema({"env", "prior"}, {"run", "flow", "train"});
  const Env env = make_env(c.doc.section("env"));
  if (env.kind != "intersection") {
    throw ConfigError(c.doc.section("env").where("kind") +
                      "train-prior needs kind = intersection");
  }
  const auto& ps = c.doc.section("prior");
  ps.check_keys({"n_train", "n_holdout", "mixture_version", "dump_samples"});
  const auto mixture = SyntheticPriorMixture::standard();
  const auto version = ps.get_uint("mixture_version", static_cast<std::uint64_t>(mixture.version));
  if (version != static_cast<std::uint64_t>(mixture.version)) {
    throw ConfigError(ps.where("mixture_version") + "unsupported mixture_version " +
                      std::to_string(version) + " (have " + std::to_string(mixture.version) + ")");
  }
  const std::size_t n_train = ps.get_uint("n_train", 20000);
  const std::size_t n_holdout = ps.get_uint("n_holdout", 5000);
  const std::size_t n_dump = ps.get_uint("dump_samples", 2000);
  if (n_train == 0) throw ConfigError(ps.where("n_train") + "n_train must be positive");
  const auto arch = make_arch(c.doc.section_or_empty("flow"), env.dim, 0);
  const auto ts = make_train(c.doc.section_or_empty("train"), c.seed);

  RunDir dir(c.out);
  const RandomSource root(c.seed);
  auto to_model = [&](const std::vector<std::vector<double>>& phys) {
    std::vector<std::vector<double>> out;
    for (const auto& p : phys) out.push_back(env.norm.to_model(p));
    return out;
  };
  RandomSource train_rng = root.split(11);
  RandomSource holdout_rng = root.split(12);
  const auto train_phys = synth_prior_data(train_rng, n_train, mixture);
  const auto holdout_phys = synth_prior_data(holdout_rng, n_holdout, mixture);
  const auto train_data = to_model(train_phys);

  TrainConfig tc = ts.train;
  tc.batch_size = std::min(tc.batch_size, train_data.size());
  auto result = train_prior(train_data, arch, tc);
  result.model.normalizer() = env.norm;

  CheckpointMeta meta;
  meta.kind = ModelKind::prior;
  meta.training_seed = c.seed;
  meta.epochs = tc.epochs;
  meta.final_loss = result.history.empty() ? 0.0 : result.history.back().loss;
  save_checkpoint(result.model, meta, dir.file("prior.ckpt.json"));
  dir.record("prior.ckpt.json");
  write_metrics_csv(result.history, dir.file("prior_metrics.csv"));
  dir.record("prior_metrics.csv", false);

  double model_ll = 0.0, mixture_ll = 0.0;
  for (const auto& p : holdout_phys) {
    const auto m = env.norm.to_model(p);
    model_ll += log_prob(result.model, m, {});
    mixture_ll += mixture.log_density_model(m, env.norm);
  }
  const double denom = static_cast<double>(std::max<std::size_t>(1, holdout_phys.size()));
  model_ll /= denom;
  mixture_ll /= denom;

  if (n_dump > 0) {
    RandomSource dump_rng = root.split(13);
    const auto drawn = sample(result.model, n_dump, 1.0, {}, dump_rng);
    std::ostringstream csv;
    csv << "x,y,vx,vy\n";
    for (const auto& m : drawn) {
      const auto p = env.norm.to_physical(m);
      csv << fmt17(p[0]) << ',' << fmt17(p[1]) << ',' << fmt17(p[2]) << ',' << fmt17(p[3]) << '\n';
    }
    dir.write_text("prior_samples.csv", csv.str());
  }

  json summary = {{"command", "train-prior"},
                  {"seed", c.seed},
                  {"mixture_version", mixture.version},
                  {"n_train", n_train},
                  {"n_holdout", n_holdout},
                  {"epochs", tc.epochs},
                  {"final_loss", meta.final_loss},
                  {"heldout_mean_loglik_model", model_ll},
                  {"heldout_mean_loglik_mixture", mixture_ll},
                  {"heldout_gap", mixture_ll - model_ll}};
  write_json(dir, "summary.json", summary);
  finish(dir, c);
  std::cout << "prior held-out mean log-lik " << model_ll << " (mixture " << mixture_ll << ")\n";
  return kExitOk;
}

std::optional<Checkpoint> load_prior(const Common& c, const Env& env, const TrainSettings& ts) {
  if (!c.doc.has("prior")) {
    if (ts.train.beta > 0.0) {
      throw ConfigError(c.doc.source() +
                        ": [train] beta > 0 requires a prior: set [prior] checkpoint");
    }
    return std::nullopt;
  }
  const auto& ps = c.doc.section("prior");
  ps.check_keys({"checkpoint"});
  const auto path = existing_file(c.doc, ps, "checkpoint");
  auto ck = load_checkpoint(path);
  if (ck.model.dim() != env.dim || ck.model.cond_dim() != 0) {
    throw ArtifactError("prior checkpoint " + path + " has dim " + std::to_string(ck.model.dim()) +
                        " / cond_dim " + std::to_string(ck.model.cond_dim()) + " but the " +
                        env.describe() + " (prior needs cond_dim 0)");
  }
  if (!(ck.model.normalizer() == env.norm)) {
    throw ArtifactError("prior checkpoint " + path +
                        " was trained under a different parameter normalization");
  }
  return ck;
}

int cmd_generate(const CliOptions& o) {
  auto c = load_common(o);
  c.doc.check_schema({"env", "sampler"}, {"run", "flow", "train", "prior"});
  const Env env = make_env(c.doc.section("env"));
  const auto arch = make_arch(c.doc.section_or_empty("flow"), env.dim, env.cond_dim);
  const auto ts = make_train(c.doc.section_or_empty("train"), c.seed);
  const auto plan = make_plan(c.doc.section("sampler"), c.seed, c.workers, true);
  const auto prior = load_prior(c, env, ts);
  const FlowModel* prior_model = prior ? &prior->model : nullptr;

  RunDir dir(c.out);
  CountedRisk counted(env.risk);
  auto outcome = run_search(plan, env, counted.fn, arch, ts, prior_model);
  auto& run = outcome.run;
  if (counted.count() != run.ledger.total()) {
    throw std::logic_error("ledger " + std::to_string(run.ledger.total()) + " != risk calls " +
                           std::to_string(counted.count()));
  }

  std::vector<EpochRecord> history;
  FlowModel generator = outcome.generator
                            ? std::move(*outcome.generator)
                            : fit_generator(run.samples, arch, ts, prior_model, &history);
  if (outcome.generator && !run.samples.empty()) {
    assign_weights(run.samples, prior_model, ts.train.beta, ts.train.weight_floor);
  }
  generator.normalizer() = env.norm;

  CheckpointMeta meta;
  meta.kind = ModelKind::generator;
  meta.training_seed = c.seed;
  meta.epochs = ts.final_epochs > 0 ? ts.final_epochs : ts.train.epochs;
  meta.final_loss = history.empty() ? 0.0 : history.back().loss;
  meta.conditions = named_conditions(env);
  save_checkpoint(generator, meta, dir.file("generator.ckpt.json"));
  dir.record("generator.ckpt.json");
  write_replay_csv(run.samples, env.dim, env.cond_dim, dir.file("replay.csv"));
  dir.record("replay.csv");
  write_run_report_csv(run.report, dir.file("run_report.csv"));
  dir.record("run_report.csv");
  if (!history.empty()) {
    write_metrics_csv(history, dir.file("generator_metrics.csv"));
    dir.record("generator_metrics.csv", false);
  }

  json summary = {{"command", "generate"},
                  {"method", outcome.method},
                  {"env", env.kind},
                  {"seed", c.seed},
                  {"dim", env.dim},
                  {"cond_dim", env.cond_dim},
                  {"conditions", env.condition_ids},
                  {"ledger", ledger_json(run.ledger, env.conditions.size())},
                  {"risk_calls", counted.count()},
                  {"replay_size", run.samples.size()},
                  {"warnings", run.warnings}};
  if (plan.method == "adaptive") {
    summary["retrains"] = outcome.retrains;
    summary["restarts"] = outcome.restarts;
  }
  for (auto& [k, v] : outcome.extra.items()) summary[k] = v;
  if (env.kind == "gmm") {
    RandomSource rng = RandomSource(c.seed).split(31);
    const auto drawn = sample(generator, 2000, 1.0, {}, rng);
    const auto cov = mode_coverage(drawn, env.gmm);
    summary["coverage"] = {{"modes_covered", cov.covered},
                           {"modes_total", cov.total},
                           {"hit_fraction", cov.hit_fraction},
                           {"samples", drawn.size()},
                           {"temperature", 1.0}};
    write_coverage_series(dir.file("coverage_over_queries.csv"), run, env.gmm);
    dir.record("coverage_over_queries.csv");
    std::cout << outcome.method << ": generator covers " << cov.covered << "/" << cov.total
              << " modes after " << run.ledger.total() << " queries\n";
  } else {
    std::cout << outcome.method << ": " << run.ledger.total() << " queries\n";
  }
  for (const auto& w : run.warnings) std::cerr << "warning: " << w << "\n";
  write_json(dir, "summary.json", summary);
  finish(dir, c);
  return kExitOk;
}

struct EvalRun {
  std::string dir;
  std::string method;
  std::uint64_t ledger_per_condition = 0;
  std::optional<Checkpoint> ck;
  std::vector<WeightedSample> replay;
};

int cmd_evaluate(const CliOptions& o) {
  auto c = load_common(o);
  c.doc.check_schema({"env", "eval"}, {"run"});
  const Env env = make_env(c.doc.section("env"));
  const auto& es = c.doc.section("eval");
  es.check_keys({"runs", "n_per_condition", "temperature", "correlation_samples"});
  const std::size_t n = es.get_uint("n_per_condition", 500);
  const double temperature = es.get_double("temperature", 0.2);
  const std::size_t n_corr = es.get_uint("correlation_samples", 500);
  if (n == 0) throw ConfigError(es.where("n_per_condition") + "empty evaluation refused");
  if (!(temperature > 0.0)) throw ConfigError(es.where("temperature") + "temperature must be > 0");

  // Validate every referenced artifact before computing anything.
  std::vector<EvalRun> runs;
  for (const auto& rel : es.get_strings("runs")) {
    const auto path = c.doc.resolve_path(rel);
    for (const char* f : {"summary.json", "generator.ckpt.json", "replay.csv"}) {
      if (!fs::is_regular_file(fs::path(path) / f)) {
        throw ConfigError(es.where("runs") + "run directory " + path + " lacks " + f);
      }
    }
    EvalRun r;
    r.dir = path;
    json summary;
    try {
      summary = json::parse(read_file((fs::path(path) / "summary.json").string()));
      r.method = summary.at("method").get<std::string>();
      r.ledger_per_condition = summary.at("ledger").at("per_condition").get<std::uint64_t>();
    } catch (const json::exception& e) {
      throw ArtifactError(path + "/summary.json: " + e.what());
    }
    const auto ck_path = (fs::path(path) / "generator.ckpt.json").string();
    r.ck = load_checkpoint(ck_path);
    check_model_dims(r.ck->model, ck_path, env);
    r.replay = read_replay_csv((fs::path(path) / "replay.csv").string(), env.dim, env.cond_dim);
    runs.push_back(std::move(r));
  }
  if (runs.empty()) throw ConfigError(es.where("runs") + "no runs listed");

  RunDir dir(c.out);
  const RandomSource root(c.seed);
  QueryLedger eval_ledger;
  json summary = {{"command", "evaluate"},
                  {"env", env.kind},
                  {"seed", c.seed},
                  {"n_per_condition", n},
                  {"temperature", temperature},
                  {"conditions", env.condition_ids}};

  // Correlation between risk and generator log-likelihood on fresh samples.
  std::ostringstream corr_csv;
  corr_csv << "method,n,pearson,slope,intercept,status\n";
  json corr_json = json::array();
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = runs[i];
    RandomSource rng = root.split(200 + i);
    std::vector<double> risks, lls;
    const std::size_t per = std::max<std::size_t>(1, n_corr / env.conditions.size());
    for (const auto& y : env.conditions) {
      auto drawn = sample(r.ck->model, per, 1.0, y, rng);
      for (auto& x : drawn) {
        clamp_to_box(x);
        risks.push_back(query_risk(env.risk, x, y, eval_ledger, QueryPhase::evaluation));
        lls.push_back(log_prob(r.ck->model, x, y));
      }
    }
    const std::string label = "ours-" + r.method;
    write_series_csv(dir.file("risk_loglik_" + r.method + ".csv"), "risk", "log_prob", risks, lls);
    dir.record("risk_loglik_" + r.method + ".csv");
    try {
      const auto fit = fit_correlation(risks, lls);
      corr_csv << label << ',' << fit.n << ',' << fmt17(fit.pearson) << ',' << fmt17(fit.slope)
               << ',' << fmt17(fit.intercept) << ",ok\n";
      corr_json.push_back({{"method", label}, {"pearson", fit.pearson}, {"n", fit.n}});
    } catch (const ContractError& e) {
      corr_csv << label << ',' << risks.size() << ",,,,degenerate\n";
      corr_json.push_back({{"method", label}, {"status", e.what()}});
    }
  }
  dir.write_text("correlation.csv", corr_csv.str());
  summary["correlation"] = corr_json;

  std::vector<ComparisonRow> rows;
  if (env.kind == "intersection") {
    std::ostringstream rates_csv;
    rates_csv << "method,condition,collision_rate\n";
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const auto& r = runs[i];
      const auto gen = collision_rate(r.ck->model, env.conditions, n, temperature, env.sim,
                                      mix64(c.seed + 300 + i), c.workers);
      rows.push_back({"ours-" + r.method, r.ledger_per_condition, gen.mean, gen.std,
                      gen.per_condition});
      if (r.method != "adaptive" && !r.replay.empty()) {
        const auto raw = sample_collision_rate(r.replay, env.conditions, env.sim, c.workers);
        rows.push_back({r.method, r.ledger_per_condition, raw.mean, raw.std, raw.per_condition});
      }
    }
    rows = comparison_report(std::move(rows));
    json rows_json = json::array();
    for (const auto& row : rows) {
      for (std::size_t k = 0; k < row.per_condition.size(); ++k) {
        rates_csv << row.method << ',' << env.condition_ids[k] << ','
                  << fmt17(row.per_condition[k]) << '\n';
      }
      rows_json.push_back({{"method", row.method},
                           {"queries_per_condition", row.ledger},
                           {"collision_rate_mean", row.rate_mean},
                           {"collision_rate_std", row.rate_std}});
    }
    dir.write_text("comparison.csv", comparison_csv(rows, env.condition_ids));
    dir.write_text("collision_rates.csv", rates_csv.str());
    summary["comparison"] = rows_json;
  } else {
    std::ostringstream cmp;
    cmp << "method,queries,modes_covered,modes_total\n";
    std::ostringstream cov_csv;
    cov_csv << "method,mode,hit_fraction\n";
    json rows_json = json::array();
    std::vector<std::pair<std::uint64_t, std::string>> order;
    std::vector<std::string> lines(runs.size());
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const auto& r = runs[i];
      RandomSource rng = root.split(300 + i);
      const auto drawn = sample(r.ck->model, n, temperature, {}, rng);
      const auto cov = mode_coverage(drawn, env.gmm);
      const std::string label = "ours-" + r.method;
      lines[i] = label + "," + std::to_string(r.ledger_per_condition) + "," +
                 std::to_string(cov.covered) + "," + std::to_string(cov.total) + "\n";
      order.emplace_back(r.ledger_per_condition, label);
      for (std::size_t m = 0; m < cov.hit_fraction.size(); ++m) {
        cov_csv << label << ',' << m << ',' << fmt17(cov.hit_fraction[m]) << '\n';
      }
      rows_json.push_back({{"method", label},
                           {"queries_per_condition", r.ledger_per_condition},
                           {"modes_covered", cov.covered}});
    }
    std::vector<std::size_t> idx(runs.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return order[a] < order[b]; });
    for (auto i : idx) cmp << lines[i];
    dir.write_text("comparison.csv", cmp.str());
    dir.write_text("coverage.csv", cov_csv.str());
    summary["comparison"] = rows_json;
  }
  summary["evaluation_queries"] = eval_ledger.count();
  write_json(dir, "summary.json", summary);
  finish(dir, c);
  std::cout << "evaluated " << runs.size() << " runs into " << dir.path() << "\n";
  return kExitOk;
}

int cmd_sample(const CliOptions& o) {
  auto c = load_common(o);
  c.doc.check_schema({"sample"}, {"run"});
  const auto& s = c.doc.section("sample");
  s.check_keys({"checkpoint", "n", "temperature", "condition"});
  const auto path = existing_file(c.doc, s, "checkpoint");
  const std::size_t n = s.get_uint("n");
  const double temperature = s.get_double("temperature", 1.0);
  if (!(temperature > 0.0)) {
    throw ConfigError(s.where("temperature") + "temperature must be > 0, got " +
                      s.get_string("temperature"));
  }
  const auto ck = load_checkpoint(path);
  std::vector<double> y;
  if (ck.model.cond_dim() > 0) {
    if (!s.has("condition")) {
      throw ConfigError(s.where("checkpoint") + "conditional checkpoint needs 'condition'");
    }
    const auto id = s.get_string("condition");
    std::string known;
    for (const auto& nc : ck.meta.conditions) {
      if (nc.id == id) y = nc.values;
      known += (known.empty() ? "" : ", ") + nc.id;
    }
    if (y.size() != ck.model.cond_dim()) {
      throw ConfigError(s.where("condition") + "unknown condition id '" + id + "' (known: " +
                        known + ")");
    }
  } else if (s.has("condition") && s.get_string("condition") != "default") {
    throw ConfigError(s.where("condition") + "unknown condition id '" + s.get_string("condition") +
                      "' (unconditional checkpoint)");
  }

  RunDir dir(c.out);
  RandomSource rng = RandomSource(c.seed).split(21);
  const auto drawn = sample(ck.model, n, temperature, y, rng);
  std::ostringstream csv;
  static const char* const kNames4[] = {"x", "y", "vx", "vy"};
  for (std::size_t j = 0; j < ck.model.dim(); ++j) {
    if (j > 0) csv << ',';
    csv << (ck.model.dim() == 4 ? std::string(kNames4[j]) : "x" + std::to_string(j));
  }
  csv << '\n';
  for (const auto& m : drawn) {
    const auto p = ck.model.normalizer().to_physical(m);
    for (std::size_t j = 0; j < p.size(); ++j) csv << (j ? "," : "") << fmt17(p[j]);
    csv << '\n';
  }
  dir.write_text("samples.csv", csv.str());
  finish(dir, c);
  return kExitOk;
}

int cmd_gmm_demo(const CliOptions& o) {
  auto c = load_common(o);
  c.doc.check_schema({"env"}, {"run", "flow", "train", "sampler", "demo"});
  const Env env = make_env(c.doc.section("env"));
  if (env.kind != "gmm") {
    throw ConfigError(c.doc.section("env").where("kind") + "gmm-demo needs kind = gmm");
  }
  const auto arch = make_arch(c.doc.section_or_empty("flow"), env.dim, 0);
  const auto ts = make_train(c.doc.section_or_empty("train"), c.seed);
  const auto& demo = c.doc.section_or_empty("demo");
  demo.check_keys({"budget", "coverage_samples"});
  const std::uint64_t budget = demo.get_uint("budget", 3000);
  const std::size_t n_cov = demo.get_uint("coverage_samples", 2000);

  const auto& ss = c.doc.section_or_empty("sampler");
  std::set<std::string> all{"method"};
  for (const auto* keys : {&kAdaptiveKeys, &kUniformKeys, &kHmcKeys, &kReinforceKeys}) {
    all.insert(keys->begin(), keys->end());
  }
  ss.check_keys(all);
  if (ss.has("method") || ss.has("n") || ss.has("query_budget") ||
      ss.has("reinforce_iterations")) {
    throw ConfigError(c.doc.source() +
                      ": gmm-demo derives method and budgets from [demo] budget; drop "
                      "method, n, query_budget and reinforce_iterations");
  }

  std::vector<SearchPlan> plans;
  SearchPlan base;
  base.adaptive = make_sampler(ss, c.seed, c.workers);
  base.adaptive.query_budget = budget;
  base.adaptive.iterations = static_cast<std::size_t>(budget);
  base.hmc = make_hmc(ss, c.seed);
  base.reinforce = make_reinforce(ss, c.seed);

  auto adaptive = base;
  adaptive.method = "adaptive";
  auto ablation = base;
  ablation.method = "adaptive";
  ablation.adaptive.gamma = 0.0;
  auto uniform = base;
  uniform.method = "uniform";
  uniform.n = budget;
  auto hmc = base;
  hmc.method = "hmc";
  // At most 2d queries per leapfrog gradient plus one energy evaluation per
  // transition, after the initial energy and gradient.
  const std::uint64_t per_transition = hmc.hmc.leapfrog_steps * 2 * env.dim + 1;
  const std::uint64_t startup = 1 + 2 * env.dim;
  hmc.n = budget > startup ? std::max<std::uint64_t>(1, (budget - startup) / per_transition) : 1;
  auto reinforce = base;
  reinforce.method = "reinforce";
  reinforce.reinforce_iterations = std::max<std::uint64_t>(1, budget / reinforce.reinforce.population);

  const std::vector<std::pair<std::string, SearchPlan>> methods = {
      {"adaptive", adaptive},
      {"adaptive-gamma0", ablation},
      {"uniform", uniform},
      {"hmc", hmc},
      {"reinforce", reinforce}};

  RunDir dir(c.out);
  std::ostringstream cmp;
  cmp << "method,queries,generator_modes_covered,native_modes_covered\n";
  json rows = json::array();
  for (std::size_t i = 0; i < methods.size(); ++i) {
    const auto& [label, plan] = methods[i];
    CountedRisk counted(env.risk);
    auto outcome = run_search(plan, env, counted.fn, arch, ts, nullptr);
    FlowModel generator = outcome.generator
                              ? std::move(*outcome.generator)
                              : fit_generator(outcome.run.samples, arch, ts, nullptr, nullptr);
    RandomSource rng = RandomSource(c.seed).split(400 + i);
    const auto drawn = sample(generator, n_cov, 1.0, {}, rng);
    const auto cov = mode_coverage(drawn, env.gmm);
    // What the searcher itself ends with: the chain for HMC, the final
    // Gaussian for REINFORCE, the replay otherwise.
    std::vector<std::vector<double>> native;
    if (label == "reinforce" && outcome.extra.contains("policies")) {
      const auto& pol = outcome.extra["policies"][0];
      const auto mean = pol["mean"].get<std::vector<double>>();
      const auto sd = pol["stddev"].get<std::vector<double>>();
      for (std::size_t k = 0; k < n_cov; ++k) {
        std::vector<double> x(env.dim);
        for (std::size_t j = 0; j < env.dim; ++j) x[j] = mean[j] + sd[j] * rng.gaussian();
        clamp_to_box(x);
        native.push_back(std::move(x));
      }
    } else {
      for (const auto& s : outcome.run.samples) native.push_back(s.x);
    }
    const auto native_cov = native.empty() ? CoverageReport{} : mode_coverage(native, env.gmm);
    cmp << label << ',' << outcome.run.ledger.total() << ',' << cov.covered << ','
        << native_cov.covered << '\n';
    rows.push_back({{"method", label},
                    {"queries", outcome.run.ledger.total()},
                    {"risk_calls", counted.count()},
                    {"generator_modes_covered", cov.covered},
                    {"generator_hit_fraction", cov.hit_fraction},
                    {"native_modes_covered", native_cov.covered},
                    {"native_hit_fraction", native_cov.hit_fraction}});
    std::ostringstream samples_csv;
    samples_csv << "x0,x1\n";
    for (const auto& x : drawn) samples_csv << fmt17(x[0]) << ',' << fmt17(x[1]) << '\n';
    dir.write_text("samples_" + label + ".csv", samples_csv.str());
    write_coverage_series(dir.file("coverage_over_queries_" + label + ".csv"), outcome.run,
                          env.gmm);
    dir.record("coverage_over_queries_" + label + ".csv");
    std::cout << label << ": " << outcome.run.ledger.total() << " queries, generator covers "
              << cov.covered << "/" << cov.total << " modes\n";
  }
  dir.write_text("comparison.csv", cmp.str());
  write_json(dir, "summary.json",
             {{"command", "gmm-demo"}, {"seed", c.seed}, {"budget", budget}, {"methods", rows}});
  finish(dir, c);
  return kExitOk;
}

}  // namespace

int run_command(const CliOptions& options) {
  try {
    if (options.command == "train-prior") return cmd_train_prior(options);
    if (options.command == "generate") return cmd_generate(options);
    if (options.command == "evaluate") return cmd_evaluate(options);
    if (options.command == "sample") return cmd_sample(options);
    if (options.command == "gmm-demo") return cmd_gmm_demo(options);
    std::cerr << "error: unknown command '" << options.command << "'\n";
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const BudgetError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ContractError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "artifact error: " << e.what() << "\n";
    return kExitArtifact;
  } catch (const ArtifactError& e) {
    std::cerr << "artifact error: " << e.what() << "\n";
    return kExitArtifact;
  } catch (const TrainingError& e) {
    std::cerr << "numeric divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const NumericError& e) {
    std::cerr << "numeric divergence: " << e.what() << " (layer " << e.layer() << ")\n";
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

int cli_main(int argc, char** argv) {
  CLI::App app{"critgen: safety-critical scenario generation"};
  app.require_subcommand(1, 1);
  CliOptions options;
  std::uint64_t seed = 0;
  std::string out;
  const std::pair<const char*, const char*> commands[] = {
      {"train-prior", "fit the scenario prior to synthetic traffic"},
      {"generate", "run one searcher and fit a generator to its replay"},
      {"evaluate", "compare run directories by collision rate or mode coverage"},
      {"sample", "draw scenarios from a generator checkpoint"},
      {"gmm-demo", "multimodality comparison on a toy landscape"},
  };
  for (const auto& [name, about] : commands) {
    auto* sub = app.add_subcommand(name, about);
    sub->add_option("--config", options.config_path, "config file")->required();
    sub->add_option("--seed", seed, "overrides [run] seed");
    sub->add_option("--workers", options.workers, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--out", out, "overrides [run] out");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  for (auto* sub : app.get_subcommands()) {
    options.command = sub->get_name();
    if (sub->count("--seed") > 0) options.seed = seed;
    if (sub->count("--out") > 0) options.out = out;
  }
  return run_command(options);
}

}  // namespace critgen
