// prefbench command line: map inspection, pair sampling, synthetic labels,
// reward learning, policy evaluation, analysis reports, tests, and the
// elicitation server.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "prefbench/analysis.hpp"
#include "prefbench/server.hpp"
#include "prefbench/stats.hpp"

namespace {

using namespace prefbench;
using ojson = nlohmann::ordered_json;

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

GridMap load_map(const std::string& path) {
  return parse_map(slurp(path), std::filesystem::path(path).stem().string());
}

// Writes to the file when a path is given, stdout otherwise.
void emit(const std::string& out, const std::string& text) {
  if (out.empty() || out == "-") {
    std::cout << text;
    return;
  }
  std::ofstream f(out, std::ios::binary);
  if (!f) throw Error("cannot write " + out);
  f << text;
}

ModelKind model_arg(const std::string& s) {
  const auto m = parse_model(s);
  if (!m) throw Error("unknown model '" + s + "' (partial_return or regret)");
  return *m;
}

LinearReward weights_arg(const std::vector<double>& w) {
  if (w.size() != kNumFeatures) throw Error("expected 6 reward weights");
  LinearReward r;
  std::copy(w.begin(), w.end(), r.weights.begin());
  return r;
}

// Weights from a train result, a bare JSON array, or {"weights": [...]}.
LinearReward weights_file(const std::string& path) {
  const nlohmann::json j = nlohmann::json::parse(slurp(path));
  const nlohmann::json& w = j.is_array() ? j : j.at("weights");
  return weights_arg(w.get<std::vector<double>>());
}

// A saved set when a path is given, otherwise a freshly generated one.
std::optional<SuccessorFeatureSet> candidate_sfs(ModelKind model, const GridMap& map, int count,
                                                 std::uint64_t seed, const std::string& path) {
  if (model != ModelKind::kRegret) return std::nullopt;
  if (path.empty()) return generate_candidate_sf_set(map, count, seed);
  auto sfs = nlohmann::json::parse(slurp(path)).get<SuccessorFeatureSet>();
  if (sfs.map_fingerprint != map_fingerprint(map)) {
    throw Error("successor features in " + path + " were computed on a different map");
  }
  return sfs;
}

struct MapCmd {
  std::string path;
  bool values = false;
  std::string sf_out;
  int sf_count = 50;
  std::uint64_t sf_seed = 0;

  void run() const {
    const GridMap map = load_map(path);
    const LinearReward gt = LinearReward::ground_truth();
    const ValueTable vt = value_iteration(map, gt);
    ojson j{{"name", map.name()},
            {"width", map.width()},
            {"height", map.height()},
            {"fingerprint", map_fingerprint(map)},
            {"start_states", start_distribution(map).size()},
            {"v_star_mean", mean_over_starts(map, vt.V)},
            {"v_uniform_mean",
             mean_over_starts(map, policy_evaluation(map, Policy::uniform(map), gt))},
            {"iterations", vt.iterations}};
    if (values) {
      auto& rows = j["values"] = ojson::array();
      for (int y = 0; y < map.height(); ++y) {
        ojson row = ojson::array();
        for (int x = 0; x < map.width(); ++x) {
          const int i = map.index(x, y);
          row.push_back(map.is_state(i) ? ojson(vt.value(map.state_at(i))) : ojson(nullptr));
        }
        rows.push_back(std::move(row));
      }
    }
    if (!sf_out.empty()) {
      emit(sf_out, nlohmann::json(generate_candidate_sf_set(map, sf_count, sf_seed)).dump() + '\n');
    }
    std::cout << j.dump(2) << '\n';
  }
};

struct SegmentsCmd {
  std::string map_path;
  int random = 100;
  int terminal = 0;
  std::uint64_t seed = 0;
  std::string out;

  void run() const {
    const GridMap map = load_map(map_path);
    Rng rng(seed);
    std::string text;
    for (const auto& p : sample_pair_pool(map, random, terminal, rng)) {
      ojson j{{"pair_id", p.pair_id},
              {"sigma1", detail::segment_json(p.sigma1, true)},
              {"sigma2", detail::segment_json(p.sigma2, true)}};
      text += j.dump() + '\n';
    }
    emit(out, text);
  }
};

struct SynthCmd {
  std::string map_path;
  std::string model = "regret";
  std::string noise = "noiseless";
  double scale = 1.0;
  int random = 428;
  int terminal = 72;
  std::uint64_t seed = 0;
  std::vector<double> weights;
  std::string out;

  void run() const {
    const GridMap map = load_map(map_path);
    if (noise != "noiseless" && noise != "boltzmann") {
      throw Error("unknown noise '" + noise + "' (noiseless or boltzmann)");
    }
    const PreferenceModelSpec spec{model_arg(model),
                                   noise == "noiseless" ? Noise::kNoiseless : Noise::kBoltzmann, scale};
    const LinearReward w = weights.empty() ? LinearReward::ground_truth() : weights_arg(weights);
    emit(out, write_dataset(synth_dataset(map, w, spec, random, terminal, seed)));
  }
};

struct TrainCmd {
  std::string map_path;
  std::string data;
  std::string model = "regret";
  std::optional<int> epochs;
  std::optional<double> learning_rate;
  std::uint64_t seed = 0;
  int sf_count = 50;
  std::uint64_t sf_seed = 0;
  std::string sfs_path;
  bool curve = false;
  std::string out;

  void run() const {
    const GridMap map = load_map(map_path);
    const PreferenceDataset d = read_dataset(slurp(data), map);
    TrainConfig cfg = TrainConfig::defaults(model_arg(model));
    if (epochs) cfg.epochs = *epochs;
    if (learning_rate) cfg.learning_rate = *learning_rate;
    cfg.seed = seed;
    const auto sfs = candidate_sfs(cfg.model, map, sf_count, sf_seed, sfs_path);
    TrainResult r = train(d, cfg, map, sfs ? &*sfs : nullptr);
    const PolicyScore score = score_learned_reward(map, r.weights, LinearReward::ground_truth());
    nlohmann::json j = r;
    if (!curve) j.erase("loss_curve");
    j["final_loss"] = r.loss_curve.back();
    j["normalized_return"] = score.normalized_return;
    emit(out, j.dump(2) + '\n');
  }
};

struct EvalCmd {
  std::string map_path;
  std::string weights_path;
  std::vector<double> weights;
  std::vector<double> truth;

  void run() const {
    const GridMap map = load_map(map_path);
    if (weights_path.empty() == weights.empty()) {
      throw Error("give exactly one of --weights-file or --weights");
    }
    const LinearReward learned = weights.empty() ? weights_file(weights_path) : weights_arg(weights);
    const LinearReward gt = truth.empty() ? LinearReward::ground_truth() : weights_arg(truth);
    const PolicyScore s = score_learned_reward(map, learned, gt);
    const ojson j{{"normalized_return", s.normalized_return},
                  {"near_optimal", s.normalized_return > kNearOptimal},
                  {"v_pi", s.v_pi},
                  {"v_star", s.v_star},
                  {"v_uniform", s.v_uniform}};
    std::cout << j.dump(2) << '\n';
  }
};

struct AnalyzeCmd {
  std::string map_path;
  std::vector<std::string> datasets;
  std::string model = "regret";
  std::string format = "json";
  bool partition = false;
  std::vector<int> counts{1, 2, 4, 8, 16};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::optional<int> epochs;
  unsigned workers = 1;
  int sf_count = 50;
  std::uint64_t sf_seed = 0;
  std::string sfs_path;
  std::string out;

  void run() const {
    if (format != "json" && format != "csv") throw Error("format must be json or csv");
    const GridMap map = load_map(map_path);
    const ModelKind kind = model_arg(model);
    const LinearReward gt = LinearReward::ground_truth();
    std::vector<NamedDataset> named;
    for (const auto& spec : datasets) {
      const auto eq = spec.find('=');
      const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
      const std::string name =
          eq == std::string::npos ? std::filesystem::path(spec).stem().string() : spec.substr(0, eq);
      named.push_back({name, strict_only(read_dataset(slurp(path), map))});
    }
    ExperimentReport report = analyze_conditions(named, kind, map, gt);
    if (partition) {
      std::vector<PreferenceDataset> ds;
      for (const auto& n : named) ds.push_back(n.data);
      ds = equalize_sizes(ds, 0);
      TrainConfig cfg = TrainConfig::defaults(kind);
      if (epochs) cfg.epochs = *epochs;
      const auto sfs = candidate_sfs(kind, map, sf_count, sf_seed, sfs_path);
      for (std::size_t i = 0; i < named.size(); ++i) {
        PartitionPlan plan;
        plan.partition_counts = counts;
        plan.seeds = seeds;
        plan.label = named[i].name;
        plan.workers = workers;
        for (auto& r : partitioned_learning_experiment(ds[i], plan, cfg, map, gt, sfs ? &*sfs : nullptr)) {
          report.partitions.push_back(std::move(r));
        }
      }
    }
    if (format == "csv") {
      emit(out, report_to_csv(report));
    } else {
      emit(out, nlohmann::json(report).dump(2) + '\n');
    }
  }
};

struct StatsCmd {
  std::string test;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<std::int64_t> table;

  void run() const {
    ojson j{{"test", test}};
    if (test == "mann_whitney") {
      const TestResult r = mann_whitney_u(x, y);
      j["statistic"] = r.statistic;
      j["p_value"] = r.p_value;
    } else if (test == "wilcoxon") {
      if (x.size() != y.size()) throw Error("wilcoxon needs paired samples of equal length");
      std::vector<std::pair<double, double>> pairs;
      for (std::size_t i = 0; i < x.size(); ++i) pairs.emplace_back(x[i], y[i]);
      const TestResult r = wilcoxon_signed_rank(pairs);
      j["statistic"] = r.statistic;
      j["p_value"] = r.p_value;
    } else if (test == "fisher") {
      if (table.size() != 4) throw Error("fisher needs --table a,b,c,d");
      j["p_value"] = fisher_exact(table[0], table[1], table[2], table[3]);
    } else if (test == "spearman") {
      const Correlation r = spearman(x, y);
      j["rho"] = r.rho;
      j["p_value"] = r.p_value;
    } else {
      throw Error("unknown test '" + test + "'");
    }
    std::cout << j.dump(2) << '\n';
  }
};

httplib::Server* g_server = nullptr;

void stop_server(int) {
  if (g_server) g_server->stop();
}

struct ServeCmd {
  std::string config;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::optional<std::string> store;
  std::optional<std::uint64_t> seed;

  void run() const {
    ServiceConfig cfg;
    if (!config.empty()) {
      const std::string base = std::filesystem::path(config).parent_path().string();
      cfg = config_from_json(Json::parse(slurp(config)), base);
    }
    if (store) cfg.store_path = *store;
    if (seed) cfg.seed = *seed;
    ElicitationService service = ElicitationService::from_config(cfg);
    httplib::Server server;
    install_routes(server, service);
    g_server = &server;
    std::signal(SIGINT, stop_server);
    std::signal(SIGTERM, stop_server);
    const int bound = port == 0 ? server.bind_to_any_port(host) : (server.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
    std::fprintf(stderr, "listening on %s:%d\n", host.c_str(), bound);
    server.listen_after_bind();
    g_server = nullptr;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Preference-model benchmark on the delivery gridworld"};
  app.require_subcommand(1);

  MapCmd map_cmd;
  auto* map = app.add_subcommand("map", "Validate a map and print its summary");
  map->add_option("path", map_cmd.path, "Map file")->required()->check(CLI::ExistingFile);
  map->add_flag("--values", map_cmd.values, "Include optimal state values");
  map->add_option("--sf-out", map_cmd.sf_out, "Write a candidate successor-feature set as JSON");
  map->add_option("--sf-count", map_cmd.sf_count)->capture_default_str();
  map->add_option("--sf-seed", map_cmd.sf_seed)->capture_default_str();

  SegmentsCmd seg_cmd;
  auto* seg = app.add_subcommand("segments", "Sample unlabeled segment pairs as JSONL");
  seg->add_option("--map", seg_cmd.map_path)->required()->check(CLI::ExistingFile);
  seg->add_option("--random", seg_cmd.random, "Random pairs")->capture_default_str();
  seg->add_option("--terminal", seg_cmd.terminal, "Terminal pairs")->capture_default_str();
  seg->add_option("--seed", seg_cmd.seed)->capture_default_str();
  seg->add_option("-o,--out", seg_cmd.out);

  SynthCmd synth_cmd;
  auto* synth = app.add_subcommand("synth", "Label sampled pairs with a synthetic annotator");
  synth->add_option("--map", synth_cmd.map_path)->required()->check(CLI::ExistingFile);
  synth->add_option("--model", synth_cmd.model)->capture_default_str();
  synth->add_option("--noise", synth_cmd.noise)->capture_default_str();
  synth->add_option("--scale", synth_cmd.scale)->capture_default_str();
  synth->add_option("--random", synth_cmd.random)->capture_default_str();
  synth->add_option("--terminal", synth_cmd.terminal)->capture_default_str();
  synth->add_option("--seed", synth_cmd.seed)->capture_default_str();
  synth->add_option("--weights", synth_cmd.weights, "Labeling reward (default ground truth)")
      ->delimiter(',');
  synth->add_option("-o,--out", synth_cmd.out);

  TrainCmd train_cmd;
  auto* tr = app.add_subcommand("train", "Learn reward weights from a dataset");
  tr->add_option("--map", train_cmd.map_path)->required()->check(CLI::ExistingFile);
  tr->add_option("--data", train_cmd.data)->required()->check(CLI::ExistingFile);
  tr->add_option("--model", train_cmd.model)->capture_default_str();
  tr->add_option("--epochs", train_cmd.epochs);
  tr->add_option("--lr", train_cmd.learning_rate);
  tr->add_option("--seed", train_cmd.seed)->capture_default_str();
  tr->add_option("--sf-count", train_cmd.sf_count)->capture_default_str();
  tr->add_option("--sf-seed", train_cmd.sf_seed)->capture_default_str();
  tr->add_option("--sfs", train_cmd.sfs_path, "Saved successor-feature set")->check(CLI::ExistingFile);
  tr->add_flag("--curve", train_cmd.curve, "Keep the per-epoch loss curve");
  tr->add_option("-o,--out", train_cmd.out);

  EvalCmd eval_cmd;
  auto* ev = app.add_subcommand("eval", "Normalized return of the policy for learned weights");
  ev->add_option("--map", eval_cmd.map_path)->required()->check(CLI::ExistingFile);
  ev->add_option("--weights-file", eval_cmd.weights_path)->check(CLI::ExistingFile);
  ev->add_option("--weights", eval_cmd.weights)->delimiter(',');
  ev->add_option("--truth", eval_cmd.truth, "Scoring reward (default ground truth)")->delimiter(',');

  AnalyzeCmd an_cmd;
  auto* an = app.add_subcommand("analyze", "Likelihood, accuracy and test report over datasets");
  an->add_option("--map", an_cmd.map_path)->required()->check(CLI::ExistingFile);
  an->add_option("datasets", an_cmd.datasets, "name=path.jsonl entries")->required();
  an->add_option("--model", an_cmd.model)->capture_default_str();
  an->add_option("--format", an_cmd.format)->capture_default_str();
  an->add_flag("--partition", an_cmd.partition, "Run the partitioned learning experiment");
  an->add_option("--counts", an_cmd.counts)->delimiter(',')->capture_default_str();
  an->add_option("--seeds", an_cmd.seeds)->delimiter(',')->capture_default_str();
  an->add_option("--epochs", an_cmd.epochs);
  an->add_option("--workers", an_cmd.workers)->capture_default_str();
  an->add_option("--sf-count", an_cmd.sf_count)->capture_default_str();
  an->add_option("--sf-seed", an_cmd.sf_seed)->capture_default_str();
  an->add_option("--sfs", an_cmd.sfs_path, "Saved successor-feature set")->check(CLI::ExistingFile);
  an->add_option("-o,--out", an_cmd.out);

  StatsCmd st_cmd;
  auto* st = app.add_subcommand("stats", "Run one statistical test");
  st->add_option("test", st_cmd.test, "mann_whitney, wilcoxon, fisher or spearman")
      ->required()
      ->check(CLI::IsMember({"mann_whitney", "wilcoxon", "fisher", "spearman"}));
  st->add_option("--x", st_cmd.x)->delimiter(',');
  st->add_option("--y", st_cmd.y)->delimiter(',');
  st->add_option("--table", st_cmd.table, "a,b,c,d for [[a,b],[c,d]]")->delimiter(',');

  ServeCmd serve_cmd;
  auto* sv = app.add_subcommand("serve", "Run the elicitation HTTP service");
  sv->add_option("--config", serve_cmd.config, "JSON service config")->check(CLI::ExistingFile);
  sv->add_option("--host", serve_cmd.host)->capture_default_str();
  sv->add_option("--port", serve_cmd.port, "0 picks a free port")->capture_default_str();
  sv->add_option("--store", serve_cmd.store, "Event log path");
  sv->add_option("--seed", serve_cmd.seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*map) map_cmd.run();
    if (*seg) seg_cmd.run();
    if (*synth) synth_cmd.run();
    if (*tr) train_cmd.run();
    if (*ev) eval_cmd.run();
    if (*an) an_cmd.run();
    if (*st) st_cmd.run();
    if (*sv) serve_cmd.run();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "prefbench: %s\n", e.what());
    return 1;
  }
  return 0;
}
