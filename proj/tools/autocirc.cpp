// autocirc: command-line pipeline for building models, generating data,
// discovering circuits and evaluating them. Every command writes a run
// manifest from which `autocirc rerun` reproduces it.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "autocirc/acdc.hpp"
#include "autocirc/error.hpp"
#include "autocirc/eval.hpp"
#include "autocirc/io.hpp"
#include "autocirc/maskers.hpp"
#include "autocirc/zoo.hpp"

namespace fs = std::filesystem;
using namespace autocirc;

namespace {

struct RunContext {
  std::string command;
  std::vector<std::string> argv;
  Json inputs = Json::object();
  Json outputs = Json::array();
  Json seeds = Json::object();
  std::string manifest_path;

  void input(const std::string& path) { inputs[path] = file_digest(path); }
  void output(const std::string& path) { outputs.push_back(path); }
};

TaskParams task_params(std::size_t len, std::size_t vocab, std::size_t half) {
  TaskParams p;
  if (len) p.reverse_len = p.xprop_len = len;
  if (vocab) p.reverse_vocab = p.induction_vocab = vocab;
  if (half) p.induction_half = half;
  return p;
}

struct Loaded {
  Model model;
  TaskDataset data;
};

Loaded load_inputs(RunContext& ctx, const std::string& model_path, const std::string& data_path,
                   const std::string& metric) {
  ctx.input(model_path);
  ctx.input(data_path);
  Loaded l{load_model(model_path), load_dataset(data_path)};
  if (!metric.empty()) l.data.metric = parse_metric(metric);
  l.data.validate(l.model.config());
  return l;
}

AcdcConfig acdc_config(const TaskDataset& data, double tau, AblationMode ablation,
                       const std::string& policy, const std::string& removal, const std::string& prune,
                       unsigned threads) {
  AcdcConfig c;
  c.tau = tau;
  c.ablation = ablation;
  c.policy = policy.empty() ? (data.task == "induction" ? ParentPolicy::kAscendingHeads : ParentPolicy::kDefault)
                            : parse_parent_policy(policy);
  c.removal = parse_removal_mode(removal);
  if (prune == "on") c.prune_disconnected = true;
  else if (prune == "off") c.prune_disconnected = false;
  else require(prune == "auto", ErrorKind::kUsage, "--prune must be auto, on or off");
  c.threads = threads;
  c.validate();
  return c;
}

/// Per-edge importance for DOT: the metric increase measured when the edge
/// was tested.
std::vector<double> acdc_edge_scores(const CompGraph& g, const DiscoveryResult& r) {
  std::vector<double> s(g.edge_count(), 0.0);
  for (const AcdcStep& step : r.log) s[step.edge] = std::abs(step.f_after - step.f_before);
  return s;
}

void write_text(RunContext& ctx, const std::string& path, const std::string& text) {
  if (path.empty()) return;
  write_file(path, text);
  ctx.output(path);
}

void write_json(RunContext& ctx, const std::string& path, const Json& j) {
  if (path.empty()) return;
  save_json(path, j);
  ctx.output(path);
}

Json sweep_entry(double param, const Subgraph& h) {
  Json edges = Json::array();
  for (std::size_t e : h.edge_indices()) edges.push_back(to_string(h.graph().edge(e)));
  return {{"param", param}, {"edges", edges}};
}

struct SweepFile {
  std::string method;
  std::vector<double> params;
  std::vector<Subgraph> results;
};

SweepFile load_sweep(RunContext& ctx, const std::string& path, const CompGraph& graph) {
  ctx.input(path);
  const Json j = load_json(path);
  SweepFile s;
  s.method = j.value("method", "");
  require(j.value("graph_fingerprint", "") == graph.fingerprint(), ErrorKind::kFormat,
          path + ": sweep was produced on a different graph");
  require(j.contains("results") && j["results"].is_array(), ErrorKind::kFormat, path + ": missing results");
  for (const Json& r : j["results"]) {
    Json c = {{"graph_fingerprint", graph.fingerprint()}, {"edges", r.at("edges")}};
    s.results.push_back(circuit_from_json(c, graph));
    s.params.push_back(r.at("param").get<double>());
  }
  return s;
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      require(used == item.size(), ErrorKind::kUsage, "bad number '" + item + "'");
    } catch (const std::logic_error&) {
      fail(ErrorKind::kUsage, "bad number '" + item + "'");
    }
  }
  require(!out.empty(), ErrorKind::kUsage, "empty value list");
  return out;
}

int dispatch(const std::vector<std::string>& args);

Json snapshot(const CLI::App* sub) {
  Json config = Json::object();
  for (const CLI::Option* opt : sub->get_options()) {
    if (opt->count() == 0 || opt->get_name() == "--help") continue;
    const auto& res = opt->results();
    config[opt->get_name()] = res.size() == 1 ? Json(res[0]) : Json(res);
  }
  return config;
}

void write_manifest(RunContext& ctx, const CLI::App* sub, double seconds) {
  if (ctx.manifest_path.empty()) return;
  Json m = {{"command", ctx.command},       {"argv", ctx.argv},     {"cwd", fs::current_path().string()},     {"config", snapshot(sub)},
            {"seeds", ctx.seeds},           {"inputs", ctx.inputs}, {"outputs", ctx.outputs},
            {"timing", {{"wall_seconds", seconds}}}};
  save_json(ctx.manifest_path, m);
}

int dispatch(const std::vector<std::string>& args) {
  CLI::App app{"Automated circuit discovery toolkit"};
  app.require_subcommand(1);
  RunContext ctx;
  ctx.argv = args;

  std::string task, out, model_path, data_path, metric, granularity = "heads-qkv", ablation, log_path, dot_path,
                                                                   policy, removal = "direct", prune = "auto",
                                                                   config_path, canonical_path, sweep_path,
                                                                   level = "edge", test_path, manifest;
  std::size_t n = 0, len = 0, vocab = 0, half = 0, steps = 1000;
  std::optional<std::uint64_t> seed;
  std::optional<double> tau_opt, lambda_opt;
  std::optional<std::size_t> k_opt;
  std::string values;
  double lr = 0.05;
  unsigned threads = 1;
  std::string method;

  auto add_manifest = [&](CLI::App* s) {
    s->add_option("--manifest", manifest, "Run manifest path (default: <out>.manifest.json)");
  };
  auto add_io = [&](CLI::App* s) {
    s->add_option("--model", model_path, "Model file (CTM)")->required();
    s->add_option("--data", data_path, "Dataset JSON")->required();
    s->add_option("--metric", metric, "Override the dataset metric");
    s->add_option("--granularity", granularity, "heads|heads-qkv");
    s->add_option("--ablation", ablation, "corrupted|zero");
    s->add_option("--threads", threads, "Worker threads")->check(CLI::Range(1u, 256u));
    s->add_option("--task", task, "Task label, checked against the dataset");
  };
  auto add_method_opts = [&](CLI::App* s) {
    s->add_option("--parent-policy", policy, "default|ascending-heads (ACDC)");
    s->add_option("--removal", removal, "direct|match-model|small-change (ACDC)");
    s->add_option("--prune", prune, "auto|on|off (ACDC)");
    s->add_option("--steps", steps, "SP training steps");
    s->add_option("--lr", lr, "SP learning rate");
    s->add_option("--seed", seed, "Random seed");
  };

  auto* build = app.add_subcommand("build-model", "Write a hand-compiled model");
  build->add_option("--task", task, "or-gate|reverse|xproportion")->required();
  build->add_option("--out", out, "Output CTM")->required();
  build->add_option("--circuit", canonical_path, "Also write the canonical circuit JSON");
  build->add_option("--granularity", granularity, "Granularity of the canonical circuit");
  build->add_option("--len", len, "Sequence length");
  build->add_option("--vocab", vocab, "Vocabulary size (reverse)");
  add_manifest(build);

  auto* gen = app.add_subcommand("gen-data", "Generate a task dataset");
  gen->add_option("--task", task, "or-gate|reverse|xproportion|induction")->required();
  gen->add_option("--n", n, "Number of examples")->required();
  gen->add_option("--seed", seed, "Random seed");
  gen->add_option("--out", out, "Output JSON")->required();
  gen->add_option("--len", len, "Sequence length");
  gen->add_option("--vocab", vocab, "Vocabulary size");
  gen->add_option("--half", half, "Induction half length");
  add_manifest(gen);

  auto* train = app.add_subcommand("train", "Train the induction model");
  train->add_option("--task", task, "induction")->required();
  train->add_option("--config", config_path, "Training config JSON");
  train->add_option("--seed", seed, "Random seed");
  train->add_option("--threads", threads, "Worker threads")->check(CLI::Range(1u, 256u));
  train->add_option("--out", out, "Output CTM")->required();
  train->add_option("--log", log_path, "Loss history JSON");
  add_manifest(train);

  auto* run = app.add_subcommand("run", "Discover one circuit");
  run->add_option("method", method, "acdc|sp|hisp")->required()->check(CLI::IsMember({"acdc", "sp", "hisp"}));
  add_io(run);
  add_method_opts(run);
  run->add_option("--tau", tau_opt, "ACDC threshold (default 0.0575)");
  run->add_option("--lambda", lambda_opt, "SP sparsity weight (default 1)");
  run->add_option("--k", k_opt, "HISP unit count (default: units with nonzero score)");
  run->add_option("--out", out, "Circuit JSON")->required();
  run->add_option("--log", log_path, "Run log JSON");
  run->add_option("--dot", dot_path, "DOT export");
  add_manifest(run);

  auto* sweep = app.add_subcommand("sweep", "Discover circuits over a list of values");
  sweep->add_option("method", method, "acdc|sp|hisp")->required()->check(CLI::IsMember({"acdc", "sp", "hisp"}));
  add_io(sweep);
  add_method_opts(sweep);
  sweep->add_option("--values", values, "Comma-separated tau, lambda or k values")->required();
  sweep->add_option("--out", out, "Sweep JSON")->required();
  add_manifest(sweep);

  auto* ev = app.add_subcommand("eval", "Score sweeps");
  ev->add_option("what", method, "roc|auc|pareto|reset")->required()->check(
      CLI::IsMember({"roc", "auc", "pareto", "reset"}));
  ev->add_option("--model", model_path, "Model file (CTM)")->required();
  ev->add_option("--sweep", sweep_path, "Sweep JSON (roc, auc, pareto)");
  ev->add_option("--canonical", canonical_path, "Canonical circuit JSON (roc, auc)");
  ev->add_option("--level", level, "edge|node (roc, auc)");
  ev->add_option("--data", data_path, "Discovery dataset (reset)");
  ev->add_option("--test", test_path, "Test dataset (pareto, reset)");
  ev->add_option("--metric", metric, "Override the dataset metric");
  ev->add_option("--granularity", granularity, "heads|heads-qkv");
  ev->add_option("--ablation", ablation, "corrupted|zero");
  ev->add_option("--values", values, "Thresholds (reset)");
  ev->add_option("--seed", seed, "Permutation seed (reset)");
  ev->add_option("--threads", threads, "Worker threads")->check(CLI::Range(1u, 256u));
  ev->add_option("--out", out, "Output CSV or JSON")->required();
  add_manifest(ev);

  auto* rerun = app.add_subcommand("rerun", "Repeat a run from its manifest");
  rerun->add_option("--manifest", manifest, "Run manifest")->required();

  std::vector<const char*> cargv{"autocirc"};
  for (const auto& a : args) cargv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargv.size()), cargv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: usage: " << e.what() << "\n";
    return 1;
  }

  if (rerun->parsed()) {
    const Json m = load_json(manifest);
    if (m.contains("cwd")) fs::current_path(m["cwd"].get<std::string>());
    for (const auto& [path, digest] : m.at("inputs").items()) {
      require(fs::exists(path) && file_digest(path) == digest.get<std::string>(), ErrorKind::kFormat,
              "input " + path + " changed since the recorded run");
    }
    return dispatch(m.at("argv").get<std::vector<std::string>>());
  }

  const auto t0 = std::chrono::steady_clock::now();
  CLI::App* sub = app.get_subcommands().front();
  ctx.command = sub->get_name();
  ctx.manifest_path = manifest.empty() ? out + ".manifest.json" : manifest;
  if (seed) ctx.seeds["seed"] = *seed;
  auto need_seed = [&] { require(seed.has_value(), ErrorKind::kUsage, ctx.command + (method.empty() ? "" : " " + method) + " requires --seed"); };
  const Granularity gran = parse_granularity(granularity);

  if (sub == build) {
    const TaskParams p = task_params(len, vocab, 0);
    const ZooModel z = build_task_model(task, p);
    save_model(z.model, out);
    ctx.output(out);
    if (!canonical_path.empty()) {
      const CompGraph g(z.model.config(), gran);
      write_json(ctx, canonical_path, circuit_to_json(g, project_circuit(z.circuit, gran)));
    }
    std::cout << "built " << task << " model\n";
  } else if (sub == gen) {
    need_seed();
    const TaskDataset d = gen_dataset(task, n, *seed, task_params(len, vocab, half));
    save_dataset(out, d);
    ctx.output(out);
    std::cout << "wrote " << d.examples.size() << " examples\n";
  } else if (sub == train) {
    require(task == "induction", ErrorKind::kUsage, "only the induction task is trained");
    need_seed();
    TrainConfig tc;
    if (!config_path.empty()) {
      ctx.input(config_path);
      const Json c = load_json(config_path);
      try {
        tc.vocab = c.value("vocab", tc.vocab);
        tc.half = c.value("half", tc.half);
        tc.d_model = c.value("d_model", tc.d_model);
        tc.d_head = c.value("d_head", tc.d_head);
        tc.n_heads = c.value("n_heads", tc.n_heads);
        tc.n_layers = c.value("n_layers", tc.n_layers);
        tc.steps = c.value("steps", tc.steps);
        tc.batch = c.value("batch", tc.batch);
        tc.learning_rate = c.value("learning_rate", tc.learning_rate);
        tc.init_scale = c.value("init_scale", tc.init_scale);
      } catch (const Json::exception& e) {
        fail(ErrorKind::kFormat, config_path + ": " + e.what());
      }
    }
    tc.seed = *seed;
    tc.threads = threads;
    TrainLog tl;
    const Model m = train_induction(tc, &tl);
    save_model(m, out);
    ctx.output(out);
    write_json(ctx, log_path, {{"loss", tl.loss}});
    std::cout << "final loss " << csv_number(tl.loss.back()) << "\n";
  } else if (sub == run || sub == sweep) {
    const Loaded in = load_inputs(ctx, model_path, data_path, metric);
    require(task.empty() || task == in.data.task, ErrorKind::kUsage,
            "--task " + task + " does not match dataset task " + in.data.task);
    const CompGraph g(in.model.config(), gran);
    const std::vector<double> params =
        sub == sweep ? parse_list(values)
                     : std::vector<double>{method == "acdc" ? tau_opt.value_or(0.0575)
                                           : method == "sp" ? lambda_opt.value_or(1.0)
                                                            : static_cast<double>(k_opt.value_or(0))};
    const AblationMode mode =
        parse_ablation(ablation.empty() ? (method == "sp" ? "zero" : "corrupted") : ablation);
    const SubgraphEvaluator evaluator(in.model, g, in.data, mode, nullptr, threads);
    Json sweep_results = Json::array();
    Subgraph last = Subgraph::empty(g);
    Json log;
    std::optional<std::vector<double>> scores;

    if (method == "acdc") {
      for (double tau : params) {
        const AcdcConfig c = acdc_config(in.data, tau, mode, policy, removal, prune, threads);
        const DiscoveryResult r = acdc_run(evaluator, c);
        sweep_results.push_back(sweep_entry(tau, r.subgraph));
        log = acdc_log_to_json(g, r, c);
        scores = acdc_edge_scores(g, r);
        last = r.subgraph;
      }
    } else if (method == "sp") {
      need_seed();
      for (double lambda : params) {
        SpConfig c;
        c.lambda = lambda;
        c.steps = steps;
        c.learning_rate = lr;
        c.seed = *seed;
        c.ablation = mode;
        c.threads = threads;
        c.validate();
        SpResult r = sp_train(evaluator, mask_units(g), c);
        const MaskSelection sel = sp_finalize(g, r.mask);
        sweep_results.push_back(sweep_entry(lambda, sel.subgraph));
        log = sp_log_to_json(r, c, sel);
        last = sel.subgraph;
      }
    } else {
      const ImportanceTable raw = hisp_scores(evaluator, mask_units(g));
      const ImportanceTable norm = hisp_layer_normalize(raw);
      std::vector<std::size_t> ks;
      for (double v : params) {
        require(v >= 0 && v == std::floor(v), ErrorKind::kUsage, "k must be a non-negative integer");
        ks.push_back(v == 0 && sub == run && !k_opt ? nonzero_units(raw) : static_cast<std::size_t>(v));
      }
      const auto sels = hisp_topk_sweep(norm, g, ks);
      for (std::size_t i = 0; i < ks.size(); ++i) sweep_results.push_back(sweep_entry(static_cast<double>(ks[i]), sels[i].subgraph));
      log = hisp_log_to_json(raw, norm, ks);
      last = sels.back().subgraph;
    }

    if (sub == run) {
      write_json(ctx, out, circuit_to_json(last));
      write_json(ctx, log_path, log);
      write_text(ctx, dot_path, export_dot(g, last, scores));
      std::cout << method << ": " << last.edge_count() << " of " << g.edge_count() << " edges\n";
    } else {
      write_json(ctx, out,
                 {{"method", method},
                  {"graph_fingerprint", g.fingerprint()},
                  {"granularity", to_string(gran)},
                  {"results", sweep_results}});
      std::cout << method << " sweep: " << sweep_results.size() << " results\n";
    }
  } else if (sub == ev) {
    ctx.input(model_path);
    const Model model = load_model(model_path);
    const CompGraph g(model.config(), gran);
    if (method == "roc" || method == "auc") {
      require(!sweep_path.empty() && !canonical_path.empty(), ErrorKind::kUsage,
              "eval " + method + " needs --sweep and --canonical");
      const SweepFile s = load_sweep(ctx, sweep_path, g);
      ctx.input(canonical_path);
      const Subgraph canonical = load_circuit(canonical_path, g);
      require(level == "edge" || level == "node", ErrorKind::kUsage, "--level must be edge or node");
      const RocCurve curve = roc_curve(s.results, canonical,
                                       level == "edge" ? ConfusionLevel::kEdge : ConfusionLevel::kNode, s.params);
      if (method == "roc") {
        std::string csv = "param,fpr,tpr\n";
        for (const RocPoint& p : curve.points)
          csv += csv_number(p.param) + "," + csv_number(p.fpr) + "," + csv_number(p.tpr) + "\n";
        csv += "# auc," + csv_number(pessimistic_auc(curve)) + "\n";
        write_text(ctx, out, csv);
      } else {
        Json pts = Json::array();
        for (const RocPoint& p : curve.points) pts.push_back({{"fpr", p.fpr}, {"tpr", p.tpr}});
        write_json(ctx, out,
                   {{"level", level},
                    {"auc", pessimistic_auc(curve)},
                    {"trapezoid_auc", trapezoid_auc(curve)},
                    {"points", pts}});
      }
      std::cout << "auc " << csv_number(pessimistic_auc(curve)) << "\n";
    } else if (method == "pareto") {
      require(!sweep_path.empty() && !test_path.empty(), ErrorKind::kUsage, "eval pareto needs --sweep and --test");
      const SweepFile s = load_sweep(ctx, sweep_path, g);
      ctx.input(test_path);
      TaskDataset test = load_dataset(test_path);
      if (!metric.empty()) test.metric = parse_metric(metric);
      test.validate(model.config());
      const SubgraphEvaluator te(model, g, test, parse_ablation(ablation.empty() ? "corrupted" : ablation), nullptr,
                                 threads);
      std::string csv = "edges,metric\n";
      for (const SparsityPoint& p : sparsity_frontier(sparsity_curve(te, s.results)))
        csv += std::to_string(p.edges) + "," + csv_number(p.metric) + "\n";
      write_text(ctx, out, csv);
    } else {
      require(!data_path.empty() && !test_path.empty() && !values.empty(), ErrorKind::kUsage,
              "eval reset needs --data, --test and --values");
      need_seed();
      ctx.input(data_path);
      ctx.input(test_path);
      TaskDataset data = load_dataset(data_path), test = load_dataset(test_path);
      if (!metric.empty()) data.metric = test.metric = parse_metric(metric);
      data.validate(model.config());
      test.validate(model.config());
      const Model reset = reset_network(model, *seed);
      const AblationMode mode = parse_ablation(ablation.empty() ? "corrupted" : ablation);
      const std::vector<double> taus = parse_list(values);
      std::vector<std::vector<SparsityPoint>> frontiers;
      for (const Model* m : {&model, &reset}) {
        const SubgraphEvaluator dev(*m, g, data, mode, &model, threads);
        const SubgraphEvaluator tev(*m, g, test, mode, &model, threads);
        std::vector<Subgraph> hs;
        for (const DiscoveryResult& r :
             tau_sweep(dev, acdc_config(data, taus.front(), mode, "", "direct", "auto", threads), taus))
          hs.push_back(r.subgraph);
        frontiers.push_back(sparsity_frontier(sparsity_curve(tev, hs)));
      }
      std::string csv = "edges,trained,reset\n";
      for (const MatchedPoint& r : matched_frontiers(frontiers[0], frontiers[1]))
        csv += std::to_string(r.edges) + "," + csv_number(r.a) + "," + csv_number(r.b) + "\n";
      write_text(ctx, out, csv);
    }
  }

  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_manifest(ctx, sub, seconds);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    return dispatch(args);
  } catch (const Error& e) {
    std::cerr << "error: " << to_string(e.kind()) << ": " << e.what() << "\n";
    return e.kind() == ErrorKind::kUsage ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 2;
  }
}
