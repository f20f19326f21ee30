// Acceptance checks. One PASS/FAIL line per criterion; exit status is the
// number of failures. argv[1] is the path of the autocirc CLI binary.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "autocirc/acdc.hpp"
#include "autocirc/error.hpp"
#include "autocirc/eval.hpp"
#include "autocirc/io.hpp"
#include "autocirc/maskers.hpp"
#include "autocirc/metrics.hpp"
#include "autocirc/zoo.hpp"
#include "helpers.hpp"

using namespace autocirc;
using num::Tensor;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool contains(const std::vector<NodeId>& v, const NodeId& n) { return std::find(v.begin(), v.end(), n) != v.end(); }

void graph_counts(Outcome& o) {
  const auto t0 = Clock::now();
  TrainConfig tc;
  const std::size_t induction = CompGraph(tc.model_config(), Granularity::kHeadsQkvMlps).edge_count();
  ModelConfig gpt2;
  gpt2.n_layers = 12;
  gpt2.n_heads = 12;
  gpt2.d_model = 768;
  gpt2.d_head = 64;
  gpt2.d_mlp = 3072;
  gpt2.vocab = 50257;
  gpt2.n_ctx = 1024;
  const std::size_t small = CompGraph(gpt2, Granularity::kHeadsQkvMlps).edge_count();
  const double dt = seconds_since(t0);
  o.check(induction == 305, "induction graph has " + std::to_string(induction) + " edges");
  o.check(small == 32923, "GPT-2 Small graph has " + std::to_string(small) + " edges");
  o.check(dt < 1.0, "runtime");
  o.detail << " induction=" << induction << " gpt2-small=" << small << " (" << dt << " s)";
}

void exact_recovery(Outcome& o) {
  const auto t0 = Clock::now();
  const auto taus = log_space(1e-5, 0.1, 12);
  for (const std::string task : {"reverse", "xproportion"}) {
    const ZooModel z = build_task_model(task);
    const CompGraph g(z.model.config(), Granularity::kHeadsQkvMlps);
    const TaskDataset d = gen_dataset(task, 20, 0);
    const SubgraphEvaluator ev(z.model, g, d, AblationMode::kZero);
    AcdcConfig cfg;
    cfg.ablation = AblationMode::kZero;
    const Subgraph canon = z.circuit.to_subgraph(g);
    std::vector<Subgraph> found;
    std::size_t exact = 0;
    for (const DiscoveryResult& r : tau_sweep(ev, cfg, taus)) {
      exact += r.subgraph == canon;
      found.push_back(r.subgraph);
    }
    const double auc = pessimistic_auc(roc_curve(found, canon, ConfusionLevel::kEdge, taus));
    o.check(exact == taus.size(), task + " recovered at " + std::to_string(exact) + " thresholds");
    o.check(auc == 1.0, task + " AUC");
    o.detail << " " << task << ": " << exact << "/" << taus.size() << " exact, AUC=" << auc << ";";
  }
  const double dt = seconds_since(t0);
  o.check(dt < 60.0, "runtime");
  o.detail << " (" << dt << " s)";
}

void or_gate(Outcome& o) {
  const auto t0 = Clock::now();
  const ZooModel z = build_or_gate_model();
  const CompGraph g(z.model.config(), Granularity::kHeadsQkvMlps);
  const TaskDataset d = gen_dataset("or-gate", 4, 0);
  const SubgraphEvaluator ev(z.model, g, d, AblationMode::kZero);

  AcdcConfig cfg;
  cfg.tau = 0.0575;
  cfg.ablation = AblationMode::kZero;
  const Subgraph acdc = acdc_run(ev, cfg).subgraph;
  const bool e0 = acdc.contains(*g.find_edge("a0.h0->m0.in"));
  const bool e1 = acdc.contains(*g.find_edge("a0.h1->m0.in"));
  o.check(e0 != e1, "ACDC keeps exactly one head->MLP edge");
  o.detail << " ACDC:";
  for (std::size_t e : acdc.edge_indices()) o.detail << " " << to_string(g.edge(e));

  const auto units = mask_units(g);
  const ImportanceTable raw = hisp_scores(ev, units);
  const std::size_t k = nonzero_units(raw);
  const MaskSelection hisp = hisp_topk_sweep(hisp_layer_normalize(raw), g, {k})[0];
  o.check(!contains(hisp.nodes, NodeId::attn(0, 0)) && !contains(hisp.nodes, NodeId::attn(0, 1)),
          "HISP excludes both heads at minimal k");
  o.detail << "; HISP k=" << k << " nodes:";
  for (const NodeId& n : hisp.nodes) o.detail << " " << to_string(n);

  SpConfig sc;
  sc.lambda = 1.0;
  sc.seed = 0;
  SpResult sp = sp_train(ev, units, sc);
  const MaskSelection sel = sp_finalize(g, sp.mask);
  const bool h0 = contains(sel.nodes, NodeId::attn(0, 0)), h1 = contains(sel.nodes, NodeId::attn(0, 1));
  o.check(h0 != h1, "SP keeps exactly one head");
  o.check(sel.nodes.size() >= 2, "SP keeps an extra node");
  o.detail << "; SP nodes:";
  for (const NodeId& n : sel.nodes) o.detail << " " << to_string(n);
  const double dt = seconds_since(t0);
  o.check(dt < 10.0, "runtime");
  o.detail << " (" << dt << " s)";
}

void patching_identities(Outcome& o) {
  Rng rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const ModelConfig c = testutil::random_config(rng);
    const Model m = Model::random(c, rng.next());
    const TaskDataset d = testutil::random_dataset(rng, c, 3, 1 + rng.below(c.n_ctx));
    const ActivationCache cache = build_corrupt_cache(m, d);
    const CompGraph g(c, trial % 2 ? Granularity::kHeadsQkvMlps : Granularity::kHeadsMlps);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const auto& ex = d.examples[i];
      const Tensor full =
          run_subgraph(m, g, Subgraph::full(g), ex.clean, AblationMode::kCorrupted, &cache.examples[i]).logits;
      const Tensor empty =
          run_subgraph(m, g, Subgraph::empty(g), ex.clean, AblationMode::kCorrupted, &cache.examples[i]).logits;
      worst = std::max(worst, num::max_abs_diff(full, forward_example(m, ex.clean).logits));
      worst = std::max(worst, num::max_abs_diff(empty, forward_example(m, ex.corrupted).logits));
    }
  }
  o.check(worst <= 1e-9, "max abs difference");
  o.detail << " 100 models, max |diff| = " << worst;
}

void gradient_fidelity(Outcome& o) {
  Rng rng(2025);
  double worst_sp = 0.0, worst_hisp = 0.0;
  const MetricKind hisp_metrics[] = {MetricKind::kLogitDiff, MetricKind::kNll, MetricKind::kL2,
                                     MetricKind::kProbDiff};
  for (int trial = 0; trial < 12; ++trial) {
    const ModelConfig c = testutil::random_config(rng);
    const Model m = Model::random(c, rng.next());
    const CompGraph g(c, trial % 2 ? Granularity::kHeadsQkvMlps : Granularity::kHeadsMlps);
    const auto units = mask_units(g);

    const TaskDataset kl = testutil::random_dataset(rng, c, 2, 4);
    std::vector<double> alpha(units.size()), u(units.size());
    for (auto& a : alpha) a = 0.3 * rng.normal();
    for (auto& v : u) v = 0.3 + 0.4 * rng.uniform();
    for (AblationMode mode : {AblationMode::kZero, AblationMode::kCorrupted}) {
      const SubgraphEvaluator ev(m, g, kl, mode);
      const num::HardConcrete gate;
      const SpLoss l = sp_loss(ev, units, alpha, u, 1.0, gate, true);
      auto f = [&](const Tensor& a) { return sp_loss(ev, units, std::vector<double>(a.values()), u, 1.0, gate, false).loss; };
      worst_sp = std::max(worst_sp, testutil::rel_error(Tensor::vector(l.grad),
                                                        num::finite_diff_oracle(f, Tensor::vector(alpha), 1e-6)));
    }

    const TaskDataset d = testutil::random_dataset(rng, c, 2, 4, hisp_metrics[trial % 4]);
    const SubgraphEvaluator ev(m, g, d, AblationMode::kCorrupted);
    const auto clean = unit_activations(forward_example(m, d.examples[0].clean), c, units);
    const auto grads = unit_gradients(ev, units, 0);
    for (std::size_t j = 0; j < units.size(); ++j) {
      auto f = [&](const Tensor& x) { return metric_with_unit(ev, units, 0, j, x); };
      worst_hisp = std::max(worst_hisp, testutil::rel_error(grads[j], num::finite_diff_oracle(f, clean[j], 1e-6)));
    }
  }
  o.check(worst_sp <= 1e-4, "SP gradient");
  o.check(worst_hisp <= 1e-4, "HISP gradient");
  o.detail << " max rel error SP=" << worst_sp << " HISP=" << worst_hisp;
}

struct InductionRuns {
  std::vector<SparsityPoint> trained, reset;
};

const std::vector<double> kInductionTaus{0.02, 0.05, 0.1, 0.3};

InductionRuns induction(Outcome& o) {
  const auto t0 = Clock::now();
  TrainConfig tc;
  tc.steps = 500;
  tc.seed = 0;
  // Through the on-disk format, as the CLI would see it.
  const fs::path ctm = fs::temp_directory_path() / "autocirc_acceptance_induction.ctm";
  save_model(train_induction(tc), ctm);
  const Model model = load_model(ctm);
  const double train_s = seconds_since(t0);

  const CompGraph g(model.config(), Granularity::kHeadsQkvMlps);
  const TaskDataset disc = gen_dataset("induction", 20, 1), test = gen_dataset("induction", 50, 2);
  const SubgraphEvaluator dev(model, g, disc, AblationMode::kCorrupted);
  const SubgraphEvaluator tev(model, g, test, AblationMode::kCorrupted);
  AcdcConfig cfg;
  cfg.policy = ParentPolicy::kAscendingHeads;
  const double empty = tev.evaluate(Subgraph::empty(g));

  InductionRuns runs;
  bool any = false;
  o.detail << " empty KL=" << empty << ";";
  const auto results = tau_sweep(dev, cfg, kInductionTaus);
  for (std::size_t i = 0; i < results.size(); ++i) {
    const DiscoveryResult& r = results[i];
    const double kl = tev.evaluate(r.subgraph);
    const std::size_t e = r.subgraph.edge_count();
    const bool comp = has_induction_composition(r.subgraph);
    runs.trained.push_back({e, kl});
    o.detail << " tau=" << kInductionTaus[i] << ": " << e << " edges, KL=" << kl << (comp ? ", composition" : "") << ";";
    any = any || (e <= 0.15 * static_cast<double>(g.edge_count()) && kl <= 0.1 * empty && comp);
  }
  o.check(any, "no threshold meets all three conditions");
  const double dt = seconds_since(t0);
  o.check(dt < 600.0, "runtime");
  o.detail << " (" << train_s << " s training, " << dt << " s total)";

  const Model reset = reset_network(model, 7);
  const SubgraphEvaluator rdev(reset, g, disc, AblationMode::kCorrupted, &model);
  const SubgraphEvaluator rtev(reset, g, test, AblationMode::kCorrupted, &model);
  for (const DiscoveryResult& r : tau_sweep(rdev, cfg, kInductionTaus))
    runs.reset.push_back({r.subgraph.edge_count(), rtev.evaluate(r.subgraph)});
  fs::remove(ctm);
  return runs;
}

void reset_control(Outcome& o, const InductionRuns& runs) {
  const auto matched = matched_frontiers(sparsity_frontier(runs.trained), sparsity_frontier(runs.reset));
  o.check(!matched.empty(), "no matched edge counts");
  std::vector<double> ratios;
  for (const MatchedPoint& p : matched) {
    o.check(p.a < p.b, "trained not below reset at " + std::to_string(p.edges) + " edges");
    ratios.push_back(p.b / p.a);
    o.detail << " " << p.edges << " edges: " << p.a << " vs " << p.b << ";";
  }
  if (ratios.empty()) return;
  std::sort(ratios.begin(), ratios.end());
  const std::size_t n = ratios.size();
  const double median = n % 2 ? ratios[n / 2] : 0.5 * (ratios[n / 2 - 1] + ratios[n / 2]);
  o.check(median >= 1.5, "median ratio");
  o.detail << " median ratio " << median;
}

void metric_suite(Outcome& o) {
  const Tensor p = Tensor::matrix({{0.0, 0.0}});
  const Tensor q = Tensor::matrix({{0.0, std::log(3.0)}});
  const double kl = kl_divergence(p, q, std::vector<std::size_t>{0});
  o.check(std::abs(kl - 0.14384) <= 1e-5, "KL fixture");

  Rng rng(5);
  bool same = true;
  for (int i = 0; i < 100000; ++i) {
    const double tau = 1e-3 + rng.uniform(), fh = rng.uniform();
    const double fnew = rng.below(10) == 0 ? fh + tau : 2.0 * rng.uniform();
    same = same && removal_condition({RemovalMode::kMatchModel, tau}, fh, fnew, 0.0) ==
                       removal_condition({RemovalMode::kDirect, tau}, fh, fnew, 0.0);
  }
  o.check(same, "match-model equals direct under KL");
  o.check(!removal_condition({RemovalMode::kDirect, 0.5}, 0.25, 0.75, 0.0), "tie at tau rejected");
  o.check(removal_condition({RemovalMode::kDirect, 0.5}, 0.25, 0.7499, 0.0), "below tau accepted");

  const double perfect = pessimistic_auc(pareto_roc({{0.0, 1.0, 0.0}}));
  const double quarter = pessimistic_auc(pareto_roc({{0.5, 0.5, 0.0}}));
  const double none = pessimistic_auc(pareto_roc({{1.0, 0.0, 0.0}}));
  o.check(perfect == 1.0 && quarter == 0.25 && none == 0.0, "AUC fixtures");
  o.detail << " KL=" << kl << " AUC fixtures " << perfect << "/" << quarter << "/" << none;
}

std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return out + "'";
}

void reproducibility(Outcome& o, const std::string& cli) {
  if (cli.empty() || !fs::exists(cli)) {
    o.check(false, "CLI binary not found");
    return;
  }
  const fs::path dir = fs::temp_directory_path() / "autocirc_acceptance_cli";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string exe = shell_quote(fs::absolute(cli).string());
  auto run = [&](const std::string& args) {
    const std::string cmd = "cd " + shell_quote(dir.string()) + " && " + exe + " " + args + " > /dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    o.check(rc == 0, "command failed: " + args);
  };

  const std::vector<std::pair<std::string, std::vector<std::string>>> commands{
      {"build-model --task reverse --out rev.ctm --circuit canon.json", {"rev.ctm", "canon.json"}},
      {"gen-data --task reverse --n 12 --seed 1 --out disc.json", {"disc.json"}},
      {"gen-data --task reverse --n 12 --seed 2 --out test.json", {"test.json"}},
      {"run acdc --model rev.ctm --data disc.json --ablation zero --tau 0.01 --out acdc.json --dot acdc.dot",
       {"acdc.json", "acdc.dot"}},
      {"run sp --model rev.ctm --data disc.json --steps 50 --seed 0 --out sp.json --dot sp.dot", {"sp.json", "sp.dot"}},
      {"run hisp --model rev.ctm --data disc.json --out hisp.json --dot hisp.dot", {"hisp.json", "hisp.dot"}},
      {"sweep acdc --model rev.ctm --data disc.json --ablation zero --values 1e-4,1e-3,1e-2,0.1 --out sweep.json",
       {"sweep.json"}},
      {"eval roc --model rev.ctm --sweep sweep.json --canonical canon.json --out roc.csv", {"roc.csv"}},
      {"eval pareto --model rev.ctm --sweep sweep.json --test test.json --ablation zero --out pareto.csv",
       {"pareto.csv"}},
      {"eval reset --model rev.ctm --data disc.json --test test.json --values 0.01,0.1 --seed 7 --out reset.csv",
       {"reset.csv"}},
  };
  std::vector<std::string> outputs;
  for (const auto& [args, outs] : commands) {
    run(args);
    for (const std::string& f : outs) {
      if (!fs::exists(dir / f)) {
        o.check(false, "missing output " + f);
        continue;
      }
      fs::copy_file(dir / f, dir / (f + ".first"), fs::copy_options::overwrite_existing);
      outputs.push_back(f);
    }
  }
  if (!o.pass) return;

  std::size_t identical = 0;
  for (const auto& [args, outs] : commands) {
    run("rerun --manifest " + outs.front() + ".manifest.json");
  }
  for (const std::string& f : outputs) {
    const bool same = read_file(dir / f) == read_file(dir / (f + ".first"));
    o.check(same, f + " differs after rerun");
    identical += same;
  }
  o.detail << " " << commands.size() << " commands, " << identical << "/" << outputs.size()
           << " outputs byte-identical after rerun";
  if (o.pass) fs::remove_all(dir);
}

}  // namespace

int main(int argc, char** argv) {
  const std::string cli = argc > 1 ? argv[1] : "";
  int failures = 0;
  InductionRuns runs;
  const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria{
      {"graph edge counts", graph_counts},
      {"exact recovery on compiled models", exact_recovery},
      {"OR gate", or_gate},
      {"patching identities", patching_identities},
      {"gradient fidelity", gradient_fidelity},
      {"induction structure", [&](Outcome& o) { runs = induction(o); }},
      {"reset-network control", [&](Outcome& o) { reset_control(o, runs); }},
      {"metric and condition fixtures", metric_suite},
      {"CLI reproducibility", [&](Outcome& o) { reproducibility(o, cli); }},
  };
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      criteria[i].second(o);
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    failures += !o.pass;
    std::printf("%s %zu %s:%s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.str().c_str());
    std::fflush(stdout);
  }
  return failures;
}
