// temprec: generate data, train the components, evaluate, ablate, ensemble.
#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "temprec/datagen.hpp"
#include "temprec/ensemble.hpp"
#include "temprec/history.hpp"
#include "temprec/metrics.hpp"
#include "temprec/mf.hpp"
#include "temprec/seq.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace temprec;

namespace {

#ifndef TEMPREC_GIT_REV
#define TEMPREC_GIT_REV "unknown"
#endif
constexpr const char* kVersion = "temprec 1.0.0+" TEMPREC_GIT_REV;

struct Common {
  std::string data_dir = "data";
  std::string out_dir = "run";
  std::uint64_t seed = 1;
  bool deterministic = true;
  int train_end = 0;  // 0 = auto
  int target = 0;     // 0 = auto
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--data-dir", c.data_dir, "dataset directory");
  sub->add_option("--out-dir", c.out_dir, "run output directory");
  sub->add_option("--seed", c.seed, "master seed");
  sub->add_flag("--deterministic,!--no-deterministic", c.deterministic,
                "fixed seeds and bit-reproducible artifacts (default on)")
      ->default_str("true");
}

void add_weeks(CLI::App* sub, Common& c) {
  sub->add_option("--train-end", c.train_end, "last training week (default: before target)");
  sub->add_option("--target", c.target, "evaluation week (default: last week)");
}

// --no-deterministic without an explicit --seed draws one so repeated runs differ
void resolve_seed(const CLI::App* sub, Common& c) {
  if (!c.deterministic && sub->count("--seed") == 0)
    c.seed = (std::uint64_t(std::random_device{}()) << 32) ^ std::random_device{}();
}

// keeps only the active subcommand's section so the file replays cleanly
std::string resolved_config(const CLI::App& app, const std::string& name) {
  std::istringstream all(app.config_to_str(true, true));
  std::string line, out, pending;
  while (std::getline(all, line)) {
    if (line.empty() || line[0] == '#') {
      pending += line + "\n";
      continue;
    }
    auto dot = line.find('.');
    if (dot == std::string::npos || line.substr(0, dot) == name) {
      out += pending + line + "\n";
    }
    pending.clear();
  }
  return out;
}

void finish_run(const CLI::App& app, const Common& c, const std::string& name, json report,
                const std::string& human) {
  fs::create_directories(c.out_dir);
  report["command"] = name;
  report["version"] = kVersion;
  report["seed"] = c.seed;
  report["deterministic"] = c.deterministic;
  std::ofstream(fs::path(c.out_dir) / "report.json") << report.dump(2) << "\n";
  std::ofstream(fs::path(c.out_dir) / "report.txt") << human;
  std::ofstream(fs::path(c.out_dir) / "config_resolved.toml")
      << "# " << kVersion << "\n"
      << resolved_config(app, name);
  std::fputs(human.c_str(), stdout);
}

DatasetBundle load_data(const Common& c) { return load_bundle(c.data_dir); }

WeekSplit make_split(const DatasetBundle& bundle, Common& c, int gap = 1) {
  if (c.target == 0) c.target = bundle.last_week;
  if (c.train_end == 0) c.train_end = c.target - gap;
  return split_by_week(bundle, c.train_end, c.target);
}

std::vector<Id> truth_users(const Truth& truth) {
  std::vector<Id> users;
  for (const auto& [u, _] : truth) users.push_back(u);
  return users;
}

double mean_precision(const std::vector<RankedList>& preds, const Truth& truth, int n) {
  double sum = 0;
  std::size_t count = 0;
  std::map<Id, const RankedList*> by_user;
  for (const auto& l : preds) by_user[l.user] = &l;
  static const RankedList kEmpty;
  for (const auto& [u, rel] : truth) {
    auto it = by_user.find(u);
    sum += precision_at(it == by_user.end() ? kEmpty : *it->second, rel, n);
    ++count;
  }
  return count ? sum / double(count) : 0.0;
}

struct Scores {
  double all = 0, fresh = 0;
};

Scores score_both(const std::vector<RankedList>& preds, const Truth& truth,
                  const HistoryMap& history) {
  return {leaderboard_score(preds, truth), score_new(preds, truth, history)};
}

std::string score_lines(const char* label, const Scores& s) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-10s score_all=%.4f score_new=%.4f\n", label, s.all, s.fresh);
  return buf;
}

std::map<Id, RankedList> as_map(std::vector<RankedList> lists) {
  std::map<Id, RankedList> out;
  for (auto& l : lists) out[l.user] = std::move(l);
  return out;
}

std::vector<RankedList> as_lists(const std::map<Id, RankedList>& m) {
  std::vector<RankedList> out;
  for (const auto& [u, l] : m) out.push_back(l);
  return out;
}

// ---- gen ----

int cmd_gen(const CLI::App& app, const CLI::App* sub, Common& c, GenConfig& g) {
  resolve_seed(sub, c);
  g.seed = c.seed;
  auto bundle = generate(g);
  fs::create_directories(c.data_dir);
  save_bundle(bundle, c.data_dir);
  json rep;
  rep["data_dir"] = c.data_dir;
  rep["users"] = bundle.users.size();
  rep["items"] = bundle.items.size();
  rep["interactions"] = bundle.interactions.size();
  rep["impressions"] = bundle.impressions.size();
  rep["weeks"] = {bundle.first_week, bundle.last_week};
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "generated %zu users, %zu items, %zu interactions, %zu impression rows "
                "(weeks %d..%d) -> %s\n",
                bundle.users.size(), bundle.items.size(), bundle.interactions.size(),
                bundle.impressions.size(), bundle.first_week, bundle.last_week,
                c.data_dir.c_str());
  finish_run(app, c, "gen", rep, buf);
  return 0;
}

// ---- train ----

struct TrainFlags {
  std::string component;
  bool temporal = false;
  std::string w_checkpoint;
  std::size_t triplet_cap = 200;
  TrankConfig trank;
  MfConfig mf;
  SeqConfig seq;
};

int cmd_train(const CLI::App& app, const CLI::App* sub, Common& c, TrainFlags& f) {
  resolve_seed(sub, c);
  fs::create_directories(c.out_dir);
  auto bundle = load_data(c);
  auto split = make_split(bundle, c);
  auto users = truth_users(split.truth);
  auto history = make_context(split.train).history;

  json rep;
  rep["component"] = f.component;
  rep["train_end"] = c.train_end;
  rep["target"] = c.target;
  std::string human;
  std::vector<RankedList> preds;

  if (f.component == "trank") {
    f.trank.seed = c.seed;
    HistoryIndex index(split.train);
    auto triplets = generate_triplets(index, split.train.first_week + 1, c.train_end,
                                      f.triplet_cap, c.seed);
    auto result = train_trank(index, triplets, f.trank);
    save_weights(result.weights, fs::path(c.out_dir) / "trank_w.tsv");
    for (Id u : users) preds.push_back(recommend_history(index, u, c.target, result.weights, kMaxListLen));
    rep["objective_trace"] = result.trace;
    rep["checkpoint"] = (fs::path(c.out_dir) / "trank_w.tsv").string();
    human += "trained temporal history ranker on " + std::to_string(triplets.size()) + " triplets\n";
  } else if (f.component == "mf") {
    f.mf.seed = c.seed;
    if (f.temporal) {
      if (f.w_checkpoint.empty() || !fs::exists(f.w_checkpoint))
        throw ConfigError("--temporal needs an existing --w-checkpoint (w TSV from a trank run)");
      f.mf.gamma = gamma_from_w(load_weights(f.w_checkpoint), c.train_end);
      rep["gamma"] = *f.mf.gamma;
    }
    auto result = train_mf(split.train, f.mf, split.truth);
    save_mf(result.model, fs::path(c.out_dir) / "mf_model.bin");
    preds = predict_mf(result.model, split.train, users, kMaxListLen);
    rep["score_new_trace"] = result.trace;
    rep["best_epoch"] = result.best_epoch;
    rep["temporal"] = f.temporal;
    rep["checkpoint"] = (fs::path(c.out_dir) / "mf_model.bin").string();
    human += std::string("trained ") + (f.temporal ? "temporally re-weighted " : "") +
             "hybrid factorization, best epoch " + std::to_string(result.best_epoch) + "\n";
  } else if (f.component == "seq") {
    f.seq.seed = c.seed;
    auto result = train_seq(split.train, f.seq);
    save_seq(result.model, fs::path(c.out_dir) / "seq_model.bin");
    preds = predict_seq(result.model, split.train, users, kMaxListLen);
    rep["perplexity_trace"] = result.dev_ppl;
    rep["best_epoch"] = result.best_epoch;
    rep["checkpoint"] = (fs::path(c.out_dir) / "seq_model.bin").string();
    std::ofstream trace(fs::path(c.out_dir) / "ppl_trace.tsv");
    trace << "epoch\tdev_ppl\n";
    for (std::size_t e = 0; e < result.dev_ppl.size(); ++e)
      trace << e << "\t" << result.dev_ppl[e] << "\n";
    human += "trained sequence model, best epoch " + std::to_string(result.best_epoch) + "\n";
  } else {
    throw ConfigError("--component must be trank, mf or seq");
  }

  fs::create_directories(c.out_dir);
  write_predictions(preds, fs::path(c.out_dir) / "predictions.tsv");
  auto s = score_both(preds, split.truth, history);
  rep["score_all"] = s.all;
  rep["score_new"] = s.fresh;
  rep["predictions"] = (fs::path(c.out_dir) / "predictions.tsv").string();
  human += score_lines(f.component.c_str(), s);
  finish_run(app, c, "train", rep, human);
  return 0;
}

// ---- eval ----

int cmd_eval(const CLI::App& app, const CLI::App* sub, Common& c, std::string& pred_file) {
  resolve_seed(sub, c);
  auto bundle = load_data(c);
  auto split = make_split(bundle, c);
  auto preds = read_predictions(pred_file);
  auto history = make_context(split.train).history;
  auto s = score_both(preds, split.truth, history);

  json rep;
  rep["predictions"] = pred_file;
  rep["train_end"] = c.train_end;
  rep["target"] = c.target;
  rep["score_all"] = s.all;
  rep["score_new"] = s.fresh;
  json pn;
  std::string human = score_lines("eval", s);
  for (int n : {2, 4, 6, 20}) {
    double p = mean_precision(preds, split.truth, n);
    pn["P@" + std::to_string(n)] = p;
    char buf[64];
    std::snprintf(buf, sizeof buf, "  mean P@%-2d = %.4f\n", n, p);
    human += buf;
  }
  rep["mean_precision"] = pn;
  finish_run(app, c, "eval", rep, human);
  return 0;
}

// ---- ablate-seq ----

int cmd_ablate_seq(const CLI::App& app, const CLI::App* sub, Common& c, SeqConfig& scfg,
                   std::vector<int>& multipliers) {
  resolve_seed(sub, c);
  scfg.seed = c.seed;
  auto bundle = load_data(c);
  auto split = make_split(bundle, c);
  auto users = truth_users(split.truth);
  auto history = make_context(split.train).history;
  auto vocab = build_item_vocab(split.train, scfg.vocab_cap);
  auto seqs = build_sequences(split.train, vocab);

  json rows = json::array();
  std::string human = "order-destruction ablation (target week " + std::to_string(c.target) + ")\n";
  human += "  corpus        score_all   score_new\n";
  for (int n : multipliers) {
    std::vector<ItemSequence> corpus =
        n <= 1 ? seqs : subsample_sequences(seqs, n, 1.0 / double(n), c.seed);
    std::vector<ItemSequence> train, dev;
    split_sequences(corpus, scfg.dev_frac, scfg.seed, train, dev);
    auto result = train_seq(train, dev, split.train, vocab, scfg);
    auto preds = predict_seq(result.model, split.train, users, kMaxListLen);
    auto s = score_both(preds, split.truth, history);
    std::string label = n <= 1 ? "orig" : "x" + std::to_string(n);
    rows.push_back({{"corpus", label},
                    {"multiplier", n},
                    {"score_all", s.all},
                    {"score_new", s.fresh},
                    {"best_epoch", result.best_epoch}});
    char buf[96];
    std::snprintf(buf, sizeof buf, "  %-12s %9.4f   %9.4f\n", label.c_str(), s.all, s.fresh);
    human += buf;
  }
  json rep;
  rep["train_end"] = c.train_end;
  rep["target"] = c.target;
  rep["table"] = rows;
  finish_run(app, c, "ablate-seq", rep, human);
  return 0;
}

// ---- ensemble ----

struct EnsembleFlags {
  std::string trank_w, mf_model, seq_model;
  int fit_week = 0;  // 0 = auto: target - 1
  int neg_per_pos = 5;
  ForestConfig forest;
};

int cmd_ensemble(const CLI::App& app, const CLI::App* sub, Common& c, EnsembleFlags& f) {
  resolve_seed(sub, c);
  fs::create_directories(c.out_dir);
  for (const auto& [name, path] : {std::pair{"--trank-w", f.trank_w},
                                   {"--mf-model", f.mf_model},
                                   {"--seq-model", f.seq_model}})
    if (path.empty() || !fs::exists(path))
      throw ConfigError(std::string(name) + ": component checkpoint missing (" + path + ")");
  auto w = load_weights(f.trank_w);
  auto mf = load_mf(f.mf_model);
  auto seq = load_seq(f.seq_model);

  auto bundle = load_data(c);
  if (c.target == 0) c.target = bundle.last_week;
  if (f.fit_week == 0) f.fit_week = c.target - 1;
  if (c.train_end == 0) c.train_end = f.fit_week - 1;
  auto fit = split_by_week(bundle, c.train_end, f.fit_week);
  auto fin = split_by_week(bundle, c.train_end, c.target);

  std::set<Id> user_set;
  for (const auto& [u, _] : fit.truth) user_set.insert(u);
  for (const auto& [u, _] : fin.truth) user_set.insert(u);
  std::vector<Id> users(user_set.begin(), user_set.end());

  HistoryIndex index(fit.train);
  ComponentLists lists_fit, lists_final;
  lists_fit.mf = lists_final.mf = as_map(predict_mf(mf, fit.train, users, kMaxListLen));
  lists_fit.seq = lists_final.seq = as_map(predict_seq(seq, fit.train, users, kMaxListLen));
  for (Id u : users) {
    lists_fit.trank[u] = recommend_history(index, u, f.fit_week, w, kMaxListLen);
    lists_final.trank[u] = recommend_history(index, u, c.target, w, kMaxListLen);
  }

  auto ctx = make_context(fit.train);
  f.forest.seed = c.seed;
  auto rows = label_rows(lists_fit, ctx, fit.truth, f.neg_per_pos, c.seed);
  auto forest = train_forest(rows, f.forest);
  auto fusion_w = greedy_linear_fusion(lists_fit, fit.truth);

  auto ens_preds = forest_rank_all(forest, lists_final, ctx, kMaxListLen);
  auto fusion_preds = fuse_rank(lists_final, fusion_w, kMaxListLen);
  Scores sh = score_both(as_lists(lists_final.trank), fin.truth, ctx.history);
  Scores sm = score_both(as_lists(lists_final.mf), fin.truth, ctx.history);
  Scores ss = score_both(as_lists(lists_final.seq), fin.truth, ctx.history);
  Scores sf = score_both(fusion_preds, fin.truth, ctx.history);
  Scores se = score_both(ens_preds, fin.truth, ctx.history);

  fs::create_directories(c.out_dir);
  save_forest(forest, fs::path(c.out_dir) / "forest.bin");
  write_predictions(ens_preds, fs::path(c.out_dir) / "predictions.tsv");

  json rep;
  rep["train_end"] = c.train_end;
  rep["fit_week"] = f.fit_week;
  rep["target"] = c.target;
  rep["training_rows"] = rows.size();
  rep["fusion_weights"] = fusion_w;
  rep["table"] = {{"History", {{"score_all", sh.all}, {"score_new", sh.fresh}}},
                  {"MF", {{"score_all", sm.all}, {"score_new", sm.fresh}}},
                  {"LSTM", {{"score_all", ss.all}, {"score_new", ss.fresh}}},
                  {"Fusion", {{"score_all", sf.all}, {"score_new", sf.fresh}}},
                  {"Ensemble", {{"score_all", se.all}, {"score_new", se.fresh}}}};
  rep["checkpoint"] = (fs::path(c.out_dir) / "forest.bin").string();
  rep["predictions"] = (fs::path(c.out_dir) / "predictions.tsv").string();

  char buf[256];
  std::string human = "component vs ensemble, target week " + std::to_string(c.target) + "\n";
  std::snprintf(buf, sizeof buf, "  %-10s %10s %10s %10s %10s %10s\n", "", "History", "MF", "LSTM",
                "Fusion", "Ensemble");
  human += buf;
  std::snprintf(buf, sizeof buf, "  %-10s %10.3f %10.3f %10.3f %10.3f %10.3f\n", "score_all",
                sh.all, sm.all, ss.all, sf.all, se.all);
  human += buf;
  std::snprintf(buf, sizeof buf, "  %-10s %10.3f %10.3f %10.3f %10.3f %10.3f\n", "score_new",
                sh.fresh, sm.fresh, ss.fresh, sf.fresh, se.fresh);
  human += buf;
  finish_run(app, c, "ensemble", rep, human);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"temprec: temporal job-recommendation pipeline"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "TOML config file; command-line flags override it");

  // one block per subcommand: a replayed config section must only touch its
  // own command's state
  Common cg, ct, cv, ca, ce;
  GenConfig g;
  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  add_common(gen, cg);
  gen->add_option("--users", g.n_users, "number of users");
  gen->add_option("--items", g.n_items, "number of items");
  gen->add_option("--weeks", g.n_weeks, "number of weeks");
  gen->add_option("--latent", g.k_latent, "latent affinity dimensions");
  gen->add_option("--rho", g.recency_decay, "recency decay in (0,1)");
  gen->add_option("--clusters", g.transition_clusters, "planted transition clusters");
  gen->add_option("--sharpness", g.transition_sharpness, "cycle-following probability");
  gen->add_option("--imps", g.impressions_per_user_week, "impressions per user-week");
  gen->add_option("--noise", g.noise, "pick/impression flip probability");

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "train one component and score the target week");
  add_common(train, ct);
  add_weeks(train, ct);
  train->add_option("--component", tf.component, "trank | mf | seq")->required();
  train->add_flag("--temporal", tf.temporal, "re-weight factorization pairs with gamma from w");
  train->add_option("--w-checkpoint", tf.w_checkpoint, "w TSV for --temporal");
  train->add_option("--triplet-cap", tf.triplet_cap, "triplets per user-week");
  train->add_option("--lag-window", tf.trank.lag_window, "history lag window");
  train->add_option("--trank-lr", tf.trank.lr, "history ranker learning rate");
  train->add_option("--trank-epochs", tf.trank.epochs, "history ranker epochs");
  train->add_option("--l2", tf.trank.l2, "history ranker l2");
  train->add_option("--dim", tf.mf.dim, "factorization dimensions");
  train->add_option("--mf-lr", tf.mf.lr, "factorization learning rate");
  train->add_option("--mf-epochs", tf.mf.epochs, "factorization epochs");
  train->add_option("--max-trials", tf.mf.max_trials, "WARP negative-sampling cap");
  train->add_option("--patience", tf.mf.patience, "early-stopping patience");
  train->add_flag("--features,!--no-features", tf.mf.use_features, "content features in Eq. 1");
  train->add_flag("--impressions,!--no-impressions", tf.mf.use_impressions,
                  "last-week impressions as weak positives");
  train->add_option("--hidden", tf.seq.hidden, "LSTM hidden units");
  train->add_option("--embed-width", tf.seq.embed_width, "embedding width per feature");
  train->add_option("--input-width", tf.seq.input_width, "projected input width");
  train->add_option("--dropout", tf.seq.dropout, "input/output dropout");
  train->add_option("--lr0", tf.seq.lr0, "initial SGD learning rate");
  train->add_option("--decay", tf.seq.decay, "lr decay on dev-perplexity rise");
  train->add_option("--clip", tf.seq.clip, "gradient-norm clip");
  train->add_option("--dev-frac", tf.seq.dev_frac, "user fraction for the dev split");
  train->add_option("--seq-epochs", tf.seq.epochs, "sequence-model epochs");
  train->add_option("--vocab-cap", tf.seq.vocab_cap, "sequence vocabulary cap");

  std::string pred_file;
  auto* eval = app.add_subcommand("eval", "score a predictions file on the target week");
  add_common(eval, cv);
  add_weeks(eval, cv);
  eval->add_option("--predictions", pred_file, "submission file: user<TAB>item1,item2,...")
      ->required();

  SeqConfig ablate_cfg;
  std::vector<int> multipliers = {1, 2, 4, 8};
  auto* ablate = app.add_subcommand("ablate-seq", "order-destruction ablation for the sequence model");
  add_common(ablate, ca);
  add_weeks(ablate, ca);
  ablate->add_option("--multipliers", multipliers, "subsequence multiplies, e.g. 1,2,4,8")
      ->delimiter(',');
  ablate->add_option("--hidden", ablate_cfg.hidden, "LSTM hidden units");
  ablate->add_option("--embed-width", ablate_cfg.embed_width, "embedding width per feature");
  ablate->add_option("--input-width", ablate_cfg.input_width, "projected input width");
  ablate->add_option("--dropout", ablate_cfg.dropout, "input/output dropout");
  ablate->add_option("--seq-epochs", ablate_cfg.epochs, "epochs per corpus");
  ablate->add_option("--dev-frac", ablate_cfg.dev_frac, "user fraction for the dev split");
  ablate->add_option("--vocab-cap", ablate_cfg.vocab_cap, "sequence vocabulary cap");

  EnsembleFlags ef;
  auto* ens = app.add_subcommand("ensemble", "fuse trained components into the final ranking");
  add_common(ens, ce);
  add_weeks(ens, ce);
  ens->add_option("--trank-w", ef.trank_w, "w TSV checkpoint")->required();
  ens->add_option("--mf-model", ef.mf_model, "factorization checkpoint")->required();
  ens->add_option("--seq-model", ef.seq_model, "sequence-model checkpoint")->required();
  ens->add_option("--fit-week", ef.fit_week, "forest/fusion supervision week (default: target-1)");
  ens->add_option("--neg-per-pos", ef.neg_per_pos, "negative rows per positive");
  ens->add_option("--trees", ef.forest.n_trees, "trees in the forest");
  ens->add_option("--max-depth", ef.forest.max_depth, "tree depth cap");
  ens->add_option("--min-leaf", ef.forest.min_leaf, "minimum rows per leaf");

  for (auto* sub : {gen, train, eval, ablate, ens}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen(app, gen, cg, g);
    if (train->parsed()) return cmd_train(app, train, ct, tf);
    if (eval->parsed()) return cmd_eval(app, eval, cv, pred_file);
    if (ablate->parsed()) return cmd_ablate_seq(app, ablate, ca, ablate_cfg, multipliers);
    if (ens->parsed()) return cmd_ensemble(app, ens, ce, ef);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const ParseError& e) {
    std::fprintf(stderr, "parse error: %s\n", e.what());
    return 2;
  } catch (const std::out_of_range& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
