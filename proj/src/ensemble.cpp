#include "temprec/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

namespace temprec {

namespace {

void write_i32(std::ostream& out, std::int32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }
void write_f64(std::ostream& out, double v) { out.write(reinterpret_cast<const char*>(&v), 8); }

std::int32_t read_i32(std::istream& in) {
  std::int32_t v;
  in.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v;
  in.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
double read_f64(std::istream& in) {
  double v;
  in.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

// listed items always normalize strictly above the absent default of zero
constexpr double kNormFloor = 1e-6;

}  // namespace

double feature_at(const CandidateFeatures& f, int index) {
  switch (index) {
    case 0: return f.trank_score;
    case 1: return double(f.trank_rank);
    case 2: return f.mf_score;
    case 3: return double(f.mf_rank);
    case 4: return f.seq_prob;
    case 5: return double(f.seq_rank);
    case 6: return double(f.in_history);
    case 7: return double(f.in_last_impressions);
    case 8: return double(f.history_count);
  }
  throw std::out_of_range("feature index");
}

EnsembleContext make_context(const DatasetBundle& train) {
  EnsembleContext ctx;
  for (const auto& ev : train.interactions) {
    if (!is_positive_kind(ev.kind)) continue;
    ctx.history[ev.user].push_back(ev.item);
    ctx.positive_counts[{ev.user, ev.item}] += 1;
  }
  for (auto& [u, items] : ctx.history) {
    std::sort(items.begin(), items.end());
    items.erase(std::unique(items.begin(), items.end()), items.end());
  }
  for (const auto& rec : train.impressions) {
    if (rec.week != train.last_week) continue;
    auto& items = ctx.last_shown[rec.user];
    items.insert(items.end(), rec.items.begin(), rec.items.end());
  }
  for (auto& [u, items] : ctx.last_shown) {
    std::sort(items.begin(), items.end());
    items.erase(std::unique(items.begin(), items.end()), items.end());
  }
  return ctx;
}

CandidateFeatures extract_features(Id user, Id item, const ComponentLists& lists,
                                   const EnsembleContext& ctx) {
  CandidateFeatures f;
  f.user = user;
  f.item = item;
  auto fill = [&](const std::map<Id, RankedList>& component, double& score, int& rank) {
    const RankedList* list = nullptr;
    if (auto it = component.find(user); it != component.end()) list = &it->second;
    std::size_t len = list ? list->items.size() : 0;
    std::size_t pos = len;
    if (list) pos = std::find(list->items.begin(), list->items.end(), item) - list->items.begin();
    if (pos < len) {
      rank = int(pos) + 1;
      score = list->scores[pos];
    } else {
      rank = int(len) + 1;
      double lo = 0.0;
      if (list && !list->scores.empty())
        lo = *std::min_element(list->scores.begin(), list->scores.end());
      score = lo - 1.0;
    }
  };
  fill(lists.trank, f.trank_score, f.trank_rank);
  fill(lists.mf, f.mf_score, f.mf_rank);
  fill(lists.seq, f.seq_prob, f.seq_rank);
  if (auto it = ctx.history.find(user); it != ctx.history.end())
    f.in_history = std::binary_search(it->second.begin(), it->second.end(), item) ? 1 : 0;
  if (auto it = ctx.last_shown.find(user); it != ctx.last_shown.end())
    f.in_last_impressions = std::binary_search(it->second.begin(), it->second.end(), item) ? 1 : 0;
  if (auto it = ctx.positive_counts.find({user, item}); it != ctx.positive_counts.end())
    f.history_count = it->second;
  return f;
}

std::vector<CandidateFeatures> user_candidate_features(Id user, const ComponentLists& lists,
                                                       const EnsembleContext& ctx) {
  std::set<Id> pool;
  auto take = [&](const std::map<Id, RankedList>& component) {
    if (auto it = component.find(user); it != component.end())
      pool.insert(it->second.items.begin(), it->second.items.end());
  };
  take(lists.trank);
  take(lists.mf);
  take(lists.seq);
  if (auto it = ctx.history.find(user); it != ctx.history.end())
    pool.insert(it->second.begin(), it->second.end());
  std::vector<CandidateFeatures> rows;
  rows.reserve(pool.size());
  for (Id item : pool) rows.push_back(extract_features(user, item, lists, ctx));
  return rows;
}

// --- forest ---

double Forest::tree_predict(std::size_t t, const CandidateFeatures& f) const {
  const auto& nodes = trees[t];
  int cur = 0;
  while (nodes[cur].feature >= 0)
    cur = feature_at(f, nodes[cur].feature) <= nodes[cur].threshold ? nodes[cur].left
                                                                   : nodes[cur].right;
  return nodes[cur].leaf;
}

double Forest::predict(const CandidateFeatures& f) const {
  double sum = 0.0;
  for (std::size_t t = 0; t < trees.size(); ++t) sum += tree_predict(t, f);
  return trees.empty() ? 0.0 : sum / double(trees.size());
}

namespace {

double gini_part(long n, long pos) {
  if (n == 0) return 0.0;
  double q = double(pos) / double(n);
  return double(n) * (1.0 - q * q - (1.0 - q) * (1.0 - q));
}

struct TreeBuilder {
  std::span<const LabeledRow> rows;
  const ForestConfig& cfg;
  Rng& rng;
  std::vector<TreeNode> nodes;
  int mtry;

  int build(std::vector<std::size_t>& subset, int depth) {
    long pos = 0;
    for (auto i : subset) pos += rows[i].second;
    int self = int(nodes.size());
    nodes.push_back({});
    nodes[self].leaf = double(pos) / double(subset.size());
    bool pure = pos == 0 || pos == long(subset.size());
    if (depth >= cfg.max_depth || long(subset.size()) < 2L * cfg.min_leaf || pure) return self;

    std::vector<int> feats(kNumEnsembleFeatures);
    std::iota(feats.begin(), feats.end(), 0);
    rng.shuffle(feats);

    double best_score = 0.0;
    int best_feat = -1;
    double best_thr = 0.0;
    std::vector<std::pair<double, int>> vals(subset.size());
    for (int fi = 0; fi < mtry; ++fi) {
      int f = feats[fi];
      for (std::size_t j = 0; j < subset.size(); ++j) {
        const auto& [row, label] = rows[subset[j]];
        vals[j] = {feature_at(row, f), label};
      }
      std::sort(vals.begin(), vals.end());
      long left_pos = 0;
      for (std::size_t j = 0; j + 1 < vals.size(); ++j) {
        left_pos += vals[j].second;
        if (vals[j].first == vals[j + 1].first) continue;
        long nl = long(j) + 1, nr = long(vals.size()) - nl;
        if (nl < cfg.min_leaf || nr < cfg.min_leaf) continue;
        double score = gini_part(nl, left_pos) + gini_part(nr, pos - left_pos);
        if (best_feat < 0 || score < best_score) {
          best_score = score;
          best_feat = f;
          best_thr = (vals[j].first + vals[j + 1].first) / 2.0;
        }
      }
    }
    if (best_feat < 0) return self;

    std::vector<std::size_t> left, right;
    for (auto i : subset)
      (feature_at(rows[i].first, best_feat) <= best_thr ? left : right).push_back(i);
    subset.clear();
    subset.shrink_to_fit();
    nodes[self].feature = best_feat;
    nodes[self].threshold = best_thr;
    int l = build(left, depth + 1);
    int r = build(right, depth + 1);
    nodes[self].left = l;
    nodes[self].right = r;
    return self;
  }
};

}  // namespace

Forest train_forest(std::span<const LabeledRow> rows, const ForestConfig& cfg) {
  if (rows.empty()) throw ConfigError("forest: no training rows");
  if (cfg.n_trees < 1 || cfg.max_depth < 0 || cfg.min_leaf < 1)
    throw ConfigError("forest: need n_trees >= 1, max_depth >= 0, min_leaf >= 1");
  Forest forest;
  forest.cfg = cfg;
  forest.trees.reserve(cfg.n_trees);
  for (int t = 0; t < cfg.n_trees; ++t) {
    Rng rng(splitmix64(cfg.seed ^ (0xf02e57ULL + 0x9e3779b97f4a7c15ULL * std::uint64_t(t + 1))));
    std::vector<std::size_t> sample(rows.size());
    for (auto& i : sample) i = rng.uniform_int(rows.size());
    TreeBuilder builder{rows, cfg, rng, {}, int(std::sqrt(double(kNumEnsembleFeatures)))};
    builder.build(sample, 0);
    forest.trees.push_back(std::move(builder.nodes));
  }
  return forest;
}

void save_forest(const Forest& forest, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out.write("TRRF0001", 8);
  write_i32(out, forest.cfg.n_trees);
  write_i32(out, forest.cfg.max_depth);
  write_i32(out, forest.cfg.min_leaf);
  write_u64(out, forest.cfg.seed);
  write_i32(out, std::int32_t(forest.trees.size()));
  for (const auto& nodes : forest.trees) {
    write_i32(out, std::int32_t(nodes.size()));
    for (const auto& n : nodes) {
      write_i32(out, n.feature);
      write_f64(out, n.threshold);
      write_i32(out, n.left);
      write_i32(out, n.right);
      write_f64(out, n.leaf);
    }
  }
}

Forest load_forest(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  char magic[8];
  in.read(magic, 8);
  if (std::memcmp(magic, "TRRF0001", 8) != 0)
    throw std::runtime_error(file.string() + ": not a forest file");
  Forest forest;
  forest.cfg.n_trees = read_i32(in);
  forest.cfg.max_depth = read_i32(in);
  forest.cfg.min_leaf = read_i32(in);
  forest.cfg.seed = read_u64(in);
  forest.trees.resize(read_i32(in));
  for (auto& nodes : forest.trees) {
    nodes.resize(read_i32(in));
    for (auto& n : nodes) {
      n.feature = read_i32(in);
      n.threshold = read_f64(in);
      n.left = read_i32(in);
      n.right = read_i32(in);
      n.leaf = read_f64(in);
    }
  }
  if (!in) throw std::runtime_error(file.string() + ": truncated forest file");
  return forest;
}

std::vector<LabeledRow> label_rows(const ComponentLists& lists, const EnsembleContext& ctx,
                                   const Truth& fit_truth, int neg_per_pos, std::uint64_t seed) {
  if (neg_per_pos < 0) throw ConfigError("label_rows: neg_per_pos must be >= 0");
  Rng rng(splitmix64(seed ^ 0x1abe15ULL));
  std::vector<LabeledRow> out;
  for (const auto& [user, items] : fit_truth) {
    auto truth_items = items;
    std::sort(truth_items.begin(), truth_items.end());
    auto pool = user_candidate_features(user, lists, ctx);
    std::vector<std::size_t> neg;
    long n_pos = 0;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (std::binary_search(truth_items.begin(), truth_items.end(), pool[i].item))
        ++n_pos;
      else
        neg.push_back(i);
    }
    if (n_pos == 0) continue;
    rng.shuffle(neg);
    neg.resize(std::min<std::size_t>(neg.size(), std::size_t(n_pos) * neg_per_pos));
    std::sort(neg.begin(), neg.end());
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      bool hit = std::binary_search(truth_items.begin(), truth_items.end(), pool[i].item);
      bool keep_neg = cursor < neg.size() && neg[cursor] == i;
      if (keep_neg) ++cursor;
      if (hit || keep_neg) out.push_back({pool[i], hit ? 1 : 0});
    }
  }
  return out;
}

RankedList ensemble_rank(const Forest& forest, Id user, std::span<const CandidateFeatures> pool,
                         std::size_t k) {
  std::vector<std::pair<double, std::size_t>> scored(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) scored[i] = {forest.predict(pool[i]), i};
  std::size_t top = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + top, scored.end(),
                    [&](const auto& a, const auto& b) {
                      if (a.first != b.first) return a.first > b.first;
                      const auto &fa = pool[a.second], &fb = pool[b.second];
                      if (fa.mf_score != fb.mf_score) return fa.mf_score > fb.mf_score;
                      return fa.item < fb.item;
                    });
  RankedList out;
  out.user = user;
  for (std::size_t i = 0; i < top; ++i) {
    out.scores.push_back(scored[i].first);
    out.items.push_back(pool[scored[i].second].item);
  }
  return out;
}

namespace {

std::set<Id> all_users(const ComponentLists& lists) {
  std::set<Id> users;
  for (const auto& [u, _] : lists.trank) users.insert(u);
  for (const auto& [u, _] : lists.mf) users.insert(u);
  for (const auto& [u, _] : lists.seq) users.insert(u);
  return users;
}

}  // namespace

std::vector<RankedList> forest_rank_all(const Forest& forest, const ComponentLists& lists,
                                        const EnsembleContext& ctx, std::size_t k) {
  std::vector<RankedList> out;
  for (Id user : all_users(lists)) {
    auto pool = user_candidate_features(user, lists, ctx);
    out.push_back(ensemble_rank(forest, user, pool, k));
  }
  return out;
}

std::vector<RankedList> fuse_rank(const ComponentLists& lists, std::span<const double> weights,
                                  std::size_t k) {
  std::vector<RankedList> out;
  for (Id user : all_users(lists)) {
    std::map<Id, std::array<double, 3>> pool;
    const std::map<Id, RankedList>* components[3] = {&lists.trank, &lists.mf, &lists.seq};
    for (int c = 0; c < 3; ++c) {
      auto it = components[c]->find(user);
      if (it == components[c]->end() || it->second.items.empty()) continue;
      const auto& scores = it->second.scores;
      double lo = *std::min_element(scores.begin(), scores.end());
      double hi = *std::max_element(scores.begin(), scores.end());
      for (std::size_t i = 0; i < it->second.items.size(); ++i) {
        double norm = hi > lo ? (scores[i] - lo) / (hi - lo) : 1.0;
        pool[it->second.items[i]][c] = kNormFloor + (1.0 - kNormFloor) * norm;
      }
    }
    std::vector<std::pair<double, Id>> fused;
    fused.reserve(pool.size());
    for (const auto& [item, norm] : pool) {
      double s = 0.0;
      for (int c = 0; c < 3; ++c) s += weights[c] * norm[c];
      fused.push_back({s, item});
    }
    std::size_t top = std::min(k, fused.size());
    std::partial_sort(fused.begin(), fused.begin() + top, fused.end(),
                      [](const auto& a, const auto& b) {
                        if (a.first != b.first) return a.first > b.first;
                        return a.second < b.second;
                      });
    RankedList list;
    list.user = user;
    for (std::size_t i = 0; i < top; ++i) {
      list.scores.push_back(fused[i].first);
      list.items.push_back(fused[i].second);
    }
    out.push_back(std::move(list));
  }
  return out;
}

std::array<double, 3> greedy_linear_fusion(const ComponentLists& lists, const Truth& valid_truth,
                                           std::span<const double> grid, std::size_t k) {
  if (grid.empty()) throw ConfigError("fusion: empty grid");
  auto eval = [&](const std::array<double, 3>& w) {
    return leaderboard_score(fuse_rank(lists, w, k), valid_truth);
  };
  std::array<double, 3> best_w = {1.0, 0.0, 0.0};
  double best = eval(best_w);
  for (int c = 1; c < 3; ++c) {
    std::array<double, 3> w = {0.0, 0.0, 0.0};
    w[c] = 1.0;
    double s = eval(w);
    if (s > best) {
      best = s;
      best_w = w;
    }
  }
  for (int pass = 0; pass < 64; ++pass) {
    bool improved = false;
    for (int c = 0; c < 3; ++c) {
      for (double v : grid) {
        if (v == best_w[c]) continue;
        auto w = best_w;
        w[c] = v;
        double s = eval(w);
        if (s > best) {
          best = s;
          best_w = w;
          improved = true;
        }
      }
    }
    if (!improved) break;
  }
  return best_w;
}

}  // namespace temprec
