#include "temprec/history.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <tuple>

#include "temprec/rng.hpp"

namespace temprec {

double HistoryMatrix::total() const {
  double s = 0.0;
  for (double v : counts) s += v;
  return s;
}

void save_weights(const TemporalWeights& w, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << "kind\tlag\tweight\n";
  for (int k = 0; k < kNumEventKinds; ++k)
    for (int lag = 1; lag <= w.lag_window; ++lag)
      out << k << '\t' << lag << '\t' << format_double(w.at(k, lag)) << '\n';
}

TemporalWeights load_weights(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  std::string line;
  std::getline(in, line);
  if (line != "kind\tlag\tweight") throw ParseError(file.string(), 1, "bad weights header");
  struct Row {
    int kind, lag;
    double weight;
  };
  std::vector<Row> rows;
  std::size_t line_no = 1;
  int max_lag = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    Row r;
    if (std::sscanf(line.c_str(), "%d\t%d\t%lf", &r.kind, &r.lag, &r.weight) != 3 ||
        r.kind < 0 || r.kind >= kNumEventKinds || r.lag < 1)
      throw ParseError(file.string(), line_no, "bad weights row");
    max_lag = std::max(max_lag, r.lag);
    rows.push_back(r);
  }
  TemporalWeights w(max_lag == 0 ? kDefaultLagWindow : max_lag);
  for (const auto& r : rows) w.at(r.kind, r.lag) = r.weight;
  return w;
}

HistoryIndex::HistoryIndex(const DatasetBundle& bundle) {
  for (const auto& ev : bundle.interactions)
    by_user_[ev.user][ev.item].push_back({ev.week, ev.kind});
  for (const auto& rec : bundle.impressions)
    for (Id item : rec.items) by_user_[rec.user][item].push_back({rec.week, kEventImpression});
  for (auto& [user, items] : by_user_)
    for (auto& [item, events] : items)
      std::stable_sort(events.begin(), events.end(),
                       [](const Event& a, const Event& b) { return a.week < b.week; });
}

const HistoryIndex::ItemEvents* HistoryIndex::events_of(Id user) const {
  auto it = by_user_.find(user);
  return it == by_user_.end() ? nullptr : &it->second;
}

std::vector<Id> HistoryIndex::users() const {
  std::vector<Id> out;
  out.reserve(by_user_.size());
  for (const auto& [user, _] : by_user_) out.push_back(user);
  return out;
}

HistoryMatrix build_history_matrix(const HistoryIndex& index, Id user, Id item, int at, int L) {
  HistoryMatrix m(L);
  const auto* items = index.events_of(user);
  if (!items) return m;
  auto it = items->find(item);
  if (it == items->end()) return m;
  for (const auto& ev : it->second) {
    if (ev.kind == kKindDelete) continue;
    int lag = at - ev.week;
    if (lag < 1 || lag > L) continue;
    m.at(ev.kind, lag) += 1.0;
  }
  return m;
}

double naive_score(const HistoryMatrix& m) { return m.total(); }

std::optional<double> tsort_score(const HistoryIndex& index, Id user, Id item, int at) {
  const auto* items = index.events_of(user);
  if (!items) return std::nullopt;
  auto it = items->find(item);
  if (it == items->end()) return std::nullopt;
  int best = 0;
  for (const auto& ev : it->second) {
    int lag = at - ev.week;
    if (lag < 1) continue;
    if (best == 0 || lag < best) best = lag;
  }
  if (best == 0) return std::nullopt;
  return -static_cast<double>(best);
}

double rand_score(std::uint64_t seed, Id user, Id item) {
  return hash_uniform(seed, static_cast<std::uint64_t>(user), static_cast<std::uint64_t>(item));
}

double trank_score(const TemporalWeights& w, const HistoryMatrix& m) {
  if (w.lag_window != m.lag_window) throw std::invalid_argument("weights/matrix shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < w.w.size(); ++i) s += w.w[i] * m.counts[i];
  return s;
}

std::vector<Triplet> generate_triplets(const HistoryIndex& index, int begin, int end,
                                       std::size_t cap_per_user_week, std::uint64_t seed) {
  std::vector<Triplet> out;
  for (Id user : index.users()) {
    const auto& items = *index.events_of(user);
    Rng rng(splitmix64(seed ^ (0x7219a1e7ULL + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(user))));
    for (int at = begin; at <= end; ++at) {
      std::vector<Id> preferred, untouched;
      for (const auto& [item, events] : items) {
        bool before = false, positive_at = false, touched_at = false;
        for (const auto& ev : events) {
          if (ev.week < at) before = true;
          if (ev.week == at && ev.kind != kEventImpression) {
            touched_at = true;
            if (is_positive_kind(ev.kind)) positive_at = true;
          }
        }
        if (!before) continue;
        if (positive_at)
          preferred.push_back(item);
        else if (!touched_at)
          untouched.push_back(item);
      }
      if (preferred.empty() || untouched.empty()) continue;
      std::vector<Triplet> block;
      block.reserve(preferred.size() * untouched.size());
      for (Id p : preferred)
        for (Id n : untouched) block.push_back({user, p, n, at});
      if (block.size() > cap_per_user_week) {
        rng.shuffle(block);
        block.resize(cap_per_user_week);
        std::sort(block.begin(), block.end(), [](const Triplet& a, const Triplet& b) {
          return std::tie(a.preferred, a.other) < std::tie(b.preferred, b.other);
        });
      }
      out.insert(out.end(), block.begin(), block.end());
    }
  }
  return out;
}

double smoothed_hinge(double margin) {
  if (margin >= 1.0) return 0.0;
  if (margin > 0.0) return 0.5 * (1.0 - margin) * (1.0 - margin);
  return 0.5 - margin;
}

double smoothed_hinge_grad(double margin) {
  if (margin >= 1.0) return 0.0;
  if (margin > 0.0) return margin - 1.0;
  return -1.0;
}

namespace {

// sparse count difference M_pref - M_other; few matrix cells are ever hit
struct SparseDiff {
  std::vector<std::pair<std::int32_t, double>> entries;
};

SparseDiff diff_features(const HistoryIndex& index, const Triplet& t, int L) {
  HistoryMatrix pos = build_history_matrix(index, t.user, t.preferred, t.at, L);
  HistoryMatrix neg = build_history_matrix(index, t.user, t.other, t.at, L);
  SparseDiff d;
  for (std::size_t i = 0; i < pos.counts.size(); ++i) {
    double v = pos.counts[i] - neg.counts[i];
    if (v != 0.0) d.entries.push_back({static_cast<std::int32_t>(i), v});
  }
  return d;
}

}  // namespace

TrankResult train_trank(const HistoryIndex& index, const std::vector<Triplet>& triplets,
                        const TrankConfig& cfg) {
  if (triplets.empty()) throw std::invalid_argument("train_trank: no triplets");

  std::vector<SparseDiff> feats;
  feats.reserve(triplets.size());
  for (const auto& t : triplets) feats.push_back(diff_features(index, t, cfg.lag_window));

  const std::size_t dim = static_cast<std::size_t>(kNumEventKinds) * cfg.lag_window;
  std::vector<double> w(dim, 0.0);

  auto margin_of = [&](const SparseDiff& d) {
    double m = 0.0;
    for (const auto& [i, v] : d.entries) m += w[i] * v;
    return m;
  };
  auto objective = [&]() {
    double loss = 0.0;
    for (const auto& d : feats) loss += smoothed_hinge(margin_of(d));
    loss /= feats.size();
    double reg = 0.0;
    for (double x : w) reg += x * x;
    return loss + cfg.l2 * reg;
  };

  Rng rng(splitmix64(cfg.seed ^ 0x7e5a9cULL));
  std::vector<std::size_t> order(feats.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrankResult res;
  res.weights = TemporalWeights(cfg.lag_window);
  double best = objective();
  std::vector<double> grad(dim);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<double> before = w;
    rng.shuffle(order);
    double step = cfg.lr / (1.0 + epoch);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      std::size_t stop = std::min(order.size(), start + cfg.batch);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t j = start; j < stop; ++j) {
        const auto& d = feats[order[j]];
        double g = smoothed_hinge_grad(margin_of(d));
        if (g == 0.0) continue;
        for (const auto& [i, v] : d.entries) grad[i] += g * v;
      }
      double scale = step / static_cast<double>(stop - start);
      for (std::size_t i = 0; i < dim; ++i)
        w[i] -= scale * grad[i] + step * 2.0 * cfg.l2 * w[i];
    }
    double now = objective();
    if (now > best) {
      w = before;  // reject the epoch; the trace stays non-increasing
      now = best;
    }
    best = now;
    res.trace.push_back(now);
  }
  res.weights.w = w;
  return res;
}

namespace {

RankedList rank_candidates(const HistoryIndex& index, Id user, int at, std::size_t k,
                           const std::function<double(Id)>& score) {
  RankedList out;
  out.user = user;
  const auto* items = index.events_of(user);
  if (!items) return out;
  std::vector<std::pair<double, Id>> scored;
  for (const auto& [item, events] : *items) {
    bool before = false;
    for (const auto& ev : events)
      if (ev.week < at) {
        before = true;
        break;
      }
    if (before) scored.push_back({score(item), item});
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  if (scored.size() > k) scored.resize(k);
  for (const auto& [s, item] : scored) {
    out.items.push_back(item);
    out.scores.push_back(s);
  }
  return out;
}

}  // namespace

RankedList recommend_history(const HistoryIndex& index, Id user, int at,
                             const TemporalWeights& w, std::size_t k) {
  return rank_candidates(index, user, at, k, [&](Id item) {
    return trank_score(w, build_history_matrix(index, user, item, at, w.lag_window));
  });
}

RankedList recommend_tsort(const HistoryIndex& index, Id user, int at, std::size_t k) {
  // lexicographic (recency, naive count) folded into one value: counts only
  // break ties between equal lags
  return rank_candidates(index, user, at, k, [&](Id item) {
    double lag = tsort_score(index, user, item, at).value();
    double cnt = naive_score(build_history_matrix(index, user, item, at, kDefaultLagWindow));
    return lag + cnt / (1.0 + cnt);  // tie-break term stays inside (-1, 1)
  });
}

RankedList recommend_rand(const HistoryIndex& index, std::uint64_t seed, Id user, int at,
                          std::size_t k) {
  return rank_candidates(index, user, at, k,
                         [&](Id item) { return rand_score(seed, user, item); });
}

}  // namespace temprec
