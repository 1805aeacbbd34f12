#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <vector>

#include "temprec/data.hpp"
#include "temprec/metrics.hpp"

namespace temprec {

// Event kinds as matrix rows: impressions join the interaction kinds at row 0.
inline constexpr int kEventImpression = 0;
inline constexpr int kNumEventKinds = 4;  // impression, click, bookmark, reply
inline constexpr int kDefaultLagWindow = 16;

// counts(kind, lag) over a (user, item) pair looking back from a prediction
// week; lag 1 = previous week. Delete events never enter the matrix.
struct HistoryMatrix {
  int lag_window = kDefaultLagWindow;
  std::vector<double> counts;  // kNumEventKinds * lag_window, kind-major

  explicit HistoryMatrix(int L = kDefaultLagWindow)
      : lag_window(L), counts(static_cast<std::size_t>(kNumEventKinds) * L, 0.0) {}
  double& at(int kind, int lag) { return counts[static_cast<std::size_t>(kind) * lag_window + lag - 1]; }
  double at(int kind, int lag) const { return counts[static_cast<std::size_t>(kind) * lag_window + lag - 1]; }
  double total() const;
};

struct TemporalWeights {
  int lag_window = kDefaultLagWindow;
  std::vector<double> w;  // same layout as HistoryMatrix.counts

  explicit TemporalWeights(int L = kDefaultLagWindow)
      : lag_window(L), w(static_cast<std::size_t>(kNumEventKinds) * L, 0.0) {}
  double& at(int kind, int lag) { return w[static_cast<std::size_t>(kind) * lag_window + lag - 1]; }
  double at(int kind, int lag) const { return w[static_cast<std::size_t>(kind) * lag_window + lag - 1]; }
};

void save_weights(const TemporalWeights& w, const std::filesystem::path& file);
TemporalWeights load_weights(const std::filesystem::path& file);

// preferred was positively re-interacted at week `at`, other (also already in
// the user's history by then) was not touched at all.
struct Triplet {
  Id user = 0;
  Id preferred = 0;
  Id other = 0;
  int at = 0;
};

// Per-user event log folded item-wise: one (week, kind) list per pair, kinds
// 0..4 where 4 = delete (kept for candidacy and recency, skipped by the
// matrix builder).
class HistoryIndex {
 public:
  explicit HistoryIndex(const DatasetBundle& bundle);

  struct Event {
    int week = 0;
    int kind = 0;
  };
  using ItemEvents = std::map<Id, std::vector<Event>>;  // week-ascending per item

  const ItemEvents* events_of(Id user) const;
  std::vector<Id> users() const;

 private:
  std::map<Id, ItemEvents> by_user_;
};

HistoryMatrix build_history_matrix(const HistoryIndex& index, Id user, Id item, int at, int L);

double naive_score(const HistoryMatrix& m);

// -(smallest lag of any event on the pair); ties resolved at ranking time by
// naive count then item id. Empty when the pair has no history (not a
// candidate).
std::optional<double> tsort_score(const HistoryIndex& index, Id user, Id item, int at);

double rand_score(std::uint64_t seed, Id user, Id item);

double trank_score(const TemporalWeights& w, const HistoryMatrix& m);

// All P x N pairs per (user, week in [begin, end]), where P = history items
// positively re-interacted that week and N = history items untouched that
// week; each (user, week) block is down-sampled to cap pairs.
std::vector<Triplet> generate_triplets(const HistoryIndex& index, int begin, int end,
                                       std::size_t cap_per_user_week, std::uint64_t seed);

struct TrankConfig {
  int lag_window = kDefaultLagWindow;
  double lr = 0.05;
  int epochs = 30;
  double l2 = 1e-4;
  std::size_t batch = 512;
  std::uint64_t seed = 1;
};

struct TrankResult {
  TemporalWeights weights;
  std::vector<double> trace;  // full objective after each epoch, non-increasing
};

// Mean smoothed-hinge over triplets + l2*|w|^2, mini-batch descent with step
// lr/(1+epoch); an epoch that raises the full objective is rolled back.
TrankResult train_trank(const HistoryIndex& index, const std::vector<Triplet>& triplets,
                        const TrankConfig& cfg);

// h(m): 0 above margin 1, quadratic spline in (0,1), linear below 0.
double smoothed_hinge(double margin);
double smoothed_hinge_grad(double margin);

// Candidate set = every item with any event before `at`.
RankedList recommend_history(const HistoryIndex& index, Id user, int at,
                             const TemporalWeights& w, std::size_t k);
RankedList recommend_tsort(const HistoryIndex& index, Id user, int at, std::size_t k);
RankedList recommend_rand(const HistoryIndex& index, std::uint64_t seed, Id user, int at,
                          std::size_t k);

}  // namespace temprec
