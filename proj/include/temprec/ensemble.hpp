#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include "temprec/data.hpp"
#include "temprec/metrics.hpp"
#include "temprec/rng.hpp"

namespace temprec {

// Per-candidate description handed to the fusion layer: each component's
// confidence and rank position, plus history context. Items missing from a
// component's list carry rank = length + 1 and score = list minimum - 1, so
// "absent" always sorts behind every listed item.
struct CandidateFeatures {
  Id user = 0;
  Id item = 0;
  double trank_score = 0.0;
  int trank_rank = 0;
  double mf_score = 0.0;
  int mf_rank = 0;
  double seq_prob = 0.0;
  int seq_rank = 0;
  int in_history = 0;
  int in_last_impressions = 0;
  int history_count = 0;
};

inline constexpr int kNumEnsembleFeatures = 9;

// fixed feature order used by the forest (ids are identification, not input)
double feature_at(const CandidateFeatures& f, int index);

// the three components' per-user top lists
struct ComponentLists {
  std::map<Id, RankedList> trank, mf, seq;
};

// history context shared by feature extraction
struct EnsembleContext {
  HistoryMap history;                        // positive items per user, sorted
  std::map<Id, std::vector<Id>> last_shown;  // last-train-week impressions, sorted
  std::map<std::pair<Id, Id>, int> positive_counts;
};

EnsembleContext make_context(const DatasetBundle& train);

CandidateFeatures extract_features(Id user, Id item, const ComponentLists& lists,
                                   const EnsembleContext& ctx);

// candidate pool = union of the user's three component lists plus history
// items, one feature row per item, ordered by item id
std::vector<CandidateFeatures> user_candidate_features(Id user, const ComponentLists& lists,
                                                       const EnsembleContext& ctx);

// --- random forest ---

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1, right = -1;
  double leaf = 0.0;  // positive fraction at this leaf
};

struct ForestConfig {
  int n_trees = 100;
  int max_depth = 12;
  int min_leaf = 5;
  std::uint64_t seed = 1;
};

struct Forest {
  std::vector<std::vector<TreeNode>> trees;  // node 0 is each tree's root
  ForestConfig cfg;

  double tree_predict(std::size_t t, const CandidateFeatures& f) const;
  double predict(const CandidateFeatures& f) const;  // mean over trees, in [0,1]
};

using LabeledRow = std::pair<CandidateFeatures, int>;

// Breiman-style: per-tree seeded bootstrap, floor(sqrt(9)) features per node,
// Gini impurity splits, stop at max_depth / min_leaf / purity. Deterministic
// for a fixed seed.
Forest train_forest(std::span<const LabeledRow> rows, const ForestConfig& cfg);

void save_forest(const Forest& forest, const std::filesystem::path& file);
Forest load_forest(const std::filesystem::path& file);

// Training rows for the held-back fit week: every pool item hit in fit_truth
// is a positive; negatives are subsampled to neg_per_pos per positive for
// each user (users with no pool positive contribute nothing).
std::vector<LabeledRow> label_rows(const ComponentLists& lists, const EnsembleContext& ctx,
                                   const Truth& fit_truth, int neg_per_pos, std::uint64_t seed);

// top-k pool items by forest probability; ties by mf_score, then item id
RankedList ensemble_rank(const Forest& forest, Id user, std::span<const CandidateFeatures> pool,
                         std::size_t k = kMaxListLen);

std::vector<RankedList> forest_rank_all(const Forest& forest, const ComponentLists& lists,
                                        const EnsembleContext& ctx, std::size_t k = kMaxListLen);

// --- greedy linear fusion baseline ---

// Weighted sum of per-user min-max-normalized component scores over the union
// of the component lists. Listed items always normalize strictly above 0, so
// a one-hot weighting reproduces that component's ranking exactly.
std::vector<RankedList> fuse_rank(const ComponentLists& lists, std::span<const double> weights,
                                  std::size_t k = kMaxListLen);

inline constexpr std::array<double, 6> kFusionGrid = {0.0, 0.25, 0.5, 1.0, 2.0, 4.0};

// Coordinate-wise greedy grid search maximizing leaderboard_score on the
// validation truth, started from the best one-hot weighting (which forces
// fused >= best single component). Strict improvements only; terminates.
std::array<double, 3> greedy_linear_fusion(const ComponentLists& lists, const Truth& valid_truth,
                                           std::span<const double> grid = kFusionGrid,
                                           std::size_t k = kMaxListLen);

}  // namespace temprec
