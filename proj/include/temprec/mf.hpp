#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "temprec/data.hpp"
#include "temprec/history.hpp"
#include "temprec/metrics.hpp"
#include "temprec/rng.hpp"

namespace temprec {

// Maps users and items to lists of feature slots (one embedding row each).
// Slot regions per side: [0] reserved unseen id, then ids, categorical field
// values (value 0 = missing is always present), descriptor tokens (shared
// table per side), and for items 16 quantile buckets per numerical field.
// With use_features off only the id region exists.
class FeatureSpace {
 public:
  FeatureSpace() = default;
  FeatureSpace(const DatasetBundle& bundle, bool use_features);

  std::vector<std::int32_t> user_features(const User& u) const;
  std::vector<std::int32_t> item_features(const Item& it) const;
  std::int32_t n_user_slots() const { return n_user_; }
  std::int32_t n_item_slots() const { return n_item_; }
  bool featureful() const { return use_features_; }

  void write(std::ostream& out) const;
  static FeatureSpace read(std::istream& in);
  bool operator==(const FeatureSpace&) const = default;

 private:
  static constexpr int kNumBuckets = 16;
  bool use_features_ = true;
  std::int32_t n_user_ = 0, n_item_ = 0;
  std::map<Id, std::int32_t> user_ids_, item_ids_;
  std::vector<std::map<std::int32_t, std::int32_t>> user_fields_, item_fields_;
  std::map<std::int32_t, std::int32_t> user_tokens_, item_tokens_;
  std::int32_t user_token_unseen_ = 0, item_token_unseen_ = 0;
  std::vector<std::vector<double>> item_cuts_;  // lat, long, created_at
  std::vector<std::int32_t> item_bucket_base_;
};

struct MfModel {
  int dim = 0;
  FeatureSpace space;
  std::vector<double> user_vecs, item_vecs;  // slot-major [n_slots x dim]
  std::vector<double> user_bias, item_bias;

  std::span<const double> user_row(std::int32_t slot) const {
    return {user_vecs.data() + static_cast<std::size_t>(slot) * dim, static_cast<std::size_t>(dim)};
  }
  std::span<const double> item_row(std::int32_t slot) const {
    return {item_vecs.data() + static_cast<std::size_t>(slot) * dim, static_cast<std::size_t>(dim)};
  }
};

MfModel init_mf_model(const FeatureSpace& space, int dim, std::uint64_t seed);

void save_mf(const MfModel& model, const std::filesystem::path& file);
MfModel load_mf(const std::filesystem::path& file);

// q = sum of feature embedding rows, b = sum of feature biases (Eq. 1 shape)
void embed_user(const MfModel& model, const User& u, std::span<double> q, double& b);
void embed_item(const MfModel& model, const Item& it, std::span<double> q, double& b);

double score_pair(const MfModel& model, const User& u, const Item& it);

struct WeightedPair {
  Id user = 0;
  Id item = 0;
  int week = 0;
  double weight = 1.0;
};

// gamma(tau) = max(0, sum_k w(k, train_end+1-tau)), scaled so the largest
// value is 1; weeks older than the lag window are absent (weight 0).
std::map<int, double> gamma_from_w(const TemporalWeights& w, int train_end);

// One pair per positive interaction, weighted by gamma at its week (1 when
// gamma is absent). With use_impressions, impressions of the last training
// week join at 0.01 * gamma(last week). Zero-weight pairs are dropped.
std::vector<WeightedPair> build_training_pairs(const DatasetBundle& train,
                                               const std::optional<std::map<int, double>>& gamma,
                                               bool use_impressions);

enum class WarpOutcome { updated, no_violation, empty_pool };

double warp_phi(int rank);  // sum_{s<=rank} 1/s

// Per-parameter adagrad accumulators, initialized to 1 so the first step on a
// fresh model is exactly lr * gradient. Training state, not model state:
// without the damping, slots shared by many entities (popular tokens, common
// categorical values) receive the full step once per touching pair and the
// summed embeddings overshoot the margin within one epoch.
struct WarpState {
  std::vector<double> user_vec_acc, item_vec_acc, user_bias_acc, item_bias_acc;

  WarpState() = default;
  WarpState(const FeatureSpace& space, int dim);
};

// One WARP update: sample negatives uniformly from candidates minus the
// user's excluded items until the margin is violated or max_trials runs out;
// on violation after q draws, scale the hinge gradient by phi(floor((|C|-1)/q))
// and the pair weight, applied with per-parameter adagrad steps. Gradients
// touch every feature row of the user, the positive, and the sampled
// negative; the user bias cancels and stays put.
WarpOutcome warp_step(MfModel& model, const User& user, const Item& positive, double weight,
                      std::span<const Item* const> candidates, std::span<const Id> excluded_sorted,
                      int max_trials, double lr, WarpState& state, Rng& rng);

struct MfConfig {
  int dim = 32;
  double lr = 0.05;
  int epochs = 20;
  int max_trials = 50;
  int patience = 3;
  std::uint64_t seed = 1;
  bool use_features = true;
  bool use_impressions = true;
  std::optional<std::map<int, double>> gamma;  // absent = uniform weights
};

struct MfTrainResult {
  MfModel model;        // the best-validation snapshot
  std::vector<double> trace;  // score_new on valid after each epoch
  int best_epoch = 0;
};

// Seeded epoch loop of warp_step over shuffled pairs; after every epoch the
// model is scored on the validation truth (score_new over active items) and
// the best snapshot is kept; stops once `patience` epochs pass it by.
MfTrainResult train_mf(const DatasetBundle& train, const MfConfig& cfg, const Truth& valid);

RankedList recommend_mf(const MfModel& model, const User& u,
                        std::span<const Item* const> candidates, std::size_t k);

// used by both training-time validation and the CLI: rank active items for
// every truth user
std::vector<RankedList> predict_mf(const MfModel& model, const DatasetBundle& bundle,
                                   const std::vector<Id>& users, std::size_t k);

}  // namespace temprec
