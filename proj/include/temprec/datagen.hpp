#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "temprec/data.hpp"
#include "temprec/rng.hpp"

namespace temprec {

// Generator for synthetic interaction data with three planted signals:
// recency-biased re-interaction (geometric in week lag with ratio
// recency_decay), feature-driven affinity (latent factors are a deterministic
// function of categorical features), and a cyclic cluster Markov chain over
// consecutive item choices.
struct GenConfig {
  int n_users = 1000;
  int n_items = 500;
  int n_weeks = 16;
  int k_latent = 8;
  double recency_decay = 0.5;       // rho in (0,1)
  int transition_clusters = 8;
  double transition_sharpness = 0.5;  // probability of following the planted cycle
  int impressions_per_user_week = 5;
  double noise = 0.1;               // flip probability for picks and impressions
  std::uint64_t seed = 1;

  void validate() const;  // throws ConfigError
};

// Internal generative constants, fixed so kind-specific and drift behaviour
// stay learnable across configs.
inline constexpr double kGenReinteractProb = 0.4;
inline constexpr double kGenColdItemFrac = 0.2;
inline constexpr double kGenInactiveFrac = 0.05;
inline constexpr double kGenTargetUserFrac = 0.8;
inline constexpr double kGenDriftStep = 0.05;
inline constexpr double kGenRecencyBonus = 1.5;

// Latent factor tables derived from the config seed alone. Item factors are a
// pure function of item categorical features, so identical features imply
// identical factors; user factors add a per-user personal component.
class FactorTables {
 public:
  explicit FactorTables(const GenConfig& cfg);

  std::vector<double> item_factor(const Item& item) const;
  std::vector<double> user_base_factor(const User& user) const;

 private:
  int k_;
  std::vector<std::vector<double>> user_field_tables_;  // [field][value*k + j]
  std::vector<std::vector<double>> item_field_tables_;
  std::vector<double> sum_fields(const std::vector<std::vector<double>>& tables,
                                 std::span<const std::int32_t> values) const;
};

DatasetBundle generate(const GenConfig& cfg);

}  // namespace temprec
