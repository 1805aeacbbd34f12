#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <vector>

#include "temprec/data.hpp"

namespace temprec {

// Per-user predictions are capped at 30 entries, above the largest N the
// score formula looks at.
inline constexpr std::size_t kMaxListLen = 30;

struct RankedList {
  Id user = 0;
  std::vector<Id> items;      // best first, no duplicates, <= kMaxListLen
  std::vector<double> scores; // parallel to items

  void validate() const;  // throws std::invalid_argument on broken invariants
};

using HistoryMap = std::map<Id, std::vector<Id>>;  // user -> sorted item ids

double precision_at(const RankedList& ranked, const std::vector<Id>& relevant_sorted, int n);

// S(u) = 20*(P@2 + P@4 + R + UserSuccess) + 10*(P@6 + P@20).
// `relevant_sorted` must be non-empty and sorted ascending.
double user_score(const RankedList& ranked, const std::vector<Id>& relevant_sorted);

double leaderboard_score(const std::vector<RankedList>& preds, const Truth& truth);

// Leaderboard score after deleting each user's history items from both their
// ranked list and their truth set; users whose truth empties out are dropped.
double score_new(const std::vector<RankedList>& preds, const Truth& truth,
                 const HistoryMap& history);

// Submission format: "user_id<TAB>item1,item2,..." one user per line.
void write_predictions(const std::vector<RankedList>& preds, const std::filesystem::path& file);
std::vector<RankedList> read_predictions(const std::filesystem::path& file);

}  // namespace temprec
