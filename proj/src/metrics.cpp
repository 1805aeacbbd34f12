#include "temprec/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>
#include <stdexcept>

namespace temprec {

void RankedList::validate() const {
  if (items.size() > kMaxListLen)
    throw std::invalid_argument("ranked list longer than " + std::to_string(kMaxListLen));
  if (scores.size() != items.size())
    throw std::invalid_argument("ranked list scores not parallel to items");
  std::set<Id> seen(items.begin(), items.end());
  if (seen.size() != items.size())
    throw std::invalid_argument("ranked list contains duplicate items");
}

namespace {

bool is_relevant(const std::vector<Id>& relevant_sorted, Id item) {
  return std::binary_search(relevant_sorted.begin(), relevant_sorted.end(), item);
}

}  // namespace

double precision_at(const RankedList& ranked, const std::vector<Id>& relevant_sorted, int n) {
  if (n < 1) throw std::invalid_argument("precision_at: n must be >= 1");
  std::size_t top = std::min<std::size_t>(ranked.items.size(), static_cast<std::size_t>(n));
  int hits = 0;
  for (std::size_t i = 0; i < top; ++i)
    if (is_relevant(relevant_sorted, ranked.items[i])) ++hits;
  // denominator stays n even when the list is shorter
  return static_cast<double>(hits) / static_cast<double>(n);
}

double user_score(const RankedList& ranked, const std::vector<Id>& relevant_sorted) {
  if (relevant_sorted.empty())
    throw std::invalid_argument("user_score: relevant set must be non-empty");
  int hits = 0;
  bool success = false;
  for (Id item : ranked.items) {
    if (is_relevant(relevant_sorted, item)) {
      ++hits;
      success = true;
    }
  }
  double recall = static_cast<double>(hits) / static_cast<double>(relevant_sorted.size());
  double p2 = precision_at(ranked, relevant_sorted, 2);
  double p4 = precision_at(ranked, relevant_sorted, 4);
  double p6 = precision_at(ranked, relevant_sorted, 6);
  double p20 = precision_at(ranked, relevant_sorted, 20);
  return 20.0 * (p2 + p4 + recall + (success ? 1.0 : 0.0)) + 10.0 * (p6 + p20);
}

double leaderboard_score(const std::vector<RankedList>& preds, const Truth& truth) {
  std::set<Id> seen;
  for (const auto& p : preds)
    if (!seen.insert(p.user).second)
      throw std::invalid_argument("duplicate user " + std::to_string(p.user) + " in predictions");

  std::map<Id, const RankedList*> by_user;
  for (const auto& p : preds) by_user.emplace(p.user, &p);

  double total = 0.0;
  for (const auto& [user, relevant] : truth) {
    auto it = by_user.find(user);
    if (it == by_user.end()) continue;  // missing predictions contribute 0
    total += user_score(*it->second, relevant);
  }
  return total;
}

double score_new(const std::vector<RankedList>& preds, const Truth& truth,
                 const HistoryMap& history) {
  static const std::vector<Id> kEmpty;
  auto history_of = [&](Id user) -> const std::vector<Id>& {
    auto it = history.find(user);
    return it == history.end() ? kEmpty : it->second;
  };

  std::vector<RankedList> filtered_preds;
  filtered_preds.reserve(preds.size());
  for (const auto& p : preds) {
    const auto& hist = history_of(p.user);
    RankedList keep;
    keep.user = p.user;
    for (std::size_t i = 0; i < p.items.size(); ++i) {
      if (std::binary_search(hist.begin(), hist.end(), p.items[i])) continue;
      keep.items.push_back(p.items[i]);
      keep.scores.push_back(i < p.scores.size() ? p.scores[i] : 0.0);
    }
    filtered_preds.push_back(std::move(keep));
  }

  Truth filtered_truth;
  for (const auto& [user, relevant] : truth) {
    const auto& hist = history_of(user);
    std::vector<Id> keep;
    for (Id item : relevant)
      if (!std::binary_search(hist.begin(), hist.end(), item)) keep.push_back(item);
    if (!keep.empty()) filtered_truth.emplace(user, std::move(keep));
  }

  return leaderboard_score(filtered_preds, filtered_truth);
}

void write_predictions(const std::vector<RankedList>& preds, const std::filesystem::path& file) {
  std::ofstream out(file);
  for (const auto& p : preds) {
    out << p.user << '\t';
    for (std::size_t i = 0; i < p.items.size(); ++i) {
      if (i) out << ',';
      out << p.items[i];
    }
    out << '\n';
  }
}

std::vector<RankedList> read_predictions(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ParseError(file.filename().string(), 0, "cannot open file");
  std::vector<RankedList> preds;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw ParseError(file.filename().string(), lineno, "expected user_id<TAB>items");
    RankedList p;
    {
      auto s = std::string_view(line).substr(0, tab);
      auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), p.user);
      if (ec != std::errc() || ptr != s.data() + s.size())
        throw ParseError(file.filename().string(), lineno, "bad user id");
    }
    std::string_view rest = std::string_view(line).substr(tab + 1);
    std::size_t start = 0;
    while (!rest.empty() && start <= rest.size()) {
      std::size_t comma = rest.find(',', start);
      auto tok = rest.substr(start, comma == std::string_view::npos ? comma : comma - start);
      if (!tok.empty()) {
        Id item{};
        auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), item);
        if (ec != std::errc() || ptr != tok.data() + tok.size())
          throw ParseError(file.filename().string(), lineno, "bad item id");
        p.items.push_back(item);
        p.scores.push_back(0.0);
      }
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    p.validate();
    preds.push_back(std::move(p));
  }
  return preds;
}

}  // namespace temprec
