#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace temprec {

using Id = std::int64_t;

// Interaction kinds as stored in interactions.tsv. Delete is kept in the data
// but never counts as a positive signal.
inline constexpr int kKindClick = 1;
inline constexpr int kKindBookmark = 2;
inline constexpr int kKindReply = 3;
inline constexpr int kKindDelete = 4;

inline bool is_positive_kind(int kind) { return kind >= kKindClick && kind <= kKindReply; }

inline constexpr std::array<const char*, 8> kUserCatFields = {
    "career_level", "discipline_id", "industry_id",      "country",
    "region",       "exp_n_entries_class", "exp_years", "exp_in_current"};

inline constexpr std::array<const char*, 5> kItemCatFields = {
    "career_level", "discipline_id", "country", "region", "employment"};

// Categorical value 0 is the reserved missing-value id and gets its own
// learned embedding downstream.
struct User {
  Id id = 0;
  std::array<std::int32_t, kUserCatFields.size()> categorical{};
  std::vector<std::int32_t> job_roles;
  std::vector<std::int32_t> field_of_studies;
};

struct Item {
  Id id = 0;
  std::array<std::int32_t, kItemCatFields.size()> categorical{};
  double latitude = 0.0;
  double longitude = 0.0;
  int created_at = 0;  // week index
  std::vector<std::int32_t> title;
  std::vector<std::int32_t> tags;
  bool active = true;
};

struct Interaction {
  Id user = 0;
  Id item = 0;
  int kind = 0;
  int week = 0;
};

struct ImpressionRecord {
  Id user = 0;
  int week = 0;
  std::vector<Id> items;  // duplicates preserved as counts
};

struct ParseError : std::runtime_error {
  ParseError(const std::string& file, std::size_t line, const std::string& what)
      : std::runtime_error(file + ":" + std::to_string(line) + ": " + what) {}
};

struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DatasetBundle {
  std::vector<User> users;
  std::vector<Item> items;
  std::vector<Interaction> interactions;   // file order preserved
  std::vector<ImpressionRecord> impressions;
  int first_week = 0;
  int last_week = 0;
  std::vector<Id> target_users;  // sorted ascending

  std::unordered_map<Id, std::int32_t> user_index;
  std::unordered_map<Id, std::int32_t> item_index;

  const User* find_user(Id id) const;
  const Item* find_item(Id id) const;

  // Rebuilds the id lookup tables and checks referential integrity of
  // interactions, impressions and target_users. Throws IntegrityError.
  void finalize();
};

DatasetBundle load_bundle(const std::filesystem::path& dir);
void save_bundle(const DatasetBundle& bundle, const std::filesystem::path& dir);

// user -> sorted positive items at the target week; users with no positives
// are absent.
using Truth = std::map<Id, std::vector<Id>>;

struct WeekSplit {
  DatasetBundle train;
  Truth truth;
};

WeekSplit split_by_week(const DatasetBundle& bundle, int train_end, int target);

// Item vocabulary for the sequence model: the cap most frequent items by
// positive-interaction count plus <UNK> and <START>. Ties go to the smaller
// item id. Index order follows frequency rank.
class ItemVocab {
 public:
  static constexpr std::int32_t kUnk = 0;
  static constexpr std::int32_t kStart = 1;

  ItemVocab() = default;
  explicit ItemVocab(std::vector<Id> ranked_items);

  std::int32_t index_of(Id item) const;  // kUnk when unmapped
  bool contains(Id item) const { return index_.count(item) != 0; }
  Id item_at(std::int32_t index) const;  // negative sentinel for specials
  std::int32_t size() const { return static_cast<std::int32_t>(items_.size()) + 2; }
  std::span<const Id> ranked_items() const { return items_; }
  std::uint64_t hash() const;

 private:
  std::vector<Id> items_;  // rank order, index = position + 2
  std::unordered_map<Id, std::int32_t> index_;
};

ItemVocab build_item_vocab(const DatasetBundle& train, std::size_t cap);

// snprintf-backed double formatting that round-trips exactly ("%.17g" with
// trailing-zero trimming), shared by every TSV writer.
std::string format_double(double v);

}  // namespace temprec
