#include "temprec/data.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "temprec/rng.hpp"

namespace temprec {

namespace {

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

template <class T>
T parse_int(std::string_view s, const std::string& file, std::size_t line) {
  T value{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ParseError(file, line, "expected integer, got '" + std::string(s) + "'");
  return value;
}

double parse_double(std::string_view s, const std::string& file, std::size_t line) {
  double value{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ParseError(file, line, "expected number, got '" + std::string(s) + "'");
  return value;
}

std::vector<std::int32_t> parse_id_list(std::string_view s, const std::string& file,
                                        std::size_t line) {
  std::vector<std::int32_t> out;
  if (s.empty()) return out;
  for (auto tok : split(s, ',')) out.push_back(parse_int<std::int32_t>(tok, file, line));
  return out;
}

class TsvReader {
 public:
  TsvReader(const std::filesystem::path& path, std::size_t columns, const char* header)
      : name_(path.filename().string()), columns_(columns), in_(path) {
    if (!in_) throw ParseError(name_, 0, "cannot open file");
    if (header != nullptr) {
      std::string first;
      if (!std::getline(in_, first)) throw ParseError(name_, 1, "missing header");
      ++line_;
      if (first != header) throw ParseError(name_, 1, "unexpected header '" + first + "'");
    }
  }

  // Returns false at EOF; otherwise fills `fields` with exactly `columns_` cells.
  bool next(std::vector<std::string_view>& fields) {
    if (!std::getline(in_, current_)) return false;
    ++line_;
    fields = split(current_, '\t');
    if (fields.size() != columns_)
      throw ParseError(name_, line_,
                       "expected " + std::to_string(columns_) + " columns, got " +
                           std::to_string(fields.size()));
    return true;
  }

  const std::string& name() const { return name_; }
  std::size_t line() const { return line_; }

 private:
  std::string name_;
  std::size_t columns_;
  std::ifstream in_;
  std::string current_;
  std::size_t line_ = 0;
};

constexpr const char* kUsersHeader =
    "id\tcareer_level\tdiscipline_id\tindustry_id\tcountry\tregion\t"
    "exp_n_entries_class\texp_years\texp_in_current\tjob_roles\tfield_of_studies";
constexpr const char* kItemsHeader =
    "id\tcareer_level\tdiscipline_id\tcountry\tregion\temployment\tlatitude\t"
    "longitude\tcreated_at\ttitle\ttags\tactive";
constexpr const char* kInteractionsHeader = "user_id\titem_id\tinteraction_type\tweek";
constexpr const char* kImpressionsHeader = "user_id\tweek\titems";

void join_ids(std::string& out, const std::vector<std::int32_t>& ids) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(ids[i]);
  }
}

}  // namespace

std::string format_double(double v) {
  char buf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    double back{};
    auto [ptr, ec] = std::from_chars(buf, buf + std::strlen(buf), back);
    (void)ptr;
    if (ec == std::errc() && back == v) break;
  }
  return buf;
}

const User* DatasetBundle::find_user(Id id) const {
  auto it = user_index.find(id);
  return it == user_index.end() ? nullptr : &users[it->second];
}

const Item* DatasetBundle::find_item(Id id) const {
  auto it = item_index.find(id);
  return it == item_index.end() ? nullptr : &items[it->second];
}

void DatasetBundle::finalize() {
  user_index.clear();
  item_index.clear();
  user_index.reserve(users.size());
  item_index.reserve(items.size());
  for (std::size_t i = 0; i < users.size(); ++i) {
    if (!user_index.emplace(users[i].id, static_cast<std::int32_t>(i)).second)
      throw IntegrityError("duplicate user id " + std::to_string(users[i].id));
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (!item_index.emplace(items[i].id, static_cast<std::int32_t>(i)).second)
      throw IntegrityError("duplicate item id " + std::to_string(items[i].id));
  }
  for (const auto& x : interactions) {
    if (!user_index.count(x.user))
      throw IntegrityError("interaction references unknown user " + std::to_string(x.user));
    if (!item_index.count(x.item))
      throw IntegrityError("interaction references unknown item " + std::to_string(x.item));
  }
  for (const auto& r : impressions) {
    if (!user_index.count(r.user))
      throw IntegrityError("impression references unknown user " + std::to_string(r.user));
    for (Id item : r.items)
      if (!item_index.count(item))
        throw IntegrityError("impression references unknown item " + std::to_string(item));
  }
  for (Id u : target_users)
    if (!user_index.count(u))
      throw IntegrityError("target user " + std::to_string(u) + " not in users table");

  int lo = 0, hi = 0;
  bool seen = false;
  auto widen = [&](int week) {
    if (!seen) { lo = hi = week; seen = true; }
    lo = std::min(lo, week);
    hi = std::max(hi, week);
  };
  for (const auto& x : interactions) widen(x.week);
  for (const auto& r : impressions) widen(r.week);
  first_week = lo;
  last_week = hi;
}

DatasetBundle load_bundle(const std::filesystem::path& dir) {
  DatasetBundle b;
  std::vector<std::string_view> f;

  {
    TsvReader r(dir / "users.tsv", 11, kUsersHeader);
    while (r.next(f)) {
      User u;
      u.id = parse_int<Id>(f[0], r.name(), r.line());
      for (std::size_t c = 0; c < kUserCatFields.size(); ++c)
        u.categorical[c] = parse_int<std::int32_t>(f[1 + c], r.name(), r.line());
      u.job_roles = parse_id_list(f[9], r.name(), r.line());
      u.field_of_studies = parse_id_list(f[10], r.name(), r.line());
      b.users.push_back(std::move(u));
    }
  }
  {
    TsvReader r(dir / "items.tsv", 12, kItemsHeader);
    while (r.next(f)) {
      Item it;
      it.id = parse_int<Id>(f[0], r.name(), r.line());
      for (std::size_t c = 0; c < kItemCatFields.size(); ++c)
        it.categorical[c] = parse_int<std::int32_t>(f[1 + c], r.name(), r.line());
      it.latitude = parse_double(f[6], r.name(), r.line());
      it.longitude = parse_double(f[7], r.name(), r.line());
      it.created_at = parse_int<int>(f[8], r.name(), r.line());
      it.title = parse_id_list(f[9], r.name(), r.line());
      it.tags = parse_id_list(f[10], r.name(), r.line());
      int active = parse_int<int>(f[11], r.name(), r.line());
      if (active != 0 && active != 1)
        throw ParseError(r.name(), r.line(), "active must be 0 or 1");
      it.active = active == 1;
      b.items.push_back(std::move(it));
    }
  }
  {
    TsvReader r(dir / "interactions.tsv", 4, kInteractionsHeader);
    while (r.next(f)) {
      Interaction x;
      x.user = parse_int<Id>(f[0], r.name(), r.line());
      x.item = parse_int<Id>(f[1], r.name(), r.line());
      x.kind = parse_int<int>(f[2], r.name(), r.line());
      x.week = parse_int<int>(f[3], r.name(), r.line());
      if (x.kind < kKindClick || x.kind > kKindDelete)
        throw ParseError(r.name(), r.line(), "interaction_type out of range");
      b.interactions.push_back(x);
    }
  }
  {
    TsvReader r(dir / "impressions.tsv", 3, kImpressionsHeader);
    while (r.next(f)) {
      ImpressionRecord rec;
      rec.user = parse_int<Id>(f[0], r.name(), r.line());
      rec.week = parse_int<int>(f[1], r.name(), r.line());
      if (f[2].empty()) throw ParseError(r.name(), r.line(), "empty impression list");
      for (auto tok : split(f[2], ','))
        rec.items.push_back(parse_int<Id>(tok, r.name(), r.line()));
      b.impressions.push_back(std::move(rec));
    }
  }
  {
    std::ifstream in(dir / "target_users.tsv");
    if (!in) throw ParseError("target_users.tsv", 0, "cannot open file");
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (line.empty()) continue;
      b.target_users.push_back(parse_int<Id>(line, "target_users.tsv", n));
    }
    std::sort(b.target_users.begin(), b.target_users.end());
    b.target_users.erase(std::unique(b.target_users.begin(), b.target_users.end()),
                         b.target_users.end());
  }

  b.finalize();
  return b;
}

void save_bundle(const DatasetBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string buf;

  {
    std::ofstream out(dir / "users.tsv");
    out << kUsersHeader << '\n';
    for (const auto& u : bundle.users) {
      buf.clear();
      buf += std::to_string(u.id);
      for (auto v : u.categorical) {
        buf += '\t';
        buf += std::to_string(v);
      }
      buf += '\t';
      join_ids(buf, u.job_roles);
      buf += '\t';
      join_ids(buf, u.field_of_studies);
      out << buf << '\n';
    }
  }
  {
    std::ofstream out(dir / "items.tsv");
    out << kItemsHeader << '\n';
    for (const auto& it : bundle.items) {
      buf.clear();
      buf += std::to_string(it.id);
      for (auto v : it.categorical) {
        buf += '\t';
        buf += std::to_string(v);
      }
      buf += '\t';
      buf += format_double(it.latitude);
      buf += '\t';
      buf += format_double(it.longitude);
      buf += '\t';
      buf += std::to_string(it.created_at);
      buf += '\t';
      join_ids(buf, it.title);
      buf += '\t';
      join_ids(buf, it.tags);
      buf += '\t';
      buf += it.active ? '1' : '0';
      out << buf << '\n';
    }
  }
  {
    std::ofstream out(dir / "interactions.tsv");
    out << kInteractionsHeader << '\n';
    for (const auto& x : bundle.interactions)
      out << x.user << '\t' << x.item << '\t' << x.kind << '\t' << x.week << '\n';
  }
  {
    std::ofstream out(dir / "impressions.tsv");
    out << kImpressionsHeader << '\n';
    for (const auto& r : bundle.impressions) {
      out << r.user << '\t' << r.week << '\t';
      for (std::size_t i = 0; i < r.items.size(); ++i) {
        if (i) out << ',';
        out << r.items[i];
      }
      out << '\n';
    }
  }
  {
    std::ofstream out(dir / "target_users.tsv");
    for (Id u : bundle.target_users) out << u << '\n';
  }
}

WeekSplit split_by_week(const DatasetBundle& bundle, int train_end, int target) {
  if (!(bundle.first_week <= train_end && train_end < target && target <= bundle.last_week))
    throw std::out_of_range("split_by_week: need first_week <= train_end < target <= last_week");

  WeekSplit out;
  out.train.users = bundle.users;
  out.train.items = bundle.items;
  out.train.target_users = bundle.target_users;
  for (const auto& x : bundle.interactions)
    if (x.week <= train_end) out.train.interactions.push_back(x);
  for (const auto& r : bundle.impressions)
    if (r.week <= train_end) out.train.impressions.push_back(r);
  out.train.finalize();

  std::map<Id, std::vector<Id>> truth;
  for (const auto& x : bundle.interactions)
    if (x.week == target && is_positive_kind(x.kind)) truth[x.user].push_back(x.item);
  // keep target users only, sorted/deduped item sets
  std::vector<Id> targets(bundle.target_users.begin(), bundle.target_users.end());
  for (auto& [user, items] : truth) {
    if (!std::binary_search(targets.begin(), targets.end(), user)) continue;
    std::sort(items.begin(), items.end());
    items.erase(std::unique(items.begin(), items.end()), items.end());
    out.truth.emplace(user, std::move(items));
  }
  return out;
}

ItemVocab::ItemVocab(std::vector<Id> ranked_items) : items_(std::move(ranked_items)) {
  index_.reserve(items_.size());
  for (std::size_t i = 0; i < items_.size(); ++i)
    index_.emplace(items_[i], static_cast<std::int32_t>(i) + 2);
}

std::int32_t ItemVocab::index_of(Id item) const {
  auto it = index_.find(item);
  return it == index_.end() ? kUnk : it->second;
}

Id ItemVocab::item_at(std::int32_t index) const {
  if (index < 2 || index >= size()) return -1;
  return items_[static_cast<std::size_t>(index) - 2];
}

std::uint64_t ItemVocab::hash() const {
  std::uint64_t h = 0x5bd1e995;
  for (Id item : items_) h = splitmix64(h ^ static_cast<std::uint64_t>(item));
  return h;
}

ItemVocab build_item_vocab(const DatasetBundle& train, std::size_t cap) {
  if (cap < 1) throw ConfigError("build_item_vocab: cap must be >= 1");
  std::map<Id, std::int64_t> counts;
  for (const auto& x : train.interactions)
    if (is_positive_kind(x.kind)) ++counts[x.item];

  std::vector<std::pair<Id, std::int64_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (ranked.size() > cap) ranked.resize(cap);

  std::vector<Id> items;
  items.reserve(ranked.size());
  for (const auto& [item, count] : ranked) items.push_back(item);
  return ItemVocab(std::move(items));
}

}  // namespace temprec
