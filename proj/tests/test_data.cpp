#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "temprec/data.hpp"
#include "temprec/datagen.hpp"

using namespace temprec;
namespace fs = std::filesystem;

namespace {

DatasetBundle tiny_bundle() {
  DatasetBundle b;
  for (Id id : {1, 2, 3}) {
    User u;
    u.id = id;
    u.categorical = {1, 2, 3, 4, 5, 1, 2, 3};
    u.job_roles = {10, 20};
    if (id == 2) u.field_of_studies = {};  // empty descriptor column
    else u.field_of_studies = {7};
    b.users.push_back(u);
  }
  for (Id id : {100, 101}) {
    Item it;
    it.id = id;
    it.categorical = {1, 2, 3, 4, 0};
    it.latitude = 48.25;
    it.longitude = -3.5;
    it.created_at = 26;
    it.title = {5, 6, 7};
    it.tags = {};
    it.active = id == 100;
    b.items.push_back(it);
  }
  b.interactions = {{1, 100, 1, 26}, {1, 101, 4, 27}, {2, 100, 2, 27}, {3, 101, 3, 28}};
  b.impressions = {{1, 26, {100, 101, 100}}, {2, 27, {101}}};
  b.target_users = {1, 3};
  b.finalize();
  return b;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool same_dir_bytes(const fs::path& a, const fs::path& b) {
  for (const char* f : {"users.tsv", "items.tsv", "interactions.tsv", "impressions.tsv",
                        "target_users.tsv"})
    if (slurp(a / f) != slurp(b / f)) return false;
  return true;
}

}  // namespace

TEST_CASE("save then load is the identity") {
  auto b = tiny_bundle();
  fs::path dir = "data_rt1";
  save_bundle(b, dir);
  auto b2 = load_bundle(dir);
  REQUIRE(b2.users.size() == 3);
  REQUIRE(b2.items.size() == 2);
  CHECK(b2.users[1].field_of_studies.empty());
  CHECK(b2.items[0].latitude == 48.25);
  CHECK(b2.items[1].active == false);
  CHECK(b2.interactions.size() == 4);
  CHECK(b2.impressions[0].items == std::vector<Id>{100, 101, 100});
  CHECK(b2.target_users == std::vector<Id>{1, 3});
  CHECK(b2.first_week == 26);
  CHECK(b2.last_week == 28);
  // byte-stable serialization: save(load(save(x))) == save(x)
  fs::path dir2 = "data_rt2";
  save_bundle(b2, dir2);
  CHECK(same_dir_bytes(dir, dir2));
}

TEST_CASE("generated bundle survives a write/read round trip") {
  GenConfig cfg;
  cfg.n_users = 40;
  cfg.n_items = 60;
  cfg.n_weeks = 6;
  cfg.seed = 99;
  auto b = generate(cfg);
  fs::path dir = "data_rt_gen1";
  save_bundle(b, dir);
  auto b2 = load_bundle(dir);
  fs::path dir2 = "data_rt_gen2";
  save_bundle(b2, dir2);
  CHECK(same_dir_bytes(dir, dir2));
  CHECK(b2.users.size() == b.users.size());
  CHECK(b2.interactions.size() == b.interactions.size());
  CHECK(b2.impressions.size() == b.impressions.size());
}

TEST_CASE("malformed rows report file and line") {
  auto b = tiny_bundle();
  fs::path dir = "data_bad";
  save_bundle(b, dir);
  {
    std::ofstream out(dir / "interactions.tsv", std::ios::binary);
    out << "user_id\titem_id\tinteraction_type\tweek\n1\t100\tnope\t26\n";
  }
  try {
    load_bundle(dir);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("interactions.tsv:2") != std::string::npos);
  }
}

TEST_CASE("dangling references are integrity errors") {
  auto b = tiny_bundle();
  fs::path dir = "data_dangling";
  save_bundle(b, dir);
  {
    std::ofstream out(dir / "interactions.tsv", std::ios::binary);
    out << "user_id\titem_id\tinteraction_type\tweek\n1\t999\t1\t26\n";
  }
  CHECK_THROWS_AS(load_bundle(dir), IntegrityError);

  // bad header is a parse error
  fs::path dir2 = "data_badheader";
  save_bundle(b, dir2);
  {
    std::ofstream out(dir2 / "users.tsv", std::ios::binary);
    out << "id\twrong\n";
  }
  CHECK_THROWS_AS(load_bundle(dir2), ParseError);
}

TEST_CASE("split_by_week keeps only training-window events") {
  DatasetBundle b;
  for (Id id = 1; id <= 3; ++id) {
    User u;
    u.id = id;
    b.users.push_back(u);
  }
  for (Id id = 100; id <= 105; ++id) {
    Item it;
    it.id = id;
    it.created_at = 26;
    b.items.push_back(it);
  }
  b.interactions = {{1, 100, 1, 26}, {1, 101, 1, 44}, {1, 102, 1, 45}, {1, 103, 2, 45},
                    {2, 104, 4, 45},                   // delete only: not truth
                    {3, 105, 3, 44}};                  // nothing at target
  b.impressions = {{1, 45, {100}}};
  b.target_users = {1, 2, 3};
  b.finalize();

  auto split = split_by_week(b, 44, 45);
  for (const auto& ev : split.train.interactions) CHECK(ev.week <= 44);
  CHECK(split.train.interactions.size() == 3);
  // partition: train events + post-train events = all events
  std::size_t post = 0;
  for (const auto& ev : b.interactions)
    if (ev.week > 44) ++post;
  CHECK(split.train.interactions.size() + post == b.interactions.size());

  REQUIRE(split.truth.size() == 1);  // user 2 deleted only, user 3 has no week-45 event
  CHECK(split.truth.at(1) == std::vector<Id>{102, 103});

  CHECK_THROWS_AS(split_by_week(b, 45, 45), std::out_of_range);
  CHECK_THROWS_AS(split_by_week(b, 20, 45), std::out_of_range);
}

TEST_CASE("split truth matches brute-force scan on generated data") {
  GenConfig cfg;
  cfg.n_users = 80;
  cfg.n_items = 120;
  cfg.n_weeks = 8;
  cfg.seed = 3;
  auto b = generate(cfg);
  auto split = split_by_week(b, 7, 8);

  std::set<Id> targets(b.target_users.begin(), b.target_users.end());
  std::map<Id, std::set<Id>> expect;
  for (const auto& ev : b.interactions)
    if (ev.week == 8 && is_positive_kind(ev.kind) && targets.count(ev.user))
      expect[ev.user].insert(ev.item);
  REQUIRE(split.truth.size() == expect.size());
  for (const auto& [user, items] : expect) {
    REQUIRE(split.truth.count(user));
    CHECK(split.truth.at(user) == std::vector<Id>(items.begin(), items.end()));
  }
}

TEST_CASE("item vocab ranks by positive count, then smaller id") {
  DatasetBundle b;
  User u;
  u.id = 1;
  b.users.push_back(u);
  for (Id id = 100; id <= 104; ++id) {
    Item it;
    it.id = id;
    it.created_at = 1;
    b.items.push_back(it);
  }
  // counts: 103 -> 3, 101 -> 2, 104 -> 2, 100 -> 1; 102 only deleted
  b.interactions = {{1, 103, 1, 1}, {1, 103, 1, 2}, {1, 103, 2, 3}, {1, 104, 1, 1},
                    {1, 104, 3, 2}, {1, 101, 1, 1}, {1, 101, 1, 3}, {1, 100, 1, 2},
                    {1, 102, 4, 2}};
  b.target_users = {1};
  b.finalize();

  auto vocab = build_item_vocab(b, 3);
  CHECK(vocab.size() == 5);  // 3 items + <UNK> + <START>
  CHECK(vocab.index_of(103) == 2);
  CHECK(vocab.index_of(101) == 3);  // ties with 104 -> smaller id first
  CHECK(vocab.index_of(104) == 4);
  CHECK(vocab.index_of(100) == ItemVocab::kUnk);
  CHECK(vocab.index_of(102) == ItemVocab::kUnk);
  CHECK(vocab.item_at(2) == 103);
  CHECK(vocab.item_at(ItemVocab::kUnk) < 0);
  CHECK(vocab.item_at(ItemVocab::kStart) < 0);

  // cap above distinct count: every positively-interacted item kept
  auto all = build_item_vocab(b, 50);
  CHECK(all.size() == 6);  // 100,101,103,104 + specials; 102 has no positives
  CHECK(all.contains(100));
  CHECK(!all.contains(102));
}

TEST_CASE("vocab frequency is non-increasing along index order") {
  GenConfig cfg;
  cfg.n_users = 60;
  cfg.n_items = 90;
  cfg.n_weeks = 6;
  cfg.seed = 12;
  auto b = generate(cfg);
  auto vocab = build_item_vocab(b, 40);
  std::map<Id, int> counts;
  for (const auto& ev : b.interactions)
    if (is_positive_kind(ev.kind)) ++counts[ev.item];
  int prev = INT32_MAX;
  for (Id item : vocab.ranked_items()) {
    CHECK(counts[item] <= prev);
    prev = counts[item];
  }
}

TEST_CASE("vocab hash tracks content") {
  ItemVocab a({5, 9, 11});
  ItemVocab b({5, 9, 11});
  ItemVocab c({5, 11, 9});
  CHECK(a.hash() == b.hash());
  CHECK(a.hash() != c.hash());
}
