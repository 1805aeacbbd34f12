#include "temprec/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

namespace temprec {

namespace {

constexpr std::uint64_t kTableStream = 0x7ab1e5ULL;
constexpr std::uint64_t kCatalogStream = 0xca7a106ULL;
constexpr std::uint64_t kUserStream = 0xe7e21ULL;

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<std::int32_t> draw_tokens(Rng& rng, int min_n, int spread, int vocab) {
  int n = min_n + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spread)));
  std::vector<std::int32_t> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i)
    out.push_back(1 + static_cast<std::int32_t>(rng.uniform_int(static_cast<std::uint64_t>(vocab))));
  return out;
}

}  // namespace

void GenConfig::validate() const {
  if (n_users < 1 || n_items < 1 || n_weeks < 1 || k_latent < 1 || transition_clusters < 1 ||
      impressions_per_user_week < 1)
    throw ConfigError("GenConfig: all counts must be >= 1");
  if (!(recency_decay > 0.0 && recency_decay < 1.0))
    throw ConfigError("GenConfig: recency_decay must be in (0,1)");
  if (!(transition_sharpness >= 0.0 && transition_sharpness <= 1.0))
    throw ConfigError("GenConfig: transition_sharpness must be in [0,1]");
  if (!(noise >= 0.0 && noise <= 1.0)) throw ConfigError("GenConfig: noise must be in [0,1]");
}

FactorTables::FactorTables(const GenConfig& cfg) : k_(cfg.k_latent) {
  Rng rng(splitmix64(cfg.seed ^ kTableStream));
  const int c = cfg.transition_clusters;
  const std::array<int, 8> user_vocab = {9, c + 1, 12, 8, 12, 5, 7, 5};
  const std::array<int, 5> item_vocab = {9, c + 1, 8, 12, 5};
  auto fill = [&](int vocab) {
    std::vector<double> t(static_cast<std::size_t>(vocab) * k_);
    for (auto& v : t) v = rng.uniform_range(-0.5, 0.5);
    return t;
  };
  for (int v : user_vocab) user_field_tables_.push_back(fill(v));
  for (int v : item_vocab) item_field_tables_.push_back(fill(v));
}

std::vector<double> FactorTables::sum_fields(const std::vector<std::vector<double>>& tables,
                                             std::span<const std::int32_t> values) const {
  std::vector<double> acc(k_, 0.0);
  for (std::size_t f = 0; f < tables.size(); ++f) {
    const auto& table = tables[f];
    std::size_t vocab = table.size() / k_;
    std::size_t value = static_cast<std::size_t>(values[f]) < vocab ? values[f] : 0;
    const double* row = table.data() + value * k_;
    for (int j = 0; j < k_; ++j) acc[j] += row[j];
  }
  return acc;
}

std::vector<double> FactorTables::item_factor(const Item& item) const {
  return sum_fields(item_field_tables_, item.categorical);
}

std::vector<double> FactorTables::user_base_factor(const User& user) const {
  return sum_fields(user_field_tables_, user.categorical);
}

DatasetBundle generate(const GenConfig& cfg) {
  cfg.validate();
  FactorTables tables(cfg);
  const int C = cfg.transition_clusters;
  const int quarter = std::max(1, cfg.n_weeks / 4);

  DatasetBundle b;
  Rng catalog(splitmix64(cfg.seed ^ kCatalogStream));

  b.items.reserve(cfg.n_items);
  for (int i = 0; i < cfg.n_items; ++i) {
    Item it;
    it.id = i + 1;
    it.categorical[0] = static_cast<std::int32_t>(catalog.uniform_int(9));
    int cluster = static_cast<int>(catalog.uniform_int(C));
    it.categorical[1] = cluster + 1;  // discipline doubles as the planted cluster
    it.categorical[2] = static_cast<std::int32_t>(catalog.uniform_int(8));
    it.categorical[3] = static_cast<std::int32_t>(catalog.uniform_int(12));
    it.categorical[4] = static_cast<std::int32_t>(catalog.uniform_int(5));
    it.latitude = catalog.uniform_range(-60.0, 70.0);
    it.longitude = catalog.uniform_range(-180.0, 180.0);
    it.active = catalog.uniform() >= kGenInactiveFrac;
    bool cold = it.active && catalog.uniform() < kGenColdItemFrac;
    it.created_at = cold ? cfg.n_weeks - quarter + 1 + static_cast<int>(catalog.uniform_int(quarter))
                         : 1 + static_cast<int>(catalog.uniform_int(quarter));
    it.title = draw_tokens(catalog, 3, 4, 500);
    it.tags = draw_tokens(catalog, 2, 3, 300);
    b.items.push_back(std::move(it));
  }

  b.users.reserve(cfg.n_users);
  for (int u = 0; u < cfg.n_users; ++u) {
    User us;
    us.id = u + 1;
    us.categorical[0] = static_cast<std::int32_t>(catalog.uniform_int(9));
    us.categorical[1] = 1 + static_cast<std::int32_t>(catalog.uniform_int(C));
    us.categorical[2] = static_cast<std::int32_t>(catalog.uniform_int(12));
    us.categorical[3] = static_cast<std::int32_t>(catalog.uniform_int(8));
    us.categorical[4] = static_cast<std::int32_t>(catalog.uniform_int(12));
    us.categorical[5] = static_cast<std::int32_t>(catalog.uniform_int(5));
    us.categorical[6] = static_cast<std::int32_t>(catalog.uniform_int(7));
    us.categorical[7] = static_cast<std::int32_t>(catalog.uniform_int(5));
    us.job_roles = draw_tokens(catalog, 2, 3, 300);
    us.field_of_studies = draw_tokens(catalog, 1, 3, 200);
    if (catalog.uniform() < kGenTargetUserFrac) b.target_users.push_back(us.id);
    b.users.push_back(std::move(us));
  }

  // item factors and cluster pools
  std::vector<std::vector<double>> z_item(cfg.n_items);
  std::vector<int> item_cluster(cfg.n_items);
  std::vector<std::vector<int>> cluster_pool(C);
  for (int i = 0; i < cfg.n_items; ++i) {
    z_item[i] = tables.item_factor(b.items[i]);
    item_cluster[i] = b.items[i].categorical[1] - 1;
    if (b.items[i].active) cluster_pool[item_cluster[i]].push_back(i);
  }

  struct PairState {
    int last_week = 0;
    int count = 0;
  };

  std::vector<double> aff(cfg.n_items);
  std::vector<double> orc(cfg.n_items);
  std::vector<int> order;

  for (int u = 0; u < cfg.n_users; ++u) {
    Rng rng(splitmix64(cfg.seed ^ (kUserStream + 0x9e3779b97f4a7c15ULL * (u + 1))));
    std::vector<double> z = tables.user_base_factor(b.users[u]);
    for (auto& v : z) v += rng.uniform_range(-0.4, 0.4);

    int cluster = static_cast<int>(rng.uniform_int(C));
    std::map<int, PairState> history;  // ordered so sampling scans are stable

    for (int week = 1; week <= cfg.n_weeks; ++week) {
      for (int i = 0; i < cfg.n_items; ++i) aff[i] = dot(z, z_item[i]);

      // impressions: the platform oracle's noisy top list, computed before
      // this week's events
      {
        orc = aff;
        for (const auto& [item, st] : history)
          orc[item] += kGenRecencyBonus * std::pow(cfg.recency_decay, week - st.last_week);
        order.clear();
        for (int i = 0; i < cfg.n_items; ++i)
          if (b.items[i].active && b.items[i].created_at <= week) order.push_back(i);
        std::size_t n_top = std::min<std::size_t>(order.size(), cfg.impressions_per_user_week);
        std::partial_sort(order.begin(), order.begin() + n_top, order.end(),
                          [&](int a, int bb) {
                            if (orc[a] != orc[bb]) return orc[a] > orc[bb];
                            return a < bb;
                          });
        ImpressionRecord rec;
        rec.user = b.users[u].id;
        rec.week = week;
        for (std::size_t s = 0; s < n_top; ++s) {
          int pick = order[s];
          if (rng.uniform() < cfg.noise)
            pick = order[rng.uniform_int(order.size())];
          rec.items.push_back(b.items[pick].id);
        }
        if (!rec.items.empty()) b.impressions.push_back(std::move(rec));
      }

      int n_events = 2 + static_cast<int>(rng.uniform_int(3));
      std::set<int> chosen;
      for (int e = 0; e < n_events; ++e) {
        if (rng.uniform() < cfg.transition_sharpness)
          cluster = (cluster + 1) % C;
        else
          cluster = static_cast<int>(rng.uniform_int(C));

        int picked = -1;

        // recency path: lag ~ rho^l over the feasible window, then an item of
        // the target cluster at that lag weighted by event multiplicity. An
        // empty lag class falls through to a fresh pick, so the conditional
        // lag law stays geometric instead of renormalizing onto what exists.
        if (!history.empty() && rng.uniform() < kGenReinteractProb && week >= 2) {
          double z = 0.0;
          for (int l = 1; l < week; ++l) z += std::pow(cfg.recency_decay, l);
          double x = rng.uniform() * z;
          int lag = week - 1;
          for (int l = 1; l < week; ++l) {
            x -= std::pow(cfg.recency_decay, l);
            if (x <= 0.0) {
              lag = l;
              break;
            }
          }
          auto in_class = [&](int item, const PairState& st) {
            return item_cluster[item] == cluster && !chosen.count(item) &&
                   week - st.last_week == lag;
          };
          long weight_total = 0;
          for (const auto& [item, st] : history)
            if (in_class(item, st)) weight_total += st.count;
          if (weight_total > 0) {
            long y = static_cast<long>(rng.uniform_int(weight_total)) + 1;
            for (const auto& [item, st] : history) {
              if (!in_class(item, st)) continue;
              y -= st.count;
              if (y <= 0) {
                picked = item;
                break;
              }
            }
          }
        }

        // fresh path: unseen items of the target cluster, best affinity with
        // occasional uniform noise
        if (picked < 0) {
          auto eligible = [&](int i) {
            return b.items[i].created_at <= week && !chosen.count(i) && !history.count(i);
          };
          const auto& pool = cluster_pool[cluster];
          if (rng.uniform() < cfg.noise) {
            std::vector<int> open;
            for (int i : pool)
              if (eligible(i)) open.push_back(i);
            if (!open.empty()) picked = open[rng.uniform_int(open.size())];
          } else {
            double best = 0.0;
            for (int i : pool) {
              if (!eligible(i)) continue;
              if (picked < 0 || aff[i] > best) {
                picked = i;
                best = aff[i];
              }
            }
          }
          if (picked < 0) {
            // cluster exhausted; fall back to any eligible active item
            double best = 0.0;
            for (int i = 0; i < cfg.n_items; ++i) {
              if (!b.items[i].active || !eligible(i)) continue;
              if (picked < 0 || aff[i] > best) {
                picked = i;
                best = aff[i];
              }
            }
          }
        }
        if (picked < 0) continue;

        double k = rng.uniform();
        int kind = k < 0.80 ? kKindClick : k < 0.92 ? kKindBookmark : k < 0.98 ? kKindReply
                                                                               : kKindDelete;
        b.interactions.push_back({b.users[u].id, b.items[picked].id, kind, week});
        auto& st = history[picked];
        st.last_week = week;
        st.count += 1;
        chosen.insert(picked);
      }

      for (auto& v : z) v += rng.uniform_range(-kGenDriftStep, kGenDriftStep);
    }
  }

  b.finalize();
  return b;
}

}  // namespace temprec
