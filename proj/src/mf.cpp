#include "temprec/mf.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

namespace temprec {

namespace {

void write_i32(std::ostream& out, std::int32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void write_i64(std::ostream& out, std::int64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }
void write_f64(std::ostream& out, double v) { out.write(reinterpret_cast<const char*>(&v), 8); }

std::int32_t read_i32(std::istream& in) {
  std::int32_t v;
  in.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
std::int64_t read_i64(std::istream& in) {
  std::int64_t v;
  in.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
double read_f64(std::istream& in) {
  double v;
  in.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

template <typename K>
void write_slot_map(std::ostream& out, const std::map<K, std::int32_t>& m) {
  write_i64(out, static_cast<std::int64_t>(m.size()));
  for (const auto& [k, v] : m) {
    write_i64(out, static_cast<std::int64_t>(k));
    write_i32(out, v);
  }
}

template <typename K>
std::map<K, std::int32_t> read_slot_map(std::istream& in) {
  std::map<K, std::int32_t> m;
  std::int64_t n = read_i64(in);
  for (std::int64_t i = 0; i < n; ++i) {
    K k = static_cast<K>(read_i64(in));
    std::int32_t v = read_i32(in);
    m[k] = v;
  }
  return m;
}

int bucket_of(const std::vector<double>& cuts, double v) {
  return static_cast<int>(std::upper_bound(cuts.begin(), cuts.end(), v) - cuts.begin());
}

std::vector<double> quantile_cuts(std::vector<double> values, int buckets) {
  std::sort(values.begin(), values.end());
  std::vector<double> cuts;
  if (values.empty()) return cuts;
  for (int b = 1; b < buckets; ++b)
    cuts.push_back(values[values.size() * b / buckets]);
  return cuts;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

FeatureSpace::FeatureSpace(const DatasetBundle& bundle, bool use_features)
    : use_features_(use_features) {
  std::int32_t next = 1;  // user slot 0 = unseen id
  for (const auto& u : bundle.users) user_ids_.emplace(u.id, 0);
  for (auto& [id, slot] : user_ids_) slot = next++;
  if (use_features_) {
    user_fields_.resize(kUserCatFields.size());
    for (std::size_t f = 0; f < kUserCatFields.size(); ++f) {
      user_fields_[f][0] = 0;  // missing value always present
      for (const auto& u : bundle.users) user_fields_[f].emplace(u.categorical[f], 0);
      for (auto& [value, slot] : user_fields_[f]) slot = next++;
    }
    user_token_unseen_ = next++;
    for (const auto& u : bundle.users) {
      for (auto t : u.job_roles) user_tokens_.emplace(t, 0);
      for (auto t : u.field_of_studies) user_tokens_.emplace(t, 0);
    }
    for (auto& [token, slot] : user_tokens_) slot = next++;
  }
  n_user_ = next;

  next = 1;  // item slot 0 = unseen id
  for (const auto& it : bundle.items) item_ids_.emplace(it.id, 0);
  for (auto& [id, slot] : item_ids_) slot = next++;
  if (use_features_) {
    item_fields_.resize(kItemCatFields.size());
    for (std::size_t f = 0; f < kItemCatFields.size(); ++f) {
      item_fields_[f][0] = 0;
      for (const auto& it : bundle.items) item_fields_[f].emplace(it.categorical[f], 0);
      for (auto& [value, slot] : item_fields_[f]) slot = next++;
    }
    item_token_unseen_ = next++;
    for (const auto& it : bundle.items) {
      for (auto t : it.title) item_tokens_.emplace(t, 0);
      for (auto t : it.tags) item_tokens_.emplace(t, 0);
    }
    for (auto& [token, slot] : item_tokens_) slot = next++;

    std::vector<double> lat, lon, created;
    for (const auto& it : bundle.items) {
      lat.push_back(it.latitude);
      lon.push_back(it.longitude);
      created.push_back(static_cast<double>(it.created_at));
    }
    for (auto& values : {lat, lon, created}) item_cuts_.push_back(quantile_cuts(values, kNumBuckets));
    for (int f = 0; f < 3; ++f) {
      item_bucket_base_.push_back(next);
      next += kNumBuckets;
    }
  }
  n_item_ = next;
}

std::vector<std::int32_t> FeatureSpace::user_features(const User& u) const {
  std::vector<std::int32_t> out;
  auto id_it = user_ids_.find(u.id);
  out.push_back(id_it == user_ids_.end() ? 0 : id_it->second);
  if (!use_features_) return out;
  for (std::size_t f = 0; f < user_fields_.size(); ++f) {
    auto it = user_fields_[f].find(u.categorical[f]);
    out.push_back(it == user_fields_[f].end() ? user_fields_[f].at(0) : it->second);
  }
  auto push_tokens = [&](const std::vector<std::int32_t>& tokens) {
    for (auto t : tokens) {
      auto it = user_tokens_.find(t);
      out.push_back(it == user_tokens_.end() ? user_token_unseen_ : it->second);
    }
  };
  push_tokens(u.job_roles);
  push_tokens(u.field_of_studies);
  return out;
}

std::vector<std::int32_t> FeatureSpace::item_features(const Item& item) const {
  std::vector<std::int32_t> out;
  auto id_it = item_ids_.find(item.id);
  out.push_back(id_it == item_ids_.end() ? 0 : id_it->second);
  if (!use_features_) return out;
  for (std::size_t f = 0; f < item_fields_.size(); ++f) {
    auto it = item_fields_[f].find(item.categorical[f]);
    out.push_back(it == item_fields_[f].end() ? item_fields_[f].at(0) : it->second);
  }
  auto push_tokens = [&](const std::vector<std::int32_t>& tokens) {
    for (auto t : tokens) {
      auto it = item_tokens_.find(t);
      out.push_back(it == item_tokens_.end() ? item_token_unseen_ : it->second);
    }
  };
  push_tokens(item.title);
  push_tokens(item.tags);
  const double vals[3] = {item.latitude, item.longitude, static_cast<double>(item.created_at)};
  for (int f = 0; f < 3; ++f)
    out.push_back(item_bucket_base_[f] + bucket_of(item_cuts_[f], vals[f]));
  return out;
}

void FeatureSpace::write(std::ostream& out) const {
  out.put(use_features_ ? 1 : 0);
  write_i32(out, n_user_);
  write_i32(out, n_item_);
  write_slot_map(out, user_ids_);
  write_slot_map(out, item_ids_);
  write_i64(out, static_cast<std::int64_t>(user_fields_.size()));
  for (const auto& m : user_fields_) write_slot_map(out, m);
  write_i64(out, static_cast<std::int64_t>(item_fields_.size()));
  for (const auto& m : item_fields_) write_slot_map(out, m);
  write_slot_map(out, user_tokens_);
  write_slot_map(out, item_tokens_);
  write_i32(out, user_token_unseen_);
  write_i32(out, item_token_unseen_);
  write_i64(out, static_cast<std::int64_t>(item_cuts_.size()));
  for (const auto& cuts : item_cuts_) {
    write_i64(out, static_cast<std::int64_t>(cuts.size()));
    for (double c : cuts) write_f64(out, c);
  }
  write_i64(out, static_cast<std::int64_t>(item_bucket_base_.size()));
  for (auto b : item_bucket_base_) write_i32(out, b);
}

FeatureSpace FeatureSpace::read(std::istream& in) {
  FeatureSpace s;
  s.use_features_ = in.get() != 0;
  s.n_user_ = read_i32(in);
  s.n_item_ = read_i32(in);
  s.user_ids_ = read_slot_map<Id>(in);
  s.item_ids_ = read_slot_map<Id>(in);
  s.user_fields_.resize(read_i64(in));
  for (auto& m : s.user_fields_) m = read_slot_map<std::int32_t>(in);
  s.item_fields_.resize(read_i64(in));
  for (auto& m : s.item_fields_) m = read_slot_map<std::int32_t>(in);
  s.user_tokens_ = read_slot_map<std::int32_t>(in);
  s.item_tokens_ = read_slot_map<std::int32_t>(in);
  s.user_token_unseen_ = read_i32(in);
  s.item_token_unseen_ = read_i32(in);
  s.item_cuts_.resize(read_i64(in));
  for (auto& cuts : s.item_cuts_) {
    cuts.resize(read_i64(in));
    for (auto& c : cuts) c = read_f64(in);
  }
  s.item_bucket_base_.resize(read_i64(in));
  for (auto& b : s.item_bucket_base_) b = read_i32(in);
  return s;
}

MfModel init_mf_model(const FeatureSpace& space, int dim, std::uint64_t seed) {
  if (dim < 1) throw ConfigError("mf: dim must be >= 1");
  MfModel m;
  m.dim = dim;
  m.space = space;
  Rng rng(splitmix64(seed ^ 0x3a7d11ULL));
  double half = 0.5 / dim;
  m.user_vecs.resize(static_cast<std::size_t>(space.n_user_slots()) * dim);
  m.item_vecs.resize(static_cast<std::size_t>(space.n_item_slots()) * dim);
  for (auto& v : m.user_vecs) v = rng.uniform_range(-half, half);
  for (auto& v : m.item_vecs) v = rng.uniform_range(-half, half);
  m.user_bias.assign(space.n_user_slots(), 0.0);
  m.item_bias.assign(space.n_item_slots(), 0.0);
  return m;
}

void save_mf(const MfModel& model, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out.write("TRMF0001", 8);
  write_i32(out, model.dim);
  model.space.write(out);
  auto dump = [&](const std::vector<double>& v) {
    write_i64(out, static_cast<std::int64_t>(v.size()));
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
  };
  dump(model.user_vecs);
  dump(model.item_vecs);
  dump(model.user_bias);
  dump(model.item_bias);
}

MfModel load_mf(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  char magic[8];
  in.read(magic, 8);
  if (std::memcmp(magic, "TRMF0001", 8) != 0)
    throw std::runtime_error(file.string() + ": not a factorization model");
  MfModel m;
  m.dim = read_i32(in);
  m.space = FeatureSpace::read(in);
  auto slurp = [&](std::vector<double>& v) {
    v.resize(read_i64(in));
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
  };
  slurp(m.user_vecs);
  slurp(m.item_vecs);
  slurp(m.user_bias);
  slurp(m.item_bias);
  if (!in) throw std::runtime_error(file.string() + ": truncated model file");
  return m;
}

void embed_user(const MfModel& model, const User& u, std::span<double> q, double& b) {
  std::fill(q.begin(), q.end(), 0.0);
  b = 0.0;
  for (auto slot : model.space.user_features(u)) {
    auto row = model.user_row(slot);
    for (int j = 0; j < model.dim; ++j) q[j] += row[j];
    b += model.user_bias[slot];
  }
}

void embed_item(const MfModel& model, const Item& it, std::span<double> q, double& b) {
  std::fill(q.begin(), q.end(), 0.0);
  b = 0.0;
  for (auto slot : model.space.item_features(it)) {
    auto row = model.item_row(slot);
    for (int j = 0; j < model.dim; ++j) q[j] += row[j];
    b += model.item_bias[slot];
  }
}

double score_pair(const MfModel& model, const User& u, const Item& it) {
  std::vector<double> qu(model.dim), qi(model.dim);
  double bu, bi;
  embed_user(model, u, qu, bu);
  embed_item(model, it, qi, bi);
  return dot(qu, qi) + bu + bi;
}

std::map<int, double> gamma_from_w(const TemporalWeights& w, int train_end) {
  std::map<int, double> gamma;
  double peak = 0.0;
  for (int lag = 1; lag <= w.lag_window; ++lag) {
    double sum = 0.0;
    for (int k = 0; k < kNumEventKinds; ++k) sum += w.at(k, lag);
    double g = std::max(0.0, sum);
    gamma[train_end + 1 - lag] = g;
    peak = std::max(peak, g);
  }
  if (peak > 0.0)
    for (auto& [week, g] : gamma) g /= peak;
  return gamma;
}

std::vector<WeightedPair> build_training_pairs(const DatasetBundle& train,
                                               const std::optional<std::map<int, double>>& gamma,
                                               bool use_impressions) {
  auto weight_at = [&](int week) {
    if (!gamma) return 1.0;
    auto it = gamma->find(week);
    return it == gamma->end() ? 0.0 : it->second;
  };
  std::vector<WeightedPair> pairs;
  for (const auto& ev : train.interactions) {
    if (!is_positive_kind(ev.kind)) continue;
    double w = weight_at(ev.week);
    if (w <= 0.0) continue;
    pairs.push_back({ev.user, ev.item, ev.week, w});
  }
  if (use_impressions) {
    double w = 0.01 * weight_at(train.last_week);
    if (w > 0.0)
      for (const auto& rec : train.impressions)
        if (rec.week == train.last_week)
          for (Id item : rec.items) pairs.push_back({rec.user, item, rec.week, w});
  }
  return pairs;
}

double warp_phi(int rank) {
  static std::vector<double> h{0.0};
  while (static_cast<int>(h.size()) <= rank) h.push_back(h.back() + 1.0 / h.size());
  return h[rank];
}

WarpState::WarpState(const FeatureSpace& space, int dim)
    : user_vec_acc(static_cast<std::size_t>(space.n_user_slots()) * dim, 1.0),
      item_vec_acc(static_cast<std::size_t>(space.n_item_slots()) * dim, 1.0),
      user_bias_acc(space.n_user_slots(), 1.0),
      item_bias_acc(space.n_item_slots(), 1.0) {}

WarpOutcome warp_step(MfModel& model, const User& user, const Item& positive, double weight,
                      std::span<const Item* const> candidates, std::span<const Id> excluded_sorted,
                      int max_trials, double lr, WarpState& state, Rng& rng) {
  if (weight <= 0.0) return WarpOutcome::no_violation;

  std::vector<double> qu(model.dim), qi(model.dim), qj(model.dim);
  double bu, bi, bj;
  embed_user(model, user, qu, bu);
  embed_item(model, positive, qi, bi);
  double s_pos = dot(qu, qi) + bu + bi;

  auto excluded = [&](const Item* c) {
    return c->id == positive.id ||
           std::binary_search(excluded_sorted.begin(), excluded_sorted.end(), c->id);
  };

  const Item* negative = nullptr;
  int trials = 0;
  long misses = 0;
  const long miss_cap = 32 + 8L * max_trials;
  std::vector<const Item*> pool;  // filled only if rejection sampling starves
  while (trials < max_trials) {
    const Item* c;
    if (pool.empty()) {
      c = candidates[rng.uniform_int(candidates.size())];
      if (excluded(c)) {
        if (++misses > miss_cap) {
          for (const Item* p : candidates)
            if (!excluded(p)) pool.push_back(p);
          if (pool.empty()) return WarpOutcome::empty_pool;
        }
        continue;
      }
    } else {
      c = pool[rng.uniform_int(pool.size())];
    }
    ++trials;
    embed_item(model, *c, qj, bj);
    if (dot(qu, qj) + bu + bj + 1.0 > s_pos) {
      negative = c;
      break;
    }
  }
  if (!negative) return WarpOutcome::no_violation;

  int rank = static_cast<int>((candidates.size() - 1) / static_cast<std::size_t>(trials));
  double g = weight * warp_phi(rank);

  // all deltas use the pre-update embeddings captured above; each parameter
  // moves by lr * grad / sqrt(accumulated grad^2). Slots appearing several
  // times (duplicate tokens, features shared by positive and negative) have
  // their contributions summed before the single adagrad application.
  auto apply = [lr](double& param, double& acc, double grad) {
    param -= lr * grad / std::sqrt(acc);
    acc += grad * grad;
  };
  std::map<std::int32_t, int> user_count;
  for (auto slot : model.space.user_features(user)) ++user_count[slot];
  for (const auto& [slot, count] : user_count) {
    std::size_t base = static_cast<std::size_t>(slot) * model.dim;
    for (int j = 0; j < model.dim; ++j)
      apply(model.user_vecs[base + j], state.user_vec_acc[base + j],
            count * g * (qj[j] - qi[j]));
  }
  std::map<std::int32_t, int> item_net;  // negative pulls up, positive down
  for (auto slot : model.space.item_features(positive)) --item_net[slot];
  for (auto slot : model.space.item_features(*negative)) ++item_net[slot];
  for (const auto& [slot, net] : item_net) {
    if (net == 0) continue;
    std::size_t base = static_cast<std::size_t>(slot) * model.dim;
    for (int j = 0; j < model.dim; ++j)
      apply(model.item_vecs[base + j], state.item_vec_acc[base + j], net * g * qu[j]);
    apply(model.item_bias[slot], state.item_bias_acc[slot], net * g);
  }
  return WarpOutcome::updated;
}

namespace {

// score every candidate against q_u over a frozen item embedding table
RankedList rank_against(const std::vector<double>& item_q, const std::vector<double>& item_b,
                        std::span<const Item* const> candidates, int dim,
                        std::span<const double> qu, double bu, Id user, std::size_t k) {
  std::vector<std::pair<double, Id>> scored(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double s = bu + item_b[i];
    const double* row = item_q.data() + i * dim;
    for (int j = 0; j < dim; ++j) s += row[j] * qu[j];
    scored[i] = {s, candidates[i]->id};
  }
  std::size_t top = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + top, scored.end(),
                    [](const auto& a, const auto& b) {
                      if (a.first != b.first) return a.first > b.first;
                      return a.second < b.second;
                    });
  RankedList out;
  out.user = user;
  for (std::size_t i = 0; i < top; ++i) {
    out.scores.push_back(scored[i].first);
    out.items.push_back(scored[i].second);
  }
  return out;
}

std::vector<RankedList> predict_over(const MfModel& model, const DatasetBundle& bundle,
                                     const std::vector<Id>& users,
                                     std::span<const Item* const> candidates, std::size_t k) {
  std::vector<double> item_q(candidates.size() * model.dim);
  std::vector<double> item_b(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    std::span<double> row(item_q.data() + i * model.dim, model.dim);
    embed_item(model, *candidates[i], row, item_b[i]);
  }
  std::vector<RankedList> preds;
  std::vector<double> qu(model.dim);
  for (Id id : users) {
    const User* u = bundle.find_user(id);
    if (!u) throw IntegrityError("predict: unknown user " + std::to_string(id));
    double bu;
    embed_user(model, *u, qu, bu);
    preds.push_back(rank_against(item_q, item_b, candidates, model.dim, qu, bu, id, k));
  }
  return preds;
}

}  // namespace

MfTrainResult train_mf(const DatasetBundle& train, const MfConfig& cfg, const Truth& valid) {
  FeatureSpace space(train, cfg.use_features);
  MfModel model = init_mf_model(space, cfg.dim, cfg.seed);

  auto pairs = build_training_pairs(train, cfg.gamma, cfg.use_impressions);
  std::vector<const User*> pair_user(pairs.size());
  std::vector<const Item*> pair_item(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    pair_user[i] = train.find_user(pairs[i].user);
    pair_item[i] = train.find_item(pairs[i].item);
  }

  std::vector<const Item*> candidates;
  for (const auto& it : train.items)
    if (it.active) candidates.push_back(&it);

  std::map<Id, std::vector<Id>> positives;
  HistoryMap history;
  for (const auto& ev : train.interactions) {
    history[ev.user].push_back(ev.item);
    if (is_positive_kind(ev.kind)) positives[ev.user].push_back(ev.item);
  }
  for (auto* m : {&positives, &history})
    for (auto& [user, items] : *m) {
      std::sort(items.begin(), items.end());
      items.erase(std::unique(items.begin(), items.end()), items.end());
    }

  std::vector<Id> valid_users;
  for (const auto& [user, _] : valid) valid_users.push_back(user);

  Rng rng(splitmix64(cfg.seed ^ 0x9bdfULL));
  WarpState state(space, cfg.dim);
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  MfTrainResult res;
  res.model = model;
  res.best_epoch = -1;
  double best = -std::numeric_limits<double>::infinity();
  static const std::vector<Id> kNoExclusions;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t idx : order) {
      const auto& excl = positives.count(pairs[idx].user) ? positives.at(pairs[idx].user)
                                                          : kNoExclusions;
      warp_step(model, *pair_user[idx], *pair_item[idx], pairs[idx].weight, candidates, excl,
                cfg.max_trials, cfg.lr, state, rng);
    }
    auto preds = predict_over(model, train, valid_users, candidates, kMaxListLen);
    double s = score_new(preds, valid, history);
    res.trace.push_back(s);
    if (s > best) {
      best = s;
      res.best_epoch = epoch;
      res.model = model;
    } else if (epoch - res.best_epoch >= cfg.patience) {
      break;
    }
  }
  return res;
}

RankedList recommend_mf(const MfModel& model, const User& u,
                        std::span<const Item* const> candidates, std::size_t k) {
  std::vector<double> item_q(candidates.size() * model.dim);
  std::vector<double> item_b(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    std::span<double> row(item_q.data() + i * model.dim, model.dim);
    embed_item(model, *candidates[i], row, item_b[i]);
  }
  std::vector<double> qu(model.dim);
  double bu;
  embed_user(model, u, qu, bu);
  return rank_against(item_q, item_b, candidates, model.dim, qu, bu, u.id, k);
}

std::vector<RankedList> predict_mf(const MfModel& model, const DatasetBundle& bundle,
                                   const std::vector<Id>& users, std::size_t k) {
  std::vector<const Item*> candidates;
  for (const auto& it : bundle.items)
    if (it.active) candidates.push_back(&it);
  return predict_over(model, bundle, users, candidates, k);
}

}  // namespace temprec
