#include "temprec/seq.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace temprec {

namespace {

void write_i32(std::ostream& out, std::int32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void write_i64(std::ostream& out, std::int64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }
void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }
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
std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v;
  in.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
double read_f64(std::istream& in) {
  double v;
  in.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// rows of sorted distinct nonzero keys; row 0 stays the missing/unseen row
template <typename It>
EmbedTable make_table(It begin, It end) {
  EmbedTable t;
  for (auto it = begin; it != end; ++it)
    if (*it != 0) t.row_of.emplace(static_cast<std::int64_t>(*it), 0);
  std::int32_t next = 1;
  for (auto& [key, row] : t.row_of) row = next++;
  t.rows = next;
  return t;
}

std::vector<double> assemble(const SeqModel& m, std::span<const RawSource> sources, int width) {
  std::vector<double> raw(width, 0.0);
  for (const auto& s : sources)
    for (int j = 0; j < s.width; ++j) raw[s.seg_base + j] += s.scale * m.theta[s.theta_off + j];
  return raw;
}

// y = W x + b for a row-major (rows x cols) block
void affine(std::span<const double> w, std::span<const double> b, std::span<const double> x,
            std::span<double> y) {
  std::size_t rows = y.size(), cols = x.size();
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = b.empty() ? 0.0 : b[r];
    const double* row = w.data() + r * cols;
    for (std::size_t k = 0; k < cols; ++k) acc += row[k] * x[k];
    y[r] = acc;
  }
}

struct CellOut {
  std::vector<double> gates;  // activated i,f,g,o (4H)
  std::vector<double> c, h, tanh_c;
};

CellOut cell_forward(const SeqModel& m, std::span<const double> x, std::span<const double> h_prev,
                     std::span<const double> c_prev) {
  int H = m.hidden, F = m.input_width;
  std::vector<double> z(4 * H);
  affine(m.block(m.off_wx, std::size_t(4) * H * F), m.block(m.off_b, 4 * H), x, z);
  const double* wh = m.theta.data() + m.off_wh;
  for (int r = 0; r < 4 * H; ++r) {
    double acc = 0.0;
    const double* row = wh + std::size_t(r) * H;
    for (int k = 0; k < H; ++k) acc += row[k] * h_prev[k];
    z[r] += acc;
  }
  CellOut out;
  out.gates.resize(4 * H);
  out.c.resize(H);
  out.h.resize(H);
  out.tanh_c.resize(H);
  for (int k = 0; k < H; ++k) {
    double i = sigmoid(z[k]);
    double f = sigmoid(z[H + k]);
    double g = std::tanh(z[2 * H + k]);
    double o = sigmoid(z[3 * H + k]);
    out.gates[k] = i;
    out.gates[H + k] = f;
    out.gates[2 * H + k] = g;
    out.gates[3 * H + k] = o;
    out.c[k] = f * c_prev[k] + i * g;
    out.tanh_c[k] = std::tanh(out.c[k]);
    out.h[k] = o * out.tanh_c[k];
  }
  return out;
}

// inverted dropout factors: 1/(1-p) kept, 0 dropped; empty means all-ones
std::vector<double> dropout_scales(std::size_t n, double dropout, Rng& rng) {
  if (dropout <= 0.0) return {};
  std::vector<double> s(n);
  double keep = 1.0 - dropout;
  for (auto& v : s) v = rng.uniform() >= dropout ? 1.0 / keep : 0.0;
  return s;
}

void apply_scales(std::vector<double>& x, const std::vector<double>& scales) {
  if (scales.empty()) return;
  for (std::size_t i = 0; i < x.size(); ++i) x[i] *= scales[i];
}

void finalize_layout(SeqModel& m) {
  int E = m.embed_width, H = m.hidden, F = m.input_width;
  std::size_t cur = 0;
  auto place = [&](EmbedTable& t) {
    t.offset = cur;
    cur += std::size_t(t.rows) * E;
  };
  for (auto& t : m.user_cat) place(t);
  place(m.user_roles);
  place(m.user_fos);
  place(m.item_ids);
  for (auto& t : m.item_cat) place(t);
  place(m.item_title);
  place(m.item_tags);
  int uw = m.user_raw_width(), iw = m.item_raw_width();
  m.off_start = cur;
  cur += iw;
  m.off_unk = cur;
  cur += iw;
  m.off_uproj_w = cur;
  cur += std::size_t(F) * uw;
  m.off_uproj_b = cur;
  cur += F;
  m.off_iproj_w = cur;
  cur += std::size_t(F) * iw;
  m.off_iproj_b = cur;
  cur += F;
  m.off_wx = cur;
  cur += std::size_t(4) * H * F;
  m.off_wh = cur;
  cur += std::size_t(4) * H * H;
  m.off_b = cur;
  cur += std::size_t(4) * H;
  m.off_out_w = cur;
  cur += std::size_t(m.vocab_size()) * H;
  m.off_out_b = cur;
  cur += m.vocab_size();
  m.theta.resize(cur);
}

std::vector<RawSource> sources_of_item(const SeqModel& m, const Item& it) {
  int E = m.embed_width;
  std::vector<RawSource> src;
  src.push_back({m.item_ids.offset + std::size_t(m.item_ids.row(it.id)) * E, 0, E, 1.0});
  for (std::size_t f = 0; f < m.item_cat.size(); ++f)
    src.push_back({m.item_cat[f].offset + std::size_t(m.item_cat[f].row(it.categorical[f])) * E,
                   int((1 + f) * E), E, 1.0});
  int title_base = int((1 + m.item_cat.size()) * E);
  if (!it.title.empty())
    for (auto tok : it.title)
      src.push_back({m.item_title.offset + std::size_t(m.item_title.row(tok)) * E, title_base, E,
                     1.0 / it.title.size()});
  int tags_base = title_base + E;
  if (!it.tags.empty())
    for (auto tok : it.tags)
      src.push_back({m.item_tags.offset + std::size_t(m.item_tags.row(tok)) * E, tags_base, E,
                     1.0 / it.tags.size()});
  return src;
}

}  // namespace

std::vector<ItemSequence> build_sequences(const DatasetBundle& bundle, const ItemVocab& vocab) {
  // stable sort by week keeps file order inside a week
  std::map<Id, std::vector<std::pair<int, Id>>> per_user;
  for (const auto& ev : bundle.interactions)
    if (is_positive_kind(ev.kind)) per_user[ev.user].push_back({ev.week, ev.item});
  std::vector<ItemSequence> out;
  for (auto& [user, events] : per_user) {
    std::stable_sort(events.begin(), events.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    ItemSequence seq;
    seq.user = user;
    for (const auto& [week, item] : events) {
      seq.items.push_back(vocab.index_of(item));
      seq.weeks.push_back(week);
    }
    out.push_back(std::move(seq));
  }
  return out;
}

std::vector<ItemSequence> subsample_sequences(std::span<const ItemSequence> data, int n,
                                              double keep, std::uint64_t seed) {
  if (n < 1 || keep <= 0.0 || keep > 1.0)
    throw ConfigError("subsample: need n >= 1 and keep in (0, 1]");
  Rng rng(splitmix64(seed ^ 0x5ab5ecULL));
  std::vector<ItemSequence> out;
  for (const auto& seq : data) {
    for (int rep = 0; rep < n; ++rep) {
      ItemSequence s;
      s.user = seq.user;
      for (std::size_t i = 0; i < seq.items.size(); ++i)
        if (rng.uniform() < keep) {
          s.items.push_back(seq.items[i]);
          s.weeks.push_back(seq.weeks[i]);
        }
      if (!s.items.empty()) out.push_back(std::move(s));
    }
  }
  return out;
}

void split_sequences(std::span<const ItemSequence> seqs, double dev_frac, std::uint64_t seed,
                     std::vector<ItemSequence>& train_out, std::vector<ItemSequence>& dev_out) {
  train_out.clear();
  dev_out.clear();
  std::size_t n = seqs.size();
  std::size_t dev_count = 0;
  if (dev_frac > 0.0 && n >= 2) {
    dev_count = static_cast<std::size_t>(dev_frac * n + 0.5);
    dev_count = std::clamp<std::size_t>(dev_count, 1, n - 1);
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(splitmix64(seed ^ 0xde5b117ULL));
  rng.shuffle(order);
  std::vector<bool> is_dev(n, false);
  for (std::size_t i = 0; i < dev_count; ++i) is_dev[order[i]] = true;
  for (std::size_t i = 0; i < n; ++i) (is_dev[i] ? dev_out : train_out).push_back(seqs[i]);
}

SeqModel init_seq_model(const DatasetBundle& bundle, const ItemVocab& vocab, int hidden,
                        int embed_width, int input_width, std::uint64_t seed) {
  if (hidden < 1 || embed_width < 1 || input_width < 1)
    throw ConfigError("seqrec: dimensions must be >= 1");
  SeqModel m;
  m.hidden = hidden;
  m.embed_width = embed_width;
  m.input_width = input_width;
  m.vocab = vocab;

  m.user_cat.resize(kUserCatFields.size());
  for (std::size_t f = 0; f < m.user_cat.size(); ++f) {
    std::vector<std::int32_t> vals;
    for (const auto& u : bundle.users) vals.push_back(u.categorical[f]);
    m.user_cat[f] = make_table(vals.begin(), vals.end());
  }
  {
    std::vector<std::int32_t> roles, fos;
    for (const auto& u : bundle.users) {
      roles.insert(roles.end(), u.job_roles.begin(), u.job_roles.end());
      fos.insert(fos.end(), u.field_of_studies.begin(), u.field_of_studies.end());
    }
    m.user_roles = make_table(roles.begin(), roles.end());
    m.user_fos = make_table(fos.begin(), fos.end());
  }
  m.item_ids = make_table(vocab.ranked_items().begin(), vocab.ranked_items().end());
  m.item_cat.resize(kItemCatFields.size());
  for (std::size_t f = 0; f < m.item_cat.size(); ++f) {
    std::vector<std::int32_t> vals;
    for (const auto& it : bundle.items) vals.push_back(it.categorical[f]);
    m.item_cat[f] = make_table(vals.begin(), vals.end());
  }
  {
    std::vector<std::int32_t> title, tags;
    for (const auto& it : bundle.items) {
      title.insert(title.end(), it.title.begin(), it.title.end());
      tags.insert(tags.end(), it.tags.begin(), it.tags.end());
    }
    m.item_title = make_table(title.begin(), title.end());
    m.item_tags = make_table(tags.begin(), tags.end());
  }

  finalize_layout(m);
  Rng rng(splitmix64(seed ^ 0x5ec1417ULL));
  for (auto& v : m.theta) v = rng.uniform_range(-0.08, 0.08);

  m.item_sources.resize(m.vocab_size());
  m.item_sources[ItemVocab::kUnk] = {{m.off_unk, 0, m.item_raw_width(), 1.0}};
  m.item_sources[ItemVocab::kStart] = {{m.off_start, 0, m.item_raw_width(), 1.0}};
  for (std::int32_t v = 2; v < m.vocab_size(); ++v) {
    const Item* it = bundle.find_item(m.vocab.item_at(v));
    if (!it) throw IntegrityError("seqrec: vocabulary item missing from bundle");
    m.item_sources[v] = sources_of_item(m, *it);
  }
  return m;
}

std::vector<RawSource> user_sources(const SeqModel& m, const User& u) {
  int E = m.embed_width;
  std::vector<RawSource> src;
  for (std::size_t f = 0; f < m.user_cat.size(); ++f)
    src.push_back({m.user_cat[f].offset + std::size_t(m.user_cat[f].row(u.categorical[f])) * E,
                   int(f * E), E, 1.0});
  int roles_base = int(m.user_cat.size() * E);
  if (!u.job_roles.empty())
    for (auto tok : u.job_roles)
      src.push_back({m.user_roles.offset + std::size_t(m.user_roles.row(tok)) * E, roles_base, E,
                     1.0 / u.job_roles.size()});
  int fos_base = roles_base + E;
  if (!u.field_of_studies.empty())
    for (auto tok : u.field_of_studies)
      src.push_back({m.user_fos.offset + std::size_t(m.user_fos.row(tok)) * E, fos_base, E,
                     1.0 / u.field_of_studies.size()});
  return src;
}

std::vector<double> user_raw_features(const SeqModel& m, const User& u) {
  return assemble(m, user_sources(m, u), m.user_raw_width());
}

std::vector<double> item_raw_features(const SeqModel& m, std::int32_t vocab_index) {
  return assemble(m, m.item_sources.at(vocab_index), m.item_raw_width());
}

std::vector<double> project_user(const SeqModel& m, std::span<const double> raw) {
  std::vector<double> out(m.input_width);
  affine(m.block(m.off_uproj_w, std::size_t(m.input_width) * m.user_raw_width()),
         m.block(m.off_uproj_b, m.input_width), raw, out);
  return out;
}

std::vector<double> project_item(const SeqModel& m, std::span<const double> raw) {
  std::vector<double> out(m.input_width);
  affine(m.block(m.off_iproj_w, std::size_t(m.input_width) * m.item_raw_width()),
         m.block(m.off_iproj_b, m.input_width), raw, out);
  return out;
}

void lstm_step(const SeqModel& m, std::span<const double> x, std::span<const double> h,
               std::span<const double> c, std::span<double> h_out, std::span<double> c_out) {
  auto cell = cell_forward(m, x, h, c);
  std::copy(cell.h.begin(), cell.h.end(), h_out.begin());
  std::copy(cell.c.begin(), cell.c.end(), c_out.begin());
}

void encode_user(const SeqModel& m, const User& u, std::span<double> h, std::span<double> c) {
  std::vector<double> zeros(m.hidden, 0.0);
  auto x = project_user(m, user_raw_features(m, u));
  lstm_step(m, x, zeros, zeros, h, c);
}

SeqForward forward_loss(const SeqModel& m, const User& u, const ItemSequence& seq, double dropout,
                        Rng& rng) {
  if (seq.items.empty()) throw std::invalid_argument("seqrec: empty sequence");
  int H = m.hidden, V = m.vocab_size();
  std::size_t T = seq.items.size();
  SeqForward out;
  out.steps.reserve(T + 1);

  std::vector<double> zeros(H, 0.0);
  {
    SeqForward::Step s;
    s.user_side = true;
    s.sources = user_sources(m, u);
    s.raw = assemble(m, s.sources, m.user_raw_width());
    s.x = project_user(m, s.raw);
    s.x_scale = dropout_scales(s.x.size(), dropout, rng);
    apply_scales(s.x, s.x_scale);
    auto cell = cell_forward(m, s.x, zeros, zeros);
    s.gates = std::move(cell.gates);
    s.c = std::move(cell.c);
    s.h = std::move(cell.h);
    s.tanh_c = std::move(cell.tanh_c);
    out.steps.push_back(std::move(s));
  }

  double total = 0.0;
  for (std::size_t t = 1; t <= T; ++t) {
    std::int32_t input = t == 1 ? ItemVocab::kStart : seq.items[t - 2];
    SeqForward::Step s;
    s.sources = m.item_sources.at(input);
    s.raw = assemble(m, s.sources, m.item_raw_width());
    s.x = project_item(m, s.raw);
    s.x_scale = dropout_scales(s.x.size(), dropout, rng);
    apply_scales(s.x, s.x_scale);
    const auto& prev = out.steps.back();
    auto cell = cell_forward(m, s.x, prev.h, prev.c);
    s.gates = std::move(cell.gates);
    s.c = std::move(cell.c);
    s.h = std::move(cell.h);
    s.tanh_c = std::move(cell.tanh_c);

    s.h_scale = dropout_scales(std::size_t(H), dropout, rng);
    std::vector<double> hd = s.h;
    apply_scales(hd, s.h_scale);
    std::vector<double> logits(V);
    affine(m.block(m.off_out_w, std::size_t(V) * H), m.block(m.off_out_b, V), hd, logits);
    double peak = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - peak);
    double lse = peak + std::log(z);
    s.probs.resize(V);
    for (int v = 0; v < V; ++v) s.probs[v] = std::exp(logits[v] - lse);
    s.target = seq.items[t - 1];
    total += lse - logits[s.target];
    out.steps.push_back(std::move(s));
  }
  out.loss = total / double(T);
  return out;
}

std::vector<double> backward(const SeqModel& m, const SeqForward& cache) {
  int H = m.hidden, F = m.input_width, V = m.vocab_size();
  std::size_t T = cache.steps.size() - 1;
  std::vector<double> grad(m.theta.size(), 0.0);
  std::vector<double> dh_next(H, 0.0), dc_next(H, 0.0);
  std::vector<double> zeros(H, 0.0);

  for (std::size_t t = cache.steps.size(); t-- > 0;) {
    const auto& s = cache.steps[t];
    std::vector<double> dh = dh_next, dc = dc_next;

    if (t > 0) {
      // softmax + projection head
      std::vector<double> dlogits(s.probs);
      dlogits[s.target] -= 1.0;
      for (auto& v : dlogits) v /= double(T);
      std::vector<double> hd = s.h;
      apply_scales(hd, s.h_scale);
      double* dout_w = grad.data() + m.off_out_w;
      double* dout_b = grad.data() + m.off_out_b;
      const double* out_w = m.theta.data() + m.off_out_w;
      std::vector<double> dhd(H, 0.0);
      for (int v = 0; v < V; ++v) {
        double d = dlogits[v];
        if (d == 0.0) continue;
        double* wrow = dout_w + std::size_t(v) * H;
        const double* orow = out_w + std::size_t(v) * H;
        for (int k = 0; k < H; ++k) {
          wrow[k] += d * hd[k];
          dhd[k] += d * orow[k];
        }
        dout_b[v] += d;
      }
      if (s.h_scale.empty())
        for (int k = 0; k < H; ++k) dh[k] += dhd[k];
      else
        for (int k = 0; k < H; ++k) dh[k] += dhd[k] * s.h_scale[k];
    }

    // cell backward
    const auto& h_prev = t == 0 ? zeros : cache.steps[t - 1].h;
    const auto& c_prev = t == 0 ? zeros : cache.steps[t - 1].c;
    std::vector<double> dz(4 * H);
    for (int k = 0; k < H; ++k) {
      double i = s.gates[k], f = s.gates[H + k], g = s.gates[2 * H + k], o = s.gates[3 * H + k];
      double tc = s.tanh_c[k];
      double do_ = dh[k] * tc;
      double dck = dc[k] + dh[k] * o * (1.0 - tc * tc);
      double di = dck * g;
      double dg = dck * i;
      double df = dck * c_prev[k];
      dc_next[k] = dck * f;
      dz[k] = di * i * (1.0 - i);
      dz[H + k] = df * f * (1.0 - f);
      dz[2 * H + k] = dg * (1.0 - g * g);
      dz[3 * H + k] = do_ * o * (1.0 - o);
    }
    double* dwx = grad.data() + m.off_wx;
    double* dwh = grad.data() + m.off_wh;
    double* db = grad.data() + m.off_b;
    const double* wx = m.theta.data() + m.off_wx;
    const double* wh = m.theta.data() + m.off_wh;
    std::vector<double> dx(F, 0.0);
    std::fill(dh_next.begin(), dh_next.end(), 0.0);
    for (int r = 0; r < 4 * H; ++r) {
      double d = dz[r];
      db[r] += d;
      double* wxrow = dwx + std::size_t(r) * F;
      const double* xrow = wx + std::size_t(r) * F;
      for (int k = 0; k < F; ++k) {
        wxrow[k] += d * s.x[k];
        dx[k] += d * xrow[k];
      }
      double* whrow = dwh + std::size_t(r) * H;
      const double* hrow = wh + std::size_t(r) * H;
      for (int k = 0; k < H; ++k) {
        whrow[k] += d * h_prev[k];
        dh_next[k] += d * hrow[k];
      }
    }

    // through dropout and the side projection into the raw features
    apply_scales(dx, s.x_scale);
    int raw_w = int(s.raw.size());
    std::size_t off_w = s.user_side ? m.off_uproj_w : m.off_iproj_w;
    std::size_t off_b = s.user_side ? m.off_uproj_b : m.off_iproj_b;
    double* dproj_w = grad.data() + off_w;
    double* dproj_b = grad.data() + off_b;
    const double* proj_w = m.theta.data() + off_w;
    std::vector<double> draw(raw_w, 0.0);
    for (int f = 0; f < F; ++f) {
      double d = dx[f];
      if (d == 0.0) continue;
      double* wrow = dproj_w + std::size_t(f) * raw_w;
      const double* prow = proj_w + std::size_t(f) * raw_w;
      for (int r = 0; r < raw_w; ++r) {
        wrow[r] += d * s.raw[r];
        draw[r] += d * prow[r];
      }
      dproj_b[f] += d;
    }
    for (const auto& src : s.sources)
      for (int j = 0; j < src.width; ++j)
        grad[src.theta_off + j] += src.scale * draw[src.seg_base + j];
  }
  return grad;
}

namespace {

double dataset_perplexity(const SeqModel& m, std::span<const ItemSequence> seqs,
                          const DatasetBundle& bundle, Rng& rng) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& seq : seqs) {
    const User* u = bundle.find_user(seq.user);
    if (!u) throw IntegrityError("seqrec: unknown user " + std::to_string(seq.user));
    auto fwd = forward_loss(m, *u, seq, 0.0, rng);
    total += fwd.loss * double(seq.items.size());
    tokens += seq.items.size();
  }
  return std::exp(total / double(tokens));
}

}  // namespace

SeqTrainResult train_seq(std::span<const ItemSequence> train_seqs,
                         std::span<const ItemSequence> dev_seqs, const DatasetBundle& bundle,
                         const ItemVocab& vocab, const SeqConfig& cfg) {
  if (train_seqs.empty()) throw std::invalid_argument("seqrec: no training sequences");
  SeqModel model = init_seq_model(bundle, vocab, cfg.hidden, cfg.embed_width, cfg.input_width,
                                  cfg.seed);
  std::vector<const User*> seq_user(train_seqs.size());
  for (std::size_t i = 0; i < train_seqs.size(); ++i) {
    seq_user[i] = bundle.find_user(train_seqs[i].user);
    if (!seq_user[i]) throw IntegrityError("seqrec: unknown user " + std::to_string(train_seqs[i].user));
  }
  // perplexity falls back to the training set when no dev users were held out
  std::span<const ItemSequence> dev = dev_seqs.empty() ? train_seqs : dev_seqs;

  Rng rng(splitmix64(cfg.seed ^ 0x5ec7217ULL));
  std::vector<std::size_t> order(train_seqs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  SeqTrainResult res;
  res.model = model;
  res.best_epoch = -1;
  double best = std::numeric_limits<double>::infinity();
  double prev = std::numeric_limits<double>::infinity();
  double lr = cfg.lr0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t idx : order) {
      auto fwd = forward_loss(model, *seq_user[idx], train_seqs[idx], cfg.dropout, rng);
      auto grad = backward(model, fwd);
      double norm2 = 0.0;
      for (double g : grad) norm2 += g * g;
      double scale = lr;
      if (cfg.clip > 0.0 && norm2 > cfg.clip * cfg.clip)
        scale = lr * cfg.clip / std::sqrt(norm2);
      for (std::size_t k = 0; k < grad.size(); ++k) model.theta[k] -= scale * grad[k];
    }
    double ppl = dataset_perplexity(model, dev, bundle, rng);
    res.dev_ppl.push_back(ppl);
    if (epoch > 0 && ppl > prev) lr *= cfg.decay;
    prev = ppl;
    if (ppl < best) {
      best = ppl;
      res.best_epoch = epoch;
      res.model = model;
    }
  }
  return res;
}

SeqTrainResult train_seq(const DatasetBundle& train, const SeqConfig& cfg) {
  auto vocab = build_item_vocab(train, cfg.vocab_cap);
  auto seqs = build_sequences(train, vocab);
  std::vector<ItemSequence> fit, dev;
  split_sequences(seqs, cfg.dev_frac, cfg.seed, fit, dev);
  return train_seq(fit, dev, train, vocab, cfg);
}

namespace {

// encoder plus the full history through the decoder; next-step distribution
std::vector<double> next_item_probs(const SeqModel& m, const User& u, const ItemSequence& history) {
  int H = m.hidden, V = m.vocab_size();
  std::vector<double> h(H), c(H);
  encode_user(m, u, h, c);
  std::vector<double> h2(H), c2(H);
  auto feed = [&](std::int32_t idx) {
    auto x = project_item(m, item_raw_features(m, idx));
    lstm_step(m, x, h, c, h2, c2);
    h.swap(h2);
    c.swap(c2);
  };
  feed(ItemVocab::kStart);
  for (auto idx : history.items) feed(idx);
  std::vector<double> logits(V);
  affine(m.block(m.off_out_w, std::size_t(V) * H), m.block(m.off_out_b, V), h, logits);
  double peak = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - peak);
  double lse = peak + std::log(z);
  for (auto& l : logits) l = std::exp(l - lse);
  return logits;
}

}  // namespace

RankedList recommend_seq(const SeqModel& m, const User& u, const ItemSequence& history,
                         std::span<const Item* const> candidates, std::size_t k) {
  auto probs = next_item_probs(m, u, history);
  std::size_t oov = 0;
  for (const Item* it : candidates)
    if (!m.vocab.contains(it->id)) ++oov;
  std::vector<std::pair<double, Id>> scored;
  scored.reserve(candidates.size());
  for (const Item* it : candidates) {
    double p = m.vocab.contains(it->id) ? probs[m.vocab.index_of(it->id)]
                                        : probs[ItemVocab::kUnk] / double(oov);
    scored.push_back({p, it->id});
  }
  std::size_t top = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + top, scored.end(),
                    [](const auto& a, const auto& b) {
                      if (a.first != b.first) return a.first > b.first;
                      return a.second < b.second;
                    });
  RankedList out;
  out.user = u.id;
  for (std::size_t i = 0; i < top; ++i) {
    out.scores.push_back(scored[i].first);
    out.items.push_back(scored[i].second);
  }
  return out;
}

std::vector<RankedList> predict_seq(const SeqModel& m, const DatasetBundle& bundle,
                                    const std::vector<Id>& users, std::size_t k) {
  auto seqs = build_sequences(bundle, m.vocab);
  std::map<Id, const ItemSequence*> by_user;
  for (const auto& s : seqs) by_user[s.user] = &s;
  std::vector<const Item*> candidates;
  for (const auto& it : bundle.items)
    if (it.active) candidates.push_back(&it);
  static const ItemSequence kEmpty;
  std::vector<RankedList> out;
  for (Id id : users) {
    const User* u = bundle.find_user(id);
    if (!u) throw IntegrityError("predict: unknown user " + std::to_string(id));
    auto it = by_user.find(id);
    out.push_back(recommend_seq(m, *u, it == by_user.end() ? kEmpty : *it->second, candidates, k));
  }
  return out;
}

void save_seq(const SeqModel& m, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out.write("TRSQ0001", 8);
  write_i32(out, m.hidden);
  write_i32(out, m.embed_width);
  write_i32(out, m.input_width);
  auto ranked = m.vocab.ranked_items();
  write_i64(out, std::int64_t(ranked.size()));
  for (Id id : ranked) write_i64(out, id);
  write_u64(out, m.vocab.hash());
  auto dump_table = [&](const EmbedTable& t) {
    write_i64(out, std::int64_t(t.row_of.size()));
    for (const auto& [key, row] : t.row_of) {
      write_i64(out, key);
      write_i32(out, row);
    }
    write_i32(out, t.rows);
  };
  for (const auto& t : m.user_cat) dump_table(t);
  dump_table(m.user_roles);
  dump_table(m.user_fos);
  dump_table(m.item_ids);
  for (const auto& t : m.item_cat) dump_table(t);
  dump_table(m.item_title);
  dump_table(m.item_tags);
  write_i64(out, std::int64_t(m.item_sources.size()));
  for (const auto& sources : m.item_sources) {
    write_i64(out, std::int64_t(sources.size()));
    for (const auto& s : sources) {
      write_u64(out, s.theta_off);
      write_i32(out, s.seg_base);
      write_i32(out, s.width);
      write_f64(out, s.scale);
    }
  }
  write_i64(out, std::int64_t(m.theta.size()));
  out.write(reinterpret_cast<const char*>(m.theta.data()),
            std::streamsize(m.theta.size() * 8));
}

SeqModel load_seq(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  char magic[8];
  in.read(magic, 8);
  if (std::memcmp(magic, "TRSQ0001", 8) != 0)
    throw std::runtime_error(file.string() + ": not a sequence model");
  SeqModel m;
  m.hidden = read_i32(in);
  m.embed_width = read_i32(in);
  m.input_width = read_i32(in);
  std::vector<Id> ranked(read_i64(in));
  for (auto& id : ranked) id = read_i64(in);
  m.vocab = ItemVocab(std::move(ranked));
  std::uint64_t want_hash = read_u64(in);
  if (m.vocab.hash() != want_hash)
    throw std::runtime_error(file.string() + ": vocabulary hash mismatch");
  auto slurp_table = [&](EmbedTable& t) {
    std::int64_t n = read_i64(in);
    for (std::int64_t i = 0; i < n; ++i) {
      std::int64_t key = read_i64(in);
      t.row_of[key] = read_i32(in);
    }
    t.rows = read_i32(in);
  };
  m.user_cat.resize(kUserCatFields.size());
  for (auto& t : m.user_cat) slurp_table(t);
  slurp_table(m.user_roles);
  slurp_table(m.user_fos);
  slurp_table(m.item_ids);
  m.item_cat.resize(kItemCatFields.size());
  for (auto& t : m.item_cat) slurp_table(t);
  slurp_table(m.item_title);
  slurp_table(m.item_tags);
  finalize_layout(m);
  m.item_sources.resize(read_i64(in));
  for (auto& sources : m.item_sources) {
    sources.resize(read_i64(in));
    for (auto& s : sources) {
      s.theta_off = read_u64(in);
      s.seg_base = read_i32(in);
      s.width = read_i32(in);
      s.scale = read_f64(in);
    }
  }
  std::int64_t n = read_i64(in);
  if (n != std::int64_t(m.theta.size()))
    throw std::runtime_error(file.string() + ": parameter count mismatch");
  in.read(reinterpret_cast<char*>(m.theta.data()), std::streamsize(m.theta.size() * 8));
  if (!in) throw std::runtime_error(file.string() + ": truncated model file");
  return m;
}

}  // namespace temprec
