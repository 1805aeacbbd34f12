#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include "temprec/data.hpp"
#include "temprec/metrics.hpp"
#include "temprec/rng.hpp"

namespace temprec {

struct ItemSequence {
  Id user = 0;
  std::vector<std::int32_t> items;  // vocabulary indices in time order
  std::vector<int> weeks;           // parallel to items
};

// One sequence per user with at least one positive interaction, ordered by
// week with file order breaking ties; out-of-vocabulary items become <UNK>.
std::vector<ItemSequence> build_sequences(const DatasetBundle& bundle, const ItemVocab& vocab);

// n thinned copies of every sequence, keeping each item independently with
// probability `keep` (empty draws discarded). keep = 1/n preserves expected
// item frequency while destroying order information.
std::vector<ItemSequence> subsample_sequences(std::span<const ItemSequence> data, int n,
                                              double keep, std::uint64_t seed);

// Deterministic random user split; every user lands in exactly one half.
void split_sequences(std::span<const ItemSequence> seqs, double dev_frac, std::uint64_t seed,
                     std::vector<ItemSequence>& train_out, std::vector<ItemSequence>& dev_out);

// value -> theta row, row 0 reserved for missing/unseen
struct EmbedTable {
  std::map<std::int64_t, std::int32_t> row_of;
  std::int32_t rows = 1;
  std::size_t offset = 0;  // into theta

  std::int32_t row(std::int64_t key) const {
    auto it = row_of.find(key);
    return it == row_of.end() ? 0 : it->second;
  }
};

// One additive contribution to a raw input vector:
// raw[seg_base + j] += scale * theta[theta_off + j] for j in [0, width).
// The same triple drives the forward assembly and the gradient scatter, so
// the two can never disagree.
struct RawSource {
  std::size_t theta_off = 0;
  int seg_base = 0;
  int width = 0;
  double scale = 1.0;
};

// Single-layer LSTM encoder-decoder over item sequences. The user profile is
// encoded into the initial (h, c); each decode step consumes the previous
// item (step 1 consumes <START>) and predicts the next over the vocabulary.
// Inputs are concatenations of per-feature embeddings (categorical lookup,
// mean-pooled descriptor tokens; user ids excluded, item ids included),
// projected by a side-specific affine map to the shared input width. All
// parameters live in one flat theta vector.
struct SeqModel {
  int hidden = 0;
  int embed_width = 0;
  int input_width = 0;
  ItemVocab vocab;

  std::vector<EmbedTable> user_cat;  // one per user categorical field
  EmbedTable user_roles, user_fos;
  EmbedTable item_ids;               // keyed by item id, vocab items only
  std::vector<EmbedTable> item_cat;
  EmbedTable item_title, item_tags;

  // offsets into theta for the dense blocks
  std::size_t off_start = 0, off_unk = 0;
  std::size_t off_uproj_w = 0, off_uproj_b = 0, off_iproj_w = 0, off_iproj_b = 0;
  std::size_t off_wx = 0, off_wh = 0, off_b = 0;
  std::size_t off_out_w = 0, off_out_b = 0;

  std::vector<double> theta;
  // per vocabulary index, the sources assembling its raw input vector
  std::vector<std::vector<RawSource>> item_sources;

  int user_raw_width() const { return embed_width * (int(user_cat.size()) + 2); }
  int item_raw_width() const { return embed_width * (1 + int(item_cat.size()) + 2); }
  std::int32_t vocab_size() const { return vocab.size(); }
  std::span<const double> block(std::size_t off, std::size_t n) const { return {theta.data() + off, n}; }
};

SeqModel init_seq_model(const DatasetBundle& bundle, const ItemVocab& vocab, int hidden,
                        int embed_width, int input_width, std::uint64_t seed);

void save_seq(const SeqModel& model, const std::filesystem::path& file);
SeqModel load_seq(const std::filesystem::path& file);

// concatenated per-feature embeddings (natural width, before projection);
// unknown values use the missing-value row, empty descriptors a zero segment
std::vector<double> user_raw_features(const SeqModel& model, const User& u);
// vocab_index may be <START> or <UNK>, which have their own learned vectors
std::vector<double> item_raw_features(const SeqModel& model, std::int32_t vocab_index);

std::vector<double> project_user(const SeqModel& model, std::span<const double> raw);
std::vector<double> project_item(const SeqModel& model, std::span<const double> raw);

// standard cell: i,f,o = sigmoid, g = tanh, c' = f*c + i*g, h' = o*tanh(c')
void lstm_step(const SeqModel& model, std::span<const double> x, std::span<const double> h,
               std::span<const double> c, std::span<double> h_out, std::span<double> c_out);

// one lstm_step on the projected user features from zero states
void encode_user(const SeqModel& model, const User& u, std::span<double> h, std::span<double> c);

// assembles a user's raw input sources (no precomputed table: users carry
// their own descriptors)
std::vector<RawSource> user_sources(const SeqModel& model, const User& u);

// Everything backward() needs, captured during the forward pass. Gradient
// scatter targets are RawSource lists, so the backward pass never touches
// the dataset again.
struct SeqForward {
  struct Step {
    std::vector<double> raw;      // natural input vector
    std::vector<double> x;        // projected input after dropout
    std::vector<double> x_scale;  // per-component dropout factor (1/(1-p) or 0)
    std::vector<double> gates;    // activated i,f,g,o
    std::vector<double> c, h, tanh_c;
    std::vector<double> h_scale;  // dropout factor on h before projection
    std::vector<double> probs;    // softmax over vocab (empty for the encoder)
    std::vector<RawSource> sources;
    std::int32_t target = -1;
    bool user_side = false;
  };
  double loss = 0.0;
  std::vector<Step> steps;  // steps[0] = encoder, then one per sequence item
};

// mean cross-entropy in nats over the sequence; dropout 0 disables the masks
// (the rng is untouched then)
SeqForward forward_loss(const SeqModel& model, const User& u, const ItemSequence& seq,
                        double dropout, Rng& rng);

// gradients of cache.loss w.r.t. every entry of theta, same layout
std::vector<double> backward(const SeqModel& model, const SeqForward& cache);

struct SeqConfig {
  int hidden = 64;
  int embed_width = 8;
  int input_width = 64;
  double dropout = 0.6;
  double lr0 = 1.0;
  double decay = 0.7;     // applied when dev perplexity rises
  double clip = 5.0;      // gradient-norm ceiling per sequence
  double dev_frac = 0.1;
  int epochs = 20;
  std::size_t vocab_cap = 2000;
  std::uint64_t seed = 1;
};

struct SeqTrainResult {
  SeqModel model;              // best dev-perplexity snapshot
  std::vector<double> dev_ppl;  // after each epoch
  int best_epoch = 0;
};

// SGD (batch of one) over shuffled training sequences with norm clipping;
// after each epoch dev perplexity is measured (dropout off), the learning
// rate decays when it rises, and the best snapshot is kept.
SeqTrainResult train_seq(std::span<const ItemSequence> train_seqs,
                         std::span<const ItemSequence> dev_seqs, const DatasetBundle& bundle,
                         const ItemVocab& vocab, const SeqConfig& cfg);

// convenience: build vocab and sequences from the bundle, split off the dev
// users, train
SeqTrainResult train_seq(const DatasetBundle& train, const SeqConfig& cfg);

// rank candidates by the softmax step after feeding the full history;
// out-of-vocabulary candidates split the <UNK> mass equally; ties by item id
RankedList recommend_seq(const SeqModel& model, const User& u, const ItemSequence& history,
                         std::span<const Item* const> candidates, std::size_t k);

// histories rebuilt from the bundle; candidates = active items
std::vector<RankedList> predict_seq(const SeqModel& model, const DatasetBundle& bundle,
                                    const std::vector<Id>& users, std::size_t k);

}  // namespace temprec
