#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "ndcr/common.hpp"
#include "ndcr/datagen.hpp"
#include "ndcr/graph.hpp"
#include "ndcr/param_store.hpp"

namespace ndcr {

// Which part of the pipeline is trained / used for prediction.
//   full            - whole pipeline, predict argmax P^f
//   system2_only    - whole pipeline, predict argmax P^{S2}
//   no_negation     - negation executor removed, predict argmax P^{S2}
//   system1_meanpool- proposition module + System 1 only, predict by mean of
//                     softmaxed per-proposition scores
//   no_modifier     - System 1 without the modifier and context branch,
//                     predict by mean pooling
enum class Ablation { full, system2_only, no_negation, system1_meanpool, no_modifier };

inline const char* ablation_name(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::system2_only: return "system2-only";
    case Ablation::no_negation: return "no-negation";
    case Ablation::system1_meanpool: return "system1-meanpool";
    case Ablation::no_modifier: return "no-modifier";
  }
  return "?";
}

inline Ablation ablation_from_name(const std::string& s) {
  if (s == "full") return Ablation::full;
  if (s == "system2-only") return Ablation::system2_only;
  if (s == "no-negation") return Ablation::no_negation;
  if (s == "system1-meanpool") return Ablation::system1_meanpool;
  if (s == "no-modifier") return Ablation::no_modifier;
  throw ConfigError("unknown ablation '" + s + "'");
}

struct ModelConfig {
  int d = 64;
  int max_props = 10;   // K
  int pe_size = 10;     // learned position-embedding table, one row per image slot
  int heads = 4;
  int ffn_mult = 4;
  double lambda_scale = 1000.0;  // fusion scale
  double theta = 0.2;            // negational feedback margin
  double tau = 0.3;              // proposition uniformity margin
  double w_match = 1.0, w_neg = 1.0, w_unif = 1.0, w_count = 1.0;
  Ablation ablation = Ablation::full;
  bool normalize_combiner = true;  // softmax the combiner attention scores
  bool flatten_grid = true;        // proposition branch attends across all M*L pairs
  uint64_t seed = 23;              // canonical parameter-init seed

  void validate() const {
    if (d < 2 || d % heads != 0 || (2 * d) % heads != 0)
      throw ConfigError("model: heads must divide d and 2d");
    if (max_props < 1 || max_props > 10) throw ConfigError("model: max_props must be in [1,10]");
    if (lambda_scale <= 0) throw ConfigError("model: lambda must be > 0");
    if (theta <= 0) throw ConfigError("model: theta must be > 0");
  }

  bool has_modifier() const { return ablation != Ablation::no_modifier; }
  bool has_system2() const {
    return ablation == Ablation::full || ablation == Ablation::system2_only ||
           ablation == Ablation::no_negation;
  }
  bool has_negation() const { return has_system2() && ablation != Ablation::no_negation; }
  // The context branch feeds the modifier and the System-2 conjunction query.
  bool has_context_branch() const { return has_modifier() || has_system2(); }
};

// Per-instance forward pass handles. Vars are valid for the Graph that built
// them; -1 marks heads absent under the current ablation.
struct Forward {
  int M = 0;
  Var count_logits = -1;  // 1 x K
  Var slots = -1;         // K x d
  Var fused = -1;         // (M*L) x d
  Var h_s1 = -1;          // (M*L) x d modified reasoning states
  Var h_ctx = -1;         // L x d context branch output
  Var p_s1 = -1;          // M x L
  Var p_n = -1;           // M x L
  Var p_s2 = -1;          // 1 x L
  Var p_f = -1;           // 1 x L
  Var s1_agg = -1;        // 1 x L (sig-weighted System-1 aggregate before mixing)
  Var sig = -1;           // 1 x 1
  Var s_hat = -1;         // 1 x M
  Var gate_pos = -1;      // L x 1 positive conjunction gate
  Var gate_neg = -1;      // L x 1 negative conjunction gate
  Var conj_attn_pos = -1; // sdpa node of the positive conjunction (tests)
  Var match_loss = -1;
  Var neg_loss = -1;
  Var unif_loss = -1;
  Var count_loss = -1;
  Var total_loss = -1;
};

template <typename T>
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    init_params();
  }

  Model(ModelConfig cfg, ParamStore<T> store) : cfg_(cfg), store_(std::move(store)) {
    cfg_.validate();
    check_store();
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& store() { return store_; }
  const ParamStore<T>& store() const { return store_; }

  // Build the forward pass (and losses) for one instance on graph `g`.
  // teacher_count > 0 forces the active proposition count (training);
  // otherwise the count head's argmax is used (inference).
  Forward forward(Graph<T>& g, const Instance& inst, int teacher_count = -1) const {
    if (inst.text.rows < 2)
      throw ShapeError("model: instance has no proposition tokens (N = 0)");
    if (inst.text.cols != cfg_.d)
      throw ShapeError("model: instance width " + std::to_string(inst.text.cols) +
                       " does not match model d = " + std::to_string(cfg_.d));
    const int L = inst.images.rows;
    if (L > cfg_.pe_size)
      throw ShapeError("model: " + std::to_string(L) + " candidates exceed position table size " +
                       std::to_string(cfg_.pe_size));
    if (inst.gold < 0 || inst.gold >= L) throw ConfigError("model: gold index out of range");

    Binder bind{g, store_, {}};
    Forward out;

    Var text = g.input(inst.text.template cast<T>());
    Var images = g.input(inst.images.template cast<T>());
    Var h_cls = g.slice_rows(text, 0, 1);

    // --- proposition module -------------------------------------------------
    out.slots = parse_propositions(g, bind, text);
    out.count_logits = count_head(g, bind, h_cls);

    if (teacher_count > 0) {
      out.M = teacher_count;
    } else {
      const Tensor<T>& cl = g.value(out.count_logits);
      int best = 0;
      for (int k = 1; k < cl.cols; ++k)
        if (cl.data[static_cast<size_t>(k)] > cl.data[static_cast<size_t>(best)]) best = k;
      out.M = best + 1;
    }
    if (out.M > cfg_.max_props) throw ConfigError("model: active count exceeds max_props");
    const int M = out.M;

    Var active = g.slice_rows(out.slots, 0, M);

    // --- System 1 ------------------------------------------------------------
    out.fused = g.scale(g.pairwise_hadamard(g.l2_normalize_rows(active), g.l2_normalize_rows(images)),
                        cfg_.lambda_scale);
    Var pe = g.slice_rows(bind("s1.pe"), 0, L);
    Var h_p;
    if (cfg_.flatten_grid) {
      h_p = g.add(out.fused, g.repeat_block(pe, M));
      h_p = encoder_stack(g, bind, "s1.prop_tf", h_p, cfg_.heads);
    } else {
      // per-proposition sequences: attention restricted within each grid row
      h_p = g.add(out.fused, g.repeat_block(pe, M));
      h_p = encoder_stack(g, bind, "s1.prop_tf", h_p, cfg_.heads, M);
    }

    if (cfg_.has_context_branch()) {
      Var cross = g.input(inst.cross.template cast<T>());
      out.h_ctx = encoder_stack(g, bind, "s1.ctx_tf", g.add(cross, pe), cfg_.heads);
    }

    if (cfg_.has_modifier()) {
      Var cat = g.concat_cols(h_p, g.repeat_block(out.h_ctx, M));
      Var hidden = g.relu(g.add_row(g.matmul(cat, bind("s1.mod.m2")), bind("s1.mod.m2_b")));
      out.h_s1 = g.add_row(g.matmul(hidden, bind("s1.mod.m1")), bind("s1.mod.m1_b"));
    } else {
      out.h_s1 = h_p;
    }

    out.p_s1 = g.reshape(score_head(g, bind, "s1.head", out.h_s1), M, L);

    // --- System 2 -------------------------------------------------------------
    if (cfg_.has_system2()) {
      Var img_blocks = g.repeat_block(images, M);
      Var joint_pos = joint_representation(g, out.p_s1, out.h_s1, img_blocks, L);

      Var h_n = -1, joint_neg = -1;
      if (cfg_.has_negation()) {
        Var hidden = g.relu(g.add_row(g.matmul(out.h_s1, bind("s2.neg.w1")), bind("s2.neg.b1")));
        h_n = g.add_row(g.matmul(hidden, bind("s2.neg.w2")), bind("s2.neg.b2"));
        out.p_n = g.reshape(score_head(g, bind, "s1.head", h_n), M, L);
        joint_neg = joint_representation(g, out.p_n, h_n, img_blocks, L);
      }

      // Query: per-image context state lifted to 2d with the image-mean context.
      Var ones_L = ones_row(g, L);
      Var ctx_mean = g.scale(g.matmul(ones_L, out.h_ctx), 1.0 / L);
      Var q_s = g.matmul(g.concat_cols(out.h_ctx, g.repeat_block(ctx_mean, L)), bind("s2.attn.ws"));

      // l-major ordering so each image's M proposition rows are one group
      std::vector<int> to_l_major(static_cast<size_t>(M) * L);
      for (int l = 0; l < L; ++l)
        for (int i = 0; i < M; ++i) to_l_major[static_cast<size_t>(l) * M + i] = i * L + l;

      auto conj_branch = [&](Var joint, Var* attn_node) {
        Var kv = g.permute_rows(joint, to_l_major);
        Var q_proj = g.matmul(q_s, bind("s2.attn.wq"));
        Var k_proj = g.matmul(kv, bind("s2.attn.wk"));
        Var v_proj = g.matmul(kv, bind("s2.attn.wv"));
        Var att = g.sdpa(q_proj, k_proj, v_proj, cfg_.heads, L);
        if (attn_node) *attn_node = att;
        return g.matmul(att, bind("s2.attn.wo"));
      };

      Var h_plus = conj_branch(joint_pos, &out.conj_attn_pos);
      out.gate_pos = g.sigmoid(
          g.add_row(g.matmul(g.concat_cols(h_plus, q_s), bind("s2.gate.w")), bind("s2.gate.b")));
      Var ones_2d = ones_row(g, 2 * cfg_.d);
      Var gated = g.mul(g.matmul(out.gate_pos, ones_2d), h_plus);
      if (cfg_.has_negation()) {
        Var h_minus = conj_branch(joint_neg, nullptr);
        out.gate_neg = g.sigmoid(
            g.add_row(g.matmul(g.concat_cols(h_minus, q_s), bind("s2.gate.w")), bind("s2.gate.b")));
        gated = g.add(gated, g.mul(g.matmul(out.gate_neg, ones_2d), h_minus));
      }
      Var h_f = g.matmul(gated, bind("s2.out"));
      out.p_s2 = g.transpose(score_head(g, bind, "s2.head", h_f));

      // --- combiner -------------------------------------------------------
      Var h_f_w = pool_rows(g, bind, h_f, 1, L);
      Var h_s1_w = pool_rows(g, bind, out.h_s1, M, L);
      Var t = g.add_row(g.add(g.matmul(g.repeat_block(h_f_w, M), bind("comb.wa")),
                              g.matmul(h_s1_w, bind("comb.wb"))),
                        bind("comb.bc"));
      Var s_logits = g.transpose(g.add_row(g.matmul(t, bind("comb.v")), bind("comb.bv")));
      out.s_hat = cfg_.normalize_combiner ? g.softmax(s_logits, 1) : s_logits;
      Var h_c = g.matmul(ones_row(g, M), t);
      out.sig = g.sigmoid(
          g.add_row(g.matmul(g.concat_cols(h_f_w, h_c), bind("comb.wf")), bind("comb.bf")));
      out.s1_agg = g.matmul(out.s_hat, out.p_s1);
      Var one_minus_sig = g.add_const(g.scale(out.sig, -1.0), 1.0);
      out.p_f = g.add(g.scalar_mul(out.s1_agg, out.sig), g.scalar_mul(out.p_s2, one_minus_sig));
    }

    build_losses(g, out, inst);
    return out;
  }

  // Prediction given the built forward pass, honoring the ablation.
  int predict(const Graph<T>& g, const Forward& f) const {
    switch (cfg_.ablation) {
      case Ablation::full:
        return argmax_row(g.value(f.p_f));
      case Ablation::system2_only:
      case Ablation::no_negation:
        return argmax_row(g.value(f.p_s2));
      case Ablation::system1_meanpool:
      case Ablation::no_modifier:
        return meanpool_prediction(g.value(f.p_s1));
    }
    return 0;
  }

  // Mean over propositions of the softmaxed score rows, then argmax.
  static int meanpool_prediction(const Tensor<T>& p_s1) {
    std::vector<double> acc(static_cast<size_t>(p_s1.cols), 0.0);
    for (int i = 0; i < p_s1.rows; ++i) {
      const T* row = p_s1.row(i);
      double mx = static_cast<double>(row[0]);
      for (int c = 1; c < p_s1.cols; ++c) mx = std::max(mx, static_cast<double>(row[c]));
      double sum = 0;
      for (int c = 0; c < p_s1.cols; ++c) sum += std::exp(static_cast<double>(row[c]) - mx);
      for (int c = 0; c < p_s1.cols; ++c)
        acc[static_cast<size_t>(c)] += std::exp(static_cast<double>(row[c]) - mx) / sum;
    }
    int best = 0;
    for (int c = 1; c < p_s1.cols; ++c)
      if (acc[static_cast<size_t>(c)] > acc[static_cast<size_t>(best)]) best = c;
    return best;
  }

  static int argmax_row(const Tensor<T>& row_vec) {
    int best = 0;
    for (int c = 1; c < row_vec.cols; ++c)
      if (row_vec.data[static_cast<size_t>(c)] > row_vec.data[static_cast<size_t>(best)]) best = c;
    return best;
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> store_;

  struct Binder {
    Graph<T>& g;
    const ParamStore<T>& store;
    std::map<std::string, Var> cache;
    Var operator()(const std::string& name) {
      auto it = cache.find(name);
      if (it != cache.end()) return it->second;
      Var v = g.param(name, store.get(name));
      cache.emplace(name, v);
      return v;
    }
  };

  static Var ones_row(Graph<T>& g, int n) {
    Tensor<T> t(1, n);
    t.fill(T(1));
    return g.input(std::move(t));
  }

  // ---- forward building blocks ---------------------------------------------

  Var mha(Graph<T>& g, Binder& bind, const std::string& prefix, Var q_in, Var kv_in, int heads,
          int groups) const {
    Var att = g.sdpa(g.matmul(q_in, bind(prefix + ".wq")), g.matmul(kv_in, bind(prefix + ".wk")),
                     g.matmul(kv_in, bind(prefix + ".wv")), heads, groups);
    return g.matmul(att, bind(prefix + ".wo"));
  }

  Var ffn(Graph<T>& g, Binder& bind, const std::string& prefix, Var x) const {
    Var hidden = g.relu(g.add_row(g.matmul(x, bind(prefix + ".w1")), bind(prefix + ".b1")));
    return g.add_row(g.matmul(hidden, bind(prefix + ".w2")), bind(prefix + ".b2"));
  }

  Var encoder_layer(Graph<T>& g, Binder& bind, const std::string& prefix, Var x, int heads,
                    int groups) const {
    Var a = g.dropout(mha(g, bind, prefix + ".attn", x, x, heads, groups));
    Var h = g.layer_norm(g.add(x, a), bind(prefix + ".attn_ln.g"), bind(prefix + ".attn_ln.b"));
    Var f = g.dropout(ffn(g, bind, prefix + ".ffn", h));
    return g.layer_norm(g.add(h, f), bind(prefix + ".ffn_ln.g"), bind(prefix + ".ffn_ln.b"));
  }

  Var encoder_stack(Graph<T>& g, Binder& bind, const std::string& prefix, Var x, int heads,
                    int groups = 1) const {
    x = encoder_layer(g, bind, prefix + ".layer0", x, heads, groups);
    return encoder_layer(g, bind, prefix + ".layer1", x, heads, groups);
  }

  // Two stacked parsing layers: self-attention over slots, cross-attention
  // into the text, then the FFN block applied to the cross-minus-self
  // difference.
  Var parse_propositions(Graph<T>& g, Binder& bind, Var text) const {
    Var slots = bind("prop.seed");
    for (int layer = 0; layer < 2; ++layer) {
      const std::string p = "prop.layer" + std::to_string(layer);
      Var sa = g.dropout(mha(g, bind, p + ".self", slots, slots, cfg_.heads, 1));
      Var h_s = g.layer_norm(g.add(slots, sa), bind(p + ".self_ln.g"), bind(p + ".self_ln.b"));
      Var ca = g.dropout(mha(g, bind, p + ".cross", h_s, text, cfg_.heads, 1));
      Var h_c = g.layer_norm(g.add(h_s, ca), bind(p + ".cross_ln.g"), bind(p + ".cross_ln.b"));
      Var diff = g.sub(h_c, h_s);
      Var f = g.dropout(ffn(g, bind, p + ".ffn", diff));
      slots = g.layer_norm(g.add(diff, f), bind(p + ".ffn_ln.g"), bind(p + ".ffn_ln.b"));
    }
    return slots;
  }

  Var count_head(Graph<T>& g, Binder& bind, Var h_cls) const {
    Var hidden = g.relu(g.add_row(g.matmul(h_cls, bind("prop.count.w1")), bind("prop.count.b1")));
    return g.add_row(g.matmul(hidden, bind("prop.count.w2")), bind("prop.count.b2"));
  }

  Var score_head(Graph<T>& g, Binder& bind, const std::string& prefix, Var states) const {
    return g.add_row(g.matmul(states, bind(prefix + ".w")), bind(prefix + ".b"));
  }

  // Joint representation: confidence-weighted image summary, broadcast and
  // concatenated with the per-image states.
  Var joint_representation(Graph<T>& g, Var p, Var h, Var img_blocks, int L) const {
    Var summary = g.grouped_weighted_sum(g.softmax(p, 1), img_blocks);  // M x d
    return g.concat_cols(g.repeat_interleave(summary, L), h);           // (M*L) x 2d
  }

  // Attention pooling: per-position scalar scores from the shared
  // affine map, softmax over positions, weighted sum. `blocks` x `n` rows in,
  // `blocks` pooled rows out.
  Var pool_rows(Graph<T>& g, Binder& bind, Var h, int blocks, int n) const {
    Var scores = g.reshape(g.add_row(g.matmul(h, bind("comb.wl")), bind("comb.bl")), blocks, n);
    Var weights = cfg_.normalize_combiner ? g.softmax(scores, 1) : scores;
    return g.grouped_weighted_sum(weights, h);
  }

  void build_losses(Graph<T>& g, Forward& out, const Instance& inst) const {
    const int M = out.M;
    const int L = inst.images.rows;
    auto ce_row = [&](Var logits_row) {
      return g.scale(g.pick(g.log_softmax(logits_row), 0, inst.gold), -1.0);
    };

    Var match = -1;
    for (int i = 0; i < M; ++i) {
      Var term = ce_row(g.slice_rows(out.p_s1, i, i + 1));
      match = (match < 0) ? term : g.add(match, term);
    }
    if (cfg_.has_system2()) {
      match = g.add(match, ce_row(out.p_s2));
      match = g.add(match, ce_row(out.p_f));
    }
    out.match_loss = match;

    if (cfg_.has_negation()) {
      Var neg = -1;
      for (int z = 0; z < M; ++z) {
        Var pn = g.slice_rows(out.p_n, z, z + 1);
        Var pp = g.stop_gradient(g.slice_rows(out.p_s1, z, z + 1));
        Var kl = g.sum_all(g.mul(g.softmax(pn, 1), g.sub(g.log_softmax(pn), g.log_softmax(pp))));
        Var term = g.relu(g.add_const(g.scale(kl, -1.0), cfg_.theta));
        neg = (neg < 0) ? term : g.add(neg, term);
      }
      out.neg_loss = neg;
    }

    out.unif_loss = uniformity_loss(g, g.slice_rows(out.slots, 0, M), cfg_.tau);

    // single-label cross-entropy on the count head; label is M* - 1
    Var count_lp = g.log_softmax(out.count_logits);
    out.count_loss = g.scale(g.pick(count_lp, 0, inst.count - 1), -1.0);

    Var total = g.scale(out.match_loss, cfg_.w_match);
    if (out.neg_loss >= 0) total = g.add(total, g.scale(out.neg_loss, cfg_.w_neg));
    total = g.add(total, g.scale(out.unif_loss, cfg_.w_unif));
    total = g.add(total, g.scale(out.count_loss, cfg_.w_count));
    out.total_loss = total;
    (void)L;
  }

 public:
  // Pairwise-cosine hinge over the active slots; zero when M = 1.
  static Var uniformity_loss(Graph<T>& g, Var active_slots, double tau) {
    const Tensor<T>& v = g.value(active_slots);
    const int m = v.rows;
    if (m < 2) return g.constant_scalar(T(0));
    Var nrm = g.l2_normalize_rows(active_slots);
    Var cosine = g.matmul(nrm, nrm, false, true);
    Var hinge = g.relu(g.add_const(cosine, -tau));
    Tensor<T> mask(m, m);
    for (int i = 0; i < m; ++i)
      for (int j = i + 1; j < m; ++j) mask.at(i, j) = T(1);
    Var masked = g.mul(hinge, g.input(std::move(mask)));
    const double pairs = static_cast<double>(m) * (m - 1) / 2.0;
    return g.scale(g.sum_all(masked), 1.0 / pairs);
  }

 private:
  // ---- initialization ---------------------------------------------------------

  void add_matrix(const std::string& name, int rows, int cols) {
    Rng rng(derive_seed(cfg_.seed, fnv1a(name)));
    const double sigma = std::sqrt(2.0 / (rows + cols));
    Tensor<T> t(rows, cols);
    for (T& v : t.data) v = static_cast<T>(sigma * rng.next_gaussian());
    store_.add(name, std::move(t));
  }

  void add_gaussian(const std::string& name, int rows, int cols, double sigma) {
    Rng rng(derive_seed(cfg_.seed, fnv1a(name)));
    Tensor<T> t(rows, cols);
    for (T& v : t.data) v = static_cast<T>(sigma * rng.next_gaussian());
    store_.add(name, std::move(t));
  }

  void add_bias(const std::string& name, int cols) { store_.add(name, Tensor<T>(1, cols)); }

  void add_ln(const std::string& prefix, int cols) {
    Tensor<T> gain(1, cols);
    gain.fill(T(1));
    store_.add(prefix + ".g", std::move(gain));
    add_bias(prefix + ".b", cols);
  }

  void add_attn(const std::string& prefix, int dm) {
    add_matrix(prefix + ".wq", dm, dm);
    add_matrix(prefix + ".wk", dm, dm);
    add_matrix(prefix + ".wv", dm, dm);
    add_matrix(prefix + ".wo", dm, dm);
  }

  void add_ffn(const std::string& prefix, int dm) {
    const int hidden = dm * cfg_.ffn_mult;
    add_matrix(prefix + ".w1", dm, hidden);
    add_bias(prefix + ".b1", hidden);
    add_matrix(prefix + ".w2", hidden, dm);
    add_bias(prefix + ".b2", dm);
  }

  void add_encoder_layer(const std::string& prefix, int dm) {
    add_attn(prefix + ".attn", dm);
    add_ln(prefix + ".attn_ln", dm);
    add_ffn(prefix + ".ffn", dm);
    add_ln(prefix + ".ffn_ln", dm);
  }

  void init_params() {
    const int d = cfg_.d;

    // proposition module + count head
    add_gaussian("prop.seed", cfg_.max_props, d, 1.0);
    for (int layer = 0; layer < 2; ++layer) {
      const std::string p = "prop.layer" + std::to_string(layer);
      add_attn(p + ".self", d);
      add_ln(p + ".self_ln", d);
      add_attn(p + ".cross", d);
      add_ln(p + ".cross_ln", d);
      add_ffn(p + ".ffn", d);
      add_ln(p + ".ffn_ln", d);
    }
    // Count head: wide hidden layer of paired +/- random projections, so the
    // hidden activations carry |v . x| (norm-tracking) features from step one
    // and the output layer only has to fit a linear readout.
    {
      const int hidden = 8 * d;
      Rng rng(derive_seed(cfg_.seed, fnv1a("prop.count.w1")));
      Tensor<T> w1(d, hidden);
      const double sigma = 1.0 / std::sqrt(static_cast<double>(d));
      for (int j = 0; j < hidden / 2; ++j)
        for (int i = 0; i < d; ++i) {
          const T g = static_cast<T>(sigma * rng.next_gaussian());
          w1.at(i, j) = g;
          w1.at(i, j + hidden / 2) = -g;
        }
      store_.add("prop.count.w1", std::move(w1));
      add_bias("prop.count.b1", hidden);
      add_matrix("prop.count.w2", hidden, cfg_.max_props);
      add_bias("prop.count.b2", cfg_.max_props);
    }

    // System 1
    add_gaussian("s1.pe", cfg_.pe_size, d, 0.02);
    add_encoder_layer("s1.prop_tf.layer0", d);
    add_encoder_layer("s1.prop_tf.layer1", d);
    if (cfg_.has_context_branch()) {
      add_encoder_layer("s1.ctx_tf.layer0", d);
      add_encoder_layer("s1.ctx_tf.layer1", d);
    }
    if (cfg_.has_modifier()) {
      add_matrix("s1.mod.m2", 2 * d, 2 * d);
      add_bias("s1.mod.m2_b", 2 * d);
      add_matrix("s1.mod.m1", 2 * d, d);
      add_bias("s1.mod.m1_b", d);
    }
    add_matrix("s1.head.w", d, 1);
    add_bias("s1.head.b", 1);

    // System 2
    if (cfg_.has_system2()) {
      if (cfg_.has_negation()) {
        add_matrix("s2.neg.w1", d, d);
        add_bias("s2.neg.b1", d);
        add_matrix("s2.neg.w2", d, d);
        add_bias("s2.neg.b2", d);
      }
      add_matrix("s2.attn.ws", 2 * d, 2 * d);
      add_attn("s2.attn", 2 * d);
      add_matrix("s2.gate.w", 4 * d, 1);
      add_bias("s2.gate.b", 1);
      add_matrix("s2.out", 2 * d, d);
      // Zero-init: the fused prediction starts exactly at System-1's
      // uniformly pooled aggregate (System-2 logits are constant, the pooling
      // weights uniform) and deviates only as these heads train. A random
      // System-2 head otherwise drags the fused scores for most of the short
      // schedule.
      store_.add("s2.head.w", Tensor<T>(d, 1));
      add_bias("s2.head.b", 1);

      // combiner
      add_matrix("comb.wl", d, 1);
      add_bias("comb.bl", 1);
      add_matrix("comb.wa", d, d);
      add_matrix("comb.wb", d, d);
      add_bias("comb.bc", d);
      store_.add("comb.v", Tensor<T>(d, 1));
      add_bias("comb.bv", 1);
      add_matrix("comb.wf", 2 * d, 1);
      add_bias("comb.bf", 1);
    }
  }

  void check_store() const {
    // Minimal consistency: the shared head pins d; everything else fails fast
    // on first use with a shape error.
    const Tensor<T>& head = store_.get("s1.head.w");
    if (head.rows != cfg_.d)
      throw ConfigError("model: checkpoint d = " + std::to_string(head.rows) +
                        " conflicts with configured d = " + std::to_string(cfg_.d));
  }
};

}  // namespace ndcr
