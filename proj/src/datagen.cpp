#include "ndcr/datagen.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

namespace ndcr {

using json = nlohmann::json;

void GenConfig::validate() const {
  if (d < 1) throw ConfigError("gen: d must be >= 1");
  if (L < 2) throw ConfigError("gen: L must be >= 2");
  if (A < 1) throw ConfigError("gen: A must be >= 1");
  if (count_weights.empty() || count_weights.size() > 10)
    throw ConfigError("gen: count weights must cover 1..n with n in [1,10]");
  double total = 0;
  for (double w : count_weights) {
    if (w < 0) throw ConfigError("gen: count weights must be nonnegative");
    total += w;
  }
  if (total <= 0) throw ConfigError("gen: count weights must not all be zero");
  if (max_count() > A)
    throw ConfigError("gen: max proposition count exceeds attribute count (need distinct clause attributes)");
  if (neg_prob < 0 || neg_prob > 1) throw ConfigError("gen: negation probability must be in [0,1]");
  if (noise < 0) throw ConfigError("gen: noise scale must be >= 0");
  if (feature_scale <= 0) throw ConfigError("gen: feature scale must be > 0");
}

std::string GenConfig::to_json() const {
  json j;
  j["d"] = d;
  j["L"] = L;
  j["A"] = A;
  j["count_weights"] = count_weights;
  j["neg_prob"] = neg_prob;
  j["noise"] = noise;
  j["feature_scale"] = feature_scale;
  j["seed"] = seed;
  j["offset"] = offset;
  return j.dump();
}

GenConfig GenConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("gen config: invalid JSON: ") + e.what());
  }
  GenConfig cfg;
  cfg.d = j.value("d", cfg.d);
  cfg.L = j.value("L", cfg.L);
  cfg.A = j.value("A", cfg.A);
  if (j.contains("count_weights")) cfg.count_weights = j["count_weights"].get<std::vector<double>>();
  cfg.neg_prob = j.value("neg_prob", cfg.neg_prob);
  cfg.noise = j.value("noise", cfg.noise);
  cfg.feature_scale = j.value("feature_scale", cfg.feature_scale);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.offset = j.value("offset", cfg.offset);
  return cfg;
}

bool satisfies(const std::vector<uint8_t>& attrs, const Clause& clause) {
  if (clause.attribute < 0 || clause.attribute >= static_cast<int>(attrs.size()))
    throw ConfigError("satisfies: attribute index out of range");
  bool set = attrs[static_cast<size_t>(clause.attribute)] != 0;
  return clause.positive ? set : !set;
}

namespace {

int sample_count(Rng& rng, const std::vector<double>& weights) {
  double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  double u = rng.next_uniform() * total;
  for (size_t i = 0; i < weights.size(); ++i) {
    u -= weights[i];
    if (u < 0) return static_cast<int>(i) + 1;
  }
  return static_cast<int>(weights.size());
}

}  // namespace

RawInstance generate_raw(uint64_t seed, const GenConfig& cfg) {
  cfg.validate();
  Rng rng(seed);
  RawInstance raw;
  raw.seed = seed;
  const int m = sample_count(rng, cfg.count_weights);

  // Distinct clause attributes via partial Fisher-Yates.
  std::vector<int> attr_pool(static_cast<size_t>(cfg.A));
  std::iota(attr_pool.begin(), attr_pool.end(), 0);
  for (int j = 0; j < m; ++j) {
    int pick = j + static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.A - j)));
    std::swap(attr_pool[static_cast<size_t>(j)], attr_pool[static_cast<size_t>(pick)]);
    raw.clauses.push_back({attr_pool[static_cast<size_t>(j)], !rng.next_bool(cfg.neg_prob)});
  }

  std::vector<bool> relevant(static_cast<size_t>(cfg.A), false);
  for (const Clause& c : raw.clauses) relevant[static_cast<size_t>(c.attribute)] = true;

  // Gold: random bits, then forced to satisfy every clause.
  std::vector<uint8_t> gold_attrs(static_cast<size_t>(cfg.A));
  for (auto& b : gold_attrs) b = rng.next_bool(0.5) ? 1 : 0;
  for (const Clause& c : raw.clauses)
    gold_attrs[static_cast<size_t>(c.attribute)] = c.positive ? 1 : 0;

  raw.gold = static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.L)));
  raw.attrs.assign(static_cast<size_t>(cfg.L), {});
  raw.attrs[static_cast<size_t>(raw.gold)] = gold_attrs;

  // Distractors: gold with >= 1 clause-relevant attribute flipped (so each
  // violates at least one clause) and irrelevant bits re-randomized (so
  // candidates stay minimally contrastive yet distinct).
  for (int l = 0; l < cfg.L; ++l) {
    if (l == raw.gold) continue;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      std::vector<uint8_t> cand = gold_attrs;
      int flipped = 0;
      for (const Clause& c : raw.clauses) {
        if (rng.next_bool(0.5)) {
          cand[static_cast<size_t>(c.attribute)] ^= 1;
          ++flipped;
        }
      }
      if (flipped == 0) {
        const Clause& c = raw.clauses[rng.next_below(raw.clauses.size())];
        cand[static_cast<size_t>(c.attribute)] ^= 1;
      }
      for (int a = 0; a < cfg.A; ++a)
        if (!relevant[static_cast<size_t>(a)]) cand[static_cast<size_t>(a)] = rng.next_bool(0.5) ? 1 : 0;
      bool duplicate = false;
      for (int prev = 0; prev < cfg.L; ++prev)
        if (!raw.attrs[static_cast<size_t>(prev)].empty() &&
            raw.attrs[static_cast<size_t>(prev)] == cand) {
          duplicate = true;
          break;
        }
      if (!duplicate) {
        raw.attrs[static_cast<size_t>(l)] = std::move(cand);
        break;
      }
    }
    if (raw.attrs[static_cast<size_t>(l)].empty())
      throw ConfigError("gen: could not draw distinct distractor (attribute space too small)");
  }
  return raw;
}

namespace {

// Stand-in for a pair of aligned frozen encoders. Three properties real
// encoder stacks give us that the head depends on:
//   - text and image embeddings share a semantic basis (alignment), here a
//     sparse one: each attribute owns a disjoint coordinate block, so a
//     text/image match shows up as a consistent positive coordinate pattern
//     that survives layer-norm centering downstream;
//   - the negation direction is weaker than attribute directions, so the
//     global token's norm stays count-dominated;
//   - image embeddings carry a shared mean component along the negation
//     direction (frozen encoders have a strong common direction), which lets
//     clause polarity survive the elementwise text-image fusion.
constexpr double kNegationScale = 0.15;
constexpr double kImageNegBias = 0.15;
constexpr double kModalityJitter = 0.1;

}  // namespace

EncoderBasis EncoderBasis::from_config(const GenConfig& cfg) {
  cfg.validate();
  if (cfg.A + 1 > cfg.d)
    throw ConfigError("gen: need d >= A + 1 for an orthogonal attribute basis");
  Rng rng(derive_seed(cfg.seed, 0xba515));
  const double target = cfg.feature_scale * std::sqrt(static_cast<double>(cfg.d));

  // A + 1 orthonormal sparse directions (attributes + negation): disjoint
  // random coordinate blocks with random signs, rescaled to norm
  // feature_scale * sqrt(d).
  const int block = cfg.d / (cfg.A + 1);
  std::vector<int> perm(static_cast<size_t>(cfg.d));
  std::iota(perm.begin(), perm.end(), 0);
  for (size_t i = perm.size(); i > 1; --i)
    std::swap(perm[i - 1], perm[rng.next_below(i)]);
  std::vector<std::vector<double>> basis(static_cast<size_t>(cfg.A + 1),
                                         std::vector<double>(static_cast<size_t>(cfg.d), 0.0));
  const double unit = 1.0 / std::sqrt(static_cast<double>(block));
  for (int a = 0; a < cfg.A + 1; ++a)
    for (int j = 0; j < block; ++j) {
      int k = perm[static_cast<size_t>(a * block + j)];
      basis[static_cast<size_t>(a)][static_cast<size_t>(k)] = rng.next_bool(0.5) ? unit : -unit;
    }

  EncoderBasis b;
  b.clause_dict = Tensor<float>(cfg.A, cfg.d);
  for (int a = 0; a < cfg.A; ++a)
    for (int k = 0; k < cfg.d; ++k)
      b.clause_dict.at(a, k) =
          static_cast<float>(target * basis[static_cast<size_t>(a)][static_cast<size_t>(k)]);
  b.negation = Tensor<float>(1, cfg.d);
  for (int k = 0; k < cfg.d; ++k)
    b.negation.at(0, k) = static_cast<float>(kNegationScale * target *
                                             basis[static_cast<size_t>(cfg.A)][static_cast<size_t>(k)]);
  b.image_proj = Tensor<float>(cfg.A, cfg.d);
  for (int a = 0; a < cfg.A; ++a)
    for (int k = 0; k < cfg.d; ++k)
      b.image_proj.at(a, k) = static_cast<float>(
          b.clause_dict.at(a, k) +
          (kImageNegBias / kNegationScale) * b.negation.at(0, k) +
          kModalityJitter * cfg.feature_scale * rng.next_gaussian());
  // Unit-variance mixing so cross embeddings stay at the scale of their input.
  b.cross_mixer = Tensor<float>(cfg.d, cfg.d);
  const float mix = 1.0f / std::sqrt(static_cast<float>(cfg.d));
  for (auto& v : b.cross_mixer.data) v = mix * static_cast<float>(rng.next_gaussian());
  return b;
}

Instance encode(const RawInstance& raw, const GenConfig& cfg, const EncoderBasis& basis) {
  const int m = static_cast<int>(raw.clauses.size());
  const int d = cfg.d;
  Rng rng(derive_seed(raw.seed, 0xe11c0de));
  const float sigma = static_cast<float>(cfg.noise);

  Instance inst;
  inst.gold = raw.gold;
  inst.count = m;
  inst.seed = raw.seed;
  inst.config_hash = cfg.hash();

  // Clause rows: dictionary vector shifted by the signed negation direction.
  inst.text = Tensor<float>(m + 1, d);
  for (int j = 0; j < m; ++j) {
    const Clause& c = raw.clauses[static_cast<size_t>(j)];
    const float pol = c.positive ? 1.0f : -1.0f;
    float* row = inst.text.row(j + 1);
    const float* dict = basis.clause_dict.row(c.attribute);
    const float* neg = basis.negation.row(0);
    for (int k = 0; k < d; ++k) row[k] = dict[k] + pol * neg[k];
  }
  // Global token: mean of the (noiseless) clause encodings.
  float* global = inst.text.row(0);
  for (int j = 0; j < m; ++j)
    for (int k = 0; k < d; ++k) global[k] += inst.text.at(j + 1, k) / static_cast<float>(m);
  for (auto& v : inst.text.data) v += sigma * static_cast<float>(rng.next_gaussian());

  inst.images = Tensor<float>(cfg.L, d);
  for (int l = 0; l < cfg.L; ++l) {
    float* row = inst.images.row(l);
    const auto& attrs = raw.attrs[static_cast<size_t>(l)];
    for (int a = 0; a < cfg.A; ++a)
      if (attrs[static_cast<size_t>(a)])
        for (int k = 0; k < d; ++k) row[k] += basis.image_proj.at(a, k);
    for (int k = 0; k < d; ++k) row[k] += sigma * static_cast<float>(rng.next_gaussian());
  }

  // Cross-fusion: global-token/image Hadamard product through the mixer.
  Tensor<float> fused(cfg.L, d);
  for (int l = 0; l < cfg.L; ++l)
    for (int k = 0; k < d; ++k) fused.at(l, k) = global[k] * inst.images.at(l, k);
  inst.cross = matmul(fused, basis.cross_mixer);

  inst.masks.assign(static_cast<size_t>(m), std::vector<uint8_t>(static_cast<size_t>(cfg.L), 0));
  for (int j = 0; j < m; ++j)
    for (int l = 0; l < cfg.L; ++l)
      inst.masks[static_cast<size_t>(j)][static_cast<size_t>(l)] =
          satisfies(raw.attrs[static_cast<size_t>(l)], raw.clauses[static_cast<size_t>(j)]) ? 1 : 0;
  return inst;
}

Instance make_instance(uint64_t index, const GenConfig& cfg, const EncoderBasis& basis) {
  return encode(generate_raw(derive_seed(cfg.seed, index), cfg), cfg, basis);
}

std::vector<Instance> make_dataset(const GenConfig& cfg, int count) {
  if (count < 1) throw ConfigError("gen: instance count must be >= 1");
  EncoderBasis basis = EncoderBasis::from_config(cfg);
  std::vector<Instance> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i)
    out.push_back(make_instance(cfg.offset + static_cast<uint64_t>(i), cfg, basis));
  return out;
}

}  // namespace ndcr
