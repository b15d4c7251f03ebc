#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ndcr/common.hpp"
#include "ndcr/tensor.hpp"

namespace ndcr {

// Configuration of the synthetic compositional retrieval benchmark. Each
// instance hides a conjunction of attribute clauses; exactly one of the L
// candidates satisfies all of them.
struct GenConfig {
  int d = 64;           // embedding width
  int L = 10;           // candidates per instance
  int A = 12;           // attribute count
  // Relative weights of proposition counts 1..5.
  std::vector<double> count_weights = {61, 863, 1239, 126, 16};
  double neg_prob = 0.3;   // per-clause negation probability
  double noise = 0.05;     // additive Gaussian noise scale on embeddings
  double feature_scale = 4.0;  // scale of the seeded encoding dictionaries
  uint64_t seed = 10;
  // First instance index. Splits of one benchmark share the seed (hence the
  // frozen encoder dictionaries) and use disjoint offset ranges.
  uint64_t offset = 0;

  void validate() const;
  int max_count() const { return static_cast<int>(count_weights.size()); }
  std::string to_json() const;
  static GenConfig from_json(const std::string& json);
  uint64_t hash() const { return fnv1a(to_json()); }
};

// One clause: (attribute index, polarity). positive == true means the gold
// candidate must have the attribute set; false means it must be clear.
struct Clause {
  int attribute = 0;
  bool positive = true;
};

struct RawInstance {
  std::vector<std::vector<uint8_t>> attrs;  // L x A binary
  std::vector<Clause> clauses;              // length M*
  int gold = 0;
  uint64_t seed = 0;
};

// Encoded instance: what the frozen-encoder stack would hand the NDCR head.
struct Instance {
  Tensor<float> text;    // (M*+1) x d; row 0 is the global token
  Tensor<float> images;  // L x d
  Tensor<float> cross;   // L x d cross-fusion embeddings
  int gold = 0;
  int count = 0;                           // M*
  std::vector<std::vector<uint8_t>> masks;  // M* x L satisfaction bits (diagnostic only)
  uint64_t seed = 0;
  uint64_t config_hash = 0;
};

bool satisfies(const std::vector<uint8_t>& attrs, const Clause& clause);

RawInstance generate_raw(uint64_t seed, const GenConfig& cfg);

// Seeded dictionaries shared by every instance of a dataset (the stand-in for
// the frozen encoders).
struct EncoderBasis {
  Tensor<float> clause_dict;   // A x d
  Tensor<float> negation;      // 1 x d
  Tensor<float> image_proj;    // A x d
  Tensor<float> cross_mixer;   // d x d

  static EncoderBasis from_config(const GenConfig& cfg);
};

Instance encode(const RawInstance& raw, const GenConfig& cfg, const EncoderBasis& basis);

// generate_raw + encode for instance `index` of a dataset.
Instance make_instance(uint64_t index, const GenConfig& cfg, const EncoderBasis& basis);

std::vector<Instance> make_dataset(const GenConfig& cfg, int count);

}  // namespace ndcr
