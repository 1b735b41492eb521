// The trainable low-rank transform: v' = normalize(v + (alpha/rank) * B(Av)),
// with B zero-initialized so a fresh adapter is the identity. Dropout, when
// training, masks coordinates of the low-rank delta only. The forward record
// keeps every intermediate the analytic gradients need.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "invar/embedding.hpp"

namespace invar {

enum class AdapterSide : std::uint8_t { Document = 0, Query = 1 };

struct AdapterParams {
  std::size_t dim = 0;
  std::size_t rank = 0;
  double alpha = 32.0;
  double dropout_p = 0.0;
  std::uint64_t seed = 0;
  AdapterSide side = AdapterSide::Document;
  std::vector<double> A;  // rank x dim, row-major
  std::vector<double> B;  // dim x rank, row-major
};

// A entries are gaussian scaled by 1/sqrt(dim), drawn pairwise from
// splitmix64(seed) in row-major order; B starts at zero.
AdapterParams init_adapter(std::size_t dim, std::size_t rank, double alpha,
                           double dropout_p, std::uint64_t seed,
                           AdapterSide side = AdapterSide::Document);

// Everything the backward pass reuses. mask holds the per-coordinate dropout
// scale applied to the delta (all ones on the inference path).
struct AdapterForward {
  Embedding out;             // v', unit norm
  std::vector<double> z;     // A v
  std::vector<double> u;     // v + (alpha/rank) * mask o (B z)
  double u_norm = 0.0;
  std::vector<double> mask;
};

// The dropout stream is seeded by mix_seed(params.seed, step_seed); one
// uniform per coordinate in order, dropped when it falls below dropout_p.
AdapterForward apply_adapter_detailed(const AdapterParams& params,
                                      const Embedding& v, bool training,
                                      std::uint64_t step_seed);

Embedding apply_adapter(const AdapterParams& params, const Embedding& v,
                        bool training = false, std::uint64_t step_seed = 0);

// Accumulator shaped like (A, B); used by every loss gradient.
struct AdapterGrad {
  std::vector<double> dA;  // rank x dim
  std::vector<double> dB;  // dim x rank

  static AdapterGrad zeros_like(const AdapterParams& params);
  void add_scaled(const AdapterGrad& other, double scale);
};

// Fixed-shape pairwise reduction over per-slot gradients; the result is
// independent of how the slots were filled.
AdapterGrad reduce_grads(std::vector<AdapterGrad>&& slots);

// Checkpoint layout: "IVAD", u32 version=1, u32 dim, u32 rank, f64 alpha,
// f64 dropout_p, u64 seed, u8 side, A row-major f64, B row-major f64.
void save_adapter(const AdapterParams& params, const std::string& path);
AdapterParams load_adapter(const std::string& path);

}  // namespace invar
