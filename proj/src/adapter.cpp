#include "invar/adapter.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace invar {

AdapterParams init_adapter(std::size_t dim, std::size_t rank, double alpha,
                           double dropout_p, std::uint64_t seed,
                           AdapterSide side) {
  if (rank == 0 || rank >= dim) {
    throw InvalidRank("rank must satisfy 0 < rank < dim; got rank=" +
                      std::to_string(rank) + " dim=" + std::to_string(dim));
  }
  if (dropout_p < 0.0 || dropout_p >= 1.0) {
    throw Error("dropout_p must lie in [0, 1)");
  }
  AdapterParams params;
  params.dim = dim;
  params.rank = rank;
  params.alpha = alpha;
  params.dropout_p = dropout_p;
  params.seed = seed;
  params.side = side;
  params.A.resize(rank * dim);
  params.B.assign(dim * rank, 0.0);

  SplitMix64 rng(seed);
  double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  std::size_t total = rank * dim;
  for (std::size_t i = 0; i < total; i += 2) {
    double z0 = 0, z1 = 0;
    rng.gaussian_pair(z0, z1);
    params.A[i] = z0 * scale;
    if (i + 1 < total) params.A[i + 1] = z1 * scale;
  }
  return params;
}

AdapterForward apply_adapter_detailed(const AdapterParams& params,
                                      const Embedding& v, bool training,
                                      std::uint64_t step_seed) {
  if (v.dim() != params.dim) {
    throw DimMismatch("adapter dim " + std::to_string(params.dim) +
                      " vs input dim " + std::to_string(v.dim()));
  }
  std::size_t d = params.dim;
  std::size_t r = params.rank;
  AdapterForward fwd;

  fwd.z.assign(r, 0.0);
  for (std::size_t row = 0; row < r; ++row) {
    const double* a_row = params.A.data() + row * d;
    double acc = 0.0;
    for (std::size_t c = 0; c < d; ++c) acc += a_row[c] * v.values[c];
    fwd.z[row] = acc;
  }

  fwd.mask.assign(d, 1.0);
  if (training && params.dropout_p > 0.0) {
    SplitMix64 rng(mix_seed(params.seed, step_seed));
    double keep_scale = 1.0 / (1.0 - params.dropout_p);
    for (std::size_t c = 0; c < d; ++c) {
      fwd.mask[c] = rng.uniform() < params.dropout_p ? 0.0 : keep_scale;
    }
  }

  double ratio = params.alpha / static_cast<double>(r);
  fwd.u.resize(d);
  for (std::size_t c = 0; c < d; ++c) {
    const double* b_row = params.B.data() + c * r;
    double delta = 0.0;
    for (std::size_t row = 0; row < r; ++row) delta += b_row[row] * fwd.z[row];
    fwd.u[c] = v.values[c] + ratio * fwd.mask[c] * delta;
  }

  fwd.u_norm = norm(fwd.u);
  if (fwd.u_norm < 1e-12) {
    throw ZeroVector("adapter output degenerate (norm < 1e-12)");
  }
  fwd.out.values.resize(d);
  for (std::size_t c = 0; c < d; ++c) fwd.out.values[c] = fwd.u[c] / fwd.u_norm;
  return fwd;
}

Embedding apply_adapter(const AdapterParams& params, const Embedding& v,
                        bool training, std::uint64_t step_seed) {
  return apply_adapter_detailed(params, v, training, step_seed).out;
}

AdapterGrad AdapterGrad::zeros_like(const AdapterParams& params) {
  AdapterGrad g;
  g.dA.assign(params.rank * params.dim, 0.0);
  g.dB.assign(params.dim * params.rank, 0.0);
  return g;
}

void AdapterGrad::add_scaled(const AdapterGrad& other, double scale) {
  if (dA.size() != other.dA.size() || dB.size() != other.dB.size()) {
    throw DimMismatch("gradient shape mismatch");
  }
  for (std::size_t i = 0; i < dA.size(); ++i) dA[i] += scale * other.dA[i];
  for (std::size_t i = 0; i < dB.size(); ++i) dB[i] += scale * other.dB[i];
}

namespace {

AdapterGrad reduce_range(std::vector<AdapterGrad>& slots, std::size_t begin,
                         std::size_t end) {
  if (end - begin == 1) return std::move(slots[begin]);
  std::size_t mid = begin + (end - begin) / 2;
  AdapterGrad left = reduce_range(slots, begin, mid);
  AdapterGrad right = reduce_range(slots, mid, end);
  left.add_scaled(right, 1.0);
  return left;
}

}  // namespace

AdapterGrad reduce_grads(std::vector<AdapterGrad>&& slots) {
  if (slots.empty()) throw Error("reduce_grads needs at least one slot");
  return reduce_range(slots, 0, slots.size());
}

// ---------------------------------------------------------------------------
// Checkpoint I/O ("IVAD")
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::string& out, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double x) {
  put_u64(out, std::bit_cast<std::uint64_t>(x));
}

struct Reader {
  const std::string& data;
  std::size_t pos;
  const std::string& path;

  void need(std::size_t n) const {
    if (pos + n > data.size()) throw CorruptCheckpoint("truncated " + path);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t x = 0;
    for (int i = 0; i < 4; ++i) {
      x |= static_cast<std::uint32_t>(static_cast<unsigned char>(data[pos + i]))
           << (8 * i);
    }
    pos += 4;
    return x;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t x = 0;
    for (int i = 0; i < 8; ++i) {
      x |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[pos + i]))
           << (8 * i);
    }
    pos += 8;
    return x;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data[pos++]);
  }
};

}  // namespace

void save_adapter(const AdapterParams& params, const std::string& path) {
  std::string data;
  data.reserve(33 + (params.A.size() + params.B.size()) * 8);
  data += "IVAD";
  put_u32(data, 1);
  put_u32(data, static_cast<std::uint32_t>(params.dim));
  put_u32(data, static_cast<std::uint32_t>(params.rank));
  put_f64(data, params.alpha);
  put_f64(data, params.dropout_p);
  put_u64(data, params.seed);
  data.push_back(static_cast<char>(params.side));
  for (double x : params.A) put_f64(data, x);
  for (double x : params.B) put_f64(data, x);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed for " + path);
}

AdapterParams load_adapter(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  if (data.size() < 4 || data.compare(0, 4, "IVAD") != 0) {
    throw CorruptCheckpoint("bad magic in " + path);
  }
  Reader reader{data, 4, path};
  std::uint32_t version = reader.u32();
  if (version != 1) {
    throw CorruptCheckpoint("unsupported checkpoint version " +
                            std::to_string(version));
  }
  AdapterParams params;
  params.dim = reader.u32();
  params.rank = reader.u32();
  params.alpha = reader.f64();
  params.dropout_p = reader.f64();
  params.seed = reader.u64();
  std::uint8_t side = reader.u8();
  if (side > 1) throw CorruptCheckpoint("bad adapter side in " + path);
  params.side = static_cast<AdapterSide>(side);
  if (params.rank == 0 || params.dim == 0 || params.rank >= params.dim) {
    throw CorruptCheckpoint("bad shape in " + path);
  }
  params.A.resize(params.rank * params.dim);
  for (double& x : params.A) x = reader.f64();
  params.B.resize(params.dim * params.rank);
  for (double& x : params.B) x = reader.f64();
  if (reader.pos != data.size()) {
    throw CorruptCheckpoint("trailing bytes in " + path);
  }
  return params;
}

}  // namespace invar
