// Shared plumbing for the retrieval-alignment engine: the error taxonomy, the
// deterministic PRNG stack (FNV-1a text hashing feeding splitmix64), lowercase
// whitespace tokenization, and order-stable reductions. Every downstream module
// builds on the exact bit behavior pinned here; constants are frozen by golden
// tests and must not drift.
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace invar {

// ---------------------------------------------------------------------------
// Errors. One type per failure mode so tests can catch precisely.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : Error {
  using Error::Error;
};

struct MalformedLine : Error {
  std::size_t line_no;
  MalformedLine(std::size_t line, const std::string& detail)
      : Error("malformed line " + std::to_string(line) + ": " + detail),
        line_no(line) {}
};

struct EmptyCorpus : Error {
  using Error::Error;
};

struct InvalidWindow : Error {
  using Error::Error;
};

struct InvalidFactor : Error {
  using Error::Error;
};

struct DimMismatch : Error {
  using Error::Error;
};

struct ZeroVector : Error {
  using Error::Error;
};

struct RemoteUnavailable : Error {
  std::string endpoint;
  int status;  // 0 when the transport failed before any HTTP status arrived
  RemoteUnavailable(const std::string& ep, int http_status,
                    const std::string& detail)
      : Error("remote endpoint " + ep + " unavailable (status " +
              std::to_string(http_status) + "): " + detail),
        endpoint(ep),
        status(http_status) {}
};

struct RemoteProtocolError : Error {
  using Error::Error;
};

struct NonFiniteScore : Error {
  std::uint32_t chunk_id;
  explicit NonFiniteScore(std::uint32_t id)
      : Error("non-finite score for chunk " + std::to_string(id)),
        chunk_id(id) {}
};

struct SupportMismatch : Error {
  using Error::Error;
};

struct InvalidRank : Error {
  using Error::Error;
};

struct CorpusTooSmall : Error {
  using Error::Error;
};

struct EmptyQuerySet : Error {
  using Error::Error;
};

struct EmptyTarget : Error {
  using Error::Error;
};

struct InvalidLogProb : Error {
  using Error::Error;
};

struct MissingChunkText : Error {
  std::uint32_t chunk_id;
  explicit MissingChunkText(std::uint32_t id)
      : Error("no text for chunk " + std::to_string(id)), chunk_id(id) {}
};

struct EmptyCandidates : Error {
  using Error::Error;
};

struct RewriterFailure : Error {
  using Error::Error;
};

struct InvalidL : Error {
  using Error::Error;
};

struct StepOutOfRange : Error {
  using Error::Error;
};

struct NonFiniteLoss : Error {
  std::size_t step;
  explicit NonFiniteLoss(std::size_t at_step)
      : Error("non-finite loss at step " + std::to_string(at_step)),
        step(at_step) {}
};

struct DivergenceGuard : Error {
  using Error::Error;
};

struct ConfigMismatch : Error {
  using Error::Error;
};

struct CorruptCheckpoint : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct NoRetrievedChunks : Error {
  using Error::Error;
};

struct EmptyCandidatePool : Error {
  using Error::Error;
};

struct EmptyGold : Error {
  using Error::Error;
};

struct MissingGold : Error {
  std::string query_id;
  explicit MissingGold(const std::string& qid)
      : Error("no gold labels for query " + qid), query_id(qid) {}
};

struct UnknownQueryId : Error {
  std::string query_id;
  explicit UnknownQueryId(const std::string& qid)
      : Error("unknown query id " + qid), query_id(qid) {}
};

// ---------------------------------------------------------------------------
// Deterministic PRNG stack. FNV-1a-64 hashes text to a seed, splitmix64 is the
// only generator in the engine, and every random draw anywhere is a pure
// function of (root seed, structural indices). Nothing uses std::random.
// ---------------------------------------------------------------------------

std::uint64_t fnv1a64(std::string_view bytes);

class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next();

  // Uniform in [2^-53, 1 - 2^-53]; the clamp keeps log() and Box-Muller safe.
  double uniform();

  // One Box-Muller pair from two consecutive uniforms.
  void gaussian_pair(double& z0, double& z1);

 private:
  std::uint64_t state_;
};

// Stateless combine for deriving sub-stream seeds from a root seed and an
// index. Order-sensitive: mix_seed(a, b) != mix_seed(b, a) in general.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

// ---------------------------------------------------------------------------
// Text utilities. The engine-wide token rule: lowercase ASCII, split on
// whitespace. Chunking, the answer-overlap oracle, and metric normalization
// all route through these.
// ---------------------------------------------------------------------------

std::string lowercase_ascii(std::string_view s);
std::vector<std::string> tokenize(std::string_view text);

// ---------------------------------------------------------------------------
// Order-stable reductions and data parallelism. Reduction trees depend only on
// the element count, and parallel_for gives every index its own output slot,
// so results are bit-identical for any worker count.
// ---------------------------------------------------------------------------

double pairwise_sum(std::span<const double> xs);

void parallel_for(std::size_t n, unsigned jobs,
                  const std::function<void(std::size_t)>& fn);

unsigned default_jobs();
void set_default_jobs(unsigned jobs);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> v);

}  // namespace invar
