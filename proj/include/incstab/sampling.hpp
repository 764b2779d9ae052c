#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "incstab/net.hpp"

namespace incstab {

struct BoxDomain {
  Vector lo;
  Vector hi;

  BoxDomain() = default;
  BoxDomain(Vector lo_, Vector hi_);

  std::size_t dim() const { return static_cast<std::size_t>(lo.size()); }
  Vector span() const { return hi - lo; }
  Vector center() const { return 0.5 * (lo + hi); }
  double diameter() const { return (hi - lo).norm(); }
  bool contains(const Vector& x, double tol = 0.0) const;
  bool operator==(const BoxDomain& other) const { return lo == other.lo && hi == other.hi; }
};

struct SampleCover {
  std::vector<Vector> points;
  double radius = 0.0;
  BoxDomain domain;

  std::size_t size() const { return points.size(); }
};

inline constexpr std::size_t kDefaultCoverBudget = 5'000'000;

/// Number of grid points build_cover would produce, without building them.
std::size_t cover_point_count(const BoxDomain& domain, double eps);

/// Boundary-inclusive grid with spacing at most 2 eps / sqrt(dim) per axis,
/// so every cell's half-diagonal is at most eps.
SampleCover build_cover(const BoxDomain& domain, double eps,
                        std::size_t budget = kDefaultCoverBudget);

struct CoverVerdict {
  bool passed = true;
  double worst_distance = 0.0;
  Vector worst_probe;
  std::size_t probes = 0;
};

CoverVerdict verify_cover(const SampleCover& cover, std::size_t n_probe, std::uint64_t seed);

/// Indices into the state and input covers. Flagged pairs are closer than
/// d_min and are skipped by the sandwich conditions.
struct PairTuple {
  std::size_t xq;
  std::size_t xr;
  std::size_t wq;
  std::size_t wr;
  bool flagged;
};

using PairBatch = std::vector<PairTuple>;

std::vector<PairBatch> make_pair_batches(const SampleCover& xs, const SampleCover& ws,
                                         std::size_t batch_size, std::size_t n_batches,
                                         double d_min, std::uint64_t seed);

/// CSV with a header row plus a "<path>.meta" sidecar holding the domain,
/// radius and count.
void write_cover(const std::filesystem::path& path, const SampleCover& cover);
SampleCover read_cover(const std::filesystem::path& path);

}  // namespace incstab
