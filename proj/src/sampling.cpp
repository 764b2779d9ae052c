#include "incstab/sampling.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <utility>

#include <boost/geometry.hpp>
#include <boost/geometry/index/rtree.hpp>

#include "incstab/errors.hpp"
#include "incstab/net_io.hpp"

namespace incstab {

BoxDomain::BoxDomain(Vector lo_, Vector hi_) : lo(std::move(lo_)), hi(std::move(hi_)) {
  if (lo.size() == 0 || lo.size() != hi.size()) {
    throw ContractViolation("box bounds must be nonempty and of equal length");
  }
  if (!(lo.array() < hi.array()).all()) {
    throw ContractViolation("box needs lo < hi componentwise");
  }
}

bool BoxDomain::contains(const Vector& x, double tol) const {
  if (x.size() != lo.size()) {
    return false;
  }
  return ((x.array() >= lo.array() - tol) && (x.array() <= hi.array() + tol)).all();
}

namespace {

std::vector<std::size_t> axis_counts(const BoxDomain& domain, double eps) {
  if (!(eps > 0.0) || !std::isfinite(eps)) {
    throw ContractViolation("cover radius must be positive and finite");
  }
  const double h = 2.0 * eps / std::sqrt(static_cast<double>(domain.dim()));
  std::vector<std::size_t> counts;
  for (std::size_t i = 0; i < domain.dim(); ++i) {
    const double cells = std::ceil(domain.span()[static_cast<Eigen::Index>(i)] / h);
    if (cells > 1e15) {
      throw BudgetExceededError(std::numeric_limits<std::size_t>::max(), 0);
    }
    counts.push_back(static_cast<std::size_t>(cells) + 1);
  }
  return counts;
}

std::size_t checked_product(const std::vector<std::size_t>& counts) {
  std::size_t total = 1;
  for (auto c : counts) {
    if (total > std::numeric_limits<std::size_t>::max() / c) {
      return std::numeric_limits<std::size_t>::max();
    }
    total *= c;
  }
  return total;
}

namespace bg = boost::geometry;
namespace bgi = boost::geometry::index;

template <std::size_t D>
std::vector<std::size_t> nearest_rtree(const std::vector<Vector>& points,
                                       const std::vector<Vector>& probes) {
  using Point = bg::model::point<double, D, bg::cs::cartesian>;
  using Entry = std::pair<Point, std::size_t>;
  auto to_point = [](const Vector& v) {
    Point p;
    [&]<std::size_t... K>(std::index_sequence<K...>) {
      (bg::set<K>(p, v[static_cast<Eigen::Index>(K)]), ...);
    }(std::make_index_sequence<D>{});
    return p;
  };
  std::vector<Entry> entries;
  entries.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    entries.emplace_back(to_point(points[i]), i);
  }
  bgi::rtree<Entry, bgi::rstar<16>> tree(entries.begin(), entries.end());
  std::vector<std::size_t> nearest;
  nearest.reserve(probes.size());
  std::vector<Entry> hit;
  for (const auto& q : probes) {
    hit.clear();
    tree.query(bgi::nearest(to_point(q), 1), std::back_inserter(hit));
    nearest.push_back(hit.front().second);
  }
  return nearest;
}

std::vector<std::size_t> nearest_brute(const std::vector<Vector>& points,
                                       const std::vector<Vector>& probes) {
  std::vector<std::size_t> nearest;
  for (const auto& q : probes) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      const double d = (points[i] - q).squaredNorm();
      if (d < best) {
        best = d;
        arg = i;
      }
    }
    nearest.push_back(arg);
  }
  return nearest;
}

std::vector<std::size_t> nearest_points(const std::vector<Vector>& points,
                                        const std::vector<Vector>& probes, std::size_t dim) {
  switch (dim) {
    case 1:
      return nearest_rtree<1>(points, probes);
    case 2:
      return nearest_rtree<2>(points, probes);
    case 3:
      return nearest_rtree<3>(points, probes);
    case 4:
      return nearest_rtree<4>(points, probes);
    default:
      return nearest_brute(points, probes);
  }
}

std::string vector_csv(const Vector& v) {
  std::string s;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i > 0) {
      s += ',';
    }
    s += format_double(v[i]);
  }
  return s;
}

Vector parse_csv_vector(const std::string& line, std::size_t expected, const std::string& where) {
  Vector v(static_cast<Eigen::Index>(expected));
  std::stringstream ss(line);
  std::string cell;
  std::size_t i = 0;
  while (std::getline(ss, cell, ',')) {
    if (i >= expected) {
      throw ConfigError(where + ": too many columns");
    }
    v[static_cast<Eigen::Index>(i++)] = parse_double(cell);
  }
  if (i != expected) {
    throw ConfigError(where + ": expected " + std::to_string(expected) + " columns");
  }
  return v;
}

}  // namespace

std::size_t cover_point_count(const BoxDomain& domain, double eps) {
  return checked_product(axis_counts(domain, eps));
}

SampleCover build_cover(const BoxDomain& domain, double eps, std::size_t budget) {
  const auto counts = axis_counts(domain, eps);
  const std::size_t total = checked_product(counts);
  if (total > budget) {
    throw BudgetExceededError(total, budget);
  }
  const std::size_t dim = domain.dim();
  std::vector<Vector> axes;
  for (std::size_t i = 0; i < dim; ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    axes.push_back(Vector::LinSpaced(static_cast<Eigen::Index>(counts[i]), domain.lo[k],
                                     domain.hi[k]));
    // LinSpaced can land one ulp off the end; pin the endpoints.
    axes.back()[0] = domain.lo[k];
    axes.back()[axes.back().size() - 1] = domain.hi[k];
  }

  SampleCover cover;
  cover.radius = eps;
  cover.domain = domain;
  cover.points.reserve(total);
  std::vector<std::size_t> idx(dim, 0);
  for (std::size_t n = 0; n < total; ++n) {
    Vector p(static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < dim; ++i) {
      p[static_cast<Eigen::Index>(i)] = axes[i][static_cast<Eigen::Index>(idx[i])];
    }
    cover.points.push_back(std::move(p));
    // Last axis varies fastest.
    for (std::size_t i = dim; i-- > 0;) {
      if (++idx[i] < counts[i]) {
        break;
      }
      idx[i] = 0;
    }
  }
  return cover;
}

CoverVerdict verify_cover(const SampleCover& cover, std::size_t n_probe, std::uint64_t seed) {
  CoverVerdict verdict;
  verdict.probes = n_probe;
  if (n_probe == 0) {
    return verdict;
  }
  const std::size_t dim = cover.domain.dim();
  if (cover.points.empty()) {
    verdict.passed = false;
    verdict.worst_distance = std::numeric_limits<double>::infinity();
    return verdict;
  }
  std::mt19937_64 rng(seed);
  std::vector<Vector> probes;
  probes.reserve(n_probe);
  for (std::size_t p = 0; p < n_probe; ++p) {
    Vector q(static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < dim; ++i) {
      const auto k = static_cast<Eigen::Index>(i);
      std::uniform_real_distribution<double> dist(cover.domain.lo[k], cover.domain.hi[k]);
      q[k] = dist(rng);
    }
    probes.push_back(std::move(q));
  }
  const auto nearest = nearest_points(cover.points, probes, dim);
  for (std::size_t p = 0; p < n_probe; ++p) {
    const double d = (cover.points[nearest[p]] - probes[p]).norm();
    if (d > verdict.worst_distance || verdict.worst_probe.size() == 0) {
      verdict.worst_distance = d;
      verdict.worst_probe = probes[p];
    }
  }
  verdict.passed = verdict.worst_distance <= cover.radius;
  return verdict;
}

std::vector<PairBatch> make_pair_batches(const SampleCover& xs, const SampleCover& ws,
                                         std::size_t batch_size, std::size_t n_batches,
                                         double d_min, std::uint64_t seed) {
  if (!(d_min >= 0.0)) {
    throw ContractViolation("d_min must be nonnegative");
  }
  if (xs.points.empty() || ws.points.empty()) {
    throw ContractViolation("pair batches need nonempty covers");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_x(0, xs.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_w(0, ws.size() - 1);
  std::vector<PairBatch> batches(n_batches);
  for (auto& batch : batches) {
    batch.reserve(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) {
      PairTuple t{};
      t.xq = pick_x(rng);
      t.xr = pick_x(rng);
      t.wq = pick_w(rng);
      t.wr = pick_w(rng);
      t.flagged = (xs.points[t.xq] - xs.points[t.xr]).norm() < d_min;
      batch.push_back(t);
    }
  }
  return batches;
}

void write_cover(const std::filesystem::path& path, const SampleCover& cover) {
  std::ofstream os(path);
  if (!os) {
    throw ConfigError("cannot write " + path.string());
  }
  const std::size_t dim = cover.domain.dim();
  for (std::size_t i = 0; i < dim; ++i) {
    os << (i > 0 ? "," : "") << "c" << (i + 1);
  }
  os << '\n';
  for (const auto& p : cover.points) {
    os << vector_csv(p) << '\n';
  }

  std::ofstream meta(path.string() + ".meta");
  if (!meta) {
    throw ConfigError("cannot write " + path.string() + ".meta");
  }
  meta << "dim = " << dim << '\n';
  meta << "lo = " << vector_csv(cover.domain.lo) << '\n';
  meta << "hi = " << vector_csv(cover.domain.hi) << '\n';
  meta << "eps = " << format_double(cover.radius) << '\n';
  meta << "count = " << cover.size() << '\n';
}

SampleCover read_cover(const std::filesystem::path& path) {
  const std::string meta_path = path.string() + ".meta";
  std::ifstream meta(meta_path);
  if (!meta) {
    throw ConfigError("cannot open cover metadata " + meta_path);
  }
  std::size_t dim = 0;
  std::size_t count = 0;
  std::string lo_text;
  std::string hi_text;
  double eps = 0.0;
  std::string line;
  while (std::getline(meta, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      continue;
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "dim") {
      dim = static_cast<std::size_t>(std::stoull(val));
    } else if (key == "lo") {
      lo_text = val;
    } else if (key == "hi") {
      hi_text = val;
    } else if (key == "eps") {
      eps = parse_double(val);
    } else if (key == "count") {
      count = static_cast<std::size_t>(std::stoull(val));
    }
  }
  if (dim == 0 || lo_text.empty() || hi_text.empty()) {
    throw ConfigError(meta_path + ": incomplete cover metadata");
  }
  SampleCover cover;
  cover.domain = BoxDomain(parse_csv_vector(lo_text, dim, meta_path),
                           parse_csv_vector(hi_text, dim, meta_path));
  cover.radius = eps;

  std::ifstream is(path);
  if (!is) {
    throw ConfigError("cannot open cover file " + path.string());
  }
  std::getline(is, line);  // header
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) {
      continue;
    }
    cover.points.push_back(
        parse_csv_vector(line, dim, path.string() + ":" + std::to_string(lineno)));
  }
  if (cover.points.size() != count) {
    throw ConfigError(path.string() + ": metadata count " + std::to_string(count) +
                      " does not match " + std::to_string(cover.points.size()) + " rows");
  }
  return cover;
}

}  // namespace incstab
