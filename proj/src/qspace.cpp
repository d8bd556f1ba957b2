#include "qup/qspace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

namespace qup::qspace {

void GradientScheme::validate() const {
  if (directions.size() != bvalues.size()) {
    throw ValidationError("gradient scheme: " + std::to_string(directions.size()) +
                          " directions but " + std::to_string(bvalues.size()) + " b-values");
  }
  for (std::size_t i = 0; i < directions.size(); ++i) {
    if (!is_unit(directions[i])) {
      throw ValidationError("gradient scheme: direction " + std::to_string(i) + " " +
                            format_vec(directions[i]) + " is not unit norm");
    }
    if (!(bvalues[i] >= 0.0)) {
      throw ValidationError("gradient scheme: b-value " + std::to_string(i) + " is negative");
    }
  }
}

GradientScheme GradientScheme::subset(const std::vector<std::size_t>& indices) const {
  GradientScheme out;
  out.directions.reserve(indices.size());
  out.bvalues.reserve(indices.size());
  for (auto i : indices) {
    if (i >= size()) throw ValidationError("gradient scheme: subset index out of range");
    out.directions.push_back(directions[i]);
    out.bvalues.push_back(bvalues[i]);
  }
  return out;
}

double geodesic_distance(const Vec3& a, const Vec3& b) {
  if (!is_unit(a)) throw ValidationError("geodesic_distance: non-unit vector " + format_vec(a));
  if (!is_unit(b)) throw ValidationError("geodesic_distance: non-unit vector " + format_vec(b));
  return std::acos(std::clamp(a.dot(b), -1.0, 1.0));
}

double antipodal_distance(const Vec3& a, const Vec3& b) {
  const double d = geodesic_distance(a, b);
  return std::min(d, std::numbers::pi - d);
}

std::vector<std::size_t> select_references(const GradientScheme& low, const Vec3& target,
                                           std::size_t count, bool antipodal) {
  if (count == 0) throw ValidationError("select_references: R must be positive");
  if (count > low.size()) {
    throw ValidationError("select_references: R = " + std::to_string(count) + " exceeds the " +
                          std::to_string(low.size()) + " available directions");
  }
  std::vector<double> dist(low.size());
  for (std::size_t i = 0; i < low.size(); ++i) {
    dist[i] = antipodal ? antipodal_distance(low.directions[i], target)
                        : geodesic_distance(low.directions[i], target);
  }
  std::vector<std::size_t> order(low.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
  order.resize(count);
  return order;
}

Subsample subsample_even(const GradientScheme& scheme, std::size_t k, std::uint64_t seed) {
  scheme.validate();
  const std::size_t n = scheme.size();
  if (k == 0) throw ValidationError("subsample_even: k must be positive");
  if (k > n) {
    throw ValidationError("subsample_even: k = " + std::to_string(k) + " exceeds scheme size " +
                          std::to_string(n));
  }
  Subsample out;
  std::vector<bool> taken(n, false);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());

  std::mt19937_64 rng(seed);
  std::size_t next = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  for (std::size_t step = 0; step < k; ++step) {
    taken[next] = true;
    out.selected.push_back(next);
    double best = -1.0;
    std::size_t best_index = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      nearest[i] = std::min(nearest[i],
                            antipodal_distance(scheme.directions[i], scheme.directions[next]));
      if (nearest[i] > best) {
        best = nearest[i];
        best_index = i;
      }
    }
    next = best_index;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!taken[i]) out.complement.push_back(i);
  }
  out.subset = scheme.subset(out.selected);
  return out;
}

double min_antipodal_separation(const GradientScheme& scheme,
                                const std::vector<std::size_t>& indices) {
  double best = std::numbers::pi / 2;
  for (std::size_t a = 0; a < indices.size(); ++a) {
    for (std::size_t b = a + 1; b < indices.size(); ++b) {
      best = std::min(best, antipodal_distance(scheme.directions[indices[a]],
                                               scheme.directions[indices[b]]));
    }
  }
  return best;
}

GradientScheme uniform_shell(std::size_t n, double bvalue, int iterations) {
  if (n == 0) throw ValidationError("uniform_shell: need at least one direction");
  std::vector<Vec3> pts(n);
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (std::size_t i = 0; i < n; ++i) {
    const double z = 1.0 - (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * static_cast<double>(i);
    pts[i] = Vec3(r * std::cos(phi), r * std::sin(phi), z);
  }
  // Each point repels both charges of every other antipodal pair.
  double step = 0.05;
  for (int it = 0; it < iterations; ++it) {
    std::vector<Vec3> force(n, Vec3::Zero());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        for (double sign : {1.0, -1.0}) {
          const Vec3 d = pts[i] - sign * pts[j];
          const double r2 = d.squaredNorm();
          force[i] += d / (r2 * std::sqrt(r2));
        }
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 tangential = force[i] - force[i].dot(pts[i]) * pts[i];
      pts[i] = (pts[i] + step * tangential / static_cast<double>(n)).normalized();
    }
    step *= 0.995;
  }
  GradientScheme out;
  for (auto& p : pts) {
    if (p.z() < 0.0) p = -p;
    out.directions.push_back(p.normalized());
    out.bvalues.push_back(bvalue);
  }
  return out;
}

namespace {

std::vector<double> parse_line(const std::string& line) {
  std::istringstream is(line);
  std::vector<double> values;
  double v = 0.0;
  while (is >> v) values.push_back(v);
  if (!is.eof()) throw FormatError("unparseable number in line: " + line);
  return values;
}

std::vector<std::string> nonempty_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") != std::string::npos) lines.push_back(line);
  }
  return lines;
}

void write_row(std::ofstream& out, const std::vector<double>& values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out << ' ';
    out << values[i];
  }
  out << '\n';
}

}  // namespace

void write_bvals(const std::filesystem::path& path, const std::vector<double>& bvalues) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << std::setprecision(17);
  write_row(out, bvalues);
}

void write_bvecs(const std::filesystem::path& path, const std::vector<Vec3>& directions) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << std::setprecision(17);
  for (int axis = 0; axis < 3; ++axis) {
    std::vector<double> row;
    row.reserve(directions.size());
    for (const auto& d : directions) row.push_back(d[axis]);
    write_row(out, row);
  }
}

std::vector<double> read_bvals(const std::filesystem::path& path) {
  const auto lines = nonempty_lines(path);
  if (lines.size() != 1) throw FormatError(path.string() + ": bvals must be a single line");
  return parse_line(lines[0]);
}

std::vector<Vec3> read_bvecs(const std::filesystem::path& path) {
  const auto lines = nonempty_lines(path);
  if (lines.size() != 3) throw FormatError(path.string() + ": bvecs must have three lines");
  const auto x = parse_line(lines[0]);
  const auto y = parse_line(lines[1]);
  const auto z = parse_line(lines[2]);
  if (x.size() != y.size() || y.size() != z.size()) {
    throw FormatError(path.string() + ": bvecs rows have different lengths");
  }
  std::vector<Vec3> out;
  out.reserve(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out.emplace_back(x[i], y[i], z[i]);
  return out;
}

void write_scheme(const std::filesystem::path& bvals, const std::filesystem::path& bvecs,
                  const GradientScheme& scheme) {
  scheme.validate();
  write_bvals(bvals, scheme.bvalues);
  write_bvecs(bvecs, scheme.directions);
}

GradientScheme read_scheme(const std::filesystem::path& bvals,
                           const std::filesystem::path& bvecs) {
  GradientScheme s;
  s.bvalues = read_bvals(bvals);
  s.directions = read_bvecs(bvecs);
  s.validate();
  return s;
}

}  // namespace qup::qspace
