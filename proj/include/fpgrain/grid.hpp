#pragma once

// Uniform periodic grids on the unit torus T^d (d = 1, 2) and the discrete
// calculus used by every other module.
//
// Cell k along an axis is centred at the node x = k*h, h = 1/n, so the
// nodes 0 and 1/2 (n even) are always sampled. Flat indices are row-major
// with axis 1 fastest: flat = i1 + n*i2.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fpgrain/errors.hpp"

namespace fpgrain {

using Point = std::array<double, 2>;

class TorusGrid {
 public:
  TorusGrid() = default;
  TorusGrid(int dim, int n_per_axis) : dim_(dim), n_(n_per_axis) {
    if (dim != 1 && dim != 2) throw PreconditionError("TorusGrid: dim must be 1 or 2");
    if (n_per_axis < 8) throw PreconditionError("TorusGrid: n_per_axis must be >= 8");
    h_ = 1.0 / static_cast<double>(n_per_axis);
  }

  int dim() const noexcept { return dim_; }
  int n() const noexcept { return n_; }
  double h() const noexcept { return h_; }
  std::size_t size() const noexcept {
    return dim_ == 1 ? static_cast<std::size_t>(n_) : static_cast<std::size_t>(n_) * n_;
  }
  /// h^dim, the quadrature weight of one cell.
  double cell_volume() const noexcept { return dim_ == 1 ? h_ : h_ * h_; }

  std::array<int, 2> multi_index(std::size_t flat) const noexcept {
    const auto n = static_cast<std::size_t>(n_);
    return {static_cast<int>(flat % n), dim_ == 2 ? static_cast<int>(flat / n) : 0};
  }
  std::size_t flat(int i1, int i2 = 0) const noexcept {
    return static_cast<std::size_t>(wrap(i1)) +
           static_cast<std::size_t>(n_) * static_cast<std::size_t>(dim_ == 2 ? wrap(i2) : 0);
  }
  /// Periodic neighbour of `flat` displaced by `offset` cells along `axis`.
  std::size_t shift(std::size_t flat_index, int axis, int offset) const noexcept {
    auto idx = multi_index(flat_index);
    idx[static_cast<std::size_t>(axis)] += offset;
    return flat(idx[0], idx[1]);
  }
  Point coords(std::size_t flat_index) const noexcept {
    const auto idx = multi_index(flat_index);
    return {idx[0] * h_, dim_ == 2 ? idx[1] * h_ : 0.0};
  }

  /// Wrapped distance on the torus: per axis min(|x-y|, 1-|x-y|).
  double distance(const Point& x, const Point& y) const noexcept {
    double s = 0.0;
    for (int a = 0; a < dim_; ++a) {
      double d = std::fabs(x[a] - y[a]);
      d -= std::floor(d);
      d = std::min(d, 1.0 - d);
      s += d * d;
    }
    return std::sqrt(s);
  }

  friend bool operator==(const TorusGrid& a, const TorusGrid& b) noexcept {
    return a.dim_ == b.dim_ && a.n_ == b.n_;
  }

 private:
  int wrap(int i) const noexcept {
    const int r = i % n_;
    return r < 0 ? r + n_ : r;
  }

  int dim_ = 1;
  int n_ = 8;
  double h_ = 0.125;
};

inline void require_same_grid(const TorusGrid& a, const TorusGrid& b, const char* where) {
  if (!(a == b)) throw PreconditionError(std::string(where) + ": grid mismatch");
}

/// Scalar samples on the cells of a TorusGrid.
class Field {
 public:
  Field() = default;
  Field(const TorusGrid& grid, double value) : grid_(grid), values_(grid.size(), value) {
    check();
  }
  Field(const TorusGrid& grid, std::vector<double> values)
      : grid_(grid), values_(std::move(values)) {
    check();
  }

  template <class Fn>
  static Field sample(const TorusGrid& grid, Fn&& fn) {
    std::vector<double> v(grid.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = fn(grid.coords(i));
    return Field(grid, std::move(v));
  }

  const TorusGrid& grid() const noexcept { return grid_; }
  std::size_t size() const noexcept { return values_.size(); }
  const std::vector<double>& values() const noexcept { return values_; }
  double operator[](std::size_t i) const noexcept { return values_[i]; }

  double min() const { return *std::min_element(values_.begin(), values_.end()); }
  double max() const { return *std::max_element(values_.begin(), values_.end()); }
  std::size_t argmin() const {
    return static_cast<std::size_t>(std::min_element(values_.begin(), values_.end()) -
                                    values_.begin());
  }
  std::size_t argmax() const {
    return static_cast<std::size_t>(std::max_element(values_.begin(), values_.end()) -
                                    values_.begin());
  }

  /// Pointwise transform; the result is validated like any new Field.
  template <class Fn>
  Field map(Fn&& fn) const {
    std::vector<double> v(values_.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = fn(values_[i]);
    return Field(grid_, std::move(v));
  }

  Field& operator+=(const Field& o) { return combine(o, [](double a, double b) { return a + b; }); }
  Field& operator-=(const Field& o) { return combine(o, [](double a, double b) { return a - b; }); }
  Field& operator*=(const Field& o) { return combine(o, [](double a, double b) { return a * b; }); }
  Field& operator*=(double s) {
    for (double& v : values_) v *= s;
    return *this;
  }

  friend Field operator+(Field a, const Field& b) { return a += b; }
  friend Field operator-(Field a, const Field& b) { return a -= b; }
  friend Field operator*(Field a, const Field& b) { return a *= b; }
  friend Field operator*(Field a, double s) { return a *= s; }
  friend Field operator*(double s, Field a) { return a *= s; }

  friend bool operator==(const Field& a, const Field& b) noexcept {
    return a.grid_ == b.grid_ && a.values_ == b.values_;
  }

 private:
  template <class Op>
  Field& combine(const Field& o, Op op) {
    require_same_grid(grid_, o.grid_, "Field arithmetic");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] = op(values_[i], o.values_[i]);
    return *this;
  }

  void check() const {
    if (values_.size() != grid_.size()) throw PreconditionError("Field: length does not match grid");
    for (std::size_t i = 0; i < values_.size(); ++i)
      if (!std::isfinite(values_[i]))
        throw NumericalError("Field: non-finite value at cell " + std::to_string(i));
  }

  TorusGrid grid_;
  std::vector<double> values_;
};

enum class Placement {
  cell,  ///< component a of cell i lives at the node of cell i
  face,  ///< component a of cell i lives at the face between i and i+e_a
};

class VectorField {
 public:
  VectorField() = default;
  VectorField(const TorusGrid& grid, Placement placement)
      : grid_(grid), placement_(placement) {
    for (int a = 0; a < grid.dim(); ++a) comps_[static_cast<std::size_t>(a)].assign(grid.size(), 0.0);
  }
  VectorField(const TorusGrid& grid, Placement placement, std::array<std::vector<double>, 2> comps)
      : grid_(grid), placement_(placement), comps_(std::move(comps)) {
    for (int a = 0; a < grid.dim(); ++a) {
      const auto& c = comps_[static_cast<std::size_t>(a)];
      if (c.size() != grid.size()) throw PreconditionError("VectorField: length does not match grid");
      for (double v : c)
        if (!std::isfinite(v)) throw NumericalError("VectorField: non-finite component");
    }
  }

  const TorusGrid& grid() const noexcept { return grid_; }
  Placement placement() const noexcept { return placement_; }
  int dim() const noexcept { return grid_.dim(); }
  const std::vector<double>& component(int axis) const noexcept {
    return comps_[static_cast<std::size_t>(axis)];
  }
  std::vector<double>& component(int axis) noexcept { return comps_[static_cast<std::size_t>(axis)]; }

  /// Euclidean norm of the vector at flat index i.
  double norm_at(std::size_t i) const noexcept {
    double s = 0.0;
    for (int a = 0; a < dim(); ++a) s += component(a)[i] * component(a)[i];
    return std::sqrt(s);
  }
  double sup_norm() const noexcept {
    double m = 0.0;
    for (std::size_t i = 0; i < grid_.size(); ++i) m = std::max(m, norm_at(i));
    return m;
  }

  /// Every component multiplied pointwise by a cell Field.
  VectorField scaled(const Field& s) const {
    require_same_grid(grid_, s.grid(), "VectorField::scaled");
    VectorField out = *this;
    for (int a = 0; a < dim(); ++a)
      for (std::size_t i = 0; i < grid_.size(); ++i) out.component(a)[i] *= s[i];
    return out;
  }

 private:
  TorusGrid grid_;
  Placement placement_ = Placement::cell;
  std::array<std::vector<double>, 2> comps_;
};

/// Frames of a grid function at strictly increasing times starting at 0
/// (or at the start of a time window).
class Trajectory {
 public:
  Trajectory() = default;
  explicit Trajectory(const TorusGrid& grid) : grid_(grid) {}

  void push_back(double t, Field frame) {
    require_same_grid(grid_, frame.grid(), "Trajectory::push_back");
    if (!times_.empty() && !(t > times_.back()))
      throw PreconditionError("Trajectory: times must be strictly increasing");
    times_.push_back(t);
    frames_.push_back(std::move(frame));
  }

  const TorusGrid& grid() const noexcept { return grid_; }
  std::size_t size() const noexcept { return frames_.size(); }
  bool empty() const noexcept { return frames_.empty(); }
  const std::vector<double>& times() const noexcept { return times_; }
  const std::vector<Field>& frames() const noexcept { return frames_; }
  const Field& frame(std::size_t k) const { return frames_.at(k); }
  double time(std::size_t k) const { return times_.at(k); }
  const Field& back() const { return frames_.back(); }

  double min() const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& f : frames_) m = std::min(m, f.min());
    return m;
  }
  double max() const {
    double m = -std::numeric_limits<double>::infinity();
    for (const auto& f : frames_) m = std::max(m, f.max());
    return m;
  }

 private:
  TorusGrid grid_;
  std::vector<double> times_;
  std::vector<Field> frames_;
};

// ---------------------------------------------------------------------------
// Discrete calculus

/// Second-order central difference per axis, cell placement.
inline VectorField gradient(const Field& f) {
  const auto& g = f.grid();
  VectorField out(g, Placement::cell);
  const double inv2h = 0.5 / g.h();
  for (int a = 0; a < g.dim(); ++a) {
    auto& c = out.component(a);
    for (std::size_t i = 0; i < g.size(); ++i)
      c[i] = (f[g.shift(i, a, 1)] - f[g.shift(i, a, -1)]) * inv2h;
  }
  return out;
}

/// Forward difference onto the faces i+1/2 (face placement).
inline VectorField face_gradient(const Field& f) {
  const auto& g = f.grid();
  VectorField out(g, Placement::face);
  const double invh = 1.0 / g.h();
  for (int a = 0; a < g.dim(); ++a) {
    auto& c = out.component(a);
    for (std::size_t i = 0; i < g.size(); ++i) c[i] = (f[g.shift(i, a, 1)] - f[i]) * invh;
  }
  return out;
}

/// Negative adjoint of the matching gradient: central difference for cell
/// placement, backward face difference for face placement. Either way the
/// sum over cells telescopes to zero.
inline Field divergence(const VectorField& v) {
  const auto& g = v.grid();
  std::vector<double> out(g.size(), 0.0);
  if (v.placement() == Placement::cell) {
    const double inv2h = 0.5 / g.h();
    for (int a = 0; a < g.dim(); ++a) {
      const auto& c = v.component(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        out[i] += (c[g.shift(i, a, 1)] - c[g.shift(i, a, -1)]) * inv2h;
    }
  } else {
    const double invh = 1.0 / g.h();
    for (int a = 0; a < g.dim(); ++a) {
      const auto& c = v.component(a);
      for (std::size_t i = 0; i < g.size(); ++i) out[i] += (c[i] - c[g.shift(i, a, -1)]) * invh;
    }
  }
  return Field(g, std::move(out));
}

/// Midpoint rule h^dim * sum(values).
inline double integrate(const Field& f) {
  double s = 0.0;
  for (double v : f.values()) s += v;
  return s * f.grid().cell_volume();
}

inline double sup_norm(const Field& f) {
  double m = 0.0;
  for (double v : f.values()) m = std::max(m, std::fabs(v));
  return m;
}

inline double sup_norm(const Trajectory& tr) {
  double m = 0.0;
  for (const auto& f : tr.frames()) m = std::max(m, sup_norm(f));
  return m;
}

/// sup over frames of |a - b|; both trajectories must share grid and times.
inline double sup_distance(const Trajectory& a, const Trajectory& b) {
  if (a.size() != b.size()) throw PreconditionError("sup_distance: frame counts differ");
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, sup_norm(a.frame(k) - b.frame(k)));
  return m;
}

/// Pointwise dot product of two vector fields with equal placement.
inline Field dot(const VectorField& a, const VectorField& b) {
  require_same_grid(a.grid(), b.grid(), "dot");
  std::vector<double> out(a.grid().size(), 0.0);
  for (int ax = 0; ax < a.dim(); ++ax)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += a.component(ax)[i] * b.component(ax)[i];
  return Field(a.grid(), std::move(out));
}

// ---------------------------------------------------------------------------
// Field snapshot CSV: header "x1[,x2],value", one row per cell in flat order.

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline void write_field_csv(std::ostream& os, const Field& f, const std::string& comment = {}) {
  if (!comment.empty()) os << "# " << comment << '\n';
  const auto& g = f.grid();
  os << (g.dim() == 1 ? "x1,value\n" : "x1,x2,value\n");
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto x = g.coords(i);
    os << format_double(x[0]) << ',';
    if (g.dim() == 2) os << format_double(x[1]) << ',';
    os << format_double(f[i]) << '\n';
  }
}

inline void write_field_csv(const std::string& path, const Field& f, const std::string& comment = {}) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path + " for writing");
  write_field_csv(os, f, comment);
}

/// Reads a snapshot written by write_field_csv (or a hand-made table in the
/// same layout) onto `grid`. Lines starting with '#' are ignored.
inline Field read_field_csv(std::istream& is, const TorusGrid& grid) {
  std::string line;
  bool header_seen = false;
  std::vector<double> values;
  values.reserve(grid.size());
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      const std::string expected = grid.dim() == 1 ? "x1,value" : "x1,x2,value";
      if (line.rfind(expected, 0) != 0)
        throw Error("field CSV: expected header '" + expected + "', got '" + line + "'");
      header_seen = true;
      continue;
    }
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> cols;
    while (std::getline(ss, cell, ',')) {
      try {
        cols.push_back(std::stod(cell));
      } catch (const std::logic_error&) {
        throw Error("field CSV: not a number: '" + cell + "'");
      }
    }
    if (cols.size() != static_cast<std::size_t>(grid.dim()) + 1)
      throw Error("field CSV: wrong column count in '" + line + "'");
    const std::size_t i = values.size();
    if (i >= grid.size()) throw Error("field CSV: more rows than grid cells");
    const auto x = grid.coords(i);
    for (int a = 0; a < grid.dim(); ++a)
      if (std::fabs(cols[static_cast<std::size_t>(a)] - x[a]) > 1e-9)
        throw Error("field CSV: row " + std::to_string(i) + " is not at the expected node");
    values.push_back(cols.back());
  }
  if (values.size() != grid.size())
    throw Error("field CSV: expected " + std::to_string(grid.size()) + " rows, got " +
                std::to_string(values.size()));
  return Field(grid, std::move(values));
}

inline Field read_field_csv(const std::string& path, const TorusGrid& grid) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path);
  return read_field_csv(is, grid);
}

}  // namespace fpgrain
