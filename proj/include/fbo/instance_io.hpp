#pragma once

// Plain-text instance fixtures:
//
//   fbo-instance 1
//   dims <n> <d_x> <d_y>
//   weights <p_1> ... <p_n>
//   client <i>
//   A <d_y*d_y values, row-major>
//   B <d_x*d_y values, row-major>
//   c <d_y values>
//   D <d_y*d_y values>
//   y_ref <d_y values>
//   E <d_x*d_x values>
//   x_ref <d_x values>
//   ... one client block per client, in order ...
//
// Numbers are written with 17 significant digits. Blank lines and lines
// starting with '#' are ignored.

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fbo/problem.hpp"

namespace fbo {

namespace detail {

inline void write_values(std::ostream& os, const char* tag, const Mat& m) {
  os << tag;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) os << ' ' << format_double(m(r, c));
  os << '\n';
}

inline std::vector<double> read_values(std::istringstream& ls, const std::string& where) {
  std::vector<double> out;
  std::string tok;
  while (ls >> tok) out.push_back(parse_double(tok, where));
  return out;
}

inline Mat to_matrix(const std::vector<double>& vals, std::size_t rows, std::size_t cols, const std::string& where) {
  if (vals.size() != rows * cols) {
    throw ValidationError(where + ": expected " + std::to_string(rows * cols) + " values, got " + std::to_string(vals.size()));
  }
  Mat m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = vals[r * cols + c];
  return m;
}

}  // namespace detail

inline void write_instance(std::ostream& os, const BilevelInstance& inst) {
  os << "fbo-instance 1\n";
  os << "dims " << inst.n() << ' ' << inst.d_x << ' ' << inst.d_y << '\n';
  detail::write_values(os, "weights", inst.p.transpose());
  for (std::size_t i = 0; i < inst.n(); ++i) {
    const auto& c = inst.clients[i];
    os << "client " << i << '\n';
    detail::write_values(os, "A", c.A);
    detail::write_values(os, "B", c.B);
    detail::write_values(os, "c", c.c.transpose());
    detail::write_values(os, "D", c.D);
    detail::write_values(os, "y_ref", c.y_ref.transpose());
    detail::write_values(os, "E", c.E);
    detail::write_values(os, "x_ref", c.x_ref.transpose());
  }
}

/// Parses and validates a fixture. Non-finite entries in B, c and the
/// reference points are accepted here; they surface in check-gradients.
inline BilevelInstance read_instance(std::istream& is) {
  BilevelInstance inst;
  std::string line;
  bool header = false, dims = false;
  std::size_t n = 0;
  long current = -1;
  std::vector<std::map<std::string, std::vector<double>>> fields;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key) || key[0] == '#') continue;
    const std::string where = "instance line " + std::to_string(lineno) + " (" + key + ")";
    if (!header) {
      std::string version;
      ls >> version;
      if (key != "fbo-instance" || version != "1") throw ValidationError("instance: missing 'fbo-instance 1' header");
      header = true;
    } else if (key == "dims") {
      if (!(ls >> n >> inst.d_x >> inst.d_y)) throw ValidationError(where + ": expected three counts");
      if (n < 1 || inst.d_x < 1 || inst.d_y < 1) throw ValidationError(where + ": dimensions must be >= 1");
      fields.resize(n);
      dims = true;
    } else if (!dims) {
      throw ValidationError(where + ": 'dims' must come first");
    } else if (key == "weights") {
      auto vals = detail::read_values(ls, where);
      inst.p = detail::to_matrix(vals, n, 1, where);
    } else if (key == "client") {
      long idx = -1;
      if (!(ls >> idx) || idx != current + 1 || static_cast<std::size_t>(idx) >= n) {
        throw ValidationError(where + ": client blocks must be numbered 0..n-1 in order");
      }
      current = idx;
    } else if (key == "A" || key == "B" || key == "c" || key == "D" || key == "y_ref" || key == "E" || key == "x_ref") {
      if (current < 0) throw ValidationError(where + ": field outside a client block");
      fields[static_cast<std::size_t>(current)][key] = detail::read_values(ls, where);
    } else {
      throw ValidationError(where + ": unknown key");
    }
  }
  if (!dims) throw ValidationError("instance: missing 'dims'");
  if (static_cast<std::size_t>(current + 1) != n) throw ValidationError("instance: expected " + std::to_string(n) + " client blocks");
  const std::size_t dx = inst.d_x, dy = inst.d_y;
  for (std::size_t i = 0; i < n; ++i) {
    auto& f = fields[i];
    const std::string where = "instance client " + std::to_string(i);
    for (const char* k : {"A", "B", "c", "D", "y_ref", "E", "x_ref"}) {
      if (!f.count(k)) throw ValidationError(where + ": missing field " + k);
    }
    ClientData c;
    c.A = detail::to_matrix(f["A"], dy, dy, where + " A");
    c.B = detail::to_matrix(f["B"], dx, dy, where + " B");
    c.c = detail::to_matrix(f["c"], dy, 1, where + " c");
    c.D = detail::to_matrix(f["D"], dy, dy, where + " D");
    c.y_ref = detail::to_matrix(f["y_ref"], dy, 1, where + " y_ref");
    c.E = detail::to_matrix(f["E"], dx, dx, where + " E");
    c.x_ref = detail::to_matrix(f["x_ref"], dx, 1, where + " x_ref");
    inst.clients.push_back(std::move(c));
  }
  validate_instance(inst);
  return inst;
}

inline void save_instance(const std::filesystem::path& path, const BilevelInstance& inst) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write instance file " + path.string());
  write_instance(os, inst);
}

inline BilevelInstance load_instance(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("instance_file: cannot open " + path.string());
  return read_instance(is);
}

}  // namespace fbo
