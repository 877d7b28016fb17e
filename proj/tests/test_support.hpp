#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "lesionseg/volume.hpp"

namespace testsup {

// Scratch directory removed on scope exit.
struct TempDir {
  std::filesystem::path path;

  TempDir() {
    auto base = std::filesystem::temp_directory_path();
    for (int i = 0; i < 10000; ++i) {
      auto candidate = base / ("lesionseg_test_" + std::to_string(::getpid()) + "_" +
                               std::to_string(counter()++));
      std::error_code ec;
      if (std::filesystem::create_directory(candidate, ec)) {
        path = candidate;
        return;
      }
    }
    throw std::runtime_error("cannot create temp directory");
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::filesystem::path operator/(const std::string& name) const { return path / name; }

 private:
  static int& counter() {
    static int c = 0;
    return c;
  }
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline bool files_equal(const std::filesystem::path& a, const std::filesystem::path& b) {
  return read_file(a) == read_file(b);
}

struct CliResult {
  int exit_code = -1;
  std::string output;
};

#ifdef LESIONSEG_CLI_PATH
inline CliResult run_cli(const std::string& args) {
  TempDir scratch;
  const auto log = scratch / "out.log";
  const std::string cmd =
      std::string(LESIONSEG_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  CliResult r;
  r.output = read_file(log);
  if (rc == -1)
    r.exit_code = -1;
  else
    r.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -2;
  return r;
}
#endif

// Central finite difference of a scalar function of one coordinate.
inline double central_diff(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

// Golden-section maximization on [lo, hi] for a unimodal objective.
inline double golden_max(const std::function<double(double)>& f, double lo, double hi,
                         double tol = 1e-10, int max_iter = 400) {
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - phi * (b - a);
  double d = a + phi * (b - a);
  double fc = f(c), fd = f(d);
  for (int it = 0; it < max_iter && (b - a) > tol * (1.0 + std::abs(a) + std::abs(b));
       ++it) {
    if (fc > fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - phi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + phi * (b - a);
      fd = f(d);
    }
  }
  return 0.5 * (a + b);
}

inline double logsumexp(const std::vector<double>& v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

// Brute-force multivariate Gaussian log-density via explicit inverse/determinant.
inline double gaussian_log_pdf(const Eigen::VectorXd& x, const Eigen::VectorXd& mu,
                               const Eigen::MatrixXd& sigma) {
  const auto n = static_cast<double>(x.size());
  const Eigen::VectorXd r = x - mu;
  const double quad = r.dot(sigma.inverse() * r);
  return -0.5 * (n * std::log(2.0 * std::acos(-1.0)) + std::log(sigma.determinant()) +
                 quad);
}

inline lesionseg::VolumeGrid simple_grid(std::array<std::uint32_t, 3> dims,
                                         double voxel = 1.0) {
  return lesionseg::VolumeGrid::isotropic(dims, voxel);
}

}  // namespace testsup
