#pragma once

// Brute-force reference computations backing the derived expected values in
// the test suites. These share no numeric kernels with the implementation:
// everything here is plain nested loops in double precision.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace oracle {

// Direct cross-correlation, NCHW by OIHW, zero padding.
std::vector<double> conv2d_ref(const std::vector<double>& x, long B, long C, long H, long W,
                               const std::vector<double>& w, long Cout, long kh, long kw,
                               long stride, long pad);

// Dense 2-D Gaussian convolution with edge replication; the kernel is the
// outer product of the normalized 1-d taps with radius ceil(3*sigma).
std::vector<double> gaussian_blur_ref(const std::vector<double>& img, long H, long W,
                                      double sigma);

// Central finite differences of f at x along the given coordinates.
std::vector<double> finite_diff(const std::function<double(const std::vector<double>&)>& f,
                                std::vector<double> x, const std::vector<long>& coords, double h);

// Euclidean projection onto the L1 ball by exhaustive active-set search over
// support patterns (n <= 20).
std::vector<double> l1_project_ref(const std::vector<double>& v, double radius);

// Worst case of L-inf PGD against a linear binary score s(x) = w.x + b with
// labels in {0,1}: the attack that minimizes the true-class margin lands at
// x - eps*sign(w)*(label ? +1 : -1).
std::vector<double> linear_worstcase_ref(const std::vector<double>& x,
                                         const std::vector<double>& w, double eps, long label);

// Strict-enough XML well-formedness check for the emitted SVG (prolog
// optional, matched tags, quoted attributes, single root).
bool xml_well_formed(const std::string& text, std::string* why = nullptr);

// Two-sided binomial bound: |count - n*p| <= slack.
inline bool binomial_within(long count, long n, double p, double slack) {
  return std::abs(static_cast<double>(count) - static_cast<double>(n) * p) <= slack;
}

struct Report {
  std::string case_id;
  double oracle_value = 0;
  double impl_value = 0;
  double max_err = 0;
  double tolerance = 0;
  bool pass = false;
};

}  // namespace oracle
