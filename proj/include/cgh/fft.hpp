#pragma once

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <map>
#include <mutex>
#include <tuple>
#include <vector>

#include "cgh/error.hpp"
#include "cgh/tensor.hpp"

namespace cgh {

namespace detail {

// FFTW planning is not thread-safe; execution of an existing plan on new
// arrays is. Plans are created once per (rows, cols, direction) under a lock
// and reused through fftw_execute_dft.
class FftPlanCache {
 public:
  static FftPlanCache& instance() {
    static FftPlanCache cache;
    return cache;
  }

  fftw_plan get(std::size_t rows, std::size_t cols, int sign) {
    std::lock_guard lock(mutex_);
    auto key = std::make_tuple(rows, cols, sign);
    if (auto it = plans_.find(key); it != plans_.end()) return it->second;
    // In-place plan: every execution below runs in place.
    std::vector<cplx> buf(rows * cols);
    auto* raw = reinterpret_cast<fftw_complex*>(buf.data());
    fftw_plan p = fftw_plan_dft_2d(static_cast<int>(rows), static_cast<int>(cols), raw, raw, sign,
                                   FFTW_ESTIMATE | FFTW_UNALIGNED);
    plans_.emplace(key, p);
    return p;
  }

  FftPlanCache(const FftPlanCache&) = delete;
  FftPlanCache& operator=(const FftPlanCache&) = delete;

 private:
  FftPlanCache() = default;
  ~FftPlanCache() {
    for (auto& [key, plan] : plans_) fftw_destroy_plan(plan);
  }

  std::mutex mutex_;
  std::map<std::tuple<std::size_t, std::size_t, int>, fftw_plan> plans_;
};

/// Unitary 2-D DFT of a row-major buffer. sign = FFTW_FORWARD or FFTW_BACKWARD.
inline void fft2_inplace(std::vector<cplx>& data, std::size_t rows, std::size_t cols, int sign) {
  fftw_plan plan = FftPlanCache::instance().get(rows, cols, sign);
  auto* buf = reinterpret_cast<fftw_complex*>(data.data());
  fftw_execute_dft(plan, buf, buf);
  const double scale = 1.0 / std::sqrt(double(rows) * double(cols));
  for (auto& v : data) v *= scale;
}

inline void require_finite(const ComplexField& f, const char* what) {
  if (!f.all_finite()) throw NumericError(std::string(what) + ": input contains NaN or Inf");
}

}  // namespace detail

/// Orthonormal forward DFT: X[k] = (1/sqrt(HW)) sum_n x[n] exp(-2 pi i k n / N).
/// Output frequencies follow the unshifted FFT layout (DC at index 0).
inline ComplexField fft2(const ComplexField& field) {
  detail::require_finite(field, "fft2");
  ComplexField out = field;
  detail::fft2_inplace(out.storage(), out.rows(), out.cols(), FFTW_FORWARD);
  return out;
}

/// Orthonormal inverse DFT; ifft2(fft2(x)) == x up to rounding.
inline ComplexField ifft2(const ComplexField& spectrum) {
  detail::require_finite(spectrum, "ifft2");
  ComplexField out = spectrum;
  detail::fft2_inplace(out.storage(), out.rows(), out.cols(), FFTW_BACKWARD);
  return out;
}

}  // namespace cgh
