#pragma once

#include "gama/audio.hpp"
#include "gama/nn.hpp"
#include "gama/tensor.hpp"

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>

namespace gama::testing {

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, Real lo = -1.0, Real hi = 1.0) {
  std::uniform_real_distribution<Real> u(lo, hi);
  Matrix m(r, c);
  for (Real& v : m.data()) v = u(rng);
  return m;
}

inline Waveform sine(Real hz, Real seconds, Real amp = 0.5, Real phase = 0.0) {
  Waveform w;
  const auto n = static_cast<std::size_t>(seconds * kSampleRate);
  w.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    w.samples[i] = amp * std::sin(2.0 * std::numbers::pi * hz * static_cast<Real>(i) / kSampleRate + phase);
  }
  return w;
}

inline void zero(Tensor& t) { t.mutable_value() = Matrix(t.rows(), t.cols()); }

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("gama_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace gama::testing
