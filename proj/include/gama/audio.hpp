#pragma once

// Waveform ingestion and the log-mel / patch frontend feeding the encoder.

#include "gama/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace gama {

inline constexpr int kSampleRate = 16000;

struct Waveform {
  std::vector<Real> samples;  // mono, in [-1, 1]
  int sample_rate = kSampleRate;
};

// Reads a RIFF/WAVE PCM16 file (any channel count, channels averaged) and
// resamples to 16 kHz. Throws FormatError on malformed or non-PCM16 input.
Waveform load_wav(const std::filesystem::path& path);
Waveform decode_wav(std::span<const std::uint8_t> bytes);
// channels[c][i] is sample i of channel c; all channels must be equally long.
std::vector<std::uint8_t> encode_wav_pcm16(const std::vector<std::vector<std::int16_t>>& channels, int sample_rate);
void save_wav(const std::filesystem::path& path, const Waveform& wave);

// Linear interpolation; output length floor((n - 1) * to / from) + 1.
Waveform resample_linear(const Waveform& wave, int target_rate);

struct MelConfig {
  std::size_t win = 400;
  std::size_t hop = 160;
  std::size_t n_fft = 512;
  std::size_t mel_bins = 128;
  Real floor = 1e-10;
  Real low_hz = 20.0;
  Real high_hz = 0.0;  // 0 means Nyquist
  int sample_rate = kSampleRate;
  bool fast_dft = true;
};

struct MelSpectrogram {
  Matrix values;  // frames × mel_bins, natural-log energies
  std::size_t frames() const { return values.rows(); }
  std::size_t mel_bins() const { return values.cols(); }
};

Real hz_to_mel(Real hz);
Real mel_to_hz(Real mel);

// Triangular filters equally spaced on the mel scale: mel_bins × (n_fft/2 + 1).
Matrix mel_filterbank(const MelConfig& cfg);
// Frequency range [left, right] (Hz) covered by filter `bin`.
std::pair<Real, Real> mel_filter_support(const MelConfig& cfg, std::size_t bin);

// |DFT|² of a zero-padded frame for bins 0..n_fft/2.
std::vector<Real> power_spectrum_direct(std::span<const Real> frame, std::size_t n_fft);
std::vector<Real> power_spectrum_fft(std::span<const Real> frame, std::size_t n_fft);
std::vector<Real> hann_window(std::size_t n);

// frames = 1 + floor((len - win) / hop). Throws ValidationError when the
// waveform is shorter than one window.
MelSpectrogram log_mel(const Waveform& wave, const MelConfig& cfg = {});

struct PatchSequence {
  Matrix values;  // tokens × (patch_h · patch_w)
  std::size_t freq_patches = 0;
  std::size_t time_patches = 0;
  std::size_t patch_h = 16;
  std::size_t patch_w = 16;
  std::size_t tokens() const { return values.rows(); }
  std::size_t patch_dim() const { return values.cols(); }
};

// Views the spectrogram as (mel bins × frames), zero-pads both axes up to a
// patch multiple and cuts non-overlapping patches. Tokens are ordered
// frequency-major, each patch flattened row-major.
PatchSequence patchify(const MelSpectrogram& mel, std::size_t patch_h = 16, std::size_t patch_w = 16);
// Inverse of patchify: the padded (freq × time) grid.
Matrix unpatchify(const PatchSequence& patches);

// Headered little-endian dump: "MELS", u32 frames, u32 bins, f32 data row-major.
void write_mel_dump(const std::filesystem::path& path, const MelSpectrogram& mel);
MelSpectrogram read_mel_dump(const std::filesystem::path& path);

}  // namespace gama
