#include "gama/audio.hpp"

#include "gama/binio.hpp"
#include "gama/errors.hpp"
#include "gama/fileio.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>

namespace gama {

// ---- WAV ---------------------------------------------------------------------

Waveform decode_wav(std::span<const std::uint8_t> bytes) {
  binio::Reader r(bytes);
  if (r.remaining() < 12) throw FormatError("wav: file too short for a RIFF header");
  if (r.str(4) != "RIFF") throw FormatError("wav: missing RIFF magic");
  r.u32();
  if (r.str(4) != "WAVE") throw FormatError("wav: missing WAVE tag");

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  while (r.remaining() >= 8) {
    const std::string id = r.str(4);
    const std::uint32_t size = r.u32();
    if (size > r.remaining()) throw FormatError("wav: chunk '" + id + "' overruns the file");
    if (id == "fmt ") {
      if (size < 16) throw FormatError("wav: fmt chunk too small");
      binio::Reader f(r.take(size));
      format = f.u16();
      channels = f.u16();
      rate = f.u32();
      f.u32();  // byte rate
      f.u16();  // block align
      bits = f.u16();
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw FormatError("wav: data chunk before fmt chunk");
      if (format != 1 || bits != 16) {
        throw FormatError("wav: unsupported codec (format " + std::to_string(format) + ", " + std::to_string(bits) +
                          " bits); only PCM16 is accepted");
      }
      if (channels == 0 || rate == 0) throw FormatError("wav: zero channels or sample rate");
      const std::size_t frame_bytes = 2u * channels;
      const std::size_t frames = size / frame_bytes;
      if (frames == 0) throw FormatError("wav: no samples");
      binio::Reader d(r.take(size));
      Waveform w;
      w.sample_rate = static_cast<int>(rate);
      w.samples.resize(frames);
      for (std::size_t i = 0; i < frames; ++i) {
        Real acc = 0.0;
        for (std::uint16_t c = 0; c < channels; ++c) acc += static_cast<std::int16_t>(d.u16()) / 32768.0;
        w.samples[i] = acc / channels;
      }
      return w.sample_rate == kSampleRate ? w : resample_linear(w, kSampleRate);
    } else {
      r.skip(size);
    }
    if (size % 2 == 1 && r.remaining() > 0) r.skip(1);  // chunks are word aligned
  }
  throw FormatError(have_fmt ? "wav: missing data chunk" : "wav: missing fmt chunk");
}

Waveform load_wav(const std::filesystem::path& path) { return decode_wav(read_binary_file(path)); }

std::vector<std::uint8_t> encode_wav_pcm16(const std::vector<std::vector<std::int16_t>>& channels, int sample_rate) {
  if (channels.empty()) throw ValidationError("encode_wav_pcm16: no channels");
  const std::size_t frames = channels.front().size();
  for (const auto& c : channels) {
    if (c.size() != frames) throw ValidationError("encode_wav_pcm16: channel lengths differ");
  }
  const auto nch = static_cast<std::uint16_t>(channels.size());
  const auto data_bytes = static_cast<std::uint32_t>(frames * nch * 2);
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  binio::put_bytes(out, "RIFF");
  binio::put_u32(out, 36 + data_bytes);
  binio::put_bytes(out, "WAVE");
  binio::put_bytes(out, "fmt ");
  binio::put_u32(out, 16);
  binio::put_u16(out, 1);
  binio::put_u16(out, nch);
  binio::put_u32(out, static_cast<std::uint32_t>(sample_rate));
  binio::put_u32(out, static_cast<std::uint32_t>(sample_rate) * nch * 2);
  binio::put_u16(out, static_cast<std::uint16_t>(nch * 2));
  binio::put_u16(out, 16);
  binio::put_bytes(out, "data");
  binio::put_u32(out, data_bytes);
  for (std::size_t i = 0; i < frames; ++i) {
    for (const auto& c : channels) binio::put_u16(out, static_cast<std::uint16_t>(c[i]));
  }
  return out;
}

void save_wav(const std::filesystem::path& path, const Waveform& wave) {
  std::vector<std::int16_t> pcm(wave.samples.size());
  std::transform(wave.samples.begin(), wave.samples.end(), pcm.begin(), [](Real s) {
    return static_cast<std::int16_t>(std::lround(std::clamp(s, -1.0, 32767.0 / 32768.0) * 32768.0));
  });
  write_binary_file(path, encode_wav_pcm16({pcm}, wave.sample_rate));
}

Waveform resample_linear(const Waveform& wave, int target_rate) {
  if (wave.samples.empty()) throw ValidationError("resample: empty waveform");
  if (wave.sample_rate <= 0 || target_rate <= 0) throw ValidationError("resample: non-positive rate");
  if (wave.sample_rate == target_rate) return wave;
  const std::size_t n = wave.samples.size();
  // Integer arithmetic keeps the output length exact: last index i satisfies
  // i * from <= (n - 1) * to.
  const auto from = static_cast<std::uint64_t>(wave.sample_rate);
  const auto to = static_cast<std::uint64_t>(target_rate);
  const std::size_t out_len = static_cast<std::size_t>((static_cast<std::uint64_t>(n - 1) * to) / from) + 1;
  Waveform out;
  out.sample_rate = target_rate;
  out.samples.resize(out_len);
  for (std::size_t i = 0; i < out_len; ++i) {
    const std::uint64_t num = static_cast<std::uint64_t>(i) * from;
    const std::size_t left = static_cast<std::size_t>(num / to);
    const Real frac = static_cast<Real>(num % to) / static_cast<Real>(to);
    const Real a = wave.samples[left];
    const Real b = left + 1 < n ? wave.samples[left + 1] : a;
    out.samples[i] = a + (b - a) * frac;
  }
  return out;
}

// ---- spectra ---------------------------------------------------------------------

Real hz_to_mel(Real hz) { return 1127.0 * std::log(1.0 + hz / 700.0); }
Real mel_to_hz(Real mel) { return 700.0 * (std::exp(mel / 1127.0) - 1.0); }

namespace {
Real nyquist_or(const MelConfig& cfg) { return cfg.high_hz > 0.0 ? cfg.high_hz : cfg.sample_rate / 2.0; }

void check_mel_config(const MelConfig& cfg) {
  if (cfg.win == 0 || cfg.hop == 0 || cfg.mel_bins == 0) throw ConfigError("mel: win, hop and mel_bins must be positive");
  if (cfg.n_fft < cfg.win) throw ConfigError("mel: n_fft smaller than the window");
  if (!(cfg.floor > 0.0)) throw ConfigError("mel: energy floor must be positive");
  if (nyquist_or(cfg) <= cfg.low_hz) throw ConfigError("mel: high frequency must exceed low frequency");
}
}  // namespace

Matrix mel_filterbank(const MelConfig& cfg) {
  check_mel_config(cfg);
  const std::size_t nbins = cfg.n_fft / 2 + 1;
  const Real mel_lo = hz_to_mel(cfg.low_hz);
  const Real mel_hi = hz_to_mel(nyquist_or(cfg));
  const Real delta = (mel_hi - mel_lo) / static_cast<Real>(cfg.mel_bins + 1);
  Matrix fb(cfg.mel_bins, nbins);
  for (std::size_t m = 0; m < cfg.mel_bins; ++m) {
    const Real left = mel_lo + m * delta;
    const Real center = left + delta;
    const Real right = center + delta;
    for (std::size_t k = 0; k < nbins; ++k) {
      const Real mel = hz_to_mel(static_cast<Real>(k) * cfg.sample_rate / static_cast<Real>(cfg.n_fft));
      if (mel > left && mel <= center) {
        fb(m, k) = (mel - left) / delta;
      } else if (mel > center && mel < right) {
        fb(m, k) = (right - mel) / delta;
      }
    }
  }
  return fb;
}

std::pair<Real, Real> mel_filter_support(const MelConfig& cfg, std::size_t bin) {
  const Real mel_lo = hz_to_mel(cfg.low_hz);
  const Real delta = (hz_to_mel(nyquist_or(cfg)) - mel_lo) / static_cast<Real>(cfg.mel_bins + 1);
  return {mel_to_hz(mel_lo + bin * delta), mel_to_hz(mel_lo + (bin + 2) * delta)};
}

std::vector<Real> hann_window(std::size_t n) {
  std::vector<Real> w(n, 1.0);
  if (n < 2) return w;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<Real>(i) / static_cast<Real>(n - 1));
  }
  return w;
}

std::vector<Real> power_spectrum_direct(std::span<const Real> frame, std::size_t n_fft) {
  if (frame.size() > n_fft) throw ValidationError("power_spectrum: frame longer than n_fft");
  const std::size_t nbins = n_fft / 2 + 1;
  std::vector<Real> out(nbins);
  for (std::size_t k = 0; k < nbins; ++k) {
    Real re = 0.0, im = 0.0;
    for (std::size_t n = 0; n < frame.size(); ++n) {
      // (k * n) mod n_fft keeps the angle argument small and exact.
      const Real angle = -2.0 * std::numbers::pi * static_cast<Real>((k * n) % n_fft) / static_cast<Real>(n_fft);
      re += frame[n] * std::cos(angle);
      im += frame[n] * std::sin(angle);
    }
    out[k] = re * re + im * im;
  }
  return out;
}

std::vector<Real> power_spectrum_fft(std::span<const Real> frame, std::size_t n_fft) {
  if (frame.size() > n_fft) throw ValidationError("power_spectrum: frame longer than n_fft");
  if (n_fft == 0 || (n_fft & (n_fft - 1)) != 0) return power_spectrum_direct(frame, n_fft);
  std::vector<std::complex<Real>> a(n_fft);
  for (std::size_t i = 0; i < frame.size(); ++i) a[i] = frame[i];
  // Iterative radix-2 Cooley-Tukey.
  for (std::size_t i = 1, j = 0; i < n_fft; ++i) {
    std::size_t bit = n_fft >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  std::vector<std::complex<Real>> twiddle(n_fft / 2);
  for (std::size_t k = 0; k < twiddle.size(); ++k) {
    twiddle[k] = std::polar(1.0, -2.0 * std::numbers::pi * static_cast<Real>(k) / static_cast<Real>(n_fft));
  }
  for (std::size_t len = 2; len <= n_fft; len <<= 1) {
    const std::size_t stride = n_fft / len;
    for (std::size_t i = 0; i < n_fft; i += len) {
      for (std::size_t j = 0; j < len / 2; ++j) {
        const std::complex<Real> w = twiddle[j * stride];
        const auto u = a[i + j];
        const auto v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
      }
    }
  }
  std::vector<Real> out(n_fft / 2 + 1);
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = std::norm(a[k]);
  return out;
}

MelSpectrogram log_mel(const Waveform& wave, const MelConfig& cfg) {
  check_mel_config(cfg);
  if (wave.samples.size() < cfg.win) {
    throw ValidationError("log_mel: waveform of " + std::to_string(wave.samples.size()) +
                          " samples is shorter than one window (" + std::to_string(cfg.win) + ")");
  }
  const std::size_t frames = 1 + (wave.samples.size() - cfg.win) / cfg.hop;
  const Matrix fb = mel_filterbank(cfg);
  const auto window = hann_window(cfg.win);
  MelSpectrogram mel;
  mel.values = Matrix(frames, cfg.mel_bins);
  std::vector<Real> frame(cfg.win);
  Eigen::VectorXd power(static_cast<Eigen::Index>(cfg.n_fft / 2 + 1));
  for (std::size_t f = 0; f < frames; ++f) {
    for (std::size_t i = 0; i < cfg.win; ++i) frame[i] = wave.samples[f * cfg.hop + i] * window[i];
    const auto p = cfg.fast_dft ? power_spectrum_fft(frame, cfg.n_fft) : power_spectrum_direct(frame, cfg.n_fft);
    for (std::size_t k = 0; k < p.size(); ++k) power(static_cast<Eigen::Index>(k)) = p[k];
    Eigen::VectorXd energies = fb.eigen() * power;
    for (std::size_t m = 0; m < cfg.mel_bins; ++m) mel.values(f, m) = std::log(energies(static_cast<Eigen::Index>(m)) + cfg.floor);
  }
  return mel;
}

// ---- patches ----------------------------------------------------------------------

PatchSequence patchify(const MelSpectrogram& mel, std::size_t patch_h, std::size_t patch_w) {
  if (patch_h == 0 || patch_w == 0) throw ConfigError("patchify: patch dims must be positive");
  const std::size_t freq = mel.mel_bins();
  const std::size_t time = mel.frames();
  PatchSequence ps;
  ps.patch_h = patch_h;
  ps.patch_w = patch_w;
  ps.freq_patches = (freq + patch_h - 1) / patch_h;
  ps.time_patches = (time + patch_w - 1) / patch_w;
  ps.values = Matrix(ps.freq_patches * ps.time_patches, patch_h * patch_w);
  for (std::size_t fp = 0; fp < ps.freq_patches; ++fp) {
    for (std::size_t tp = 0; tp < ps.time_patches; ++tp) {
      const std::size_t token = fp * ps.time_patches + tp;
      for (std::size_t r = 0; r < patch_h; ++r) {
        const std::size_t f = fp * patch_h + r;
        for (std::size_t c = 0; c < patch_w; ++c) {
          const std::size_t t = tp * patch_w + c;
          ps.values(token, r * patch_w + c) = (f < freq && t < time) ? mel.values(t, f) : 0.0;
        }
      }
    }
  }
  return ps;
}

Matrix unpatchify(const PatchSequence& ps) {
  if (ps.tokens() != ps.freq_patches * ps.time_patches || ps.patch_dim() != ps.patch_h * ps.patch_w) {
    throw ShapeError("unpatchify: inconsistent patch grid");
  }
  Matrix grid(ps.freq_patches * ps.patch_h, ps.time_patches * ps.patch_w);
  for (std::size_t fp = 0; fp < ps.freq_patches; ++fp) {
    for (std::size_t tp = 0; tp < ps.time_patches; ++tp) {
      const std::size_t token = fp * ps.time_patches + tp;
      for (std::size_t r = 0; r < ps.patch_h; ++r) {
        for (std::size_t c = 0; c < ps.patch_w; ++c) {
          grid(fp * ps.patch_h + r, tp * ps.patch_w + c) = ps.values(token, r * ps.patch_w + c);
        }
      }
    }
  }
  return grid;
}

void write_mel_dump(const std::filesystem::path& path, const MelSpectrogram& mel) {
  std::vector<std::uint8_t> out;
  binio::put_bytes(out, "MELS");
  binio::put_u32(out, static_cast<std::uint32_t>(mel.frames()));
  binio::put_u32(out, static_cast<std::uint32_t>(mel.mel_bins()));
  for (Real v : mel.values.data()) binio::put_f32(out, static_cast<float>(v));
  write_binary_file(path, out);
}

MelSpectrogram read_mel_dump(const std::filesystem::path& path) {
  const auto bytes = read_binary_file(path);
  binio::Reader r(bytes);
  if (r.remaining() < 12 || r.str(4) != "MELS") throw FormatError("mel dump: bad magic in " + path.string());
  const std::uint32_t frames = r.u32();
  const std::uint32_t bins = r.u32();
  if (r.remaining() != static_cast<std::size_t>(frames) * bins * 4) throw FormatError("mel dump: payload size mismatch");
  MelSpectrogram mel;
  mel.values = Matrix(frames, bins);
  for (auto& v : mel.values.data()) v = r.f32();
  return mel;
}

}  // namespace gama
