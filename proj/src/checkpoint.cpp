#include "gama/checkpoint.hpp"

#include "gama/binio.hpp"
#include "gama/errors.hpp"
#include "gama/fileio.hpp"

#include <unordered_map>

namespace gama {

namespace {
constexpr std::string_view kMagic = "GAMACKPT";
constexpr std::uint32_t kVersion = 1;
}  // namespace

std::vector<std::uint8_t> encode_archive(const ParamStore& store) {
  std::vector<std::uint8_t> out;
  binio::put_bytes(out, kMagic);
  binio::put_u32(out, kVersion);
  binio::put_u32(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& e : store.entries()) {
    const Matrix& m = e.tensor.value();
    binio::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    binio::put_bytes(out, e.name);
    binio::put_u32(out, static_cast<std::uint32_t>(m.rows()));
    binio::put_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (Real v : m.data()) binio::put_f32(out, static_cast<float>(v));
  }
  return out;
}

std::vector<NamedTensor> decode_archive(std::span<const std::uint8_t> bytes) {
  binio::Reader r(bytes);
  if (r.remaining() < kMagic.size() || r.str(kMagic.size()) != kMagic) {
    throw FormatError("checkpoint archive: bad magic");
  }
  if (const auto v = r.u32(); v != kVersion) {
    throw FormatError("checkpoint archive: unsupported version " + std::to_string(v));
  }
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str(r.u32());
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    if (static_cast<std::uint64_t>(rows) * cols * 4 > r.remaining()) {
      throw FormatError("checkpoint archive: truncated tensor '" + t.name + "'");
    }
    t.value = Matrix(rows, cols);
    for (Real& v : t.value.data()) v = r.f32();
    out.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw FormatError("checkpoint archive: trailing bytes");
  return out;
}

std::string render_manifest(const ParamStore& store) {
  std::string out;
  for (const auto& e : store.entries()) {
    out += e.name + " " + std::to_string(e.tensor.rows()) + " " + std::to_string(e.tensor.cols()) + "\n";
  }
  return out;
}

void load_into(ParamStore& store, const std::vector<NamedTensor>& tensors) {
  std::unordered_map<std::string, const Matrix*> by_name;
  for (const auto& t : tensors) {
    if (!by_name.emplace(t.name, &t.value).second) throw ConfigError("checkpoint: duplicate tensor '" + t.name + "'");
  }
  if (by_name.size() != store.size()) {
    throw ConfigError("checkpoint: archive has " + std::to_string(by_name.size()) + " tensors, model expects " +
                      std::to_string(store.size()));
  }
  for (const auto& e : store.entries()) {
    const auto it = by_name.find(e.name);
    if (it == by_name.end()) throw ConfigError("checkpoint: missing tensor '" + e.name + "'");
    if (!it->second->same_shape(e.tensor.value())) {
      throw ConfigError("checkpoint: tensor '" + e.name + "' is " + shape_str(*it->second) + ", model expects " +
                        shape_str(e.tensor.value()));
    }
  }
  for (const auto& e : store.entries()) store.at(e.name).mutable_value() = *by_name.at(e.name);
}

void save_checkpoint(const std::filesystem::path& dir, const GamaModel& model) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw FormatError("checkpoint: cannot create " + dir.string() + ": " + ec.message());
  write_binary_file(dir / kArchiveFile, encode_archive(model.params()));
  write_text_file(dir / kManifestFile, render_manifest(model.params()));
  write_text_file(dir / kConfigFile, model.config().to_json().dump(2) + "\n");
}

GamaModel load_checkpoint(const std::filesystem::path& dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(dir / kConfigFile));
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("checkpoint config: ") + ex.what());
  }
  GamaModel model = GamaModel::create(ModelConfig::from_json(j), 0);
  load_into(model.params(), decode_archive(read_binary_file(dir / kArchiveFile)));
  return model;
}

void resume_checkpoint(const std::filesystem::path& dir, GamaModel& model) {
  load_into(model.params(), decode_archive(read_binary_file(dir / kArchiveFile)));
}

}  // namespace gama
