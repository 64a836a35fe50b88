#include "gama/binio.hpp"
#include "gama/checkpoint.hpp"
#include "gama/errors.hpp"
#include "gama/fileio.hpp"
#include "gama/kvconfig.hpp"
#include "gama/tokenizer.hpp"
#include "../support.hpp"

#include <doctest.h>

#include <fstream>

using namespace gama;
using gama::testing::random_matrix;
using gama::testing::temp_dir;

namespace {

Matrix as_f32(const Matrix& m) {
  Matrix out = m;
  for (Real& v : out.data()) v = static_cast<Real>(static_cast<float>(v));
  return out;
}

}  // namespace

TEST_CASE("tokenizer round trip and specials") {
  const std::string text = "A dog\nbarks \xc3\xa9";
  const auto ids = tok::encode(text);
  CHECK(ids.size() == text.size());
  for (int id : ids) {
    CHECK(id >= 0);
    CHECK(id < 256);
  }
  CHECK(tok::decode(ids) == text);
  const std::vector<int> mixed = {tok::kBos, 'h', tok::kDec, 'i', tok::kEos, tok::kPad, tok::kResp};
  CHECK(tok::decode(mixed) == "hi");
  CHECK(tok::encode("").empty());
  CHECK(tok::kVocabSize == 261);
}

TEST_CASE("binary reader is bounds checked") {
  std::vector<std::uint8_t> buf;
  binio::put_u32(buf, 0xdeadbeef);
  binio::put_f32(buf, 1.5f);
  binio::put_u16(buf, 513);
  binio::Reader r(buf);
  CHECK(r.u32() == 0xdeadbeef);
  CHECK(r.f32() == 1.5f);
  CHECK(r.u16() == 513);
  CHECK(r.remaining() == 0);
  CHECK_THROWS_AS(r.u32(), FormatError);
}

TEST_CASE("archive round trip stores f32 payloads") {
  Rng rng(1);
  ParamStore store;
  store.create("a", random_matrix(3, 4, rng));
  store.create("b.c", random_matrix(1, 7, rng));
  store.create("empty", Matrix(0, 5));
  const auto bytes = encode_archive(store);
  REQUIRE(bytes.size() == 8 + 4 + 4 + (4 + 1 + 8 + 48) + (4 + 3 + 8 + 28) + (4 + 5 + 8));
  CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "GAMACKPT");
  const auto back = decode_archive(bytes);
  REQUIRE(back.size() == 3);
  CHECK(back[0].name == "a");
  CHECK(back[0].value == as_f32(store.at("a").value()));
  CHECK(back[1].value == as_f32(store.at("b.c").value()));
  CHECK(back[2].value.rows() == 0);
  CHECK(back[2].value.cols() == 5);
  CHECK(encode_archive(store) == bytes);
  CHECK(render_manifest(store) == "a 3 4\nb.c 1 7\nempty 0 5\n");
}

TEST_CASE("malformed archives are rejected") {
  Rng rng(2);
  ParamStore store;
  store.create("w", random_matrix(2, 2, rng));
  const auto good = encode_archive(store);

  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_archive(bad_magic), FormatError);
  auto bad_version = good;
  bad_version[8] = 9;
  CHECK_THROWS_AS(decode_archive(bad_version), FormatError);
  for (std::size_t cut : {std::size_t{3}, std::size_t{12}, good.size() - 1}) {
    CHECK_THROWS_AS(decode_archive(std::span(good).first(cut)), FormatError);
  }
  auto trailing = good;
  trailing.push_back(0);
  CHECK_THROWS_AS(decode_archive(trailing), FormatError);
  auto huge = good;
  huge[16 + 4 + 1] = 0xff;  // rows of the first tensor
  CHECK_THROWS_AS(decode_archive(huge), FormatError);
}

TEST_CASE("load_into checks names and shapes") {
  Rng rng(3);
  ParamStore store;
  store.create("a", random_matrix(2, 3, rng));
  store.create("b", random_matrix(1, 1, rng));
  const Matrix a2 = random_matrix(2, 3, rng);
  load_into(store, {{"b", Matrix{{4.0}}}, {"a", a2}});
  CHECK(store.at("a").value() == a2);
  CHECK(store.at("b").item() == 4.0);

  CHECK_THROWS_AS(load_into(store, {{"a", a2}}), ConfigError);
  CHECK_THROWS_AS(load_into(store, {{"a", a2}, {"c", Matrix{{1.0}}}}), ConfigError);
  CHECK_THROWS_AS(load_into(store, {{"a", Matrix(3, 2)}, {"b", Matrix{{1.0}}}}), ConfigError);
  CHECK_THROWS_AS(load_into(store, {{"a", a2}, {"a", a2}}), ConfigError);
  // A failed load leaves the store untouched.
  CHECK(store.at("a").value() == a2);
}

TEST_CASE("checkpoint directory round trip") {
  const auto dir = temp_dir("ckpt");
  GamaModel m = GamaModel::create(ModelConfig::toy(), 5);
  save_checkpoint(dir, m);
  CHECK(std::filesystem::exists(dir / kArchiveFile));
  CHECK(read_text_file(dir / kManifestFile) == render_manifest(m.params()));

  GamaModel back = load_checkpoint(dir);
  CHECK(back.config().to_json() == m.config().to_json());
  REQUIRE(back.params().size() == m.params().size());
  for (const auto& e : m.params().entries()) CHECK(back.params().at(e.name).value() == as_f32(e.tensor.value()));

  GamaModel other = GamaModel::create(ModelConfig::toy(), 99);
  resume_checkpoint(dir, other);
  for (const auto& e : m.params().entries()) CHECK(other.params().at(e.name).value() == as_f32(e.tensor.value()));

  ModelConfig wider = ModelConfig::toy();
  wider.connector_hidden = 12;
  GamaModel mismatch = GamaModel::create(wider, 1);
  CHECK_THROWS_AS(resume_checkpoint(dir, mismatch), ConfigError);

  write_text_file(dir / kConfigFile, "{ not json");
  CHECK_THROWS_AS(load_checkpoint(dir), ConfigError);
  write_text_file(dir / kConfigFile, "{}");
  CHECK_THROWS_AS(load_checkpoint(dir), ConfigError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing"), FormatError);
}

TEST_CASE("model config JSON round trip") {
  for (const ModelConfig& c : {ModelConfig::toy(), ModelConfig::desk()}) {
    const auto j = c.to_json();
    CHECK(ModelConfig::from_json(j).to_json() == j);
  }
  auto j = ModelConfig::toy().to_json();
  j["encoder"]["depth"] = "three";
  CHECK_THROWS_AS(ModelConfig::from_json(j), ConfigError);
}

TEST_CASE("key-value config parsing") {
  const KvConfig c = KvConfig::parse(
      "# comment\n"
      "stage = it\n"
      "\n"
      "lr = 1e-4   # trailing comment\n"
      "steps=10\n"
      "tags = dog, speech ,, rain\n"
      "flag = yes\n"
      "stage = ft1\n");
  CHECK(c.get_string("stage") == "ft1");
  CHECK(c.get_real("lr", 0.0) == 1e-4);
  CHECK(c.get_int("steps", 0) == 10);
  CHECK(c.get_int("absent", 7) == 7);
  CHECK(c.get_list("tags") == std::vector<std::string>{"dog", "speech", "rain"});
  CHECK(c.get_list("absent").empty());
  CHECK(c.get_bool("flag", false));
  CHECK(c.get_string("absent", "x") == "x");
  CHECK_THROWS_AS(c.get_string("absent"), ConfigError);
  CHECK_THROWS_AS(c.get_int("stage", 0), ConfigError);
  CHECK_THROWS_AS(c.get_real("stage", 0.0), ConfigError);
  CHECK_THROWS_AS(c.get_bool("stage", false), ConfigError);
  CHECK_THROWS_AS(KvConfig::parse("just words\n"), ConfigError);

  KvConfig o = c;
  o.apply_override("steps = 3");
  CHECK(o.get_int("steps", 0) == 3);
  CHECK_THROWS_AS(o.apply_override("steps"), ConfigError);
  CHECK_THROWS_AS(o.apply_override("=3"), ConfigError);

  const auto dir = temp_dir("kv");
  write_text_file(dir / "a.cfg", "seed = 42\n");
  CHECK(KvConfig::load(dir / "a.cfg").get_int("seed", 0) == 42);
  CHECK_THROWS_AS(KvConfig::load(dir / "missing.cfg"), ConfigError);
}
