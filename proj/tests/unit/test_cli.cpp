#include "gama/audio.hpp"
#include "gama/checkpoint.hpp"
#include "gama/fileio.hpp"
#include "../fixtures.hpp"
#include "../support.hpp"

#include <doctest.h>
#include <json.hpp>

#include <cstdio>
#include <sys/wait.h>

using namespace gama;
using gama::testing::sine;
using gama::testing::temp_dir;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string out;
};

std::string quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

CliResult cli(const std::vector<std::string>& args) {
  std::string cmd = quote(GAMA_CLI);
  for (const auto& a : args) cmd += " " + quote(a);
  cmd += " 2>/dev/null";
  CliResult r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  std::size_t n = 0;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

// A toy training set of two tones short enough for the toy encoder, next to a config file.
fs::path write_train_setup(const fs::path& dir) {
  save_wav(dir / "a.wav", sine(440.0, 0.25));
  save_wav(dir / "b.wav", sine(880.0, 0.2));
  write_text_file(dir / "train.jsonl",
                  "{\"audio\":\"a.wav\",\"instruction\":\"What is heard?\",\"response\":\"a tone\"}\n"
                  "{\"audio\":\"b.wav\",\"instruction\":\"Describe it.\",\"response\":\"high\",\"tags\":[\"dog\"]}\n");
  write_text_file(dir / "train.cfg", "model.preset = toy\nstage = it\ntrain_data = train.jsonl\nseed = 5\n");
  return dir / "train.cfg";
}

std::vector<nlohmann::json> read_jsonl(const fs::path& p) {
  std::vector<nlohmann::json> out;
  std::istringstream in(read_text_file(p));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  }
  return out;
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  CHECK(cli({}).code == 2);
  CHECK(cli({"bogus"}).code == 2);
  CHECK(cli({"train", "--no-such-flag"}).code == 2);
  CHECK(cli({"--help"}).code == 0);
  const auto dir = temp_dir("cli_usage");
  CHECK(cli({"train", "--config", (dir / "missing.cfg").string(), "--out", dir.string()}).code == 2);
  const fs::path cfg = write_train_setup(dir);
  // No seed anywhere.
  write_text_file(dir / "noseed.cfg", "model.preset = toy\ntrain_data = train.jsonl\n");
  CHECK(cli({"train", "--config", (dir / "noseed.cfg").string(), "--out", (dir / "o").string()}).code == 2);
  CHECK(cli({"train", "--config", cfg.string(), "--out", (dir / "o").string(), "--stage", "zz"}).code == 2);
  CHECK(cli({"train", "--config", cfg.string(), "--out", (dir / "o").string(), "--set", "model.preset=huge"}).code ==
        2);
  CHECK(cli({"infer", "--seed", "1", "--out", (dir / "o").string(), "--wav", (dir / "a.wav").string(),
             "--instruction", "hi"})
            .code == 2);
  CHECK(cli({"infer", "--seed", "1", "--out", (dir / "o").string(), "--checkpoint", (dir / "nope").string(), "--wav",
             (dir / "a.wav").string(), "--instruction", "hi"})
            .code == 2);
  CHECK(cli({"eval", "--seed", "1", "--out", (dir / "o").string()}).code == 2);
}

TEST_CASE("zero-step training writes the initial weights") {
  const auto dir = temp_dir("cli_train0");
  const fs::path cfg = write_train_setup(dir);
  const CliResult r = cli({"train", "--config", cfg.string(), "--out", (dir / "run").string(), "--set", "steps=0"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("trained 0 step(s) of stage it") != std::string::npos);

  save_checkpoint(dir / "init", GamaModel::create(ModelConfig::toy(), 5));
  CHECK(read_binary_file(dir / "run/checkpoint" / kArchiveFile) == read_binary_file(dir / "init" / kArchiveFile));
  CHECK(read_text_file(dir / "run/checkpoint" / kConfigFile) == read_text_file(dir / "init" / kConfigFile));
  CHECK(read_text_file(dir / "run/train_log.jsonl").empty());
}

TEST_CASE("training steps, logging and resume") {
  const auto dir = temp_dir("cli_train");
  const fs::path cfg = write_train_setup(dir);
  const std::string out = (dir / "run").string();
  REQUIRE(cli({"train", "--config", cfg.string(), "--out", out, "--set", "steps=2", "--set", "lr=1e-2"}).code == 0);
  const auto log = read_jsonl(dir / "run/train_log.jsonl");
  REQUIRE(log.size() == 2);
  CHECK(log[0].at("step") == 1);
  CHECK(log[1].at("stage") == "it");
  CHECK(log[0].at("examples") == 2);
  CHECK(std::isfinite(log[1].at("loss").get<Real>()));

  const GamaModel trained = load_checkpoint(dir / "run/checkpoint");
  const GamaModel init = GamaModel::create(ModelConfig::toy(), 5);
  bool lora_moved = false, base_fixed = true;
  for (const auto& e : init.params().entries()) {
    const bool same = trained.params().at(e.name).value().max_abs_diff(e.tensor.value()) < 1e-6;
    if (e.name.find("lora_up") != std::string::npos && !same) lora_moved = true;
    if (e.name.find("lora") == std::string::npos && e.name != "soft_prompt" && !same) base_fixed = false;
  }
  CHECK(lora_moved);
  CHECK(base_fixed);

  // Same seed and data give the same checkpoint.
  REQUIRE(cli({"train", "--config", cfg.string(), "--out", (dir / "run2").string(), "--set", "steps=2", "--set",
               "lr=1e-2"})
              .code == 0);
  CHECK(read_binary_file(dir / "run/checkpoint" / kArchiveFile) ==
        read_binary_file(dir / "run2/checkpoint" / kArchiveFile));

  CHECK(cli({"train", "--config", cfg.string(), "--out", (dir / "run3").string(), "--set", "steps=1", "--stage", "ft2",
             "--checkpoint", (dir / "run/checkpoint").string()})
            .code == 0);
  CHECK(cli({"train", "--config", cfg.string(), "--out", (dir / "run4").string(), "--set", "steps=1", "--set",
             "model.num_queries=3", "--checkpoint", (dir / "run/checkpoint").string()})
            .code == 2);

  write_text_file(dir / "bad.jsonl", "{\"audio\":\"a.wav\",\"instruction\":\"x\"}\n");
  CHECK(cli({"train", "--config", cfg.string(), "--out", (dir / "run5").string(), "--set", "train_data=bad.jsonl"})
            .code == 3);
}

TEST_CASE("inference is deterministic and logs the rendered prompt") {
  const auto dir = temp_dir("cli_infer");
  const fs::path cfg = write_train_setup(dir);
  REQUIRE(cli({"train", "--config", cfg.string(), "--out", (dir / "run").string(), "--set", "steps=0"}).code == 0);
  const std::vector<std::string> args = {"infer",   "--seed",          "1",
                                         "--out",   (dir / "inf").string(), "--checkpoint",
                                         (dir / "run/checkpoint").string(), "--wav",
                                         (dir / "a.wav").string(),          "--instruction",
                                         "What is heard?",                  "--set",
                                         "max_new=6"};
  const CliResult a = cli(args);
  const CliResult b = cli(args);
  REQUIRE(a.code == 0);
  CHECK(a.out == b.out);

  auto with_tags = args;
  with_tags.insert(with_tags.end(), {"--set", "tags=dog, rain"});
  REQUIRE(cli(with_tags).code == 0);
  auto ft = args;
  ft.insert(ft.end(), {"--set", "prompt=ft"});
  REQUIRE(cli(ft).code == 0);

  const auto log = read_jsonl(dir / "inf/infer_log.jsonl");
  REQUIRE(log.size() == 4);
  const std::string it_prompt = log[2].at("prompt").get<std::string>();
  CHECK(log[2].at("prompt_mode") == "it");
  CHECK(it_prompt.rfind("According to ", 0) == 0);
  CHECK(it_prompt.find(", you are allowed to use or partially use the following tags: dog, rain\nWhat is heard?") !=
        std::string::npos);
  CHECK(log[2].at("soft_prompt_span").at(0) == 13);
  CHECK(log[2].at("soft_prompt_span").at(1) == ModelConfig::toy().soft_prompt_len);
  CHECK(log[2].at("tags").size() == 2);
  CHECK(log[0].at("answer") == log[1].at("answer"));
  CHECK(log[3].at("prompt_mode") == "ft");
  CHECK(log[3].at("prompt") == "What is heard?");

  write_text_file(dir / "broken.wav", "RIFF....WAVEjunk");
  auto bad = args;
  bad[8] = (dir / "broken.wav").string();
  CHECK(cli(bad).code == 3);
  auto bad_mode = args;
  bad_mode.insert(bad_mode.end(), {"--set", "prompt=xx"});
  CHECK(cli(bad_mode).code == 2);
}

TEST_CASE("synthesis output is byte-stable") {
  const auto dir = temp_dir("cli_synth");
  std::string meta;
  for (const auto& m : gama::testing::synthetic_metadata(6)) {
    nlohmann::json j{{"audio_id", m.audio_id}, {"audio_caption", *m.audio_caption}, {"duration_s", 10.0}};
    for (const auto& t : m.audio_tags) j["audio_tags"].push_back({{"label", t.label}, {"score", t.score}});
    for (const auto& e : m.gt_events) j["gt_events"].push_back({{"label", e.label}, {"start", e.start_s}, {"end", e.end_s}});
    if (m.place_context) j["place_context"] = *m.place_context;
    meta += j.dump() + "\n";
  }
  write_text_file(dir / "meta.jsonl", meta);
  std::string pool;
  for (const auto& e : gama::testing::instruction_pool(5).items) {
    pool += nlohmann::json{{"instruction", e.input}, {"response", e.output}}.dump() + "\n";
  }
  write_text_file(dir / "pool.jsonl", pool);
  std::string cpool;
  for (const auto& e : gama::testing::caption_pool(6).items) {
    cpool += nlohmann::json{{"caption", e.input}, {"rewrite", e.output}}.dump() + "\n";
  }
  write_text_file(dir / "cpool.jsonl", cpool);
  write_text_file(dir / "test_ids.txt", "clip1001\n\nclip1004\n");
  write_text_file(dir / "synth.cfg",
                  "metadata = meta.jsonl\nexemplars = pool.jsonl\ncaption_exemplars = cpool.jsonl\n"
                  "test_ids = test_ids.txt\npairs_per_audio = 2\nseed = 9\n");

  const std::string cfg = (dir / "synth.cfg").string();
  REQUIRE(cli({"synth", "--config", cfg, "--out", (dir / "a").string()}).code == 0);
  REQUIRE(cli({"synth", "--config", cfg, "--out", (dir / "b").string(), "--set", "threads=3"}).code == 0);
  for (const char* f : {"records.jsonl", "rejections.jsonl", "train.jsonl", "test.jsonl", "train_ids.txt",
                        "test_ids.txt", "caption_sets.jsonl", "summary.json"}) {
    CHECK(read_text_file(dir / "a" / f) == read_text_file(dir / "b" / f));
  }
  CHECK(read_text_file(dir / "a/test_ids.txt") == "clip1001\nclip1004\n");
  const auto summary = nlohmann::json::parse(read_text_file(dir / "a/summary.json"));
  CHECK(summary.at("audios") == 6);
  CHECK(summary.at("accepted").get<int>() + summary.at("rejected").get<int>() == 12);
  CHECK(summary.at("test_audios") == 2);
  CHECK(summary.at("augmentation_fallbacks") == 0);
  for (const auto& j : read_jsonl(dir / "a/caption_sets.jsonl")) CHECK(j.at("rewrites").size() == 4);

  REQUIRE(cli({"synth", "--config", cfg, "--out", (dir / "c").string(), "--seed", "10"}).code == 0);
  CHECK(read_text_file(dir / "a/records.jsonl") != read_text_file(dir / "c/records.jsonl"));

  write_text_file(dir / "unknown_ids.txt", "nobody\n");
  CHECK(cli({"synth", "--config", cfg, "--out", (dir / "d").string(), "--set", "test_ids=unknown_ids.txt"}).code ==
        3);
  CHECK(cli({"synth", "--config", cfg, "--out", (dir / "e").string(), "--set", "client=http", "--set",
             "endpoint=http://127.0.0.1:9/x", "--set", "api_key_env=GAMA_TEST_NEVER_SET"})
            .code == 2);
}

TEST_CASE("evaluation reports") {
  const auto dir = temp_dir("cli_eval");
  write_text_file(dir / "labels.txt", "dog bark\nrain\nchurch bell\n");
  write_text_file(dir / "preds.jsonl", "{\"caption\":\"dog bark\",\"gold\":\"dog bark\"}\n"
                                       "{\"caption\":\"rain\",\"gold\":\"rain\"}\n"
                                       "{\"caption\":\"church bell\",\"gold\":\"church bell\"}\n");
  InstructionRecord rec{"a1", "Why is the dog barking?", "Because a car passes.", "A dog barks at a car.",
                        {{"Dog", 0.0, 2.0}}};
  write_text_file(dir / "judge.jsonl", records_to_jsonl(std::vector<InstructionRecord>{rec, rec}));
  write_text_file(dir / "eval.cfg", "predictions = preds.jsonl\nlabels_file = labels.txt\njudge_input = judge.jsonl\n");

  const std::string cfg = (dir / "eval.cfg").string();
  const CliResult r = cli({"eval", "--config", cfg, "--seed", "2", "--out", (dir / "out").string()});
  REQUIRE(r.code == 0);
  const std::string tsv = read_text_file(dir / "out/report.tsv");
  CHECK(r.out == tsv);
  CHECK(tsv.find("accuracy\t1.0000\t3\n") != std::string::npos);
  CHECK(tsv.find("mAP\t1.0000\t3\n") != std::string::npos);
  CHECK(tsv.find("overall\t") != std::string::npos);
  const auto report = nlohmann::json::parse(read_text_file(dir / "out/report.json"));
  CHECK(report.at("classification").at("accuracy") == 1.0);
  CHECK(report.at("judge").at("count") == 2);
  CHECK(read_jsonl(dir / "out/judge_transcripts.jsonl").size() == 2);

  const CliResult again = cli({"eval", "--config", cfg, "--seed", "2", "--out", (dir / "out2").string()});
  CHECK(again.out == r.out);

  write_text_file(dir / "bad_preds.jsonl", "{\"caption\":\"dog bark\",\"gold\":\"cat\"}\n");
  CHECK(cli({"eval", "--config", cfg, "--seed", "2", "--out", (dir / "out3").string(), "--set",
             "predictions=bad_preds.jsonl"})
            .code == 3);
}
