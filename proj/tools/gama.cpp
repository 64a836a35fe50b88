// gama: train / infer / synth / eval entry point.
//
// Every run reads a flat key=value config (--config) with --set key=value
// overrides; --seed is mandatory (flag or "seed" key). Exit codes: 0 ok,
// 2 usage or config, 3 validation or malformed input, 4 external service.

#include "gama/checkpoint.hpp"
#include "gama/compar.hpp"
#include "gama/errors.hpp"
#include "gama/eval.hpp"
#include "gama/fileio.hpp"
#include "gama/hash.hpp"
#include "gama/kvconfig.hpp"
#include "gama/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>
#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace fs = std::filesystem;
using namespace gama;

namespace {

enum Exit { kOk = 0, kInternal = 1, kUsage = 2, kValidation = 3, kService = 4 };

struct RunOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string stage;
  std::string checkpoint;
  std::string out;
  std::vector<std::string> overrides;
  // infer
  std::string wav;
  std::string instruction;
};

struct Run {
  KvConfig cfg;
  std::uint64_t seed = 0;
  fs::path base;  // relative data paths resolve against the config file's directory
  fs::path out;

  fs::path path(const std::string& key) const {
    fs::path p = cfg.get_string(key);
    return p.is_absolute() ? p : base / p;
  }
  fs::path existing(const std::string& key) const {
    const fs::path p = path(key);
    if (!fs::exists(p)) throw ConfigError("'" + key + "' points at a missing path: " + p.string());
    return p;
  }
};

Run make_run(const RunOptions& o) {
  Run r;
  if (!o.config_path.empty()) {
    if (!fs::exists(o.config_path)) throw ConfigError("config file not found: " + o.config_path);
    r.cfg = KvConfig::load(o.config_path);
    r.base = fs::path(o.config_path).parent_path();
  } else {
    r.base = fs::current_path();
  }
  for (const auto& ov : o.overrides) r.cfg.apply_override(ov);
  if (!o.stage.empty()) r.cfg.set("stage", o.stage);
  if (!o.checkpoint.empty()) r.cfg.set("checkpoint", fs::absolute(o.checkpoint).string());
  if (o.seed) {
    r.seed = *o.seed;
  } else if (r.cfg.has("seed")) {
    r.seed = static_cast<std::uint64_t>(r.cfg.get_int("seed", 0));
  } else {
    throw ConfigError("a seed is required (--seed or 'seed' in the config)");
  }
  r.out = !o.out.empty() ? fs::path(o.out) : r.cfg.has("out") ? r.path("out") : fs::path();
  if (r.out.empty()) throw ConfigError("an output directory is required (--out or 'out' in the config)");
  fs::create_directories(r.out);
  return r;
}

ModelConfig model_config(const KvConfig& cfg) {
  const std::string preset = cfg.get_string("model.preset", "desk");
  ModelConfig m;
  if (preset == "desk") {
    m = ModelConfig::desk();
  } else if (preset == "toy") {
    m = ModelConfig::toy();
  } else {
    throw ConfigError("model.preset must be desk or toy, got '" + preset + "'");
  }
  if (cfg.has("model.tag_vocab")) m.encoder.tag_vocab = cfg.get_list("model.tag_vocab");
  m.use_aggregator = cfg.get_bool("model.use_aggregator", m.use_aggregator);
  m.use_qformer = cfg.get_bool("model.use_qformer", m.use_qformer);
  m.soft_prompt_len = static_cast<std::size_t>(cfg.get_int("model.soft_prompt_len", static_cast<long long>(m.soft_prompt_len)));
  m.qformer.num_queries =
      static_cast<std::size_t>(cfg.get_int("model.num_queries", static_cast<long long>(m.qformer.num_queries)));
  m.decoder.lora_rank = static_cast<std::size_t>(cfg.get_int("model.lora_rank", static_cast<long long>(m.decoder.lora_rank)));
  m.tag_top_k = static_cast<std::size_t>(cfg.get_int("model.tag_top_k", static_cast<long long>(m.tag_top_k)));
  m.tag_threshold = cfg.get_real("model.tag_threshold", m.tag_threshold);
  return m;
}

std::vector<nlohmann::json> read_jsonl(const fs::path& path) {
  std::vector<nlohmann::json> out;
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

fs::path resolve_near(const fs::path& file, const std::string& rel) {
  fs::path p = rel;
  return p.is_absolute() ? p : file.parent_path() / p;
}

std::vector<EventTag> tags_from_json(const nlohmann::json& j) {
  std::vector<EventTag> tags;
  for (const auto& t : j) tags.push_back({t.get<std::string>(), 1.0, std::nullopt});
  return tags;
}

// Model and service text may hold invalid UTF-8; logs keep it with U+FFFD instead of failing.
std::string json_line(const nlohmann::json& j) {
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) + "\n";
}

// ---- train -----------------------------------------------------------------------------

int cmd_train(const RunOptions& o) {
  Run run = make_run(o);
  const StageId stage = parse_stage(run.cfg.get_string("stage", "it"));
  StageConfig sc = StageConfig::defaults(stage);
  sc.lr = run.cfg.get_real("lr", sc.lr);
  sc.batch_size = static_cast<std::size_t>(run.cfg.get_int("batch_size", static_cast<long long>(sc.batch_size)));
  sc.effective_batch =
      static_cast<std::size_t>(run.cfg.get_int("effective_batch", static_cast<long long>(sc.effective_batch)));
  const fs::path data = run.existing("train_data");

  GamaModel model = GamaModel::create(model_config(run.cfg), run.seed);
  if (run.cfg.has("checkpoint")) resume_checkpoint(run.existing("checkpoint"), model);

  const bool qf_stage = stage == StageId::qf1 || stage == StageId::qf2;
  std::vector<InstructionExample> examples;
  std::vector<QFormerExample> qf_examples;
  for (const auto& j : read_jsonl(data)) {
    try {
      PatchSequence patches = model.frontend(load_wav(resolve_near(data, j.at("audio").get<std::string>())));
      if (qf_stage) {
        CaptionSet cs{j.at("caption").get<std::string>(), {}, 1.0};
        if (j.contains("rewrites") && !j.at("rewrites").empty()) {
          cs.rewrites = j.at("rewrites").get<std::vector<std::string>>();
          cs.p_original = j.value("p_original", 0.4);
        }
        qf_examples.push_back({std::move(patches), std::move(cs)});
      } else {
        InstructionExample ex{std::move(patches), j.at("instruction").get<std::string>(),
                              j.at("response").get<std::string>(), std::nullopt};
        if (j.contains("tags")) ex.tags = tags_from_json(j.at("tags"));
        examples.push_back(std::move(ex));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(data.string() + ": " + e.what());
    }
  }
  const std::size_t n = qf_stage ? qf_examples.size() : examples.size();
  if (n == 0) throw ValidationError("training data is empty: " + data.string());

  const std::size_t per_step = std::min(sc.effective_batch, n);
  const long long epochs = run.cfg.get_int("epochs", 1);
  const long long steps =
      run.cfg.get_int("steps", epochs * static_cast<long long>((n + per_step - 1) / per_step));
  if (steps < 0) throw ConfigError("steps must be non-negative");

  Trainer trainer(model, sc);
  Rng rng(derive_seed(run.seed, "train-order"));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  std::ofstream log(run.out / "train_log.jsonl");
  for (long long step = 0; step < steps; ++step) {
    std::vector<std::size_t> idx;
    for (std::size_t k = 0; k < per_step; ++k) {
      if (cursor == n) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    Real loss = 0.0;
    if (qf_stage) {
      std::vector<QFormerExample> batch;
      for (auto i : idx) batch.push_back(qf_examples[i]);
      loss = trainer.qformer_step(batch, rng);
    } else {
      std::vector<InstructionExample> batch;
      for (auto i : idx) batch.push_back(examples[i]);
      loss = trainer.step(batch);
    }
    log << nlohmann::json{{"step", step + 1}, {"stage", stage_name(stage)}, {"loss", loss},
                          {"lr", sc.lr},      {"examples", idx.size()}}
               .dump()
        << "\n"
        << std::flush;
  }
  save_checkpoint(run.out / "checkpoint", model);
  std::cout << "trained " << steps << " step(s) of stage " << stage_name(stage) << "; checkpoint at "
            << (run.out / "checkpoint").string() << "\n";
  return kOk;
}

// ---- infer -----------------------------------------------------------------------------

int cmd_infer(const RunOptions& o) {
  Run run = make_run(o);
  if (!o.wav.empty()) run.cfg.set("wav", fs::absolute(o.wav).string());
  if (!o.instruction.empty()) run.cfg.set("instruction", o.instruction);
  if (!run.cfg.has("checkpoint")) throw ConfigError("infer needs --checkpoint");
  const fs::path ckpt = run.existing("checkpoint");
  const fs::path wav = run.existing("wav");
  const std::string instruction = run.cfg.get_string("instruction");
  const std::string mode_name = run.cfg.get_string("prompt", "it");
  if (mode_name != "it" && mode_name != "ft") throw ConfigError("prompt must be it or ft");
  const PromptMode mode = mode_name == "it" ? PromptMode::instruction_tune : PromptMode::fine_tune;
  const auto max_new = static_cast<std::size_t>(run.cfg.get_int("max_new", 128));

  GamaModel model = load_checkpoint(ckpt);
  const PatchSequence patches = model.frontend(load_wav(wav));
  std::optional<std::vector<EventTag>> tags;
  if (run.cfg.has("tags")) {
    tags.emplace();
    for (const auto& t : run.cfg.get_list("tags")) tags->push_back({t, 1.0, std::nullopt});
  } else if (mode == PromptMode::instruction_tune) {
    tags = model.audio_streams(patches, true).tags;
  }
  const RenderedPrompt prompt = model.render(instruction, tags.value_or(std::vector<EventTag>{}), mode);
  const std::string answer = model.answer(patches, instruction, mode, max_new, tags);

  nlohmann::json tag_list = nlohmann::json::array();
  for (const auto& t : tags.value_or(std::vector<EventTag>{})) tag_list.push_back({{"label", t.label}, {"score", t.score}});
  std::ofstream log(run.out / "infer_log.jsonl", std::ios::app);
  log << json_line({{"wav", wav.string()},
                    {"prompt_mode", mode_name},
                    {"prompt", prompt.text},
                    {"soft_prompt_span", {prompt.soft_start, prompt.soft_length}},
                    {"tags", tag_list},
                    {"answer", answer}});
  std::cout << answer << "\n";
  return kOk;
}

// ---- synth -----------------------------------------------------------------------------

std::unique_ptr<GenerationClient> make_client(const Run& run) {
  const std::string kind = run.cfg.get_string("client", "mock");
  if (kind == "mock") return std::make_unique<MockClient>();
  if (kind == "http") {
    HttpClientOptions opts;
    opts.endpoint = run.cfg.get_string("endpoint");
    opts.model = run.cfg.get_string("service_model", opts.model);
    opts.api_key_env = run.cfg.get_string("api_key_env", opts.api_key_env);
    return std::make_unique<HttpClient>(opts);
  }
  throw ConfigError("client must be mock or http, got '" + kind + "'");
}

TemplateSet load_templates(const Run& run) {
  return TemplateSet::load(run.cfg.has("templates") ? run.existing("templates") : default_template_dir());
}

std::set<std::string> read_id_list(const fs::path& path) {
  std::set<std::string> ids;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    ids.insert(line.substr(b, line.find_last_not_of(" \t\r") - b + 1));
  }
  return ids;
}

void write_ids(const fs::path& path, const std::vector<InstructionRecord>& recs) {
  std::set<std::string> ids;
  for (const auto& r : recs) ids.insert(r.audio_id);
  std::string text;
  for (const auto& id : ids) text += id + "\n";
  write_text_file(path, text);
}

int cmd_synth(const RunOptions& o) {
  Run run = make_run(o);
  const fs::path meta_path = run.existing("metadata");
  const fs::path pool_path = run.existing("exemplars");
  std::optional<fs::path> test_ids_path;
  if (run.cfg.has("test_ids")) test_ids_path = run.existing("test_ids");
  std::optional<fs::path> caption_pool_path;
  if (run.cfg.has("caption_exemplars")) caption_pool_path = run.existing("caption_exemplars");
  const TemplateSet templates = load_templates(run);
  auto client = make_client(run);

  const auto metadata = load_metadata_jsonl(meta_path);
  const auto pool = load_exemplar_pool(pool_path);
  SynthesisOptions opts;
  opts.seed = run.seed;
  opts.pairs_per_audio = static_cast<std::size_t>(run.cfg.get_int("pairs_per_audio", 1));
  opts.threads = static_cast<std::size_t>(run.cfg.get_int("threads", 1));
  opts.rules.tag_vocab = run.cfg.get_list("tag_vocab");

  const SynthesisRun result = run_synthesis(metadata, pool, *client, templates, opts);
  write_text_file(run.out / "records.jsonl", records_to_jsonl(result.accepted));
  std::string rejections;
  for (const auto& r : result.rejected) {
    rejections += json_line({{"audio_id", r.audio_id}, {"reason", r.reason}, {"detail", r.detail}});
  }
  write_text_file(run.out / "rejections.jsonl", rejections);

  const SplitResult parts = split(result.accepted, test_ids_path ? read_id_list(*test_ids_path) : std::set<std::string>{});
  write_text_file(run.out / "train.jsonl", records_to_jsonl(parts.train));
  write_text_file(run.out / "test.jsonl", records_to_jsonl(parts.test));
  write_ids(run.out / "train_ids.txt", parts.train);
  write_ids(run.out / "test_ids.txt", parts.test);

  std::size_t fallbacks = 0;
  if (caption_pool_path) {
    const auto caption_pool = load_exemplar_pool(*caption_pool_path);
    const auto k = static_cast<std::size_t>(run.cfg.get_int("rewrites_per_prompt", 2));
    std::string sets;
    for (const auto& m : metadata) {
      if (!m.audio_caption) continue;
      const AugmentResult aug =
          augment_captions(*m.audio_caption, k, caption_pool, *client, templates, derive_seed(run.seed, "aug:" + m.audio_id));
      if (aug.error) ++fallbacks;
      nlohmann::json j{{"audio_id", m.audio_id},
                       {"caption", aug.captions.original},
                       {"rewrites", aug.captions.rewrites},
                       {"p_original", aug.captions.p_original}};
      if (aug.error) j["error"] = *aug.error;
      sets += json_line(j);
    }
    write_text_file(run.out / "caption_sets.jsonl", sets);
  }

  const nlohmann::json summary{{"audios", metadata.size()},
                               {"accepted", result.accepted.size()},
                               {"rejected", result.rejected.size()},
                               {"train_records", parts.train.size()},
                               {"test_records", parts.test.size()},
                               {"train_audios", parts.train_audios},
                               {"test_audios", parts.test_audios},
                               {"augmentation_fallbacks", fallbacks}};
  write_text_file(run.out / "summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump() << "\n";
  return kOk;
}

// ---- eval ------------------------------------------------------------------------------

std::vector<std::string> read_labels(const Run& run) {
  if (run.cfg.has("labels_file")) {
    std::vector<std::string> labels;
    std::ifstream in(run.existing("labels_file"));
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) labels.push_back(line);
    }
    return labels;
  }
  return run.cfg.get_list("labels");
}

int cmd_eval(const RunOptions& o) {
  Run run = make_run(o);
  std::optional<fs::path> predictions, judge_input;
  if (run.cfg.has("predictions")) predictions = run.existing("predictions");
  if (run.cfg.has("judge_input")) judge_input = run.existing("judge_input");
  if (!predictions && !judge_input) throw ConfigError("eval needs 'predictions' and/or 'judge_input'");

  std::optional<ClassificationReport> cls;
  std::optional<JudgeSummary> judge;
  if (predictions) {
    const auto labels = read_labels(run);
    const HashedBagEmbedder embedder(static_cast<std::size_t>(run.cfg.get_int("embed_dim", 1024)));
    cls = evaluate_classification(load_classification_jsonl(*predictions), labels, embedder);
  }
  if (judge_input) {
    const TemplateSet templates = load_templates(run);
    auto client = make_client(run);
    const JudgeRun jr =
        run_judge(load_judge_jsonl(*judge_input), *client, templates, run.cfg.get_string("rater", "mock"), run.seed);
    std::string transcripts;
    for (const auto& t : jr.transcripts) transcripts += json_line(t);
    write_text_file(run.out / "judge_transcripts.jsonl", transcripts);
    judge = jr.summary;
  }
  const ClassificationReport* c = cls ? &*cls : nullptr;
  const JudgeSummary* js = judge ? &*judge : nullptr;
  const std::string tsv = report_tsv(c, js);
  write_text_file(run.out / "report.tsv", tsv);
  write_text_file(run.out / "report.json", report_json(c, js).dump(2) + "\n");
  std::cout << tsv;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
  CLI::App app{"GAMA audio-language workbench"};
  app.require_subcommand(1);
  RunOptions o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "flat key=value config file");
    sub->add_option("--seed", o.seed, "run seed (required here or as 'seed' in the config)");
    sub->add_option("--stage", o.stage, "training stage: ft1..ft4, it, pt, qf1, qf2");
    sub->add_option("--checkpoint", o.checkpoint, "checkpoint directory to resume from or infer with");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--set", o.overrides, "config override key=value (repeatable)");
  };
  auto* train = app.add_subcommand("train", "train one stage and write a checkpoint");
  auto* infer = app.add_subcommand("infer", "answer an instruction about a wav file");
  auto* synth = app.add_subcommand("synth", "synthesize instruction data from metadata");
  auto* eval = app.add_subcommand("eval", "score predictions and judge answers");
  for (auto* sub : {train, infer, synth, eval}) add_common(sub);
  infer->add_option("--wav", o.wav, "input wav file");
  infer->add_option("--instruction", o.instruction, "instruction text");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (train->parsed()) return cmd_train(o);
    if (infer->parsed()) return cmd_infer(o);
    if (synth->parsed()) return cmd_synth(o);
    if (eval->parsed()) return cmd_eval(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const ExternalServiceError& e) {
    std::cerr << "service error: " << e.what() << "\n";
    return kService;
  } catch (const RawTextError& e) {
    std::cerr << "validation error: " << e.what() << "\n" << e.raw() << "\n";
    return kValidation;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kValidation;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kValidation;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kUsage;
}
