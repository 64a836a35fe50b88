#pragma once

// Instruction-data synthesis: scene captions from perceiver metadata,
// instruction/response pairs grounded in timestamped events, automatic
// filtering, caption rewrites for Q-Former pretraining and the audio-keyed
// train/test split. Text generation goes through a GenerationClient so the
// whole pipeline runs offline against MockClient.

#include "gama/encoder.hpp"
#include "gama/qformer.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gama {

struct GtEvent {
  std::string label;
  Real start_s = 0.0;
  Real end_s = 0.0;
};

// Shortest round-trip decimal with at least one fractional digit ("10.0", "0.386").
std::string format_seconds(Real s);
// "(Tick-0.386-0.583)"
std::string format_event(const GtEvent& e);
// Events joined by ", ".
std::string format_events(std::span<const GtEvent> events);

struct AudioMetadata {
  std::string audio_id;
  std::optional<std::string> frame_caption;
  std::vector<std::string> detected_objects;
  std::vector<std::string> image_labels;
  std::optional<std::string> place_context;
  std::optional<std::string> audio_caption;
  std::vector<EventTag> audio_tags;
  std::vector<GtEvent> gt_events;
  std::optional<Real> duration_s;

  // ValidationError on an empty id, start > end or spans outside the clip.
  void validate() const;
};

AudioMetadata metadata_from_json(const nlohmann::json& j);
std::vector<AudioMetadata> load_metadata_jsonl(const std::filesystem::path& path);

struct Exemplar {
  std::string input;   // instruction, or original caption for rewrite pools
  std::string output;  // response, or rewritten caption
};

struct ExemplarPool {
  std::vector<Exemplar> items;
  std::size_t size() const noexcept { return items.size(); }
};

// JSONL with {"instruction","response"} or {"caption","rewrite"} objects.
ExemplarPool load_exemplar_pool(const std::filesystem::path& path);

struct InstructionRecord {
  std::string audio_id;
  std::string instruction;
  std::string response;
  std::string scene_caption;
  std::vector<GtEvent> events;
};

nlohmann::json record_to_json(const InstructionRecord& r);
InstructionRecord record_from_json(const nlohmann::json& j);
std::string records_to_jsonl(std::span<const InstructionRecord> records);
std::vector<InstructionRecord> load_records_jsonl(const std::filesystem::path& path);

// ---- generation clients ---------------------------------------------------------

class GenerationClient {
 public:
  virtual ~GenerationClient() = default;
  // seed is a per-request seed derived from the run seed; live services may
  // ignore it. Throws ExternalServiceError on service failure.
  virtual std::string complete(const std::string& prompt, std::uint64_t seed) = 0;
};

// Deterministic offline stand-in: output is a pure function of (prompt, seed).
// Dispatches on the "TASK:" header of the rendered templates and never retries.
class MockClient final : public GenerationClient {
 public:
  std::string complete(const std::string& prompt, std::uint64_t seed) override;
};

struct HttpClientOptions {
  std::string endpoint;  // e.g. https://host/v1/chat/completions
  std::string model = "gpt-4";
  std::string api_key_env = "GAMA_API_KEY";
  int attempts = 3;
  std::chrono::milliseconds backoff{500};  // doubled after each failed attempt
  std::chrono::seconds timeout{60};
};

// Chat-completions style JSON client. The credential is read from the
// environment variable named in the options at construction time.
class HttpClient final : public GenerationClient {
 public:
  explicit HttpClient(HttpClientOptions opts);
  std::string complete(const std::string& prompt, std::uint64_t seed) override;

 private:
  HttpClientOptions opts_;
  std::string api_key_;
  std::string scheme_host_;
  std::string path_;
};

// ---- templates ----------------------------------------------------------------------

// Replaces every {{name}} placeholder. ConfigError when a placeholder has no value.
std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& values);

struct TemplateSet {
  std::string scene_caption;
  std::string instruction_pair;
  std::string rewrite_vivid;
  std::string rewrite_diverse;
  std::string judge;

  static TemplateSet load(const std::filesystem::path& dir);
};

// Template directory compiled in as the default.
std::filesystem::path default_template_dir();

// ---- pipeline stages ------------------------------------------------------------------

inline constexpr std::string_view kUnavailable = "unavailable";

std::string build_scene_caption_prompt(const AudioMetadata& meta, const TemplateSet& templates);

// n distinct items in random order. ValidationError when n > pool size.
std::vector<Exemplar> sample_exemplars(const ExemplarPool& pool, std::size_t n, std::mt19937_64& rng);

std::string build_instruction_prompt(const std::string& caption, std::span<const GtEvent> events,
                                     std::span<const Exemplar> exemplars, const TemplateSet& templates);

// Parses "Instruction: ... Response: ..." (or "Output:") from raw model text.
// SynthesisError carrying the raw text when either part is missing or empty.
std::pair<std::string, std::string> parse_instruction_pair(const std::string& raw);

InstructionRecord synthesize_pair(const std::string& audio_id, const std::string& caption,
                                  std::span<const GtEvent> events, std::span<const Exemplar> exemplars,
                                  GenerationClient& client, const TemplateSet& templates, std::uint64_t seed);

struct ValidationRules {
  std::size_t min_instruction_chars = 8;
  std::size_t max_instruction_chars = 600;
  std::size_t min_response_chars = 8;
  std::size_t max_response_chars = 2000;
  std::vector<std::string> tag_vocab;  // checked together with the record's event labels
  std::vector<std::string> visual_denylist = {"video", "image",   "picture", "photo", "frame",
                                              "watch", "visible", "visual",  "screen", "footage"};
};

// Rule names, in evaluation order.
inline constexpr std::string_view kRuleEmptyField = "empty_field";
inline constexpr std::string_view kRuleLengthBounds = "length_bounds";
inline constexpr std::string_view kRuleTagAnswerable = "tag_answerable";
inline constexpr std::string_view kRuleVisualReference = "visual_reference";

struct Verdict {
  bool accepted = true;
  std::string reason;  // first failing rule; empty when accepted
};

Verdict validate_record(const InstructionRecord& rec, const ValidationRules& rules);

enum class RewriteStyle { vivid = 1, diverse = 2 };

std::string build_rewrite_prompt(const std::string& caption, std::size_t k, RewriteStyle style,
                                 std::span<const Exemplar> exemplars, const TemplateSet& templates);
// "Rewrite <n>: <text>" lines; SynthesisError unless exactly k are found.
std::vector<std::string> parse_rewrites(const std::string& raw, std::size_t k);

struct AugmentResult {
  CaptionSet captions;
  std::optional<std::string> error;  // set when the set fell back to the original only
};

// Both rewrite styles, 5 exemplars each, k rewrites per style, p_original 0.4.
// Any client or parse failure falls back to {original} with p_original 1.
AugmentResult augment_captions(const std::string& caption, std::size_t k_per_prompt, const ExemplarPool& pool,
                               GenerationClient& client, const TemplateSet& templates, std::uint64_t seed);

struct SplitResult {
  std::vector<InstructionRecord> train;
  std::vector<InstructionRecord> test;
  std::size_t train_audios = 0;
  std::size_t test_audios = 0;
};

// ValidationError when a test id has no records; InternalError if the
// partition somehow shares an audio id.
SplitResult split(std::span<const InstructionRecord> records, const std::set<std::string>& test_audio_ids);

struct SynthesisOptions {
  std::uint64_t seed = 0;
  std::size_t pairs_per_audio = 1;
  std::size_t exemplars_per_prompt = 3;
  std::size_t threads = 1;
  ValidationRules rules;
};

struct Rejection {
  std::string audio_id;
  std::string reason;
  std::string detail;
};

struct SynthesisRun {
  std::vector<InstructionRecord> accepted;  // metadata order, then pair index
  std::vector<Rejection> rejected;
};

// Per-audio seeds derive from (seed, audio_id), so results never depend on
// the thread count or scheduling.
SynthesisRun run_synthesis(std::span<const AudioMetadata> metadata, const ExemplarPool& pool,
                           GenerationClient& client, const TemplateSet& templates, const SynthesisOptions& opts);

}  // namespace gama
