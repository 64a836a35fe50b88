#include "gama/compar.hpp"

#include "gama/errors.hpp"
#include "gama/fileio.hpp"
#include "gama/hash.hpp"

#include <httplib.h>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <numeric>
#include <regex>
#include <sstream>
#include <thread>

namespace gama {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string join(const std::vector<std::string>& items, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += sep;
    out += items[i];
  }
  return out;
}

std::vector<std::string> split_lines(std::string_view text) {
  std::vector<std::string> lines;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

template <typename F>
void for_each_jsonl(const std::filesystem::path& path, F&& f) {
  const auto lines = split_lines(read_text_file(path));
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(lines[i]);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(i + 1) + ": " + e.what());
    }
    try {
      f(j);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(i + 1) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(i + 1) + ": " + e.what());
    }
  }
}

std::optional<std::string> opt_string(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<std::string>();
}

std::vector<std::string> string_list(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return {};
  return j.at(key).get<std::vector<std::string>>();
}

GtEvent event_from_json(const nlohmann::json& e) {
  if (e.is_array()) return {e.at(0).get<std::string>(), e.at(1).get<Real>(), e.at(2).get<Real>()};
  return {e.at("label").get<std::string>(), e.at("start").get<Real>(), e.at("end").get<Real>()};
}

std::string exemplar_block(std::span<const Exemplar> exemplars, std::string_view in_tag, std::string_view out_tag) {
  std::string out;
  for (std::size_t i = 0; i < exemplars.size(); ++i) {
    if (i > 0) out += "\n";
    out += std::string(in_tag) + ": " + exemplars[i].input + "\n" + std::string(out_tag) + ": " + exemplars[i].output +
           "\n";
  }
  return out;
}

}  // namespace

// ---- events & metadata ---------------------------------------------------------------

std::string format_seconds(Real s) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, s);
  std::string out(buf, res.ptr);
  if (out.find_first_of(".en") == std::string::npos) out += ".0";
  return out;
}

std::string format_event(const GtEvent& e) {
  return "(" + e.label + "-" + format_seconds(e.start_s) + "-" + format_seconds(e.end_s) + ")";
}

std::string format_events(std::span<const GtEvent> events) {
  std::string out;
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (i > 0) out += ", ";
    out += format_event(events[i]);
  }
  return out;
}

void AudioMetadata::validate() const {
  if (trim(audio_id).empty()) throw ValidationError("metadata: empty audio_id");
  for (const auto& e : gt_events) {
    if (e.label.empty()) throw ValidationError("metadata " + audio_id + ": event without label");
    if (!(e.start_s >= 0.0) || !(e.start_s <= e.end_s)) {
      throw ValidationError("metadata " + audio_id + ": bad event span " + format_event(e));
    }
    if (duration_s && e.end_s > *duration_s) {
      throw ValidationError("metadata " + audio_id + ": event " + format_event(e) + " ends after the clip (" +
                            format_seconds(*duration_s) + " s)");
    }
  }
  for (const auto& t : audio_tags) {
    if (!(t.score >= 0.0 && t.score <= 1.0)) throw ValidationError("metadata " + audio_id + ": tag score outside [0,1]");
  }
}

AudioMetadata metadata_from_json(const nlohmann::json& j) {
  AudioMetadata m;
  m.audio_id = j.at("audio_id").get<std::string>();
  m.frame_caption = opt_string(j, "frame_caption");
  m.detected_objects = string_list(j, "detected_objects");
  m.image_labels = string_list(j, "image_labels");
  m.place_context = opt_string(j, "place_context");
  m.audio_caption = opt_string(j, "audio_caption");
  if (j.contains("audio_tags") && !j.at("audio_tags").is_null()) {
    for (const auto& t : j.at("audio_tags")) {
      EventTag tag;
      if (t.is_string()) {
        tag.label = t.get<std::string>();
        tag.score = 1.0;
      } else {
        tag.label = t.at("label").get<std::string>();
        tag.score = t.value("score", 1.0);
        if (t.contains("start") && t.contains("end")) tag.span = {t.at("start").get<Real>(), t.at("end").get<Real>()};
      }
      m.audio_tags.push_back(std::move(tag));
    }
  }
  if (j.contains("gt_events") && !j.at("gt_events").is_null()) {
    for (const auto& e : j.at("gt_events")) m.gt_events.push_back(event_from_json(e));
  }
  if (j.contains("duration_s") && !j.at("duration_s").is_null()) m.duration_s = j.at("duration_s").get<Real>();
  m.validate();
  return m;
}

std::vector<AudioMetadata> load_metadata_jsonl(const std::filesystem::path& path) {
  std::vector<AudioMetadata> out;
  for_each_jsonl(path, [&](const nlohmann::json& j) { out.push_back(metadata_from_json(j)); });
  return out;
}

ExemplarPool load_exemplar_pool(const std::filesystem::path& path) {
  ExemplarPool pool;
  for_each_jsonl(path, [&](const nlohmann::json& j) {
    if (j.contains("instruction")) {
      pool.items.push_back({j.at("instruction").get<std::string>(), j.at("response").get<std::string>()});
    } else {
      pool.items.push_back({j.at("caption").get<std::string>(), j.at("rewrite").get<std::string>()});
    }
  });
  return pool;
}

nlohmann::json record_to_json(const InstructionRecord& r) {
  nlohmann::json events = nlohmann::json::array();
  for (const auto& e : r.events) events.push_back({{"label", e.label}, {"start", e.start_s}, {"end", e.end_s}});
  return {{"audio_id", r.audio_id},
          {"instruction", r.instruction},
          {"response", r.response},
          {"caption", r.scene_caption},
          {"events", events}};
}

InstructionRecord record_from_json(const nlohmann::json& j) {
  InstructionRecord r;
  r.audio_id = j.at("audio_id").get<std::string>();
  r.instruction = j.at("instruction").get<std::string>();
  r.response = j.at("response").get<std::string>();
  r.scene_caption = j.value("caption", "");
  if (j.contains("events")) {
    for (const auto& e : j.at("events")) r.events.push_back(event_from_json(e));
  }
  return r;
}

std::string records_to_jsonl(std::span<const InstructionRecord> records) {
  std::string out;
  for (const auto& r : records) {
    out += record_to_json(r).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) + "\n";
  }
  return out;
}

std::vector<InstructionRecord> load_records_jsonl(const std::filesystem::path& path) {
  std::vector<InstructionRecord> out;
  for_each_jsonl(path, [&](const nlohmann::json& j) { out.push_back(record_from_json(j)); });
  return out;
}

// ---- mock client --------------------------------------------------------------------

namespace {

std::string last_field(const std::vector<std::string>& lines, std::string_view key) {
  for (auto it = lines.rbegin(); it != lines.rend(); ++it) {
    if (it->rfind(key, 0) == 0) return trim(std::string_view(*it).substr(key.size()));
  }
  return {};
}

std::string lower_first(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(s[0])));
  return s;
}

std::string strip_period(std::string s) {
  while (!s.empty() && (s.back() == '.' || s.back() == ' ')) s.pop_back();
  return s;
}

std::vector<GtEvent> parse_event_list(const std::string& text) {
  static const std::regex re(R"(\(([^()]*)-([0-9.]+)-([0-9.]+)\))");
  std::vector<GtEvent> out;
  for (auto it = std::sregex_iterator(text.begin(), text.end(), re); it != std::sregex_iterator(); ++it) {
    out.push_back({(*it)[1].str(), std::stod((*it)[2].str()), std::stod((*it)[3].str())});
  }
  return out;
}

std::string mock_scene(const std::vector<std::string>& lines, std::uint64_t h) {
  static const char* kJoin[] = {"heard in", "recorded in", "captured in"};
  std::string caption = strip_period(last_field(lines, "Audio caption: "));
  const std::string place = last_field(lines, "Place: ");
  if (place.empty() || place == kUnavailable) return caption + ".";
  return caption + ", " + kJoin[h % 3] + " a " + lower(place) + ".";
}

std::string mock_pair(const std::vector<std::string>& lines, std::uint64_t h) {
  const std::string caption = strip_period(last_field(lines, "Caption: "));
  auto events = parse_event_list(last_field(lines, "Events: "));
  // Long background events first makes the mock pick foreground sounds.
  std::stable_sort(events.begin(), events.end(),
                   [](const GtEvent& a, const GtEvent& b) { return a.end_s - a.start_s < b.end_s - b.start_s; });
  std::string instruction;
  std::string response;
  if (events.size() >= 2 && events[0].label != events[1].label && h % 2 == 0) {
    const auto& a = events[0];
    const auto& b = events[1];
    instruction = "Compare when the " + lower(a.label) + " and the " + lower(b.label) +
                  " occur. What does their timing suggest about the scene?";
    response = "The " + lower(a.label) + " is heard from " + format_seconds(a.start_s) + " to " +
               format_seconds(a.end_s) + " seconds, while the " + lower(b.label) + " spans " +
               format_seconds(b.start_s) + " to " + format_seconds(b.end_s) + " seconds. Together this suggests " +
               lower_first(caption) + ".";
  } else if (!events.empty()) {
    const auto& a = events[0];
    instruction = "Explain how the " + lower(a.label) +
                  " relates to the rest of the scene and what it suggests about the setting.";
    response = "The " + lower(a.label) + " first appears at " + format_seconds(a.start_s) +
               " seconds and fits the overall scene: " + lower_first(caption) + ".";
  } else {
    instruction = "Describe the sequence of sounds in the clip and infer what activity is most likely taking place.";
    response = "The clip suggests the following: " + lower_first(caption) + ".";
  }
  return "Instruction: " + instruction + "\nResponse: " + response + "\n";
}

std::string mock_rewrites(const std::vector<std::string>& lines, std::uint64_t h) {
  static const char* kVivid[] = {"Vividly,", "In rich detail,", "Unmistakably,", "With striking clarity,"};
  static const char* kDiverse[] = {"Put differently,", "In other words,", "Described another way,", "Alternatively,"};
  const bool vivid = last_field(lines, "STYLE: ") == "vivid";
  const std::string caption = lower_first(strip_period(last_field(lines, "Caption: ")));
  std::size_t k = 0;
  static const std::regex kCount(R"(^Write exactly (\d+) lines)");
  for (const auto& l : lines) {
    std::smatch m;
    if (std::regex_search(l, m, kCount)) k = std::stoul(m[1].str());
  }
  std::string out;
  for (std::size_t i = 0; i < k; ++i) {
    const char* lead = (vivid ? kVivid : kDiverse)[(h + i) % 4];
    out += "Rewrite " + std::to_string(i + 1) + ": " + lead + " " + caption + ".\n";
  }
  return out;
}

std::string mock_judge(std::uint64_t h) {
  auto score = [&](int i) { return std::to_string(1 + static_cast<int>((h >> (8 * i)) % 5)); };
  return "Clarity: " + score(0) + "\nCorrectness: " + score(1) + "\nEngagement: " + score(2) + "\n";
}

}  // namespace

std::string MockClient::complete(const std::string& prompt, std::uint64_t seed) {
  const auto lines = split_lines(prompt);
  const std::string task = lines.empty() ? std::string() : last_field({lines.front()}, "TASK: ");
  const std::uint64_t h = fnv1a(prompt, fnv1a_u64(seed));
  if (task == "scene_caption") return mock_scene(lines, h);
  if (task == "instruction_pair") return mock_pair(lines, h);
  if (task == "caption_rewrite") return mock_rewrites(lines, h);
  if (task == "judge") return mock_judge(h);
  throw ExternalServiceError("mock client: unknown task '" + task + "'");
}

// ---- http client ----------------------------------------------------------------------

HttpClient::HttpClient(HttpClientOptions opts) : opts_(std::move(opts)) {
  static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(opts_.endpoint, m, re)) throw ConfigError("http client: bad endpoint '" + opts_.endpoint + "'");
  scheme_host_ = m[1].str();
  path_ = m[2].matched ? m[2].str() : "/";
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
  if (scheme_host_.rfind("https", 0) == 0) throw ConfigError("http client: built without TLS support");
#endif
  if (opts_.attempts < 1) throw ConfigError("http client: attempts must be >= 1");
  const char* key = std::getenv(opts_.api_key_env.c_str());
  if (key == nullptr || *key == '\0') {
    throw ConfigError("http client: credential variable " + opts_.api_key_env + " is not set");
  }
  api_key_ = key;
}

std::string HttpClient::complete(const std::string& prompt, std::uint64_t seed) {
  const nlohmann::json body = {{"model", opts_.model},
                               {"messages", {{{"role", "user"}, {"content", prompt}}}},
                               {"temperature", 0},
                               {"seed", seed}};
  const std::string payload = body.dump();
  auto delay = opts_.backoff;
  std::string last_error;
  for (int attempt = 1; attempt <= opts_.attempts; ++attempt) {
    httplib::Client cli(scheme_host_);
    cli.set_connection_timeout(opts_.timeout);
    cli.set_read_timeout(opts_.timeout);
    const httplib::Headers headers{{"Authorization", "Bearer " + api_key_}};
    const auto res = cli.Post(path_, headers, payload, "application/json");
    bool retryable = true;
    if (!res) {
      last_error = "request failed: " + httplib::to_string(res.error());
    } else if (res->status == 200) {
      try {
        return nlohmann::json::parse(res->body).at("choices").at(0).at("message").at("content").get<std::string>();
      } catch (const nlohmann::json::exception& e) {
        last_error = std::string("malformed response: ") + e.what();
      }
    } else {
      last_error = "HTTP " + std::to_string(res->status);
      retryable = res->status == 408 || res->status == 429 || res->status >= 500;
    }
    if (!retryable || attempt == opts_.attempts) break;
    std::this_thread::sleep_for(delay);
    delay *= 2;
  }
  throw ExternalServiceError("generation service: " + last_error);
}

// ---- templates ----------------------------------------------------------------------------

std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& values) {
  std::string out;
  std::size_t pos = 0;
  while (true) {
    const auto open = tmpl.find("{{", pos);
    if (open == std::string_view::npos) {
      out.append(tmpl.substr(pos));
      return out;
    }
    const auto close = tmpl.find("}}", open + 2);
    if (close == std::string_view::npos) throw ConfigError("template: unterminated placeholder");
    out.append(tmpl.substr(pos, open - pos));
    const std::string name(tmpl.substr(open + 2, close - open - 2));
    const auto it = values.find(name);
    if (it == values.end()) throw ConfigError("template: no value for placeholder '" + name + "'");
    out += it->second;
    pos = close + 2;
  }
}

TemplateSet TemplateSet::load(const std::filesystem::path& dir) {
  auto read = [&](const char* file) {
    try {
      return read_text_file(dir / file);
    } catch (const FormatError& e) {
      throw ConfigError(std::string("templates: ") + e.what());
    }
  };
  return {read("scene_caption.v1.txt"), read("instruction_pair.v1.txt"), read("caption_rewrite_vivid.v1.txt"),
          read("caption_rewrite_diverse.v1.txt"), read("judge.v1.txt")};
}

std::filesystem::path default_template_dir() { return GAMA_TEMPLATE_DIR; }

// ---- pipeline ------------------------------------------------------------------------------

std::string build_scene_caption_prompt(const AudioMetadata& meta, const TemplateSet& templates) {
  if (trim(meta.audio_id).empty()) throw ValidationError("scene prompt: missing audio_id");
  if (!meta.audio_caption || trim(*meta.audio_caption).empty()) {
    throw ValidationError("scene prompt: " + meta.audio_id + " has no audio caption");
  }
  if (meta.audio_tags.empty()) throw ValidationError("scene prompt: " + meta.audio_id + " has no audio tags");
  auto or_unavailable = [](const std::optional<std::string>& s) {
    return s && !trim(*s).empty() ? trim(*s) : std::string(kUnavailable);
  };
  auto list_or_unavailable = [](const std::vector<std::string>& v) {
    return v.empty() ? std::string(kUnavailable) : join(v, ", ");
  };
  std::vector<std::string> tags;
  for (const auto& t : meta.audio_tags) {
    char score[32];
    std::snprintf(score, sizeof score, "%.2f", t.score);
    tags.push_back(t.label + " (" + score + ")");
  }
  return render_template(templates.scene_caption, {{"frame_caption", or_unavailable(meta.frame_caption)},
                                                   {"detected_objects", list_or_unavailable(meta.detected_objects)},
                                                   {"image_labels", list_or_unavailable(meta.image_labels)},
                                                   {"place_context", or_unavailable(meta.place_context)},
                                                   {"audio_caption", trim(*meta.audio_caption)},
                                                   {"audio_tags", join(tags, ", ")}});
}

std::vector<Exemplar> sample_exemplars(const ExemplarPool& pool, std::size_t n, std::mt19937_64& rng) {
  if (n > pool.size()) {
    throw ValidationError("sample_exemplars: asked for " + std::to_string(n) + " from a pool of " +
                          std::to_string(pool.size()));
  }
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates: the first n slots end up a uniform random n-permutation.
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  std::vector<Exemplar> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(pool.items[idx[i]]);
  return out;
}

std::string build_instruction_prompt(const std::string& caption, std::span<const GtEvent> events,
                                     std::span<const Exemplar> exemplars, const TemplateSet& templates) {
  if (trim(caption).empty()) throw ValidationError("instruction prompt: empty caption");
  return render_template(templates.instruction_pair,
                         {{"exemplars", exemplar_block(exemplars, "Instruction", "Response")},
                          {"caption", trim(caption)},
                          {"events", events.empty() ? std::string(kUnavailable) : format_events(events)}});
}

std::pair<std::string, std::string> parse_instruction_pair(const std::string& raw) {
  static const std::regex re(R"(instruction\s*:([\s\S]*?)(?:response|output)\s*:([\s\S]*))", std::regex::icase);
  std::smatch m;
  if (!std::regex_search(raw, m, re)) {
    throw SynthesisError("could not find an Instruction/Response pair in the generated text", raw);
  }
  auto instruction = trim(m[1].str());
  auto response = trim(m[2].str());
  if (instruction.empty() || response.empty()) throw SynthesisError("generated pair has an empty part", raw);
  return {instruction, response};
}

InstructionRecord synthesize_pair(const std::string& audio_id, const std::string& caption,
                                  std::span<const GtEvent> events, std::span<const Exemplar> exemplars,
                                  GenerationClient& client, const TemplateSet& templates, std::uint64_t seed) {
  const std::string prompt = build_instruction_prompt(caption, events, exemplars, templates);
  auto [instruction, response] = parse_instruction_pair(client.complete(prompt, seed));
  return {audio_id, std::move(instruction), std::move(response), trim(caption),
          std::vector<GtEvent>(events.begin(), events.end())};
}

namespace {

std::string normalize_words(std::string_view s) {
  std::string out;
  bool space = false;
  for (unsigned char c : s) {
    if (std::isalnum(c)) {
      if (space && !out.empty()) out += ' ';
      out += static_cast<char>(std::tolower(c));
      space = false;
    } else {
      space = true;
    }
  }
  return out;
}

std::set<std::string> word_set(std::string_view s) {
  std::set<std::string> words;
  std::istringstream in(normalize_words(s));
  std::string w;
  while (in >> w) words.insert(w);
  return words;
}

}  // namespace

Verdict validate_record(const InstructionRecord& rec, const ValidationRules& rules) {
  const std::string instruction = trim(rec.instruction);
  const std::string response = trim(rec.response);
  if (trim(rec.audio_id).empty() || instruction.empty() || response.empty()) {
    return {false, std::string(kRuleEmptyField)};
  }
  if (instruction.size() < rules.min_instruction_chars || instruction.size() > rules.max_instruction_chars ||
      response.size() < rules.min_response_chars || response.size() > rules.max_response_chars) {
    return {false, std::string(kRuleLengthBounds)};
  }
  std::vector<std::string> tags = rules.tag_vocab;
  for (const auto& e : rec.events) tags.push_back(e.label);
  const std::string norm = normalize_words(instruction);
  for (const auto& tag : tags) {
    const std::string t = normalize_words(tag);
    if (t.empty()) continue;
    for (const char* lead : {"what is ", "what is the ", "what is a ", "what is an "}) {
      if (norm == lead + t) return {false, std::string(kRuleTagAnswerable)};
    }
  }
  std::set<std::string> words = word_set(instruction);
  words.merge(word_set(response));
  for (const auto& bad : rules.visual_denylist) {
    const std::string b = lower(bad);
    if (words.contains(b) || words.contains(b + "s")) return {false, std::string(kRuleVisualReference)};
  }
  return {};
}

std::string build_rewrite_prompt(const std::string& caption, std::size_t k, RewriteStyle style,
                                 std::span<const Exemplar> exemplars, const TemplateSet& templates) {
  if (trim(caption).empty()) throw ValidationError("rewrite prompt: empty caption");
  if (k == 0) throw ValidationError("rewrite prompt: k must be positive");
  return render_template(style == RewriteStyle::vivid ? templates.rewrite_vivid : templates.rewrite_diverse,
                         {{"k", std::to_string(k)},
                          {"exemplars", exemplar_block(exemplars, "Original", "Rewrite")},
                          {"caption", trim(caption)}});
}

std::vector<std::string> parse_rewrites(const std::string& raw, std::size_t k) {
  static const std::regex re(R"(^\s*rewrite\s*\d+\s*:\s*(.*\S)\s*$)", std::regex::icase);
  std::vector<std::string> out;
  for (const auto& line : split_lines(raw)) {
    std::smatch m;
    if (std::regex_match(line, m, re)) out.push_back(m[1].str());
  }
  if (out.size() != k) {
    throw SynthesisError("expected " + std::to_string(k) + " rewrites, found " + std::to_string(out.size()), raw);
  }
  return out;
}

AugmentResult augment_captions(const std::string& caption, std::size_t k_per_prompt, const ExemplarPool& pool,
                               GenerationClient& client, const TemplateSet& templates, std::uint64_t seed) {
  constexpr std::size_t kExemplars = 5;
  std::mt19937_64 rng(seed);
  AugmentResult result;
  result.captions.original = trim(caption);
  result.captions.p_original = 0.4;
  try {
    for (const RewriteStyle style : {RewriteStyle::vivid, RewriteStyle::diverse}) {
      const auto exemplars = sample_exemplars(pool, kExemplars, rng);
      const std::string prompt = build_rewrite_prompt(caption, k_per_prompt, style, exemplars, templates);
      const auto rewrites = parse_rewrites(client.complete(prompt, derive_seed(seed, prompt)), k_per_prompt);
      result.captions.rewrites.insert(result.captions.rewrites.end(), rewrites.begin(), rewrites.end());
    }
  } catch (const ExternalServiceError& e) {
    result = {{trim(caption), {}, 1.0}, std::string(e.what())};
  } catch (const SynthesisError& e) {
    result = {{trim(caption), {}, 1.0}, std::string(e.what())};
  }
  return result;
}

SplitResult split(std::span<const InstructionRecord> records, const std::set<std::string>& test_audio_ids) {
  std::set<std::string> present;
  for (const auto& r : records) present.insert(r.audio_id);
  for (const auto& id : test_audio_ids) {
    if (!present.contains(id)) throw ValidationError("split: test audio id '" + id + "' has no records");
  }
  SplitResult out;
  std::set<std::string> train_ids;
  std::set<std::string> test_ids;
  for (const auto& r : records) {
    if (test_audio_ids.contains(r.audio_id)) {
      out.test.push_back(r);
      test_ids.insert(r.audio_id);
    } else {
      out.train.push_back(r);
      train_ids.insert(r.audio_id);
    }
  }
  for (const auto& id : test_ids) {
    if (train_ids.contains(id)) throw InternalError("split: audio id '" + id + "' landed in both partitions");
  }
  if (out.train.size() + out.test.size() != records.size()) throw InternalError("split: record count changed");
  out.train_audios = train_ids.size();
  out.test_audios = test_ids.size();
  return out;
}

SynthesisRun run_synthesis(std::span<const AudioMetadata> metadata, const ExemplarPool& pool,
                           GenerationClient& client, const TemplateSet& templates, const SynthesisOptions& opts) {
  for (const auto& m : metadata) m.validate();
  if (opts.exemplars_per_prompt > pool.size()) {
    throw ValidationError("synthesis: exemplar pool has " + std::to_string(pool.size()) + " items, need " +
                          std::to_string(opts.exemplars_per_prompt));
  }

  struct Slot {
    std::vector<InstructionRecord> accepted;
    std::vector<Rejection> rejected;
    std::exception_ptr error;
  };
  std::vector<Slot> slots(metadata.size());

  auto process = [&](std::size_t i) {
    const AudioMetadata& meta = metadata[i];
    Slot& slot = slots[i];
    const std::uint64_t audio_seed = derive_seed(opts.seed, meta.audio_id);
    std::mt19937_64 rng(audio_seed);
    const std::string caption = trim(client.complete(build_scene_caption_prompt(meta, templates), audio_seed));
    if (caption.empty()) {
      slot.rejected.push_back({meta.audio_id, "synthesis_error", "empty scene caption"});
      return;
    }
    for (std::size_t p = 0; p < opts.pairs_per_audio; ++p) {
      const auto exemplars = sample_exemplars(pool, opts.exemplars_per_prompt, rng);
      try {
        InstructionRecord rec = synthesize_pair(meta.audio_id, caption, meta.gt_events, exemplars, client, templates,
                                                derive_seed(audio_seed, "pair" + std::to_string(p)));
        const Verdict v = validate_record(rec, opts.rules);
        if (v.accepted) {
          slot.accepted.push_back(std::move(rec));
        } else {
          slot.rejected.push_back({meta.audio_id, v.reason, rec.instruction});
        }
      } catch (const SynthesisError& e) {
        slot.rejected.push_back({meta.audio_id, "synthesis_error", e.raw()});
      }
    }
  };

  const std::size_t threads = std::max<std::size_t>(1, std::min(opts.threads, metadata.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < metadata.size(); ++i) process(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool_threads;
    for (std::size_t t = 0; t < threads; ++t) {
      pool_threads.emplace_back([&] {
        for (std::size_t i = next++; i < metadata.size(); i = next++) {
          try {
            process(i);
          } catch (...) {
            slots[i].error = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool_threads) t.join();
  }

  SynthesisRun run;
  for (auto& s : slots) {
    if (s.error) std::rethrow_exception(s.error);
    std::move(s.accepted.begin(), s.accepted.end(), std::back_inserter(run.accepted));
    std::move(s.rejected.begin(), s.rejected.end(), std::back_inserter(run.rejected));
  }
  return run;
}

}  // namespace gama
