#include "gama/eval.hpp"

#include "gama/errors.hpp"
#include "gama/fileio.hpp"
#include "gama/hash.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <regex>
#include <sstream>

namespace gama {

std::vector<std::string> word_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur += static_cast<char>(std::tolower(c));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<Real> HashedBagEmbedder::embed(const std::string& text) const {
  const auto words = word_tokens(text);
  if (words.empty()) throw ValidationError("embedder: text has no tokens");
  std::vector<Real> v(dim_, 0.0);
  for (const auto& w : words) {
    const std::uint64_t h = fnv1a(w);
    v[h % dim_] += (h >> 63) != 0 ? -1.0 : 1.0;
  }
  Real norm = 0.0;
  for (Real x : v) norm += x * x;
  norm = std::sqrt(norm);
  // Every word landing in colliding buckets with opposite signs can cancel out.
  if (norm == 0.0) throw ValidationError("embedder: embedding of '" + text + "' cancelled to zero");
  for (Real& x : v) x /= norm;
  return v;
}

Real cosine(std::span<const Real> a, std::span<const Real> b) {
  if (a.size() != b.size()) throw ShapeError("cosine: length mismatch");
  Real dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw ValidationError("cosine: zero vector");
  return dot / std::sqrt(na * nb);
}

std::vector<Real> retrieval_scores(const std::string& caption, const std::vector<std::string>& labels,
                                   const TextEmbedder& embedder) {
  if (labels.empty()) throw ValidationError("retrieval: empty label list");
  if (word_tokens(caption).empty()) throw ValidationError("retrieval: empty caption");
  const auto c = embedder.embed(caption);
  std::vector<Real> scores;
  scores.reserve(labels.size());
  for (const auto& l : labels) scores.push_back(cosine(c, embedder.embed(l)));
  return scores;
}

std::size_t retrieval_classify(const std::string& caption, const std::vector<std::string>& labels,
                               const TextEmbedder& embedder) {
  const auto scores = retrieval_scores(caption, labels, embedder);
  // max_element returns the first maximum.
  return static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

Real accuracy(const std::vector<std::string>& preds, const std::vector<std::string>& golds) {
  if (preds.empty()) throw ValidationError("accuracy: no items");
  if (preds.size() != golds.size()) throw ValidationError("accuracy: prediction/gold length mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == golds[i] ? 1 : 0;
  return static_cast<Real>(hits) / static_cast<Real>(preds.size());
}

Real micro_f1(const std::vector<std::set<std::string>>& preds, const std::vector<std::set<std::string>>& golds) {
  if (preds.empty()) throw ValidationError("micro_f1: no items");
  if (preds.size() != golds.size()) throw ValidationError("micro_f1: prediction/gold length mismatch");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (const auto& p : preds[i]) (golds[i].contains(p) ? tp : fp) += 1;
    for (const auto& g : golds[i]) fn += preds[i].contains(g) ? 0 : 1;
  }
  const std::size_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : static_cast<Real>(2 * tp) / static_cast<Real>(denom);
}

Real mean_average_precision(const std::vector<std::vector<Real>>& scores,
                            const std::vector<std::set<std::size_t>>& golds) {
  if (scores.empty()) throw ValidationError("mAP: no items");
  if (scores.size() != golds.size()) throw ValidationError("mAP: score/gold length mismatch");
  const std::size_t n_labels = scores.front().size();
  for (const auto& row : scores) {
    if (row.size() != n_labels) throw ValidationError("mAP: ragged score matrix");
  }
  for (const auto& g : golds) {
    for (std::size_t l : g) {
      if (l >= n_labels) throw ValidationError("mAP: gold label index out of range");
    }
  }
  Real total = 0.0;
  std::size_t counted = 0;
  std::vector<std::size_t> order(scores.size());
  for (std::size_t l = 0; l < n_labels; ++l) {
    std::size_t positives = 0;
    for (const auto& g : golds) positives += g.contains(l) ? 1 : 0;
    if (positives == 0) continue;
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a][l] > scores[b][l]; });
    Real ap = 0.0;
    std::size_t hits = 0;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
      if (golds[order[rank]].contains(l)) {
        ++hits;
        ap += static_cast<Real>(hits) / static_cast<Real>(rank + 1);
      }
    }
    total += ap / static_cast<Real>(positives);
    ++counted;
  }
  if (counted == 0) throw ValidationError("mAP: no label has a positive item");
  return total / static_cast<Real>(counted);
}

std::vector<ClassificationItem> load_classification_jsonl(const std::filesystem::path& path) {
  std::vector<ClassificationItem> out;
  std::istringstream in(read_text_file(path));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ClassificationItem item;
      item.id = j.value("id", std::to_string(lineno));
      item.caption = j.at("caption").get<std::string>();
      if (j.at("gold").is_string()) {
        item.gold.insert(j.at("gold").get<std::string>());
      } else {
        for (const auto& g : j.at("gold")) item.gold.insert(g.get<std::string>());
      }
      if (item.gold.empty()) throw ValidationError("empty gold set");
      out.push_back(std::move(item));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

ClassificationReport evaluate_classification(const std::vector<ClassificationItem>& items,
                                              const std::vector<std::string>& labels, const TextEmbedder& embedder) {
  if (items.empty()) throw ValidationError("classification: no items");
  if (labels.empty()) throw ValidationError("classification: no labels");
  ClassificationReport rep;
  rep.items = items.size();
  rep.labels = labels.size();
  std::vector<std::vector<Real>> scores;
  std::vector<std::set<std::size_t>> gold_idx;
  std::vector<std::set<std::string>> pred_sets, gold_sets;
  std::size_t hits = 0;
  for (const auto& item : items) {
    auto s = retrieval_scores(item.caption, labels, embedder);
    const auto best = static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin());
    rep.predictions.push_back(labels[best]);
    hits += item.gold.contains(labels[best]) ? 1 : 0;
    pred_sets.push_back({labels[best]});
    gold_sets.push_back(item.gold);
    std::set<std::size_t> gi;
    for (const auto& g : item.gold) {
      const auto it = std::find(labels.begin(), labels.end(), g);
      if (it == labels.end()) throw ValidationError("classification: gold label '" + g + "' not in the label list");
      gi.insert(static_cast<std::size_t>(it - labels.begin()));
    }
    gold_idx.push_back(std::move(gi));
    scores.push_back(std::move(s));
  }
  rep.accuracy = static_cast<Real>(hits) / static_cast<Real>(items.size());
  rep.micro_f1 = micro_f1(pred_sets, gold_sets);
  rep.map = mean_average_precision(scores, gold_idx);
  return rep;
}

// ---- judge -----------------------------------------------------------------------------------

std::string build_judge_prompt(const std::string& response, const std::string& scene_caption,
                               std::span<const GtEvent> events, const TemplateSet& templates) {
  auto blank = [](const std::string& s) { return s.find_first_not_of(" \t\r\n") == std::string::npos; };
  if (blank(response)) throw ValidationError("judge prompt: empty response");
  if (blank(scene_caption)) throw ValidationError("judge prompt: empty scene caption");
  if (events.empty()) throw ValidationError("judge prompt: missing gold events");
  return render_template(templates.judge,
                         {{"caption", scene_caption}, {"events", format_events(events)}, {"response", response}});
}

JudgeVerdict parse_judge_scores(const std::string& raw, const std::string& rater) {
  JudgeVerdict v;
  v.rater = rater;
  auto axis = [&](const char* name, Real& out) {
    const std::regex re(std::string(name) + R"(\s*[:=]\s*([-+]?\d+(?:\.\d+)?))", std::regex::icase);
    std::smatch m;
    if (!std::regex_search(raw, m, re)) throw ParseError(std::string("judge reply has no ") + name + " score", raw);
    const Real x = std::stod(m[1].str());
    out = std::clamp(x, 1.0, 5.0);
    if (out != x) v.clamped = true;
  };
  axis("clarity", v.clarity);
  axis("correctness", v.correctness);
  axis("engagement", v.engagement);
  return v;
}

JudgeSummary aggregate(std::span<const JudgeVerdict> verdicts) {
  if (verdicts.empty()) throw ValidationError("aggregate: no verdicts");
  JudgeSummary s;
  s.count = verdicts.size();
  for (const auto& v : verdicts) {
    s.clarity += v.clarity;
    s.correctness += v.correctness;
    s.engagement += v.engagement;
  }
  const auto n = static_cast<Real>(verdicts.size());
  s.clarity /= n;
  s.correctness /= n;
  s.engagement /= n;
  s.overall = (s.clarity + s.correctness + s.engagement) / 3.0;
  return s;
}

std::string one_decimal(Real v) {
  // Nudge by a few ulps so values such as 4.05 computed as 4.04999... round up.
  const Real scaled = v * 10.0;
  const Real r = std::round(scaled + std::copysign(1e-9 * std::max(1.0, std::fabs(scaled)), scaled)) / 10.0;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", r == 0.0 ? 0.0 : r);
  return buf;
}

std::vector<JudgeItem> load_judge_jsonl(const std::filesystem::path& path) {
  std::vector<JudgeItem> out;
  for (const auto& rec : load_records_jsonl(path)) {
    out.push_back({rec.audio_id, rec.response, rec.scene_caption, rec.events});
  }
  return out;
}

JudgeRun run_judge(const std::vector<JudgeItem>& items, GenerationClient& client, const TemplateSet& templates,
                   const std::string& rater, std::uint64_t seed) {
  JudgeRun run;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& item = items[i];
    const std::string prompt = build_judge_prompt(item.response, item.scene_caption, item.events, templates);
    const std::string raw = client.complete(prompt, derive_seed(seed, item.id + "#" + std::to_string(i)));
    JudgeVerdict v = parse_judge_scores(raw, rater);
    run.transcripts.push_back({{"id", item.id},
                               {"rater", rater},
                               {"prompt", prompt},
                               {"reply", raw},
                               {"clarity", v.clarity},
                               {"correctness", v.correctness},
                               {"engagement", v.engagement},
                               {"clamped", v.clamped}});
    run.verdicts.push_back(std::move(v));
  }
  run.summary = aggregate(run.verdicts);
  return run;
}

namespace {
std::string fixed4(Real v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}
}  // namespace

std::string report_tsv(const ClassificationReport* cls, const JudgeSummary* judge) {
  std::string out = "metric\tvalue\tn\n";
  if (cls != nullptr) {
    const std::string n = std::to_string(cls->items);
    out += "accuracy\t" + fixed4(cls->accuracy) + "\t" + n + "\n";
    out += "micro_f1\t" + fixed4(cls->micro_f1) + "\t" + n + "\n";
    out += "mAP\t" + fixed4(cls->map) + "\t" + n + "\n";
  }
  if (judge != nullptr) {
    const std::string n = std::to_string(judge->count);
    out += "clarity\t" + one_decimal(judge->clarity) + "\t" + n + "\n";
    out += "correctness\t" + one_decimal(judge->correctness) + "\t" + n + "\n";
    out += "engagement\t" + one_decimal(judge->engagement) + "\t" + n + "\n";
    out += "overall\t" + one_decimal(judge->overall) + "\t" + n + "\n";
  }
  return out;
}

nlohmann::json report_json(const ClassificationReport* cls, const JudgeSummary* judge) {
  nlohmann::json j = nlohmann::json::object();
  if (cls != nullptr) {
    j["classification"] = {{"items", cls->items},       {"labels", cls->labels}, {"accuracy", cls->accuracy},
                           {"micro_f1", cls->micro_f1}, {"mAP", cls->map},      {"predictions", cls->predictions}};
  }
  if (judge != nullptr) {
    j["judge"] = {{"count", judge->count},
                  {"clarity", judge->clarity},
                  {"correctness", judge->correctness},
                  {"engagement", judge->engagement},
                  {"overall", judge->overall},
                  {"overall_reported", one_decimal(judge->overall)}};
  }
  return j;
}

}  // namespace gama
