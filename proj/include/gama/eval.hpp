#pragma once

// Evaluation: retrieval-based classification of generated captions,
// classification metrics and judge-based scoring of open-ended answers.

#include "gama/compar.hpp"

#include <json.hpp>

#include <set>
#include <span>
#include <string>
#include <vector>

namespace gama {

class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  // Unit-norm embedding. ValidationError for text without any token.
  virtual std::vector<Real> embed(const std::string& text) const = 0;
};

// Lower-cased alphanumeric word counts hashed (FNV-1a) into dim signed
// buckets, then L2-normalised.
class HashedBagEmbedder final : public TextEmbedder {
 public:
  explicit HashedBagEmbedder(std::size_t dim = 1024) : dim_(dim) {}
  std::vector<Real> embed(const std::string& text) const override;
  std::size_t dim() const noexcept { return dim_; }

 private:
  std::size_t dim_;
};

std::vector<std::string> word_tokens(const std::string& text);
Real cosine(std::span<const Real> a, std::span<const Real> b);

// argmax_i cos(embed(caption), embed(labels[i])); ties go to the lowest index.
std::size_t retrieval_classify(const std::string& caption, const std::vector<std::string>& labels,
                               const TextEmbedder& embedder);
// Cosine score of the caption against every label.
std::vector<Real> retrieval_scores(const std::string& caption, const std::vector<std::string>& labels,
                                   const TextEmbedder& embedder);

// All three throw ValidationError on empty input or mismatched lengths.
Real accuracy(const std::vector<std::string>& preds, const std::vector<std::string>& golds);
// 2TP / (2TP + FP + FN) pooled over items; 0 when the denominator is 0.
Real micro_f1(const std::vector<std::set<std::string>>& preds, const std::vector<std::set<std::string>>& golds);
// scores[item][label]; golds[item] holds label indices. AP ranks items by
// descending score, ties by item index; labels without positives are skipped.
Real mean_average_precision(const std::vector<std::vector<Real>>& scores,
                            const std::vector<std::set<std::size_t>>& golds);

struct ClassificationItem {
  std::string id;
  std::string caption;            // generated caption
  std::set<std::string> gold;     // one label for single-label sets
};

std::vector<ClassificationItem> load_classification_jsonl(const std::filesystem::path& path);

struct ClassificationReport {
  std::size_t items = 0;
  std::size_t labels = 0;
  Real accuracy = 0.0;  // top-1 retrieved label ∈ gold
  Real micro_f1 = 0.0;  // predicted set = {top-1 retrieved label}
  Real map = 0.0;       // cosine scores as ranking scores
  std::vector<std::string> predictions;
};

ClassificationReport evaluate_classification(const std::vector<ClassificationItem>& items,
                                              const std::vector<std::string>& labels, const TextEmbedder& embedder);

// ---- judge ---------------------------------------------------------------------------

struct JudgeVerdict {
  Real clarity = 0.0;
  Real correctness = 0.0;
  Real engagement = 0.0;
  std::string rater;
  bool clamped = false;  // some raw score was outside [1,5]
};

// ValidationError for an empty response, caption or event list.
std::string build_judge_prompt(const std::string& response, const std::string& scene_caption,
                               std::span<const GtEvent> events, const TemplateSet& templates);

// Case-insensitive "Clarity: x" style lines, integer or decimal, clamped to
// [1,5]. ParseError carrying the raw text when an axis is missing.
JudgeVerdict parse_judge_scores(const std::string& raw, const std::string& rater);

struct JudgeSummary {
  std::size_t count = 0;
  Real clarity = 0.0;
  Real correctness = 0.0;
  Real engagement = 0.0;
  Real overall = 0.0;  // mean of the three axis means
};

// ValidationError when empty.
JudgeSummary aggregate(std::span<const JudgeVerdict> verdicts);

// Value rounded half away from zero to one decimal, as text ("4.0").
std::string one_decimal(Real v);

struct JudgeItem {
  std::string id;
  std::string response;
  std::string scene_caption;
  std::vector<GtEvent> events;
};

std::vector<JudgeItem> load_judge_jsonl(const std::filesystem::path& path);

struct JudgeRun {
  std::vector<JudgeVerdict> verdicts;
  std::vector<nlohmann::json> transcripts;  // one per item: id, prompt, raw reply, scores
  JudgeSummary summary;
};

JudgeRun run_judge(const std::vector<JudgeItem>& items, GenerationClient& client, const TemplateSet& templates,
                   const std::string& rater, std::uint64_t seed);

// Tab-separated "metric<TAB>value<TAB>n" table and a JSON summary.
std::string report_tsv(const ClassificationReport* cls, const JudgeSummary* judge);
nlohmann::json report_json(const ClassificationReport* cls, const JudgeSummary* judge);

}  // namespace gama
