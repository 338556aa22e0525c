#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "markvqa/common.hpp"
#include "markvqa/scene.hpp"

namespace markvqa {

inline constexpr double kMatchRadius = 16.0;
inline constexpr double kBleuEpsilon = 1e-9;
inline constexpr double kRougeBeta = 1.2;

using CoordList = std::vector<Point>;

/// Every "(x,y)" with decimal numbers (optional spaces inside the parentheses), in order.
CoordList extract_coords(const std::string& text);

/// Fraction of ground-truth points with some prediction closer than 16 px.
/// A prediction may satisfy several ground-truth points. Requires gt non-empty.
double match_score(const CoordList& pred, const CoordList& gt);

/// Lower-case, drop punctuation, collapse whitespace.
std::string normalize_answer(const std::string& s);

/// Mean exact agreement after normalize_answer().
double accuracy(const std::vector<std::string>& preds, const std::vector<std::string>& gts);

std::vector<std::string> whitespace_tokens(const std::string& s);

/// Clipped n-gram statistics for one candidate against its references.
struct BleuStats {
    std::array<double, 4> matches{};
    std::array<double, 4> totals{};
    double candidate_length = 0;
    double reference_length = 0;  // closest reference length

    BleuStats& operator+=(const BleuStats& o);
};

BleuStats bleu_stats(const std::string& pred, const std::vector<std::string>& refs);

/// BLEU-4 from (possibly corpus-summed) statistics. Orders with no candidate
/// n-grams are left out of the geometric mean; zero match counts get epsilon.
double bleu_from_stats(const BleuStats& stats);

/// Sentence BLEU-4.
double bleu4(const std::string& pred, const std::vector<std::string>& refs);

/// LCS-based F-measure with recall weighted by beta = 1.2.
double rouge_l(const std::string& pred, const std::string& ref);

struct SampleScore {
    std::string scene_id;
    int qa_index = 0;
    QaKind qa_kind = QaKind::open;
    std::optional<double> match;     // coordinate records with ground-truth points
    std::optional<bool> correct;     // multi_choice / yes_no records
    double bleu4 = 0;
    double rouge_l = 0;
    bool empty_prediction = false;
};

struct MetricReport {
    double match = 0;
    double accuracy = 0;
    double bleu4 = 0;
    double rouge_l = 0;
    std::vector<SampleScore> per_sample;
    std::size_t evaluated = 0;
    std::size_t skipped = 0;  // coordinate records without ground-truth points

    nlohmann::json to_json() const;
};

/// One generated answer joined to the dataset by (scene_id, qa_index).
struct GenerationRecord {
    std::string scene_id;
    int qa_index = 0;
    std::string question;
    std::string text;
    std::vector<int> referenced_indices;
    std::vector<std::optional<Point>> resolved_coords;
    std::vector<std::string> flags;

    nlohmann::json to_json() const;
    static GenerationRecord from_json(const nlohmann::json& j);
};

/// Routes yes_no/multi_choice to accuracy, coordinate to match, everything to BLEU/ROUGE.
/// Throws ValidationError listing any record that does not join to the dataset.
MetricReport evaluate_run(const std::vector<GenerationRecord>& results, const std::vector<Scene>& dataset);

/// Fixed-width table with the Match / Accuracy / BLEU-4 / ROUGE_L columns.
std::string format_report_table(const std::vector<std::pair<std::string, MetricReport>>& rows);

}  // namespace markvqa
