#include "markvqa/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <limits>
#include <map>
#include <regex>
#include <sstream>

namespace markvqa {

using nlohmann::json;

CoordList extract_coords(const std::string& text) {
    static const std::regex pattern(R"(\(\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*\))");
    CoordList out;
    for (auto it = std::sregex_iterator(text.begin(), text.end(), pattern); it != std::sregex_iterator(); ++it) {
        out.push_back({std::stod((*it)[1].str()), std::stod((*it)[2].str())});
    }
    return out;
}

double match_score(const CoordList& pred, const CoordList& gt) {
    if (gt.empty()) throw ValidationError("match_score needs at least one ground-truth point");
    std::size_t hits = 0;
    for (const auto& g : gt) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& p : pred) best = std::min(best, distance(p, g));
        if (best < kMatchRadius) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(gt.size());
}

std::string normalize_answer(const std::string& s) {
    std::string out;
    bool pending_space = false;
    for (char c : s) {
        const auto uc = static_cast<unsigned char>(c);
        if (std::isspace(uc)) {
            pending_space = !out.empty();
        } else if (std::ispunct(uc)) {
            continue;
        } else {
            if (pending_space) out.push_back(' ');
            pending_space = false;
            out.push_back(static_cast<char>(std::tolower(uc)));
        }
    }
    return out;
}

double accuracy(const std::vector<std::string>& preds, const std::vector<std::string>& gts) {
    if (preds.size() != gts.size()) throw ValidationError("accuracy: prediction and reference counts differ");
    if (preds.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (normalize_answer(preds[i]) == normalize_answer(gts[i])) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(preds.size());
}

std::vector<std::string> whitespace_tokens(const std::string& s) {
    std::istringstream in(s);
    std::vector<std::string> out;
    for (std::string t; in >> t;) out.push_back(t);
    return out;
}

BleuStats& BleuStats::operator+=(const BleuStats& o) {
    for (std::size_t n = 0; n < 4; ++n) {
        matches[n] += o.matches[n];
        totals[n] += o.totals[n];
    }
    candidate_length += o.candidate_length;
    reference_length += o.reference_length;
    return *this;
}

namespace {

std::map<std::vector<std::string>, int> ngram_counts(const std::vector<std::string>& toks, std::size_t n) {
    std::map<std::vector<std::string>, int> counts;
    for (std::size_t i = 0; i + n <= toks.size(); ++i) {
        ++counts[std::vector<std::string>(toks.begin() + static_cast<std::ptrdiff_t>(i),
                                          toks.begin() + static_cast<std::ptrdiff_t>(i + n))];
    }
    return counts;
}

}  // namespace

BleuStats bleu_stats(const std::string& pred, const std::vector<std::string>& refs) {
    const auto cand = whitespace_tokens(pred);
    std::vector<std::vector<std::string>> ref_toks;
    for (const auto& r : refs) ref_toks.push_back(whitespace_tokens(r));

    BleuStats s;
    s.candidate_length = static_cast<double>(cand.size());
    // closest reference length, ties to the shorter one
    double best_diff = std::numeric_limits<double>::infinity();
    for (const auto& r : ref_toks) {
        const double len = static_cast<double>(r.size());
        const double diff = std::abs(len - s.candidate_length);
        if (diff < best_diff || (diff == best_diff && len < s.reference_length)) {
            best_diff = diff;
            s.reference_length = len;
        }
    }
    for (std::size_t n = 1; n <= 4; ++n) {
        const auto cand_counts = ngram_counts(cand, n);
        std::map<std::vector<std::string>, int> max_ref;
        for (const auto& r : ref_toks) {
            for (const auto& [gram, c] : ngram_counts(r, n)) max_ref[gram] = std::max(max_ref[gram], c);
        }
        double matched = 0, total = 0;
        for (const auto& [gram, c] : cand_counts) {
            total += c;
            const auto it = max_ref.find(gram);
            if (it != max_ref.end()) matched += std::min(c, it->second);
        }
        s.matches[n - 1] = matched;
        s.totals[n - 1] = total;
    }
    return s;
}

double bleu_from_stats(const BleuStats& s) {
    // no unigram overlap scores zero outright, whatever the smoothing
    if (s.candidate_length <= 0 || s.matches[0] <= 0) return 0.0;
    double log_sum = 0.0;
    int orders = 0;
    for (std::size_t n = 0; n < 4; ++n) {
        if (s.totals[n] <= 0) continue;
        const double num = s.matches[n] > 0 ? s.matches[n] : kBleuEpsilon;
        log_sum += std::log(num / s.totals[n]);
        ++orders;
    }
    if (orders == 0) return 0.0;
    const double bp =
        s.candidate_length < s.reference_length ? std::exp(1.0 - s.reference_length / s.candidate_length) : 1.0;
    return std::clamp(bp * std::exp(log_sum / orders), 0.0, 1.0);
}

double bleu4(const std::string& pred, const std::vector<std::string>& refs) {
    return bleu_from_stats(bleu_stats(pred, refs));
}

double rouge_l(const std::string& pred, const std::string& ref) {
    const auto a = whitespace_tokens(pred);
    const auto b = whitespace_tokens(ref);
    if (a.empty() || b.empty()) return 0.0;
    std::vector<std::vector<int>> dp(a.size() + 1, std::vector<int>(b.size() + 1, 0));
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            dp[i][j] = a[i - 1] == b[j - 1] ? dp[i - 1][j - 1] + 1 : std::max(dp[i - 1][j], dp[i][j - 1]);
        }
    }
    const double lcs = dp[a.size()][b.size()];
    if (lcs == 0) return 0.0;
    const double precision = lcs / static_cast<double>(a.size());
    const double recall = lcs / static_cast<double>(b.size());
    const double b2 = kRougeBeta * kRougeBeta;
    return (1 + b2) * precision * recall / (recall + b2 * precision);
}

json MetricReport::to_json() const {
    json samples = json::array();
    for (const auto& s : per_sample) {
        json j = {{"scene_id", s.scene_id},
                  {"qa_index", s.qa_index},
                  {"qa_kind", qa_kind_name(s.qa_kind)},
                  {"bleu4", s.bleu4},
                  {"rouge_l", s.rouge_l}};
        j["match"] = s.match ? json(*s.match) : json(nullptr);
        j["correct"] = s.correct ? json(*s.correct) : json(nullptr);
        if (s.empty_prediction) j["flags"] = {"empty_prediction"};
        samples.push_back(std::move(j));
    }
    return {{"match", match},
            {"accuracy", accuracy},
            {"bleu4", bleu4},
            {"rouge_l", rouge_l},
            {"counts", {{"evaluated", evaluated}, {"skipped", skipped}}},
            {"per_sample", samples}};
}

json GenerationRecord::to_json() const {
    json coords = json::array();
    for (const auto& c : resolved_coords) coords.push_back(c ? json::array({c->x, c->y}) : json(nullptr));
    return {{"scene_id", scene_id},   {"qa_index", qa_index},  {"question", question},
            {"text", text},           {"referenced_indices", referenced_indices},
            {"resolved_coords", coords}, {"flags", flags}};
}

GenerationRecord GenerationRecord::from_json(const json& j) {
    GenerationRecord r;
    r.scene_id = j.at("scene_id").get<std::string>();
    r.qa_index = j.at("qa_index").get<int>();
    r.question = j.value("question", "");
    r.text = j.at("text").get<std::string>();
    r.referenced_indices = j.value("referenced_indices", std::vector<int>{});
    if (j.contains("resolved_coords")) {
        for (const auto& c : j.at("resolved_coords")) {
            if (c.is_null()) {
                r.resolved_coords.emplace_back(std::nullopt);
            } else {
                r.resolved_coords.emplace_back(Point{c.at(0).get<double>(), c.at(1).get<double>()});
            }
        }
    }
    r.flags = j.value("flags", std::vector<std::string>{});
    return r;
}

MetricReport evaluate_run(const std::vector<GenerationRecord>& results, const std::vector<Scene>& dataset) {
    std::map<std::string, const Scene*> scenes;
    for (const auto& s : dataset) scenes[s.scene_id] = &s;

    std::vector<std::string> unjoined;
    for (const auto& r : results) {
        const auto it = scenes.find(r.scene_id);
        if (it == scenes.end() || r.qa_index < 0 || r.qa_index >= static_cast<int>(it->second->qa.size())) {
            unjoined.push_back(r.scene_id + "#" + std::to_string(r.qa_index));
        }
    }
    if (!unjoined.empty()) {
        std::string msg = "generation records do not join to the dataset:";
        for (const auto& id : unjoined) msg += " " + id;
        throw ValidationError(msg);
    }

    MetricReport report;
    BleuStats corpus;
    double match_sum = 0, rouge_sum = 0;
    std::size_t match_n = 0, acc_n = 0, acc_hits = 0;
    for (const auto& r : results) {
        const QARecord& qa = scenes.at(r.scene_id)->qa[static_cast<std::size_t>(r.qa_index)];
        SampleScore s;
        s.scene_id = r.scene_id;
        s.qa_index = r.qa_index;
        s.qa_kind = qa.qa_kind;
        s.empty_prediction = whitespace_tokens(r.text).empty();
        if (qa.qa_kind == QaKind::yes_no || qa.qa_kind == QaKind::multi_choice) {
            s.correct = normalize_answer(r.text) == normalize_answer(qa.answer);
            ++acc_n;
            acc_hits += *s.correct ? 1 : 0;
        } else if (qa.qa_kind == QaKind::coordinate) {
            if (qa.answer_coords.empty()) {
                ++report.skipped;
            } else {
                s.match = match_score(extract_coords(r.text), qa.answer_coords);
                match_sum += *s.match;
                ++match_n;
            }
        }
        const BleuStats stats = bleu_stats(r.text, {qa.answer});
        corpus += stats;
        s.bleu4 = s.empty_prediction ? 0.0 : bleu_from_stats(stats);
        s.rouge_l = s.empty_prediction ? 0.0 : rouge_l(r.text, qa.answer);
        rouge_sum += s.rouge_l;
        report.per_sample.push_back(std::move(s));
        ++report.evaluated;
    }
    report.match = match_n ? match_sum / static_cast<double>(match_n) : 0.0;
    report.accuracy = acc_n ? static_cast<double>(acc_hits) / static_cast<double>(acc_n) : 0.0;
    report.bleu4 = bleu_from_stats(corpus);
    report.rouge_l = report.evaluated ? rouge_sum / static_cast<double>(report.evaluated) : 0.0;
    return report;
}

std::string format_report_table(const std::vector<std::pair<std::string, MetricReport>>& rows) {
    std::size_t name_w = 8;
    for (const auto& [name, _] : rows) name_w = std::max(name_w, name.size());
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-*s  %8s  %8s  %8s  %8s\n", static_cast<int>(name_w), "Config", "Match",
                  "Accuracy", "BLEU-4", "ROUGE_L");
    out += buf;
    out += std::string(name_w + 42, '-') + "\n";
    for (const auto& [name, r] : rows) {
        std::snprintf(buf, sizeof buf, "%-*s  %8.2f  %8.2f  %8.2f  %8.2f\n", static_cast<int>(name_w), name.c_str(),
                      100 * r.match, 100 * r.accuracy, 100 * r.bleu4, 100 * r.rouge_l);
        out += buf;
    }
    return out;
}

}  // namespace markvqa
