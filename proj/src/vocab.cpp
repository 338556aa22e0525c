#include "markvqa/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>

#include "markvqa/common.hpp"

namespace markvqa {

namespace {

constexpr const char* kPunct = ".,?!:;()";

const std::vector<std::string>& base_words() {
    static const std::vector<std::string> words = {
        // templates
        "where", "is", "the", "it", "at", "a", "an", "object", "near", "there", "what", "moving", "status", "of",
        "options", "predict", "behavior", "ego", "vehicle", "yes", "no",
        // moving status / behaviour options
        "going", "ahead", "turning", "left", "right", "stopped", "backing", "up", "changing", "lanes", "straight",
        "crawling", "slow", "normal", "fast", "faster", "fastest",
        // colours and shapes
        "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple", "white", "pink", "brown", "lime",
        "rectangle", "circle", "triangle",
        // default classes
        "car", "truck", "bus", "pedestrian", "bicycle", "cone", "barrier",
        // option letters
        "A", "B", "C", "D", "E", "F", "G", "H", "I", "J", "K", "L", "M", "N", "O", "P", "Q", "R", "S", "T", "U",
    };
    return words;
}

bool is_word_char(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }

enum class Kind { word, digit, punct, special };

Kind kind_of(const std::string& tok) {
    if (tok.size() == 1 && std::isdigit(static_cast<unsigned char>(tok[0]))) return Kind::digit;
    if (tok.size() == 1 && std::string_view(kPunct).find(tok[0]) != std::string_view::npos) return Kind::punct;
    if (!tok.empty() && tok[0] == '<') return Kind::special;
    return Kind::word;
}

}  // namespace

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
    Vocab v;
    v.tokens_ = std::move(tokens);
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
        if (!v.ids_.emplace(v.tokens_[i], static_cast<int>(i)).second) {
            throw ValidationError("duplicate vocabulary token: " + v.tokens_[i]);
        }
    }
    if (v.tokens_.size() < 3 || v.tokens_[kPad] != "<pad>" || v.tokens_[kBos] != "<bos>" || v.tokens_[kEos] != "<eos>") {
        throw ValidationError("vocabulary must start with <pad>, <bos>, <eos>");
    }
    return v;
}

Vocab Vocab::standard(const std::vector<std::string>& extra_words) {
    std::vector<std::string> tokens = {"<pad>", "<bos>", "<eos>"};
    for (int k = 1; k <= kMaxMarkerToken; ++k) tokens.push_back("<m" + std::to_string(k) + ">");
    for (char d = '0'; d <= '9'; ++d) tokens.emplace_back(1, d);
    for (const char* p = kPunct; *p; ++p) tokens.emplace_back(1, *p);
    std::set<std::string> seen(tokens.begin(), tokens.end());
    for (const auto& w : base_words()) {
        if (seen.insert(w).second) tokens.push_back(w);
    }
    std::vector<std::string> extra = extra_words;
    std::sort(extra.begin(), extra.end());
    for (const auto& w : extra) {
        if (seen.insert(w).second) tokens.push_back(w);
    }
    return from_tokens(std::move(tokens));
}

Vocab Vocab::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read vocabulary " + path.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) tokens.push_back(line);
    return from_tokens(std::move(tokens));
}

void Vocab::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write vocabulary " + path.string());
    for (const auto& t : tokens_) out << t << '\n';
}

int Vocab::id(const std::string& tok) const {
    const auto it = ids_.find(tok);
    if (it == ids_.end()) throw ValidationError("token not in vocabulary: '" + tok + "'");
    return it->second;
}

int Vocab::marker_index(int id) const {
    if (id < 3 || id >= 3 + kMaxMarkerToken) return 0;
    return id - 2;
}

int Vocab::marker_id(int k) const {
    if (k < 1 || k > kMaxMarkerToken) throw ValidationError("marker index out of vocabulary range: " + std::to_string(k));
    return 2 + k;
}

std::vector<int> Vocab::tokenize(const std::string& text) const {
    std::vector<int> ids;
    std::size_t i = 0;
    while (i < text.size()) {
        const char c = text[i];
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
        } else if (c == '<') {
            const auto close = text.find('>', i);
            if (close == std::string::npos) throw ValidationError("unterminated special token in: " + text);
            ids.push_back(id(text.substr(i, close - i + 1)));
            i = close + 1;
        } else if (is_word_char(c)) {
            std::size_t j = i;
            while (j < text.size() && is_word_char(text[j])) ++j;
            const std::string word = text.substr(i, j - i);
            if (!contains(word)) throw ValidationError("out-of-vocabulary word '" + word + "'");
            ids.push_back(id(word));
            i = j;
        } else if (std::isdigit(static_cast<unsigned char>(c)) || std::string_view(kPunct).find(c) != std::string_view::npos) {
            ids.push_back(id(std::string(1, c)));
            ++i;
        } else {
            throw ValidationError(std::string("out-of-vocabulary character '") + c + "'");
        }
    }
    return ids;
}

std::string Vocab::join(const std::vector<std::string>& pieces) {
    // No space before closing punctuation or after '(', and none inside numbers
    // such as "12.5" or "(3,4)".
    std::string out;
    for (std::size_t i = 0; i < pieces.size(); ++i) {
        const std::string& cur = pieces[i];
        if (i > 0) {
            const std::string& prev = pieces[i - 1];
            const Kind pk = kind_of(prev), ck = kind_of(cur);
            bool space = true;
            if (ck == Kind::punct && cur != "(") space = false;
            if (prev == "(") space = false;
            if (pk == Kind::digit && ck == Kind::digit) space = false;
            if ((prev == "." || prev == ",") && ck == Kind::digit && i >= 2 && kind_of(pieces[i - 2]) == Kind::digit) {
                space = false;
            }
            if (space) out.push_back(' ');
        }
        out += cur;
    }
    return out;
}

std::string Vocab::detokenize(std::span<const int> ids) const {
    std::vector<std::string> pieces;
    for (int id : ids) {
        if (id == kPad || id == kBos || id == kEos) continue;
        pieces.push_back(token(id));
    }
    return join(pieces);
}

std::vector<std::string> collect_extra_words(const std::vector<std::string>& texts) {
    const auto& base = base_words();
    std::set<std::string> extra;
    for (const auto& t : texts) {
        std::size_t i = 0;
        while (i < t.size()) {
            if (!is_word_char(t[i])) {
                ++i;
                continue;
            }
            std::size_t j = i;
            while (j < t.size() && is_word_char(t[j])) ++j;
            // skip the inside of <...> specials
            if (i > 0 && t[i - 1] == '<') {
                i = j;
                continue;
            }
            std::string w = t.substr(i, j - i);
            if (std::find(base.begin(), base.end(), w) == base.end()) extra.insert(std::move(w));
            i = j;
        }
    }
    return {extra.begin(), extra.end()};
}

}  // namespace markvqa
