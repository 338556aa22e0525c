#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace markvqa {

inline constexpr int kMaxMarkerToken = 110;

/// Word-level vocabulary: special tokens, marker references <m1>..<m110>, digits,
/// punctuation, and whole words. Whitespace is implicit and restored by detokenize().
class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;

    /// Built-in table covering every word the scene templates produce, plus `extra_words`.
    static Vocab standard(const std::vector<std::string>& extra_words = {});
    static Vocab from_tokens(std::vector<std::string> tokens);
    static Vocab load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    bool contains(const std::string& tok) const { return ids_.count(tok) != 0; }
    int id(const std::string& tok) const;

    /// Marker index K for `<mK>` ids, 0 for any other id.
    int marker_index(int id) const;
    int marker_id(int k) const;

    /// Throws ValidationError naming the first character or word outside the vocabulary.
    std::vector<int> tokenize(const std::string& text) const;
    /// Specials (<pad>, <bos>, <eos>) are dropped.
    std::string detokenize(std::span<const int> ids) const;
    /// Joins token strings with the same spacing rules as detokenize().
    static std::string join(const std::vector<std::string>& pieces);

    friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

/// Lower-case words found in `texts` that are not already in the standard table.
std::vector<std::string> collect_extra_words(const std::vector<std::string>& texts);

}  // namespace markvqa
