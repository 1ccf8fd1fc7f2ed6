#pragma once

#include <cctype>
#include <string>
#include <unordered_map>
#include <vector>

#include "duet/common.hpp"

namespace duet {

// Fixed lowercase whitespace/punctuation tokenizer over a supplied vocabulary,
// with a bank of hashing buckets for unknown words. Deterministic by
// construction. Id layout: 0 = <pad>, 1 = <eot>, vocabulary words, buckets.
class Tokenizer {
  public:
    static constexpr std::int64_t kPadId = 0;
    static constexpr std::int64_t kEotId = 1;

    explicit Tokenizer(std::vector<std::string> vocab = default_vocab(), int hash_buckets = 64)
        : words_(std::move(vocab)), buckets_(hash_buckets) {
        for (size_t i = 0; i < words_.size(); ++i) {
            std::string w = to_lower(words_[i]);
            if (index_.count(w)) throw config_error("duplicate vocabulary word: " + w);
            index_.emplace(std::move(w), std::int64_t(i) + 2);
        }
    }

    std::int64_t vocab_size() const { return 2 + std::int64_t(words_.size()) + buckets_; }

    static std::vector<std::string> split_words(const std::string& text) {
        std::vector<std::string> out;
        std::string cur;
        for (char c : text) {
            if (std::isalnum(static_cast<unsigned char>(c))) {
                cur.push_back(char(std::tolower(static_cast<unsigned char>(c))));
            } else if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        }
        if (!cur.empty()) out.push_back(cur);
        return out;
    }

    std::int64_t word_id(const std::string& word) const {
        std::string w = to_lower(word);
        auto it = index_.find(w);
        if (it != index_.end()) return it->second;
        return 2 + std::int64_t(words_.size()) + std::int64_t(fnv1a(w) % std::uint64_t(buckets_));
    }

    // Word ids followed by the end-of-text id.
    std::vector<std::int64_t> encode(const std::string& text) const {
        std::vector<std::int64_t> ids;
        for (const auto& w : split_words(text)) ids.push_back(word_id(w));
        ids.push_back(kEotId);
        return ids;
    }

    // Default desk-scale vocabulary: template words plus the bundled synthetic
    // class names; everything else lands in the hash buckets.
    static std::vector<std::string> default_vocab() {
        return {"a",      "photo",  "of",       "the",    "an",    "this",  "is",
                "circle", "square", "triangle", "cross",  "ring",  "stripe", "dot",
                "red",    "green",  "blue",     "yellow", "small", "large", "image",
                "picture", "drawing", "shape"};
    }

  private:
    std::vector<std::string> words_;
    int buckets_;
    std::unordered_map<std::string, std::int64_t> index_;
};

}  // namespace duet
