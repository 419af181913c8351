#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmfa/common.hpp"

namespace mmfa {

// Word-level toy vocabulary with the side tables the text attack needs:
// synonym candidates, antonym pairs, stopwords, and a similarity embedding
// per word (bag-of-embeddings cosine is the default sentence similarity).
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;

    // The built-in vocabulary shared by the synthetic benchmark, the
    // tokenizer, and the bundled candidate generator.
    static const Vocabulary& standard();

    int size() const { return static_cast<int>(words_.size()); }
    const std::string& word(int id) const;
    // Returns kUnk for unknown words.
    int id(const std::string& word) const;
    bool contains(const std::string& word) const { return index_.count(word) > 0; }

    bool is_stopword(int id) const;
    bool is_special(int id) const { return id == kPad || id == kUnk; }
    const std::vector<int>& synonyms(int id) const;
    bool are_antonyms(int a, int b) const;

    // Unit-norm similarity embedding of a word (not the model embedding).
    const Vec& similarity_embedding(int id) const;

    // Whitespace tokenizer; unknown words map to kUnk and bump *unk_count.
    TokenSeq tokenize(const std::string& text, int* unk_count = nullptr) const;
    std::string detokenize(const TokenSeq& tokens) const;

    // Construction interface (used by standard() and by tests building tiny
    // vocabularies).
    int add_word(const std::string& word, bool stopword = false);
    void add_synonyms(const std::string& a, const std::string& b);  // symmetric
    void add_antonyms(const std::string& a, const std::string& b);  // symmetric
    // Assigns similarity embeddings: independent seeded unit vectors, then
    // synonym vectors pulled toward their first-listed base word.
    void finalize_similarity(std::uint64_t seed, int dim = 16);

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
    std::vector<bool> stopword_;
    std::vector<std::vector<int>> synonyms_;
    std::vector<std::vector<int>> antonyms_;
    std::vector<Vec> sim_embedding_;
};

// Bag-of-embeddings cosine similarity between two token sequences.
// PAD tokens are ignored; identical sequences score 1.
double sentence_similarity(const Vocabulary& vocab, const TokenSeq& a, const TokenSeq& b);

}  // namespace mmfa
