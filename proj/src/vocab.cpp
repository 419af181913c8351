#include "mmfa/vocab.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mmfa {

int Vocabulary::add_word(const std::string& word, bool stopword) {
    auto it = index_.find(word);
    if (it != index_.end()) return it->second;
    int id = static_cast<int>(words_.size());
    words_.push_back(word);
    index_[word] = id;
    stopword_.push_back(stopword);
    synonyms_.emplace_back();
    antonyms_.emplace_back();
    return id;
}

void Vocabulary::add_synonyms(const std::string& a, const std::string& b) {
    int ia = add_word(a), ib = add_word(b);
    synonyms_[ia].push_back(ib);
    synonyms_[ib].push_back(ia);
}

void Vocabulary::add_antonyms(const std::string& a, const std::string& b) {
    int ia = add_word(a), ib = add_word(b);
    antonyms_[ia].push_back(ib);
    antonyms_[ib].push_back(ia);
}

const std::string& Vocabulary::word(int id) const {
    if (id < 0 || id >= size()) throw InputError("vocab: word id out of range");
    return words_[id];
}

int Vocabulary::id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
}

bool Vocabulary::is_stopword(int id) const {
    return id >= 0 && id < size() && stopword_[id];
}

const std::vector<int>& Vocabulary::synonyms(int id) const {
    if (id < 0 || id >= size()) throw InputError("vocab: word id out of range");
    return synonyms_[id];
}

bool Vocabulary::are_antonyms(int a, int b) const {
    if (a < 0 || a >= size() || b < 0 || b >= size()) return false;
    const auto& lst = antonyms_[a];
    return std::find(lst.begin(), lst.end(), b) != lst.end();
}

const Vec& Vocabulary::similarity_embedding(int id) const {
    if (id < 0 || id >= static_cast<int>(sim_embedding_.size())) {
        throw StateError("vocab: similarity embeddings not finalized");
    }
    return sim_embedding_[id];
}

void Vocabulary::finalize_similarity(std::uint64_t seed, int dim) {
    Rng rng(seed);
    sim_embedding_.assign(words_.size(), Vec());
    for (size_t i = 0; i < words_.size(); ++i) {
        Vec v(dim);
        for (int d = 0; d < dim; ++d) v(d) = rng.uniform(-1.0, 1.0);
        v.normalize();
        sim_embedding_[i] = v;
    }
    // Pull each synonym toward the lowest-id member of its group so that the
    // bundled generator's candidates survive the cosine filter.
    for (size_t i = 0; i < words_.size(); ++i) {
        for (int s : synonyms_[i]) {
            if (static_cast<int>(i) < s) {
                Vec mixed = 0.9 * sim_embedding_[i] + 0.1 * sim_embedding_[s];
                mixed.normalize();
                sim_embedding_[s] = mixed;
            }
        }
    }
}

TokenSeq Vocabulary::tokenize(const std::string& text, int* unk_count) const {
    TokenSeq out;
    std::istringstream ss(text);
    std::string w;
    while (ss >> w) {
        std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::tolower(c); });
        int tid = id(w);
        if (tid == kUnk && unk_count) ++*unk_count;
        out.push_back(tid);
    }
    return out;
}

std::string Vocabulary::detokenize(const TokenSeq& tokens) const {
    std::string out;
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] == kPad) continue;
        if (!out.empty()) out += ' ';
        out += word(tokens[i]);
    }
    return out;
}

const Vocabulary& Vocabulary::standard() {
    static const Vocabulary vocab = [] {
        Vocabulary v;
        v.add_word("<pad>");
        v.add_word("<unk>");
        // Scene words.
        for (const char* w : {"red", "green", "blue", "yellow"}) v.add_word(w);
        for (const char* w : {"square", "circle", "triangle"}) v.add_word(w);
        for (const char* w : {"left", "right", "above", "below"}) v.add_word(w);
        for (const char* w : {"one", "two"}) v.add_word(w);
        // Question scaffolding.
        for (const char* w : {"what", "is", "the", "of", "how", "many", "are", "there"}) {
            v.add_word(w, /*stopword=*/true);
        }
        for (const char* w : {"color", "shape", "shapes"}) v.add_word(w);
        // Substitution candidates. These never appear in benchmark sentences,
        // so victim models see them as out-of-distribution embeddings.
        v.add_synonyms("red", "crimson");
        v.add_synonyms("red", "scarlet");
        v.add_synonyms("green", "emerald");
        v.add_synonyms("green", "lime");
        v.add_synonyms("blue", "azure");
        v.add_synonyms("blue", "navy");
        v.add_synonyms("yellow", "gold");
        v.add_synonyms("yellow", "amber");
        v.add_synonyms("square", "box");
        v.add_synonyms("square", "block");
        v.add_synonyms("circle", "disk");
        v.add_synonyms("circle", "ring");
        v.add_synonyms("triangle", "wedge");
        v.add_synonyms("triangle", "cone");
        v.add_synonyms("left", "leftward");
        v.add_synonyms("right", "rightward");
        v.add_synonyms("above", "atop");
        v.add_synonyms("above", "over");
        v.add_synonyms("below", "under");
        v.add_synonyms("below", "beneath");
        v.add_synonyms("one", "single");
        v.add_synonyms("two", "pair");
        v.add_antonyms("left", "right");
        v.add_antonyms("above", "below");
        v.add_antonyms("one", "two");
        // Unrelated distractors for filter tests.
        v.add_word("zebra");
        v.add_word("piano");
        v.finalize_similarity(/*seed=*/0x5eedU);
        return v;
    }();
    return vocab;
}

double sentence_similarity(const Vocabulary& vocab, const TokenSeq& a, const TokenSeq& b) {
    auto bag = [&vocab](const TokenSeq& toks) {
        Vec sum;
        int n = 0;
        for (int t : toks) {
            if (t == Vocabulary::kPad) continue;
            const Vec& e = vocab.similarity_embedding(t);
            if (n == 0) sum = e;
            else sum += e;
            ++n;
        }
        if (n == 0) return Vec();
        return Vec(sum / n);
    };
    Vec va = bag(a), vb = bag(b);
    if (va.size() == 0 && vb.size() == 0) return 1.0;
    if (va.size() == 0 || vb.size() == 0) return 0.0;
    double denom = va.norm() * vb.norm();
    if (denom == 0.0) return 0.0;
    return va.dot(vb) / denom;
}

}  // namespace mmfa
