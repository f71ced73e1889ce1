#include "topiceval/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "topiceval/error.hpp"
#include "topiceval/util.hpp"

namespace topiceval {

namespace {

bool is_word_char(unsigned char c) {
    // Non-ASCII bytes are treated as word characters.
    return std::isalnum(c) || c == '\'' || c >= 0x80;
}

}  // namespace

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{kUnkToken}) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.empty() || tokens_[kUnkId] != kUnkToken)
        throw Error("vocabulary must start with the <unk> token");
    index_.reserve(tokens_.size());
    for (int i = 0; i < static_cast<int>(tokens_.size()); ++i) {
        auto [_, inserted] = index_.emplace(tokens_[i], i);
        if (!inserted) throw Error("duplicate vocabulary token: " + tokens_[i]);
    }
}

int Vocabulary::id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnkId : it->second;
}

bool Vocabulary::contains(std::string_view token) const {
    return index_.count(std::string(token)) > 0;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || id >= size()) throw Error("vocabulary id out of range");
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::string> tokenize(std::string_view raw) {
    std::vector<std::string> out;
    std::size_t i = 0;
    const std::size_t n = raw.size();
    while (i < n) {
        while (i < n && std::isspace(static_cast<unsigned char>(raw[i]))) ++i;
        std::size_t start = i;
        while (i < n && !std::isspace(static_cast<unsigned char>(raw[i]))) ++i;
        if (i == start) continue;
        std::size_t lo = start, hi = i;
        while (lo < hi && !is_word_char(static_cast<unsigned char>(raw[lo]))) ++lo;
        while (hi > lo && !is_word_char(static_cast<unsigned char>(raw[hi - 1]))) --hi;
        if (lo == hi) continue;
        std::string token(raw.substr(lo, hi - lo));
        for (char& c : token)
            c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        out.push_back(std::move(token));
    }
    return out;
}

Vocabulary build_vocab(const std::vector<std::vector<std::string>>& corpus,
                       int min_count) {
    if (min_count < 1) throw Error("min_count must be >= 1");
    std::map<std::string, long> counts;  // ordered map: lexicographic ties for free
    for (const auto& utterance : corpus)
        for (const auto& token : utterance) ++counts[token];

    std::vector<std::pair<std::string, long>> kept;
    kept.reserve(counts.size());
    for (const auto& [token, count] : counts) {
        if (token == kUnkToken) continue;  // reserved, never duplicated
        if (count >= min_count) kept.emplace_back(token, count);
    }
    std::stable_sort(kept.begin(), kept.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });

    std::vector<std::string> tokens;
    tokens.reserve(kept.size() + 1);
    tokens.emplace_back(kUnkToken);
    for (auto& [token, _] : kept) tokens.push_back(std::move(token));
    return Vocabulary(std::move(tokens));
}

EmbeddingTable init_embeddings(const Vocabulary& vocab, int dim, std::uint64_t seed) {
    if (dim < 1) throw Error("embedding dimension must be >= 1");
    EmbeddingTable table;
    table.matrix.resize(vocab.size(), dim);
    Rng rng(seed);
    for (Eigen::Index r = 0; r < table.matrix.rows(); ++r)
        for (Eigen::Index c = 0; c < table.matrix.cols(); ++c)
            table.matrix(r, c) = uniform_real(rng, -0.1, 0.1);
    return table;
}

EmbeddingTable load_embeddings(const std::string& path, const Vocabulary& vocab,
                               int dim, std::uint64_t seed) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open embedding file: " + path);

    // Missing rows keep their seeded random init.
    EmbeddingTable table = init_embeddings(vocab, dim, seed);

    std::string line;
    long line_no = 0;
    bool first_data_line = true;
    std::vector<double> values(static_cast<std::size_t>(dim));
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::string token;
        fields >> token;
        std::size_t got = 0;
        double v;
        while (fields >> v) {
            if (got < values.size()) values[got] = v;
            ++got;
        }
        if (!fields.eof()) {
            throw Error("malformed embedding line " + std::to_string(line_no) +
                        " in " + path + ": non-numeric field");
        }
        if (got != static_cast<std::size_t>(dim)) {
            if (first_data_line)
                throw Error("embedding dimension mismatch in " + path + ": file has " +
                            std::to_string(got) + " values per line, expected " +
                            std::to_string(dim));
            throw Error("malformed embedding line " + std::to_string(line_no) + " in " +
                        path + ": expected " + std::to_string(dim) + " values, got " +
                        std::to_string(got));
        }
        first_data_line = false;
        if (vocab.contains(token)) {
            const int row = vocab.id(token);
            for (int c = 0; c < dim; ++c) table.matrix(row, c) = values[static_cast<std::size_t>(c)];
        }
    }
    if (!table.matrix.allFinite())
        throw Error("embedding file " + path + " contains non-finite values");
    return table;
}

std::vector<int> lookup(std::span<const std::string> tokens, const Vocabulary& vocab) {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& token : tokens) ids.push_back(vocab.id(token));
    return ids;
}

}  // namespace topiceval
