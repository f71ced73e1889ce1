#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace topiceval {

inline constexpr const char* kUnkToken = "<unk>";
inline constexpr int kUnkId = 0;

// Token -> id bijection. Id 0 is always the <unk> token.
class Vocabulary {
  public:
    Vocabulary();
    explicit Vocabulary(std::vector<std::string> tokens);

    int id(std::string_view token) const;  // unk_id for unknown tokens
    bool contains(std::string_view token) const;
    const std::string& token(int id) const;
    const std::vector<std::string>& tokens() const { return tokens_; }
    int size() const { return static_cast<int>(tokens_.size()); }
    int unk_id() const { return kUnkId; }

  private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

// |V| x D embedding matrix; row i is the vector of vocabulary token i.
struct EmbeddingTable {
    Eigen::MatrixXd matrix;
    bool trainable = false;

    Eigen::Index dim() const { return matrix.cols(); }
    Eigen::Index rows() const { return matrix.rows(); }
};

// Lowercases, splits on whitespace, strips leading/trailing characters
// other than ASCII letters, digits and apostrophes from each piece.
// Bytes >= 0x80 are kept verbatim so multi-byte UTF-8 stays intact.
std::vector<std::string> tokenize(std::string_view raw);

// <unk> plus every token occurring at least min_count times, ordered by
// descending count then lexicographically.
Vocabulary build_vocab(const std::vector<std::vector<std::string>>& corpus,
                       int min_count);

// GloVe text format: one line per word, token then dim floats separated
// by single spaces. Vocabulary tokens missing from the file (including
// <unk>) get rows drawn uniformly from [-0.1, 0.1].
EmbeddingTable load_embeddings(const std::string& path, const Vocabulary& vocab,
                               int dim, std::uint64_t seed);

// Random table in [-0.1, 0.1] for training without pre-trained vectors.
EmbeddingTable init_embeddings(const Vocabulary& vocab, int dim,
                               std::uint64_t seed);

std::vector<int> lookup(std::span<const std::string> tokens,
                        const Vocabulary& vocab);

}  // namespace topiceval
