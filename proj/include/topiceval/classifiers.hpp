#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <variant>
#include <vector>

#include "topiceval/netcore.hpp"
#include "topiceval/text.hpp"

namespace topiceval {

// Reserved label for non-topical chit-chat.
inline constexpr const char* kPhaticTopic = "Phatic";

inline constexpr int kModelFormatVersion = 1;
inline constexpr const char* kTokenizerType = "lowercase_whitespace_apostrophe";

enum class ModelKind { dan, adan };

std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& s);

// Bag-of-words classifier: mean of word embeddings through dense layers.
struct DanModel {
    Vocabulary vocab;
    EmbeddingTable embeddings;
    std::vector<DenseLayer> hidden;
    DenseLayer output;
    std::vector<std::string> labels;

    int num_labels() const { return static_cast<int>(labels.size()); }
};

// DAN plus a K x |V| table of per-topic word saliencies. Each topic row
// produces its own attention-weighted utterance representation; the K x D
// stack is flattened row-major into the first dense layer.
struct AdanModel {
    Vocabulary vocab;
    EmbeddingTable embeddings;
    Eigen::MatrixXd attention;  // K x |V|
    std::vector<DenseLayer> hidden;
    DenseLayer output;
    std::vector<std::string> labels;
    bool divide_by_length = true;  // the 1/L factor on the weighted average

    int num_labels() const { return static_cast<int>(labels.size()); }
};

using Model = std::variant<DanModel, AdanModel>;

ModelKind kind_of(const Model& model);
const std::vector<std::string>& labels_of(const Model& model);

struct DanCache {
    Eigen::VectorXd mean;                // s, the averaged embedding
    std::vector<Eigen::VectorXd> pre;    // pre-activations per hidden layer
    std::vector<Eigen::VectorXd> act;    // post-ReLU activations
    Eigen::VectorXd logits;
    Eigen::VectorXd probs;
};

struct AdanCache {
    Eigen::MatrixXd embedded;   // L x D gathered embedding rows
    Eigen::MatrixXd saliency;   // K x L raw attention-table entries
    Eigen::MatrixXd alpha;      // K x L row-wise softmax of saliency
    Eigen::MatrixXd topic_repr; // S, K x D
    Eigen::VectorXd input;      // S flattened row-major, length K*D
    std::vector<Eigen::VectorXd> pre;
    std::vector<Eigen::VectorXd> act;
    Eigen::VectorXd logits;
    Eigen::VectorXd probs;
};

// Forward passes. Throw EmptyUtteranceError on an empty id list.
Eigen::VectorXd dan_forward(const DanModel& model, std::span<const int> ids,
                            DanCache* cache = nullptr);
Eigen::VectorXd adan_forward(const AdanModel& model, std::span<const int> ids,
                             AdanCache* cache = nullptr);

struct LayerGrads {
    Eigen::MatrixXd W;
    Eigen::VectorXd b;
};

struct DanGrads {
    std::vector<LayerGrads> hidden;
    LayerGrads output;
    Eigen::MatrixXd embeddings;  // allocated only when fine-tuning
    std::vector<int> touched_rows;

    void set_zero();
    void scale(double factor);
};

struct AdanGrads {
    std::vector<LayerGrads> hidden;
    LayerGrads output;
    Eigen::MatrixXd attention;
    Eigen::MatrixXd embeddings;
    std::vector<int> touched_rows;

    void set_zero();
    void scale(double factor);
};

DanGrads make_grads(const DanModel& model, bool with_embeddings);
AdanGrads make_grads(const AdanModel& model, bool with_embeddings);

// Cross-entropy loss for one example; accumulates hand-derived gradients
// into grads. The cache must come from a forward pass on the same ids.
double dan_backward(const DanModel& model, std::span<const int> ids,
                    const DanCache& cache, int label, DanGrads& grads);
double adan_backward(const AdanModel& model, std::span<const int> ids,
                     const AdanCache& cache, int label, AdanGrads& grads);

struct TopicPrediction {
    Eigen::VectorXd probs;
    std::string topic;
    double normalized_entropy = 0.0;
    std::vector<std::pair<std::string, double>> keywords;  // (token, saliency)
    std::string source;       // model identifier, overridable by callers
    bool empty_input = false; // utterance tokenized to nothing
};

// Tokenize, look up, forward. Empty utterances resolve to Phatic when the
// label set has it, otherwise to uniform probabilities with the empty flag
// set. ADAN predictions carry top-2 keywords.
TopicPrediction predict(const DanModel& model, std::string_view text);
TopicPrediction predict(const AdanModel& model, std::string_view text);
TopicPrediction predict(const Model& model, std::string_view text);

// Distinct utterance tokens ranked by raw attention saliency for the given
// topic, descending; ties keep the earlier utterance position. Stoplisted
// tokens are removed before ranking.
std::vector<std::pair<std::string, double>> extract_keywords(
    const AdanModel& model, std::span<const std::string> tokens,
    std::span<const int> ids, int topic_index, int top_n = 2,
    const std::unordered_set<std::string>* stoplist = nullptr);

// Per-source label -> canonical topic. Sources without a table map
// identically; a present table must cover every label it is asked about.
class LabelMap {
  public:
    LabelMap() = default;
    explicit LabelMap(std::map<std::string, std::map<std::string, std::string>> by_source)
        : by_source_(std::move(by_source)) {}

    static LabelMap from_json_file(const std::string& path);

    std::string canonical(const std::string& source, const std::string& label) const;

  private:
    std::map<std::string, std::map<std::string, std::string>> by_source_;
};

// Keeps the prediction with the lower normalized entropy (ties go to a)
// and maps its label to the canonical topic.
TopicPrediction ensemble_predict(const TopicPrediction& a, const TopicPrediction& b,
                                 const LabelMap& label_map);

struct LabeledExample {
    std::string text;
    std::string label;
};
using Dataset = std::vector<LabeledExample>;

// JSONL, one {"text":..., "topic":...} object per line.
Dataset read_labeled_jsonl(const std::string& path);

struct NetworkConfig {
    int embedding_dim = 300;
    std::vector<int> hidden = {500};
    int min_count = 1;
    std::optional<std::string> embeddings_path;
    double attention_init_range = 0.01;
    bool divide_by_length = true;
};

struct TrainConfig {
    int max_epochs = 100;
    int batch_size = 64;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    double word_dropout = 0.0;
    bool fine_tune_embeddings = false;
    std::optional<std::pair<std::string, double>> downsample;  // label, keep prob
    int patience = 5;  // epochs without dev improvement before stopping
};

struct EpochStats {
    int epoch;
    double train_loss;
    double dev_accuracy;
};

struct TrainResult {
    Model model;  // best-dev-accuracy snapshot
    std::vector<EpochStats> history;
    double best_dev_accuracy = 0.0;
    int best_epoch = 0;
};

// Builds a model from the training data (labels sorted, vocabulary from the
// retained corpus) and runs seeded minibatch Adam with early stopping.
TrainResult train(ModelKind kind, const Dataset& train_data, const Dataset& dev_data,
                  const NetworkConfig& net, const TrainConfig& cfg);

// Copies embeddings and hidden layers from the source; the output layer
// (and attention table for ADAN) is re-initialized for the labels found in
// the new training data. expected_hidden, when given, must match the
// source architecture.
TrainResult transfer_finetune(const Model& source, const Dataset& train_data,
                              const Dataset& dev_data, const TrainConfig& cfg,
                              const std::optional<std::vector<int>>& expected_hidden = {});

// JSON model files; load validates shapes and rejects corrupt input.
void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);
DanModel load_dan(const std::string& path);
AdanModel load_adan(const std::string& path);

// Random small model for gradient-check harnesses and tests.
Model build_random_model(ModelKind kind, int num_labels, int vocab_size,
                         int embedding_dim, const std::vector<int>& hidden,
                         std::uint64_t seed);

// End-to-end gradient check on one random utterance/label pair drawn from
// seed. Checks all layers, the attention table for ADAN, and embedding
// rows. corrupt_gradient doubles one layer's gradient to prove the check
// can fail.
double model_gradcheck(const Model& model, std::uint64_t seed, double eps = 1e-5,
                       bool corrupt_gradient = false);

}  // namespace topiceval
