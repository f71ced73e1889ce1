#include "topiceval/classifiers.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "topiceval/error.hpp"
#include "topiceval/util.hpp"

namespace topiceval {

using nlohmann::json;

std::string to_string(ModelKind kind) {
    return kind == ModelKind::dan ? "dan" : "adan";
}

ModelKind model_kind_from_string(const std::string& s) {
    if (s == "dan") return ModelKind::dan;
    if (s == "adan") return ModelKind::adan;
    throw Error("unknown model type: " + s);
}

ModelKind kind_of(const Model& model) {
    return std::holds_alternative<DanModel>(model) ? ModelKind::dan : ModelKind::adan;
}

const std::vector<std::string>& labels_of(const Model& model) {
    return std::visit([](const auto& m) -> const std::vector<std::string>& { return m.labels; },
                      model);
}

namespace {

void check_ids(std::span<const int> ids, Eigen::Index vocab_size) {
    if (ids.empty()) throw EmptyUtteranceError();
    for (int id : ids)
        if (id < 0 || id >= vocab_size) throw Error("token id out of vocabulary range");
}

// Dense stack shared by both models: hidden layers with ReLU, then the
// output layer and a softmax.
Eigen::VectorXd run_layers(const std::vector<DenseLayer>& hidden, const DenseLayer& output,
                           const Eigen::VectorXd& input, std::vector<Eigen::VectorXd>* pre,
                           std::vector<Eigen::VectorXd>* act, Eigen::VectorXd* logits_out) {
    Eigen::VectorXd cur = input;
    if (pre) pre->clear();
    if (act) act->clear();
    for (const auto& layer : hidden) {
        Eigen::VectorXd z = linear_forward(layer, cur);
        cur = relu(z);
        if (pre) pre->push_back(std::move(z));
        if (act) act->push_back(cur);
    }
    Eigen::VectorXd logits = linear_forward(output, cur);
    Eigen::VectorXd probs = softmax(logits);
    if (logits_out) *logits_out = std::move(logits);
    return probs;
}

// Backward through the dense stack; returns the gradient w.r.t. its input.
Eigen::VectorXd layers_backward(const std::vector<DenseLayer>& hidden,
                                const DenseLayer& output, const Eigen::VectorXd& input,
                                const std::vector<Eigen::VectorXd>& pre,
                                const std::vector<Eigen::VectorXd>& act,
                                const Eigen::VectorXd& dlogits,
                                std::vector<LayerGrads>& hidden_grads,
                                LayerGrads& output_grads) {
    const Eigen::VectorXd& out_in = hidden.empty() ? input : act.back();
    output_grads.W.noalias() += dlogits * out_in.transpose();
    output_grads.b += dlogits;
    Eigen::VectorXd dcur = output.W.transpose() * dlogits;
    for (int l = static_cast<int>(hidden.size()) - 1; l >= 0; --l) {
        const auto lu = static_cast<std::size_t>(l);
        Eigen::VectorXd dpre =
            (dcur.array() * (pre[lu].array() > 0.0).cast<double>()).matrix();
        const Eigen::VectorXd& in_l = (l == 0) ? input : act[lu - 1];
        hidden_grads[lu].W.noalias() += dpre * in_l.transpose();
        hidden_grads[lu].b += dpre;
        dcur.noalias() = hidden[lu].W.transpose() * dpre;
    }
    return dcur;
}

}  // namespace

Eigen::VectorXd dan_forward(const DanModel& model, std::span<const int> ids,
                            DanCache* cache) {
    check_ids(ids, model.embeddings.rows());
    const auto L = static_cast<double>(ids.size());
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(model.embeddings.dim());
    for (int id : ids) mean += model.embeddings.matrix.row(id).transpose();
    mean /= L;

    DanCache local;
    DanCache& c = cache ? *cache : local;
    c.mean = mean;
    c.probs = run_layers(model.hidden, model.output, mean, &c.pre, &c.act, &c.logits);
    return c.probs;
}

Eigen::VectorXd adan_forward(const AdanModel& model, std::span<const int> ids,
                             AdanCache* cache) {
    check_ids(ids, model.embeddings.rows());
    const auto L = static_cast<Eigen::Index>(ids.size());
    const Eigen::Index K = model.num_labels();
    const Eigen::Index D = model.embeddings.dim();
    if (model.attention.rows() != K || model.attention.cols() != model.embeddings.rows())
        throw Error("attention table shape does not match labels x vocabulary");

    AdanCache local;
    AdanCache& c = cache ? *cache : local;

    c.embedded.resize(L, D);
    c.saliency.resize(K, L);
    for (Eigen::Index i = 0; i < L; ++i) {
        c.embedded.row(i) = model.embeddings.matrix.row(ids[static_cast<std::size_t>(i)]);
        c.saliency.col(i) = model.attention.col(ids[static_cast<std::size_t>(i)]);
    }

    // Row-wise softmax across the utterance positions.
    c.alpha.resize(K, L);
    for (Eigen::Index k = 0; k < K; ++k) {
        const double shift = c.saliency.row(k).maxCoeff();
        Eigen::ArrayXd e = (c.saliency.row(k).transpose().array() - shift).exp();
        c.alpha.row(k) = (e / e.sum()).matrix().transpose();
    }

    const double scale = model.divide_by_length ? 1.0 / static_cast<double>(L) : 1.0;
    c.topic_repr.noalias() = scale * (c.alpha * c.embedded);  // K x D

    c.input.resize(K * D);
    for (Eigen::Index k = 0; k < K; ++k)
        c.input.segment(k * D, D) = c.topic_repr.row(k).transpose();

    c.probs = run_layers(model.hidden, model.output, c.input, &c.pre, &c.act, &c.logits);
    return c.probs;
}

void DanGrads::set_zero() {
    for (auto& g : hidden) {
        g.W.setZero();
        g.b.setZero();
    }
    output.W.setZero();
    output.b.setZero();
    for (int r : touched_rows) embeddings.row(r).setZero();
    touched_rows.clear();
}

void DanGrads::scale(double factor) {
    for (auto& g : hidden) {
        g.W *= factor;
        g.b *= factor;
    }
    output.W *= factor;
    output.b *= factor;
    std::vector<int> rows = touched_rows;
    std::sort(rows.begin(), rows.end());
    rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
    for (int r : rows) embeddings.row(r) *= factor;
}

void AdanGrads::set_zero() {
    for (auto& g : hidden) {
        g.W.setZero();
        g.b.setZero();
    }
    output.W.setZero();
    output.b.setZero();
    for (int r : touched_rows) {
        attention.col(r).setZero();
        if (embeddings.size() > 0) embeddings.row(r).setZero();
    }
    touched_rows.clear();
}

void AdanGrads::scale(double factor) {
    for (auto& g : hidden) {
        g.W *= factor;
        g.b *= factor;
    }
    output.W *= factor;
    output.b *= factor;
    std::vector<int> rows = touched_rows;
    std::sort(rows.begin(), rows.end());
    rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
    for (int r : rows) {
        attention.col(r) *= factor;
        if (embeddings.size() > 0) embeddings.row(r) *= factor;
    }
}

namespace {

std::vector<LayerGrads> make_layer_grads(const std::vector<DenseLayer>& layers) {
    std::vector<LayerGrads> out;
    out.reserve(layers.size());
    for (const auto& l : layers)
        out.push_back({Eigen::MatrixXd::Zero(l.W.rows(), l.W.cols()),
                       Eigen::VectorXd::Zero(l.b.size())});
    return out;
}

}  // namespace

DanGrads make_grads(const DanModel& model, bool with_embeddings) {
    DanGrads g;
    g.hidden = make_layer_grads(model.hidden);
    g.output = {Eigen::MatrixXd::Zero(model.output.W.rows(), model.output.W.cols()),
                Eigen::VectorXd::Zero(model.output.b.size())};
    if (with_embeddings)
        g.embeddings = Eigen::MatrixXd::Zero(model.embeddings.rows(), model.embeddings.dim());
    return g;
}

AdanGrads make_grads(const AdanModel& model, bool with_embeddings) {
    AdanGrads g;
    g.hidden = make_layer_grads(model.hidden);
    g.output = {Eigen::MatrixXd::Zero(model.output.W.rows(), model.output.W.cols()),
                Eigen::VectorXd::Zero(model.output.b.size())};
    g.attention = Eigen::MatrixXd::Zero(model.attention.rows(), model.attention.cols());
    if (with_embeddings)
        g.embeddings = Eigen::MatrixXd::Zero(model.embeddings.rows(), model.embeddings.dim());
    return g;
}

double dan_backward(const DanModel& model, std::span<const int> ids, const DanCache& cache,
                    int label, DanGrads& grads) {
    const double loss = cross_entropy(cache.probs, label);
    Eigen::VectorXd dlogits = cache.probs;
    dlogits[label] -= 1.0;

    Eigen::VectorXd dmean = layers_backward(model.hidden, model.output, cache.mean,
                                            cache.pre, cache.act, dlogits, grads.hidden,
                                            grads.output);
    if (grads.embeddings.size() > 0) {
        const double inv_len = 1.0 / static_cast<double>(ids.size());
        for (int id : ids) {
            grads.embeddings.row(id) += inv_len * dmean.transpose();
            grads.touched_rows.push_back(id);
        }
    }
    return loss;
}

double adan_backward(const AdanModel& model, std::span<const int> ids,
                     const AdanCache& cache, int label, AdanGrads& grads) {
    const double loss = cross_entropy(cache.probs, label);
    const auto L = static_cast<Eigen::Index>(ids.size());
    const Eigen::Index K = model.num_labels();
    const Eigen::Index D = model.embeddings.dim();

    Eigen::VectorXd dlogits = cache.probs;
    dlogits[label] -= 1.0;

    Eigen::VectorXd dinput = layers_backward(model.hidden, model.output, cache.input,
                                             cache.pre, cache.act, dlogits, grads.hidden,
                                             grads.output);

    Eigen::MatrixXd dtopic(K, D);
    for (Eigen::Index k = 0; k < K; ++k)
        dtopic.row(k) = dinput.segment(k * D, D).transpose();

    const double scale = model.divide_by_length ? 1.0 / static_cast<double>(L) : 1.0;
    Eigen::MatrixXd dalpha = scale * (dtopic * cache.embedded.transpose());  // K x L

    const bool with_embeddings = grads.embeddings.size() > 0;
    if (with_embeddings) {
        Eigen::MatrixXd dembedded = scale * (cache.alpha.transpose() * dtopic);  // L x D
        for (Eigen::Index i = 0; i < L; ++i)
            grads.embeddings.row(ids[static_cast<std::size_t>(i)]) += dembedded.row(i);
    }

    // Softmax backward per topic row: da -> dw.
    Eigen::MatrixXd dsaliency(K, L);
    for (Eigen::Index k = 0; k < K; ++k) {
        const double row_dot = dalpha.row(k).dot(cache.alpha.row(k));
        dsaliency.row(k) =
            (cache.alpha.row(k).array() * (dalpha.row(k).array() - row_dot)).matrix();
    }
    for (Eigen::Index i = 0; i < L; ++i) {
        const int id = ids[static_cast<std::size_t>(i)];
        grads.attention.col(id) += dsaliency.col(i);
        grads.touched_rows.push_back(id);
    }
    return loss;
}

namespace {

TopicPrediction empty_input_prediction(const std::vector<std::string>& labels,
                                       std::string source) {
    TopicPrediction p;
    p.empty_input = true;
    p.source = std::move(source);
    const auto K = static_cast<Eigen::Index>(labels.size());
    auto it = std::find(labels.begin(), labels.end(), kPhaticTopic);
    if (it != labels.end()) {
        p.probs = Eigen::VectorXd::Zero(K);
        p.probs[it - labels.begin()] = 1.0;
        p.topic = kPhaticTopic;
        p.normalized_entropy = 0.0;
    } else {
        p.probs = Eigen::VectorXd::Constant(K, 1.0 / static_cast<double>(K));
        p.topic = labels.front();
        p.normalized_entropy = normalized_entropy(p.probs);
    }
    return p;
}

}  // namespace

TopicPrediction predict(const DanModel& model, std::string_view text) {
    const auto tokens = tokenize(text);
    if (tokens.empty()) return empty_input_prediction(model.labels, "dan");
    const auto ids = lookup(tokens, model.vocab);
    TopicPrediction p;
    p.source = "dan";
    p.probs = dan_forward(model, ids);
    p.topic = model.labels[static_cast<std::size_t>(argmax(p.probs))];
    p.normalized_entropy = normalized_entropy(p.probs);
    return p;
}

TopicPrediction predict(const AdanModel& model, std::string_view text) {
    const auto tokens = tokenize(text);
    if (tokens.empty()) return empty_input_prediction(model.labels, "adan");
    const auto ids = lookup(tokens, model.vocab);
    TopicPrediction p;
    p.source = "adan";
    p.probs = adan_forward(model, ids);
    const auto top = argmax(p.probs);
    p.topic = model.labels[static_cast<std::size_t>(top)];
    p.normalized_entropy = normalized_entropy(p.probs);
    p.keywords = extract_keywords(model, tokens, ids, static_cast<int>(top));
    return p;
}

TopicPrediction predict(const Model& model, std::string_view text) {
    return std::visit([&](const auto& m) { return predict(m, text); }, model);
}

std::vector<std::pair<std::string, double>> extract_keywords(
    const AdanModel& model, std::span<const std::string> tokens, std::span<const int> ids,
    int topic_index, int top_n, const std::unordered_set<std::string>* stoplist) {
    if (top_n < 1) throw Error("extract_keywords: top_n must be >= 1");
    if (topic_index < 0 || topic_index >= model.num_labels())
        throw Error("extract_keywords: topic index out of range");
    if (tokens.size() != ids.size())
        throw Error("extract_keywords: tokens and ids differ in length");

    struct Candidate {
        const std::string* token;
        double saliency;
    };
    std::vector<Candidate> candidates;
    std::unordered_set<std::string_view> seen;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (!seen.insert(tokens[i]).second) continue;
        if (stoplist && stoplist->count(tokens[i])) continue;
        candidates.push_back({&tokens[i], model.attention(topic_index, ids[i])});
    }
    // Candidates are in first-occurrence order; stable sort keeps that
    // order for equal saliencies.
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) {
                         return a.saliency > b.saliency;
                     });
    const std::size_t n = std::min(candidates.size(), static_cast<std::size_t>(top_n));
    std::vector<std::pair<std::string, double>> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        out.emplace_back(*candidates[i].token, candidates[i].saliency);
    return out;
}

LabelMap LabelMap::from_json_file(const std::string& path) {
    json doc;
    try {
        doc = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw UsageError("label map " + path + " is not valid JSON: " + e.what());
    }
    if (!doc.is_object()) throw UsageError("label map " + path + " must be a JSON object");
    std::map<std::string, std::map<std::string, std::string>> by_source;
    for (const auto& [source, table] : doc.items()) {
        if (!table.is_object())
            throw UsageError("label map source '" + source + "' must map to an object");
        for (const auto& [label, canonical] : table.items()) {
            if (!canonical.is_string())
                throw UsageError("label map entry '" + source + "." + label +
                                 "' must be a string");
            by_source[source][label] = canonical.get<std::string>();
        }
    }
    return LabelMap(std::move(by_source));
}

std::string LabelMap::canonical(const std::string& source, const std::string& label) const {
    auto src = by_source_.find(source);
    if (src == by_source_.end()) return label;  // identity for unmapped sources
    auto it = src->second.find(label);
    if (it == src->second.end())
        throw Error("label map for source '" + source + "' has no entry for label '" +
                    label + "'");
    return it->second;
}

TopicPrediction ensemble_predict(const TopicPrediction& a, const TopicPrediction& b,
                                 const LabelMap& label_map) {
    const TopicPrediction& winner = (a.normalized_entropy <= b.normalized_entropy) ? a : b;
    TopicPrediction out = winner;
    out.topic = label_map.canonical(winner.source, winner.topic);
    return out;
}

Dataset read_labeled_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open labeled data file: " + path);
    Dataset data;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json row;
        try {
            row = json::parse(line);
        } catch (const json::exception& e) {
            throw Error(path + " line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!row.contains("text") || !row["text"].is_string() || !row.contains("topic") ||
            !row["topic"].is_string())
            throw Error(path + " line " + std::to_string(line_no) +
                        ": expected {\"text\": string, \"topic\": string}");
        data.push_back({row["text"].get<std::string>(), row["topic"].get<std::string>()});
    }
    return data;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

DenseLayer glorot_layer(Eigen::Index in_dim, Eigen::Index out_dim, Rng& rng) {
    DenseLayer layer;
    layer.W.resize(out_dim, in_dim);
    const double limit = std::sqrt(6.0 / static_cast<double>(in_dim + out_dim));
    for (Eigen::Index r = 0; r < out_dim; ++r)
        for (Eigen::Index c = 0; c < in_dim; ++c) layer.W(r, c) = uniform_real(rng, -limit, limit);
    layer.b = Eigen::VectorXd::Zero(out_dim);
    return layer;
}

Eigen::MatrixXd random_attention(Eigen::Index k, Eigen::Index v, double range, Rng& rng) {
    Eigen::MatrixXd a(k, v);
    for (Eigen::Index r = 0; r < k; ++r)
        for (Eigen::Index c = 0; c < v; ++c) a(r, c) = uniform_real(rng, -range, range);
    return a;
}

std::vector<std::string> sorted_unique_labels(const Dataset& data) {
    std::vector<std::string> labels;
    for (const auto& row : data) labels.push_back(row.label);
    std::sort(labels.begin(), labels.end());
    labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
    return labels;
}

Dataset apply_downsample(const Dataset& data, const TrainConfig& cfg) {
    if (!cfg.downsample) return data;
    const auto& [target, keep_prob] = *cfg.downsample;
    if (keep_prob < 0.0 || keep_prob > 1.0)
        throw Error("downsample keep probability must be in [0, 1]");
    Rng rng(derive_seed(cfg.seed, 1));
    std::bernoulli_distribution keep(keep_prob);
    Dataset out;
    out.reserve(data.size());
    for (const auto& row : data) {
        if (row.label == target && !keep(rng)) continue;
        out.push_back(row);
    }
    return out;
}

struct PreparedData {
    std::vector<std::vector<int>> ids;
    std::vector<int> labels;
};

PreparedData prepare_data(const Dataset& data, const Vocabulary& vocab,
                          const std::map<std::string, int>& label_index,
                          const char* what) {
    PreparedData out;
    for (const auto& row : data) {
        auto it = label_index.find(row.label);
        if (it == label_index.end())
            throw Error(std::string(what) + " label '" + row.label +
                        "' absent from label set");
        auto tokens = tokenize(row.text);
        if (tokens.empty()) continue;  // nothing to average; skipped
        out.ids.push_back(lookup(tokens, vocab));
        out.labels.push_back(it->second);
    }
    return out;
}

// Each token dropped independently; if everything is dropped one survivor
// is picked uniformly. Training-time only.
std::vector<int> word_dropout(const std::vector<int>& ids, double prob, Rng& rng) {
    std::bernoulli_distribution drop(prob);
    std::vector<int> kept;
    kept.reserve(ids.size());
    for (int id : ids)
        if (!drop(rng)) kept.push_back(id);
    if (kept.empty()) {
        std::uniform_int_distribution<std::size_t> pick(0, ids.size() - 1);
        kept.push_back(ids[pick(rng)]);
    }
    return kept;
}

struct BlockList {
    std::vector<double*> params;
    std::vector<const double*> grads;
    std::vector<Eigen::Index> sizes;

    void add(Eigen::MatrixXd& p, const Eigen::MatrixXd& g) {
        params.push_back(p.data());
        grads.push_back(g.data());
        sizes.push_back(p.size());
    }
    void add(Eigen::VectorXd& p, const Eigen::VectorXd& g) {
        params.push_back(p.data());
        grads.push_back(g.data());
        sizes.push_back(p.size());
    }
};

template <class ModelT, class GradsT>
BlockList collect_blocks(ModelT& model, GradsT& grads, bool fine_tune_embeddings) {
    BlockList blocks;
    for (std::size_t l = 0; l < model.hidden.size(); ++l) {
        blocks.add(model.hidden[l].W, grads.hidden[l].W);
        blocks.add(model.hidden[l].b, grads.hidden[l].b);
    }
    blocks.add(model.output.W, grads.output.W);
    blocks.add(model.output.b, grads.output.b);
    if constexpr (std::is_same_v<ModelT, AdanModel>) {
        blocks.add(model.attention, grads.attention);
    }
    if (fine_tune_embeddings) blocks.add(model.embeddings.matrix, grads.embeddings);
    return blocks;
}

double forward_backward(const DanModel& model, std::span<const int> ids, int label,
                        DanGrads& grads) {
    DanCache cache;
    dan_forward(model, ids, &cache);
    return dan_backward(model, ids, cache, label, grads);
}

double forward_backward(const AdanModel& model, std::span<const int> ids, int label,
                        AdanGrads& grads) {
    AdanCache cache;
    adan_forward(model, ids, &cache);
    return adan_backward(model, ids, cache, label, grads);
}

template <class ModelT>
double dev_accuracy(const ModelT& model, const PreparedData& dev) {
    long correct = 0;
    for (std::size_t i = 0; i < dev.ids.size(); ++i) {
        Eigen::VectorXd probs;
        if constexpr (std::is_same_v<ModelT, DanModel>)
            probs = dan_forward(model, dev.ids[i]);
        else
            probs = adan_forward(model, dev.ids[i]);
        if (argmax(probs) == dev.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(dev.ids.size());
}

// Core loop shared by train() and transfer_finetune(). The dataset must
// already be downsampled; the model already initialized.
template <class ModelT>
TrainResult run_training(ModelT model, const Dataset& train_data, const Dataset& dev_data,
                         const TrainConfig& cfg) {
    if (cfg.max_epochs < 0 || cfg.batch_size < 1 || cfg.patience < 1)
        throw Error("invalid training configuration");
    if (cfg.word_dropout < 0.0 || cfg.word_dropout >= 1.0)
        throw Error("word dropout probability must be in [0, 1)");
    if (dev_data.empty()) throw Error("dev split is empty");

    std::map<std::string, int> label_index;
    for (std::size_t i = 0; i < model.labels.size(); ++i)
        label_index[model.labels[i]] = static_cast<int>(i);

    PreparedData train_set = prepare_data(train_data, model.vocab, label_index, "training");
    PreparedData dev_set = prepare_data(dev_data, model.vocab, label_index, "dev");
    if (train_set.ids.empty()) throw Error("empty training set");
    if (dev_set.ids.empty()) throw Error("dev split is empty after tokenization");

    auto grads = make_grads(model, cfg.fine_tune_embeddings);
    model.embeddings.trainable = cfg.fine_tune_embeddings;
    BlockList blocks = collect_blocks(model, grads, cfg.fine_tune_embeddings);
    Adam adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8}, blocks.sizes);

    Rng rng(derive_seed(cfg.seed, 4));

    TrainResult result;
    ModelT best = model;
    double best_acc = dev_accuracy(model, dev_set);
    int best_epoch = 0;
    int stale = 0;

    std::vector<std::size_t> order(train_set.ids.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            grads.set_zero();
            for (std::size_t i = start; i < end; ++i) {
                const auto& ids = train_set.ids[order[i]];
                const int label = train_set.labels[order[i]];
                if (cfg.word_dropout > 0.0) {
                    const auto kept = word_dropout(ids, cfg.word_dropout, rng);
                    epoch_loss += forward_backward(model, kept, label, grads);
                } else {
                    epoch_loss += forward_backward(model, ids, label, grads);
                }
            }
            grads.scale(1.0 / static_cast<double>(end - start));
            adam.step(blocks.params, blocks.grads);
        }
        const double train_loss = epoch_loss / static_cast<double>(order.size());
        const double acc = dev_accuracy(model, dev_set);
        result.history.push_back({epoch, train_loss, acc});
        if (acc > best_acc) {
            best_acc = acc;
            best_epoch = epoch;
            best = model;
            stale = 0;
        } else if (++stale >= cfg.patience) {
            break;
        }
    }

    result.model = std::move(best);
    result.best_dev_accuracy = best_acc;
    result.best_epoch = best_epoch;
    return result;
}

}  // namespace

TrainResult train(ModelKind kind, const Dataset& train_data, const Dataset& dev_data,
                  const NetworkConfig& net, const TrainConfig& cfg) {
    if (train_data.empty()) throw Error("empty training set");
    if (net.embedding_dim < 1) throw Error("embedding dimension must be >= 1");

    const Dataset retained = apply_downsample(train_data, cfg);
    if (retained.empty()) throw Error("empty training set after downsampling");

    const auto labels = sorted_unique_labels(retained);
    if (labels.size() < 2) throw Error("training data must contain at least 2 distinct labels");

    std::vector<std::vector<std::string>> corpus;
    corpus.reserve(retained.size());
    for (const auto& row : retained) corpus.push_back(tokenize(row.text));
    Vocabulary vocab = build_vocab(corpus, net.min_count);

    EmbeddingTable embeddings =
        net.embeddings_path
            ? load_embeddings(*net.embeddings_path, vocab, net.embedding_dim,
                              derive_seed(cfg.seed, 2))
            : init_embeddings(vocab, net.embedding_dim, derive_seed(cfg.seed, 2));
    embeddings.trainable = cfg.fine_tune_embeddings;

    Rng init_rng(derive_seed(cfg.seed, 3));
    const auto K = static_cast<Eigen::Index>(labels.size());

    if (kind == ModelKind::dan) {
        DanModel model;
        model.vocab = std::move(vocab);
        model.embeddings = std::move(embeddings);
        model.labels = labels;
        Eigen::Index in = net.embedding_dim;
        for (int h : net.hidden) {
            model.hidden.push_back(glorot_layer(in, h, init_rng));
            in = h;
        }
        model.output = glorot_layer(in, K, init_rng);
        return run_training(std::move(model), retained, dev_data, cfg);
    }

    AdanModel model;
    model.vocab = std::move(vocab);
    model.embeddings = std::move(embeddings);
    model.labels = labels;
    model.divide_by_length = net.divide_by_length;
    Eigen::Index in = K * net.embedding_dim;
    for (int h : net.hidden) {
        model.hidden.push_back(glorot_layer(in, h, init_rng));
        in = h;
    }
    model.output = glorot_layer(in, K, init_rng);
    model.attention = random_attention(K, model.vocab.size(), net.attention_init_range,
                                       init_rng);
    return run_training(std::move(model), retained, dev_data, cfg);
}

TrainResult transfer_finetune(const Model& source, const Dataset& train_data,
                              const Dataset& dev_data, const TrainConfig& cfg,
                              const std::optional<std::vector<int>>& expected_hidden) {
    if (train_data.empty()) throw Error("empty training set");
    const Dataset retained = apply_downsample(train_data, cfg);
    if (retained.empty()) throw Error("empty training set after downsampling");
    const auto labels = sorted_unique_labels(retained);
    if (labels.size() < 2) throw Error("training data must contain at least 2 distinct labels");

    const auto check_hidden = [&](const std::vector<DenseLayer>& hidden) {
        if (!expected_hidden) return;
        std::vector<int> sizes;
        for (const auto& l : hidden) sizes.push_back(static_cast<int>(l.out_dim()));
        if (sizes != *expected_hidden) {
            std::ostringstream msg;
            msg << "architecture mismatch: source hidden sizes [";
            for (std::size_t i = 0; i < sizes.size(); ++i)
                msg << (i ? "," : "") << sizes[i];
            msg << "] differ from configured [";
            for (std::size_t i = 0; i < expected_hidden->size(); ++i)
                msg << (i ? "," : "") << (*expected_hidden)[i];
            msg << "]";
            throw Error(msg.str());
        }
    };

    Rng init_rng(derive_seed(cfg.seed, 3));
    const auto K = static_cast<Eigen::Index>(labels.size());

    if (const auto* dan = std::get_if<DanModel>(&source)) {
        check_hidden(dan->hidden);
        DanModel model = *dan;
        model.labels = labels;
        const Eigen::Index in =
            model.hidden.empty() ? model.embeddings.dim() : model.hidden.back().out_dim();
        model.output = glorot_layer(in, K, init_rng);
        return run_training(std::move(model), retained, dev_data, cfg);
    }

    const auto& adan = std::get<AdanModel>(source);
    check_hidden(adan.hidden);
    if (!adan.hidden.empty() &&
        adan.hidden.front().in_dim() != K * adan.embeddings.dim())
        throw Error("architecture mismatch: transfer to " + std::to_string(K) +
                    " labels changes the flattened input width " +
                    std::to_string(K * adan.embeddings.dim()) + " vs source " +
                    std::to_string(adan.hidden.front().in_dim()));
    AdanModel model = adan;
    model.labels = labels;
    const Eigen::Index in =
        model.hidden.empty() ? K * model.embeddings.dim() : model.hidden.back().out_dim();
    model.output = glorot_layer(in, K, init_rng);
    model.attention = random_attention(K, model.vocab.size(), 0.01, init_rng);
    return run_training(std::move(model), retained, dev_data, cfg);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

json matrix_to_json(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

json vector_to_json(const Eigen::VectorXd& v) {
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
    return out;
}

Eigen::MatrixXd matrix_from_json(const json& j, const std::string& what) {
    if (!j.is_array() || j.empty()) throw Error(what + ": expected a non-empty array of rows");
    const auto rows = static_cast<Eigen::Index>(j.size());
    if (!j[0].is_array()) throw Error(what + ": rows must be arrays");
    const auto cols = static_cast<Eigen::Index>(j[0].size());
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const auto& row = j[static_cast<std::size_t>(r)];
        if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
            throw Error(what + ": ragged matrix at row " + std::to_string(r));
        for (Eigen::Index c = 0; c < cols; ++c) {
            const auto& cell = row[static_cast<std::size_t>(c)];
            if (!cell.is_number()) throw Error(what + ": non-numeric entry");
            m(r, c) = cell.get<double>();
        }
    }
    if (!m.allFinite()) throw Error(what + ": non-finite entry");
    return m;
}

Eigen::VectorXd vector_from_json(const json& j, const std::string& what) {
    if (!j.is_array()) throw Error(what + ": expected an array");
    Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) throw Error(what + ": non-numeric entry");
        v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
    }
    if (!v.allFinite()) throw Error(what + ": non-finite entry");
    return v;
}

json layer_to_json(const DenseLayer& layer) {
    return json{{"W", matrix_to_json(layer.W)}, {"b", vector_to_json(layer.b)}};
}

DenseLayer layer_from_json(const json& j, const std::string& what) {
    if (!j.is_object() || !j.contains("W") || !j.contains("b"))
        throw Error(what + ": expected {\"W\":..., \"b\":...}");
    DenseLayer layer;
    layer.W = matrix_from_json(j["W"], what + ".W");
    layer.b = vector_from_json(j["b"], what + ".b");
    if (layer.b.size() != layer.W.rows())
        throw Error(what + ": bias length does not match weight rows");
    return layer;
}

void validate_stack(const std::vector<DenseLayer>& hidden, const DenseLayer& output,
                    Eigen::Index input_dim, Eigen::Index num_labels,
                    const std::string& path) {
    Eigen::Index in = input_dim;
    for (std::size_t l = 0; l < hidden.size(); ++l) {
        if (hidden[l].in_dim() != in)
            throw Error("model file " + path + ": hidden layer " + std::to_string(l) +
                        " expects input " + std::to_string(hidden[l].in_dim()) +
                        ", got " + std::to_string(in));
        in = hidden[l].out_dim();
    }
    if (output.in_dim() != in)
        throw Error("model file " + path + ": output layer input width mismatch");
    if (output.out_dim() != num_labels)
        throw Error("model file " + path + ": output layer rows do not match label count");
}

}  // namespace

void save_model(const Model& model, const std::string& path) {
    json doc;
    doc["format_version"] = kModelFormatVersion;
    doc["model_type"] = to_string(kind_of(model));
    doc["tokenizer"] = json{{"type", kTokenizerType}};
    std::visit(
        [&](const auto& m) {
            doc["labels"] = m.labels;
            doc["vocab"] = m.vocab.tokens();
            doc["embedding"] = json{{"dim", m.embeddings.dim()},
                                    {"trainable", m.embeddings.trainable},
                                    {"matrix", matrix_to_json(m.embeddings.matrix)}};
            json hidden = json::array();
            for (const auto& layer : m.hidden) hidden.push_back(layer_to_json(layer));
            doc["hidden"] = std::move(hidden);
            doc["output"] = layer_to_json(m.output);
        },
        model);
    if (const auto* adan = std::get_if<AdanModel>(&model)) {
        doc["attention"] = matrix_to_json(adan->attention);
        doc["divide_by_length"] = adan->divide_by_length;
    }
    write_text_atomic(path, doc.dump());
}

Model load_model(const std::string& path) {
    json doc;
    try {
        doc = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw Error("model file " + path + " is not valid JSON: " + e.what());
    }
    if (!doc.is_object()) throw Error("model file " + path + ": expected a JSON object");
    if (!doc.contains("format_version") || !doc["format_version"].is_number_integer() ||
        doc["format_version"].get<int>() != kModelFormatVersion)
        throw Error("model file " + path + ": unsupported format_version");
    if (!doc.contains("model_type") || !doc["model_type"].is_string())
        throw Error("model file " + path + ": missing model_type");
    const ModelKind kind = model_kind_from_string(doc["model_type"].get<std::string>());
    if (doc.contains("tokenizer") &&
        doc["tokenizer"].value("type", std::string(kTokenizerType)) != kTokenizerType)
        throw Error("model file " + path + ": unsupported tokenizer type");

    for (const char* key : {"labels", "vocab", "embedding", "hidden", "output"})
        if (!doc.contains(key))
            throw Error("model file " + path + ": missing field '" + std::string(key) + "'");

    std::vector<std::string> labels;
    for (const auto& l : doc["labels"]) {
        if (!l.is_string()) throw Error("model file " + path + ": labels must be strings");
        labels.push_back(l.get<std::string>());
    }
    if (labels.empty()) throw Error("model file " + path + ": empty label set");

    std::vector<std::string> vocab_tokens;
    for (const auto& t : doc["vocab"]) {
        if (!t.is_string()) throw Error("model file " + path + ": vocab must be strings");
        vocab_tokens.push_back(t.get<std::string>());
    }
    Vocabulary vocab(std::move(vocab_tokens));

    const auto& emb = doc["embedding"];
    if (!emb.is_object() || !emb.contains("dim") || !emb.contains("matrix"))
        throw Error("model file " + path + ": malformed embedding section");
    EmbeddingTable embeddings;
    embeddings.trainable = emb.value("trainable", false);
    embeddings.matrix = matrix_from_json(emb["matrix"], "model file " + path + ": embedding");
    if (embeddings.matrix.rows() != vocab.size())
        throw Error("model file " + path + ": embedding rows do not match vocabulary size");
    if (embeddings.matrix.cols() != emb["dim"].get<Eigen::Index>())
        throw Error("model file " + path + ": embedding dim field does not match matrix");

    std::vector<DenseLayer> hidden;
    for (std::size_t l = 0; l < doc["hidden"].size(); ++l)
        hidden.push_back(layer_from_json(doc["hidden"][l], "model file " + path +
                                                               ": hidden layer " +
                                                               std::to_string(l)));
    DenseLayer output = layer_from_json(doc["output"], "model file " + path + ": output");

    const auto K = static_cast<Eigen::Index>(labels.size());
    const Eigen::Index D = embeddings.dim();

    if (kind == ModelKind::dan) {
        if (doc.contains("attention"))
            throw Error("model file " + path + ": dan model carries an attention table");
        validate_stack(hidden, output, D, K, path);
        DanModel model;
        model.vocab = std::move(vocab);
        model.embeddings = std::move(embeddings);
        model.hidden = std::move(hidden);
        model.output = std::move(output);
        model.labels = std::move(labels);
        return model;
    }

    if (!doc.contains("attention"))
        throw Error("model file " + path + ": adan model missing attention table");
    Eigen::MatrixXd attention =
        matrix_from_json(doc["attention"], "model file " + path + ": attention");
    if (attention.rows() != K || attention.cols() != vocab.size())
        throw Error("model file " + path + ": attention table must be labels x vocabulary");
    validate_stack(hidden, output, K * D, K, path);
    AdanModel model;
    model.vocab = std::move(vocab);
    model.embeddings = std::move(embeddings);
    model.attention = std::move(attention);
    model.hidden = std::move(hidden);
    model.output = std::move(output);
    model.labels = std::move(labels);
    model.divide_by_length = doc.value("divide_by_length", true);
    return model;
}

DanModel load_dan(const std::string& path) {
    Model m = load_model(path);
    if (!std::holds_alternative<DanModel>(m))
        throw Error("model file " + path + ": model_type mismatch, expected dan");
    return std::get<DanModel>(std::move(m));
}

AdanModel load_adan(const std::string& path) {
    Model m = load_model(path);
    if (!std::holds_alternative<AdanModel>(m))
        throw Error("model file " + path + ": model_type mismatch, expected adan");
    return std::get<AdanModel>(std::move(m));
}

// ---------------------------------------------------------------------------
// Gradient checking harness
// ---------------------------------------------------------------------------

Model build_random_model(ModelKind kind, int num_labels, int vocab_size, int embedding_dim,
                         const std::vector<int>& hidden, std::uint64_t seed) {
    if (num_labels < 2 || vocab_size < 2 || embedding_dim < 1)
        throw Error("build_random_model: degenerate shape");
    std::vector<std::string> tokens{kUnkToken};
    for (int i = 1; i < vocab_size; ++i) tokens.push_back("w" + std::to_string(i));
    Vocabulary vocab(std::move(tokens));
    std::vector<std::string> labels;
    for (int k = 0; k < num_labels; ++k) labels.push_back("t" + std::to_string(k));

    EmbeddingTable embeddings = init_embeddings(vocab, embedding_dim, derive_seed(seed, 0));
    embeddings.trainable = true;
    Rng rng(derive_seed(seed, 1));

    if (kind == ModelKind::dan) {
        DanModel model;
        model.vocab = std::move(vocab);
        model.embeddings = std::move(embeddings);
        model.labels = std::move(labels);
        Eigen::Index in = embedding_dim;
        for (int h : hidden) {
            model.hidden.push_back(glorot_layer(in, h, rng));
            in = h;
        }
        model.output = glorot_layer(in, num_labels, rng);
        return model;
    }

    AdanModel model;
    model.vocab = std::move(vocab);
    model.embeddings = std::move(embeddings);
    model.labels = std::move(labels);
    Eigen::Index in = static_cast<Eigen::Index>(num_labels) * embedding_dim;
    for (int h : hidden) {
        model.hidden.push_back(glorot_layer(in, h, rng));
        in = h;
    }
    model.output = glorot_layer(in, num_labels, rng);
    model.attention = random_attention(num_labels, model.vocab.size(), 0.5, rng);
    return model;
}

namespace {

template <class ModelT, class GradsT>
double gradcheck_impl(ModelT model, std::uint64_t seed, double eps, bool corrupt) {
    Rng rng(derive_seed(seed, 7));
    std::uniform_int_distribution<int> len_dist(3, 8);
    std::uniform_int_distribution<int> id_dist(0, model.vocab.size() - 1);
    std::uniform_int_distribution<int> label_dist(0, model.num_labels() - 1);
    const int L = len_dist(rng);
    std::vector<int> ids;
    for (int i = 0; i < L; ++i) ids.push_back(id_dist(rng));
    const int label = label_dist(rng);

    GradsT grads = make_grads(model, /*with_embeddings=*/true);
    forward_backward(model, ids, label, grads);
    if (corrupt) {
        if (!grads.hidden.empty())
            grads.hidden.front().W *= 2.0;
        else
            grads.output.W *= 2.0;
    }

    std::vector<ParamBlock> blocks;
    for (std::size_t l = 0; l < model.hidden.size(); ++l) {
        blocks.push_back({"hidden" + std::to_string(l) + ".W", model.hidden[l].W.data(),
                          grads.hidden[l].W.data(), model.hidden[l].W.size()});
        blocks.push_back({"hidden" + std::to_string(l) + ".b", model.hidden[l].b.data(),
                          grads.hidden[l].b.data(), model.hidden[l].b.size()});
    }
    blocks.push_back({"output.W", model.output.W.data(), grads.output.W.data(),
                      model.output.W.size()});
    blocks.push_back({"output.b", model.output.b.data(), grads.output.b.data(),
                      model.output.b.size()});
    if constexpr (std::is_same_v<ModelT, AdanModel>) {
        blocks.push_back({"attention", model.attention.data(), grads.attention.data(),
                          model.attention.size()});
    }
    blocks.push_back({"embeddings", model.embeddings.matrix.data(), grads.embeddings.data(),
                      model.embeddings.matrix.size()});

    const auto loss = [&]() {
        Eigen::VectorXd probs;
        if constexpr (std::is_same_v<ModelT, DanModel>)
            probs = dan_forward(model, ids);
        else
            probs = adan_forward(model, ids);
        return cross_entropy(probs, label);
    };
    return finite_diff_gradcheck(loss, blocks, derive_seed(seed, 8), eps, 200);
}

}  // namespace

double model_gradcheck(const Model& model, std::uint64_t seed, double eps,
                       bool corrupt_gradient) {
    if (const auto* dan = std::get_if<DanModel>(&model))
        return gradcheck_impl<DanModel, DanGrads>(*dan, seed, eps, corrupt_gradient);
    return gradcheck_impl<AdanModel, AdanGrads>(std::get<AdanModel>(model), seed, eps,
                                                corrupt_gradient);
}

}  // namespace topiceval
