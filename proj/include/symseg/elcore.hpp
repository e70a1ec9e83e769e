#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "symseg/nn.hpp"
#include "symseg/rng.hpp"

namespace symseg::el {

struct Vocabulary {
    int size = 0;
    explicit Vocabulary(int v);
};

struct GumbelSoftmaxConfig {
    double temperature = 1.0;
    bool hard_mode = false;
    GumbelSoftmaxConfig() = default;
    GumbelSoftmaxConfig(double tau, bool hard);
};

/// Discrete message: one symbol index per position, plus the relaxed
/// probability rows when produced in training mode.
struct SymbolSentence {
    std::vector<int> symbols;
    std::vector<std::vector<float>> relaxed_form;  // empty at inference
    void validate(int vocab_size) const;
    std::string to_string() const;  // "189 663 277 ..."
};

/// Recurrent agent state snapshot; hidden and cell must have equal dim.
struct AgentState {
    std::vector<float> hidden;
    std::vector<float> cell;
    void validate() const;
};

enum class Mode { kTraining, kInference };

// ---------------------------------------------------------------------------
// Gumbel-Softmax
// ---------------------------------------------------------------------------

/// Relaxed categorical sample: exp((log p_i + g_i)/tau) normalized.
/// `p` must lie on the simplex (1e-6 tolerance); all inputs must be finite.
std::vector<double> gumbel_softmax_sample(const std::vector<double>& p,
                                          const std::vector<double>& g, double tau);

/// Same relaxation parameterized by logits instead of probabilities.
std::vector<double> gumbel_softmax_from_logits(const std::vector<double>& logits,
                                               const std::vector<double>& g, double tau);

/// Jacobian of gumbel_softmax_from_logits w.r.t. the logits, fixed noise.
std::vector<std::vector<double>> gumbel_softmax_grad_logits(const std::vector<double>& logits,
                                                            const std::vector<double>& g,
                                                            double tau);

/// Autograd rows version used inside the Sender: probs [N,V] + fixed noise.
ag::Var gumbel_softmax(const ag::Var& probs, const Tensor& noise, float tau);

/// Shannon entropy of a probability vector (nats).
double entropy(const std::vector<double>& p);

// ---------------------------------------------------------------------------
// agents
// ---------------------------------------------------------------------------

using NoiseFn = std::function<Tensor(const Shape&)>;

struct SenderConfig {
    int64_t input_dim = 1;
    int vocab_size = 1000;
    int sentence_len = 8;
    int64_t embed_dim = 512;
    int layers = 2;
    float temperature = 1.0f;
    bool hard_mode = false;
    void validate() const;
};

struct SenderResult {
    std::vector<SymbolSentence> sentences;  // one per batch row
    std::vector<ag::Var> steps;             // training: per-position [N,V] relaxed rows
    ag::Var final_hidden;                   // [N, embed_dim]
    std::vector<AgentState> final_states;   // per-row top-layer snapshot
};

/// Encodes a feature vector into a discrete sentence. The input linear
/// transform forms the step-0 embedding; afterwards each step consumes the
/// embedding of the previously emitted symbol.
class Sender : public nn::Module {
public:
    Sender(SenderConfig cfg, Rng& rng);

    /// Batched. Training draws Gumbel noise from `rng` (or `noise` when set)
    /// and emits relaxed rows; inference is noise-free argmax, ties to the
    /// lowest index.
    SenderResult forward(const ag::Var& x, Mode mode, Rng* rng = nullptr,
                         const NoiseFn& noise = nullptr) const;

    const SenderConfig& config() const { return cfg_; }

private:
    SenderConfig cfg_;
    nn::Linear input_proj_;
    nn::StackedLstm lstm_;
    nn::Linear head_;
    ag::Var embed_;  // [V, embed_dim]
};

struct ReceiverConfig {
    int vocab_size = 1000;
    int64_t embed_dim = 512;
    int layers = 1;
    void validate() const;
};

/// Decodes a sentence back into a dense vector: embeddings through an LSTM,
/// then a linear transform of the final hidden state.
class Receiver : public nn::Module {
public:
    Receiver(ReceiverConfig cfg, Rng& rng);

    /// Training path: consumes the Sender's relaxed rows so gradients flow.
    ag::Var forward_steps(const std::vector<ag::Var>& steps) const;

    /// Inference path: discrete symbols, one-hot semantics.
    ag::Var forward_symbols(const std::vector<SymbolSentence>& sentences) const;

    const ReceiverConfig& config() const { return cfg_; }

private:
    ag::Var run(const std::vector<ag::Var>& embeddings) const;
    ReceiverConfig cfg_;
    nn::StackedLstm lstm_;
    nn::Linear out_proj_;
    ag::Var embed_;  // [V, embed_dim]
};

// Single-sample wrappers.
SenderResult sender_forward(const Sender& sender, const std::vector<float>& x, Mode mode,
                            Rng* rng = nullptr);
std::vector<float> receiver_forward(const Receiver& receiver, const SymbolSentence& sentence);

}  // namespace symseg::el
