#include "symseg/elcore.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "symseg/errors.hpp"

namespace symseg::el {

namespace {
constexpr double kLogFloor = 1e-12;
}

Vocabulary::Vocabulary(int v) : size(v) {
    if (v < 2) throw ValidationError("vocabulary size must be >= 2, got " + std::to_string(v));
}

GumbelSoftmaxConfig::GumbelSoftmaxConfig(double tau, bool hard) : temperature(tau), hard_mode(hard) {
    if (!(tau > 0.0)) throw ValidationError("temperature must be positive");
}

void SymbolSentence::validate(int vocab_size) const {
    if (symbols.empty()) throw ValidationError("sentence is empty");
    for (int s : symbols)
        if (s < 0 || s >= vocab_size)
            throw ValidationError("symbol " + std::to_string(s) + " outside vocabulary [0," +
                                  std::to_string(vocab_size) + ")");
    if (!relaxed_form.empty()) {
        if (relaxed_form.size() != symbols.size())
            throw ValidationError("relaxed form length does not match sentence length");
        for (const auto& row : relaxed_form) {
            if (static_cast<int>(row.size()) != vocab_size)
                throw ValidationError("relaxed row dimension does not match vocabulary");
            double s = 0.0;
            for (float v : row) {
                if (v < 0.0f) throw ValidationError("relaxed row has a negative component");
                s += v;
            }
            if (std::abs(s - 1.0) > 1e-6)
                throw ValidationError("relaxed row does not sum to 1 (got " + std::to_string(s) + ")");
        }
    }
}

std::string SymbolSentence::to_string() const {
    std::ostringstream out;
    for (size_t i = 0; i < symbols.size(); ++i) out << (i ? " " : "") << symbols[i];
    return out.str();
}

void AgentState::validate() const {
    if (hidden.size() != cell.size())
        throw ValidationError("agent state hidden/cell dims differ");
}

// ---------------------------------------------------------------------------
// Gumbel-Softmax, double-precision reference path
// ---------------------------------------------------------------------------

static void check_finite(const std::vector<double>& v, const char* what) {
    for (double x : v)
        if (!std::isfinite(x)) throw ValidationError(std::string(what) + " contains a non-finite value");
}

std::vector<double> gumbel_softmax_sample(const std::vector<double>& p,
                                          const std::vector<double>& g, double tau) {
    if (p.empty() || p.size() != g.size())
        throw ValidationError("gumbel_softmax_sample: p and g must be non-empty and equal-sized");
    if (!(tau > 0.0)) throw ValidationError("gumbel_softmax_sample: tau must be positive");
    check_finite(p, "probabilities");
    check_finite(g, "noise");
    double sum = 0.0;
    for (double x : p) {
        if (x < 0.0) throw ValidationError("gumbel_softmax_sample: negative probability");
        sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-6)
        throw ValidationError("gumbel_softmax_sample: probabilities sum to " + std::to_string(sum));
    std::vector<double> logits(p.size());
    for (size_t i = 0; i < p.size(); ++i) logits[i] = std::log(std::max(p[i], kLogFloor));
    return gumbel_softmax_from_logits(logits, g, tau);
}

std::vector<double> gumbel_softmax_from_logits(const std::vector<double>& logits,
                                               const std::vector<double>& g, double tau) {
    if (logits.empty() || logits.size() != g.size())
        throw ValidationError("gumbel_softmax_from_logits: size mismatch");
    if (!(tau > 0.0)) throw ValidationError("gumbel_softmax_from_logits: tau must be positive");
    check_finite(logits, "logits");
    check_finite(g, "noise");
    const size_t n = logits.size();
    std::vector<double> z(n);
    double mx = -1e300;
    for (size_t i = 0; i < n; ++i) {
        z[i] = (logits[i] + g[i]) / tau;
        mx = std::max(mx, z[i]);
    }
    double sum = 0.0;
    for (size_t i = 0; i < n; ++i) {
        z[i] = std::exp(z[i] - mx);
        sum += z[i];
    }
    for (size_t i = 0; i < n; ++i) z[i] /= sum;
    return z;
}

std::vector<std::vector<double>> gumbel_softmax_grad_logits(const std::vector<double>& logits,
                                                            const std::vector<double>& g,
                                                            double tau) {
    // y = softmax((l+g)/tau), so dy_i/dl_j = y_i (delta_ij - y_j) / tau.
    const std::vector<double> y = gumbel_softmax_from_logits(logits, g, tau);
    const size_t n = y.size();
    std::vector<std::vector<double>> jac(n, std::vector<double>(n));
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j)
            jac[i][j] = y[i] * ((i == j ? 1.0 : 0.0) - y[j]) / tau;
    return jac;
}

double entropy(const std::vector<double>& p) {
    double h = 0.0;
    for (double x : p)
        if (x > 0.0) h -= x * std::log(x);
    return h;
}

ag::Var gumbel_softmax(const ag::Var& probs, const Tensor& noise, float tau) {
    if (!(tau > 0.0f)) throw ValidationError("gumbel_softmax: tau must be positive");
    ag::Var logp = ag::log_floor(probs, static_cast<float>(kLogFloor));
    ag::Var shifted = ag::add_const(logp, noise);
    return ag::softmax_rows(ag::scale(shifted, 1.0f / tau));
}

// ---------------------------------------------------------------------------
// Sender
// ---------------------------------------------------------------------------

void SenderConfig::validate() const {
    if (vocab_size < 2) throw ConfigError("sender: vocabulary size must be >= 2");
    if (sentence_len < 1) throw ConfigError("sender: sentence length must be >= 1");
    if (embed_dim < 1) throw ConfigError("sender: embedding dim must be >= 1");
    if (layers < 1) throw ConfigError("sender: needs at least one LSTM layer");
    if (!(temperature > 0.0f)) throw ConfigError("sender: temperature must be positive");
    if (input_dim < 1) throw ConfigError("sender: input dim must be >= 1");
}

Sender::Sender(SenderConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    input_proj_ = nn::Linear(cfg_.input_dim, cfg_.embed_dim, rng);
    lstm_ = nn::StackedLstm(cfg_.embed_dim, cfg_.embed_dim, cfg_.layers, rng);
    head_ = nn::Linear(cfg_.embed_dim, cfg_.vocab_size, rng);
    embed_ = register_param("embed",
                            nn::kaiming_uniform({cfg_.vocab_size, cfg_.embed_dim}, cfg_.vocab_size, rng));
    register_child("input_proj", &input_proj_);
    register_child("lstm", &lstm_);
    register_child("head", &head_);
}

static Tensor one_hot_rows(const std::vector<int>& idx, int64_t v) {
    Tensor t({static_cast<int64_t>(idx.size()), v});
    for (size_t r = 0; r < idx.size(); ++r) t[static_cast<int64_t>(r) * v + idx[r]] = 1.0f;
    return t;
}

SenderResult Sender::forward(const ag::Var& x, Mode mode, Rng* rng, const NoiseFn& noise) const {
    if (x->value.rank() != 2 || x->value.dim(1) != cfg_.input_dim)
        throw ValidationError("sender: input must be [N," + std::to_string(cfg_.input_dim) +
                              "], got " + shape_str(x->value.shape()));
    const int64_t N = x->value.dim(0);
    const int64_t V = cfg_.vocab_size;
    const bool training = mode == Mode::kTraining;
    if (training && !rng && !noise)
        throw ValidationError("sender: training mode needs a noise source");

    SenderResult out;
    out.sentences.resize(static_cast<size_t>(N));
    for (auto& s : out.sentences) s.symbols.reserve(cfg_.sentence_len);

    ag::Var emb = input_proj_.forward(x);
    auto state = lstm_.zero_state(N);
    for (int t = 0; t < cfg_.sentence_len; ++t) {
        ag::Var h = lstm_.step(emb, state);
        ag::Var probs = ag::softmax_rows(head_.forward(h));
        std::vector<int> idx(static_cast<size_t>(N));
        if (training) {
            Tensor gnoise;
            if (noise) {
                gnoise = noise({N, V});
                if (!gnoise.same_shape(Tensor({N, V})))
                    throw ValidationError("sender: injected noise has wrong shape");
            } else {
                gnoise = Tensor({N, V});
                for (int64_t i = 0; i < gnoise.numel(); ++i)
                    gnoise[i] = static_cast<float>(rng->gumbel());
            }
            ag::Var relaxed = gumbel_softmax(probs, gnoise, cfg_.temperature);
            for (int64_t r = 0; r < N; ++r) {
                idx[static_cast<size_t>(r)] = ag::argmax_row(relaxed->value.data() + r * V, V);
                auto& sent = out.sentences[static_cast<size_t>(r)];
                sent.symbols.push_back(idx[static_cast<size_t>(r)]);
                const float* row = relaxed->value.data() + r * V;
                sent.relaxed_form.emplace_back(row, row + V);
            }
            ag::Var step_vec =
                cfg_.hard_mode ? ag::straight_through(one_hot_rows(idx, V), relaxed) : relaxed;
            out.steps.push_back(step_vec);
            emb = ag::matmul(step_vec, embed_);
        } else {
            for (int64_t r = 0; r < N; ++r) {
                idx[static_cast<size_t>(r)] = ag::argmax_row(probs->value.data() + r * V, V);
                out.sentences[static_cast<size_t>(r)].symbols.push_back(idx[static_cast<size_t>(r)]);
            }
            emb = ag::rows_lookup(embed_, idx);
        }
    }
    out.final_hidden = state.back().h;
    out.final_states.resize(static_cast<size_t>(N));
    const int64_t H = cfg_.embed_dim;
    for (int64_t r = 0; r < N; ++r) {
        auto& st = out.final_states[static_cast<size_t>(r)];
        const float* hrow = state.back().h->value.data() + r * H;
        const float* crow = state.back().c->value.data() + r * H;
        st.hidden.assign(hrow, hrow + H);
        st.cell.assign(crow, crow + H);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Receiver
// ---------------------------------------------------------------------------

void ReceiverConfig::validate() const {
    if (vocab_size < 2) throw ConfigError("receiver: vocabulary size must be >= 2");
    if (embed_dim < 1) throw ConfigError("receiver: embedding dim must be >= 1");
    if (layers < 1) throw ConfigError("receiver: needs at least one LSTM layer");
}

Receiver::Receiver(ReceiverConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    lstm_ = nn::StackedLstm(cfg_.embed_dim, cfg_.embed_dim, cfg_.layers, rng);
    out_proj_ = nn::Linear(cfg_.embed_dim, cfg_.embed_dim, rng);
    embed_ = register_param("embed",
                            nn::kaiming_uniform({cfg_.vocab_size, cfg_.embed_dim}, cfg_.vocab_size, rng));
    register_child("lstm", &lstm_);
    register_child("out_proj", &out_proj_);
}

ag::Var Receiver::run(const std::vector<ag::Var>& embeddings) const {
    if (embeddings.empty()) throw ValidationError("receiver: empty sentence");
    auto state = lstm_.zero_state(embeddings[0]->value.dim(0));
    ag::Var h;
    for (const auto& e : embeddings) h = lstm_.step(e, state);
    return out_proj_.forward(h);
}

ag::Var Receiver::forward_steps(const std::vector<ag::Var>& steps) const {
    std::vector<ag::Var> embs;
    embs.reserve(steps.size());
    for (const auto& s : steps) {
        if (s->value.rank() != 2 || s->value.dim(1) != cfg_.vocab_size)
            throw ValidationError("receiver: step rows must be [N,V]");
        embs.push_back(ag::matmul(s, embed_));
    }
    return run(embs);
}

ag::Var Receiver::forward_symbols(const std::vector<SymbolSentence>& sentences) const {
    if (sentences.empty()) throw ValidationError("receiver: empty batch");
    const size_t len = sentences[0].symbols.size();
    for (const auto& s : sentences) {
        s.validate(cfg_.vocab_size);
        if (s.symbols.size() != len)
            throw ValidationError("receiver: ragged sentence batch");
    }
    std::vector<ag::Var> embs;
    embs.reserve(len);
    for (size_t t = 0; t < len; ++t) {
        std::vector<int> idx(sentences.size());
        for (size_t r = 0; r < sentences.size(); ++r) idx[r] = sentences[r].symbols[t];
        embs.push_back(ag::rows_lookup(embed_, idx));
    }
    return run(embs);
}

// ---------------------------------------------------------------------------
// single-sample wrappers
// ---------------------------------------------------------------------------

SenderResult sender_forward(const Sender& sender, const std::vector<float>& x, Mode mode, Rng* rng) {
    Tensor in({1, static_cast<int64_t>(x.size())}, std::vector<float>(x));
    return sender.forward(ag::constant(std::move(in)), mode, rng);
}

std::vector<float> receiver_forward(const Receiver& receiver, const SymbolSentence& sentence) {
    ag::NoGradGuard ng;
    ag::Var out = receiver.forward_symbols({sentence});
    return std::vector<float>(out->value.data(), out->value.data() + out->value.numel());
}

}  // namespace symseg::el
