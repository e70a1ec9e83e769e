#include "symseg/nn.hpp"

#include <cmath>

#include "symseg/errors.hpp"

namespace symseg::nn {

// ---------------------------------------------------------------------------
// Module
// ---------------------------------------------------------------------------

ag::Var Module::register_param(const std::string& name, Tensor init) {
    ag::Var p = ag::parameter(std::move(init));
    params_.emplace_back(name, p);
    return p;
}

void Module::register_child(const std::string& name, Module* child) {
    children_.emplace_back(name, child);
}

void Module::collect(const std::string& prefix,
                     std::vector<std::pair<std::string, ag::Var>>& out) const {
    for (const auto& [name, p] : params_) out.emplace_back(prefix + name, p);
    for (const auto& [name, child] : children_) child->collect(prefix + name + ".", out);
}

std::vector<std::pair<std::string, ag::Var>> Module::named_parameters() const {
    std::vector<std::pair<std::string, ag::Var>> out;
    collect("", out);
    return out;
}

std::vector<ag::Var> Module::parameters() const {
    std::vector<ag::Var> out;
    for (auto& [name, p] : named_parameters()) out.push_back(p);
    return out;
}

int64_t Module::parameter_count() const {
    int64_t n = 0;
    for (auto& [name, p] : named_parameters()) n += p->value.numel();
    return n;
}

// ---------------------------------------------------------------------------
// initializers
// ---------------------------------------------------------------------------

Tensor uniform_init(Shape shape, float bound, Rng& rng) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<float>(rng.uniform(-bound, bound));
    return t;
}

Tensor kaiming_uniform(Shape shape, int64_t fan_in, Rng& rng) {
    const float bound = std::sqrt(6.0f / static_cast<float>(fan_in > 0 ? fan_in : 1));
    return uniform_init(std::move(shape), bound, rng);
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

Linear::Linear(int64_t in, int64_t out, Rng& rng) {
    weight = register_param("weight", kaiming_uniform({out, in}, in, rng));
    bias = register_param("bias", Tensor({out}));
}

ag::Var Linear::forward(const ag::Var& x) const { return ag::linear(x, weight, bias); }

Conv2d::Conv2d(int64_t in_ch, int64_t out_ch, int kernel, Rng& rng) : pad(kernel / 2) {
    const int64_t fan_in = in_ch * kernel * kernel;
    weight = register_param("weight", kaiming_uniform({out_ch, in_ch, kernel, kernel}, fan_in, rng));
    bias = register_param("bias", Tensor({out_ch}));
}

ag::Var Conv2d::forward(const ag::Var& x) const { return ag::conv2d(x, weight, bias, pad); }

InstanceNorm2d::InstanceNorm2d(int64_t channels) {
    gamma = register_param("gamma", Tensor({channels}, 1.0f));
    beta = register_param("beta", Tensor({channels}));
}

ag::Var InstanceNorm2d::forward(const ag::Var& x) const {
    return ag::instance_norm2d(x, gamma, beta);
}

LstmCell::LstmCell(int64_t input, int64_t hidden, Rng& rng) : hidden_(hidden) {
    const float bound = 1.0f / std::sqrt(static_cast<float>(hidden));
    w_ih = register_param("w_ih", uniform_init({4 * hidden, input}, bound, rng));
    w_hh = register_param("w_hh", uniform_init({4 * hidden, hidden}, bound, rng));
    b_ih = register_param("b_ih", uniform_init({4 * hidden}, bound, rng));
    b_hh = register_param("b_hh", uniform_init({4 * hidden}, bound, rng));
}

LstmState LstmCell::zero_state(int64_t batch) const {
    return {ag::constant(Tensor({batch, hidden_})), ag::constant(Tensor({batch, hidden_}))};
}

LstmState LstmCell::step(const ag::Var& x, const LstmState& prev) const {
    const int64_t H = hidden_;
    ag::Var gates = ag::add(ag::linear(x, w_ih, b_ih), ag::linear(prev.h, w_hh, b_hh));
    ag::Var i = ag::sigmoid(ag::slice_cols(gates, 0, H));
    ag::Var f = ag::sigmoid(ag::slice_cols(gates, H, H));
    ag::Var g = ag::tanh_op(ag::slice_cols(gates, 2 * H, H));
    ag::Var o = ag::sigmoid(ag::slice_cols(gates, 3 * H, H));
    ag::Var c = ag::add(ag::mul(f, prev.c), ag::mul(i, g));
    ag::Var h = ag::mul(o, ag::tanh_op(c));
    return {h, c};
}

StackedLstm::StackedLstm(int64_t input, int64_t hidden, int layers, Rng& rng) {
    if (layers < 1) throw ValidationError("StackedLstm: layers must be >= 1");
    for (int l = 0; l < layers; ++l) {
        cells_.push_back(std::make_unique<LstmCell>(l == 0 ? input : hidden, hidden, rng));
        register_child("layer" + std::to_string(l), cells_.back().get());
    }
}

std::vector<LstmState> StackedLstm::zero_state(int64_t batch) const {
    std::vector<LstmState> st;
    for (const auto& c : cells_) st.push_back(c->zero_state(batch));
    return st;
}

ag::Var StackedLstm::step(const ag::Var& x, std::vector<LstmState>& state) const {
    ag::Var inp = x;
    for (size_t l = 0; l < cells_.size(); ++l) {
        state[l] = cells_[l]->step(inp, state[l]);
        inp = state[l].h;
    }
    return inp;
}

// ---------------------------------------------------------------------------
// optimizers
// ---------------------------------------------------------------------------

void Optimizer::zero_grad() {
    for (auto& p : params_)
        if (!p->grad.empty()) p->grad.fill(0.0f);
}

void Sgd::step() {
    for (auto& p : params_) {
        if (p->grad.empty()) continue;
        float* w = p->value.data();
        const float* g = p->grad.data();
        for (int64_t i = 0; i < p->value.numel(); ++i) w[i] -= lr * g[i];
    }
}

Adam::Adam(std::vector<ag::Var> params, float lr, float beta1, float beta2, float eps)
    : Optimizer(std::move(params)), lr(lr), beta1(beta1), beta2(beta2), eps(eps) {
    for (const auto& p : params_) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (size_t k = 0; k < params_.size(); ++k) {
        auto& p = params_[k];
        if (p->grad.empty()) continue;
        float* w = p->value.data();
        const float* g = p->grad.data();
        float* m = m_[k].data();
        float* v = v_[k].data();
        for (int64_t i = 0; i < p->value.numel(); ++i) {
            m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            w[i] -= static_cast<float>(lr * mh / (std::sqrt(vh) + eps));
        }
    }
}

}  // namespace symseg::nn
