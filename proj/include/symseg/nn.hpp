#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "symseg/graph.hpp"
#include "symseg/rng.hpp"
#include "symseg/tensor.hpp"

namespace symseg::nn {

/// Base for anything with trainable parameters. Children are value members of
/// the owner; registration keeps a non-owning pointer for tree walks.
class Module {
public:
    virtual ~Module() = default;

    std::vector<std::pair<std::string, ag::Var>> named_parameters() const;
    std::vector<ag::Var> parameters() const;
    int64_t parameter_count() const;

protected:
    ag::Var register_param(const std::string& name, Tensor init);
    void register_child(const std::string& name, Module* child);

private:
    void collect(const std::string& prefix,
                 std::vector<std::pair<std::string, ag::Var>>& out) const;
    std::vector<std::pair<std::string, ag::Var>> params_;
    std::vector<std::pair<std::string, Module*>> children_;
};

// -- initializers ------------------------------------------------------------

Tensor kaiming_uniform(Shape shape, int64_t fan_in, Rng& rng);
Tensor uniform_init(Shape shape, float bound, Rng& rng);

// -- layers -------------------------------------------------------------------

class Linear : public Module {
public:
    Linear() = default;
    Linear(int64_t in, int64_t out, Rng& rng);
    ag::Var forward(const ag::Var& x) const;
    ag::Var weight, bias;
};

class Conv2d : public Module {
public:
    Conv2d() = default;
    Conv2d(int64_t in_ch, int64_t out_ch, int kernel, Rng& rng);
    ag::Var forward(const ag::Var& x) const;
    ag::Var weight, bias;
    int pad = 0;
};

class InstanceNorm2d : public Module {
public:
    InstanceNorm2d() = default;
    explicit InstanceNorm2d(int64_t channels);
    ag::Var forward(const ag::Var& x) const;
    ag::Var gamma, beta;
};

/// One LSTM layer state: hidden and cell, both [N, H].
struct LstmState {
    ag::Var h;
    ag::Var c;
};

class LstmCell : public Module {
public:
    LstmCell() = default;
    LstmCell(int64_t input, int64_t hidden, Rng& rng);
    LstmState step(const ag::Var& x, const LstmState& prev) const;
    LstmState zero_state(int64_t batch) const;
    int64_t hidden_size() const { return hidden_; }

    ag::Var w_ih, w_hh, b_ih, b_hh;

private:
    int64_t hidden_ = 0;
};

/// Stack of LSTM layers; layer k feeds layer k+1 at every step.
class StackedLstm : public Module {
public:
    StackedLstm() = default;
    StackedLstm(int64_t input, int64_t hidden, int layers, Rng& rng);
    std::vector<LstmState> zero_state(int64_t batch) const;
    ag::Var step(const ag::Var& x, std::vector<LstmState>& state) const;
    int layers() const { return static_cast<int>(cells_.size()); }

private:
    std::vector<std::unique_ptr<LstmCell>> cells_;
};

// -- optimizers ----------------------------------------------------------------

class Optimizer {
public:
    explicit Optimizer(std::vector<ag::Var> params) : params_(std::move(params)) {}
    virtual ~Optimizer() = default;
    virtual void step() = 0;
    void zero_grad();

protected:
    std::vector<ag::Var> params_;
};

class Sgd : public Optimizer {
public:
    Sgd(std::vector<ag::Var> params, float lr) : Optimizer(std::move(params)), lr(lr) {}
    void step() override;
    float lr;
};

class Adam : public Optimizer {
public:
    Adam(std::vector<ag::Var> params, float lr, float beta1 = 0.9f, float beta2 = 0.999f,
         float eps = 1e-8f);
    void step() override;
    float lr, beta1, beta2, eps;

private:
    std::vector<Tensor> m_, v_;
    int64_t t_ = 0;
};

}  // namespace symseg::nn
