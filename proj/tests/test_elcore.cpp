#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "symseg/elcore.hpp"
#include "symseg/errors.hpp"
#include "testutil.hpp"

using namespace symseg;
using namespace symseg::el;

namespace {

std::vector<double> random_simplex(size_t n, Rng& rng) {
    std::vector<double> p(n);
    double s = 0.0;
    for (auto& v : p) {
        v = rng.uniform(1e-4, 1.0);
        s += v;
    }
    for (auto& v : p) v /= s;
    return p;
}

void zero_module(nn::Module& m) {
    for (auto& [name, p] : m.named_parameters()) p->value.fill(0.0f);
}

}  // namespace

TEST_CASE("gumbel softmax: uniform input with zero noise is a fixed point") {
    std::vector<double> p(4, 0.25), g(4, 0.0);
    auto y = gumbel_softmax_sample(p, g, 1.0);
    for (double v : y) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("gumbel softmax: near-zero temperature snaps to one-hot") {
    std::vector<double> p{0.1, 0.7, 0.2}, g(3, 0.0);
    auto y = gumbel_softmax_sample(p, g, 0.01);
    CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(y[0] < 1e-6);
    CHECK(y[2] < 1e-6);
}

TEST_CASE("gumbel softmax: matches independent scalar re-evaluation") {
    Rng rng(101);
    for (int rep = 0; rep < 50; ++rep) {
        const size_t n = 2 + rng.below(10);
        auto p = random_simplex(n, rng);
        std::vector<double> g(n);
        for (auto& v : g) v = rng.gumbel();
        const double tau = 0.5;
        auto y = gumbel_softmax_sample(p, g, tau);
        // direct transcription of the relaxation, scalar by scalar
        double denom = 0.0;
        std::vector<double> expect(n);
        for (size_t i = 0; i < n; ++i) {
            expect[i] = std::exp((std::log(std::max(p[i], 1e-12)) + g[i]) / tau);
            denom += expect[i];
        }
        for (size_t i = 0; i < n; ++i) CHECK(y[i] == doctest::Approx(expect[i] / denom).epsilon(1e-10));
    }
}

TEST_CASE("gumbel softmax: simplex invariant over 1000 random triples") {
    Rng rng(102);
    for (int rep = 0; rep < 1000; ++rep) {
        const size_t n = 2 + rng.below(15);
        auto p = random_simplex(n, rng);
        std::vector<double> g(n);
        for (auto& v : g) v = rng.gumbel();
        const double tau = rng.uniform(0.05, 4.0);
        auto y = gumbel_softmax_sample(p, g, tau);
        double s = 0.0;
        for (double v : y) {
            CHECK(v >= 0.0);
            s += v;
        }
        CHECK(std::abs(s - 1.0) <= 1e-6);
    }
}

TEST_CASE("gumbel softmax: low-temperature limit selects argmax(log p + g)") {
    Rng rng(103);
    int done = 0;
    while (done < 200) {
        const size_t n = 2 + rng.below(15);
        auto p = random_simplex(n, rng);
        std::vector<double> g(n);
        for (auto& v : g) v = rng.gumbel();
        std::vector<double> z(n);
        for (size_t i = 0; i < n; ++i) z[i] = std::log(p[i]) + g[i];
        // a near-tie needs an even smaller tau; the limit statement concerns
        // separated maxima, so keep draws with a 0.15 top-2 gap
        size_t best = 0;
        for (size_t i = 1; i < n; ++i)
            if (z[i] > z[best]) best = i;
        double second = -1e300;
        for (size_t i = 0; i < n; ++i)
            if (i != best) second = std::max(second, z[i]);
        if (z[best] - second < 0.15) continue;
        auto y = gumbel_softmax_sample(p, g, 0.01);
        size_t got = 0;
        for (size_t i = 1; i < n; ++i)
            if (y[i] > y[got]) got = i;
        CHECK(got == best);
        CHECK(y[best] >= 1.0 - 1e-4);
        ++done;
    }
}

TEST_CASE("gumbel softmax: analytic gradient vs central differences") {
    Rng rng(104);
    for (int rep = 0; rep < 20; ++rep) {
        const size_t n = 2 + rng.below(8);
        std::vector<double> logits(n), g(n);
        for (auto& v : logits) v = rng.uniform(-2.0, 2.0);
        for (auto& v : g) v = rng.gumbel();
        const double tau = rng.uniform(0.3, 2.0);
        auto jac = gumbel_softmax_grad_logits(logits, g, tau);
        const double h = 1e-6;
        for (size_t j = 0; j < n; ++j) {
            auto lp = logits, lm = logits;
            lp[j] += h;
            lm[j] -= h;
            auto yp = gumbel_softmax_from_logits(lp, g, tau);
            auto ym = gumbel_softmax_from_logits(lm, g, tau);
            for (size_t i = 0; i < n; ++i) {
                const double fd = (yp[i] - ym[i]) / (2 * h);
                const double scale = std::max(std::abs(fd), 1e-6);
                CHECK(std::abs(jac[i][j] - fd) / scale < 1e-3);
            }
        }
    }
}

TEST_CASE("gumbel softmax: autograd path agrees with the analytic jacobian") {
    Rng rng(105);
    const int64_t V = 6;
    std::vector<double> logits(V), g(V);
    for (auto& v : logits) v = rng.uniform(-1.5, 1.5);
    for (auto& v : g) v = rng.gumbel();
    const float tau = 0.7f;

    // p = softmax(logits); y = GS(p); pick one output component as the loss
    Tensor lt({1, V});
    Tensor gt({1, V});
    for (int64_t i = 0; i < V; ++i) {
        lt[i] = static_cast<float>(logits[static_cast<size_t>(i)]);
        gt[i] = static_cast<float>(g[static_cast<size_t>(i)]);
    }
    auto jac = gumbel_softmax_grad_logits(logits, g, tau);
    for (int64_t out = 0; out < V; ++out) {
        ag::Var lv = ag::parameter(lt);
        ag::Var y = gumbel_softmax(ag::softmax_rows(lv), gt, tau);
        Tensor pick({1, V});
        pick[out] = 1.0f;
        ag::backward(ag::sum_all(ag::mul(y, ag::constant(pick))));
        for (int64_t j = 0; j < V; ++j) {
            const double an = jac[static_cast<size_t>(out)][static_cast<size_t>(j)];
            CHECK(std::abs(double(lv->grad[j]) - an) < 1e-3 * std::max(1.0, std::abs(an)));
        }
    }
}

TEST_CASE("gumbel softmax: entropy is non-decreasing in temperature") {
    Rng rng(106);
    for (int rep = 0; rep < 100; ++rep) {
        const size_t n = 2 + rng.below(10);
        auto p = random_simplex(n, rng);
        std::vector<double> g(n);
        for (auto& v : g) v = rng.gumbel();
        double prev = -1.0;
        for (double tau : {0.05, 0.2, 0.5, 1.0, 2.0, 5.0}) {
            const double h = entropy(gumbel_softmax_sample(p, g, tau));
            CHECK(h >= prev - 1e-9);
            prev = h;
        }
    }
}

TEST_CASE("gumbel softmax: input validation") {
    std::vector<double> ok{0.5, 0.5}, g{0.0, 0.0};
    CHECK_THROWS_AS(gumbel_softmax_sample({0.9, 0.2}, g, 1.0), ValidationError);
    CHECK_THROWS_AS(gumbel_softmax_sample({-0.1, 1.1}, g, 1.0), ValidationError);
    CHECK_THROWS_AS(gumbel_softmax_sample(ok, g, 0.0), ValidationError);
    CHECK_THROWS_AS(gumbel_softmax_sample(ok, {0.0, std::nan("")}, 1.0), ValidationError);
    CHECK_THROWS_AS(gumbel_softmax_sample({0.5, std::numeric_limits<double>::infinity()}, g, 1.0),
                    ValidationError);
    CHECK_NOTHROW(gumbel_softmax_sample({1.0, 0.0}, g, 1.0));  // zero prob is floored, not fatal
}

TEST_CASE("vocabulary and sentence invariants") {
    CHECK_THROWS_AS(Vocabulary(1), ValidationError);
    CHECK(Vocabulary(2).size == 2);
    SymbolSentence s;
    s.symbols = {0, 3, 1};
    CHECK_NOTHROW(s.validate(4));
    CHECK_THROWS_AS(s.validate(3), ValidationError);
    s.relaxed_form = {{0.5f, 0.5f, 0.0f, 0.0f}, {1, 0, 0, 0}, {0, 0, 0.25f, 0.75f}};
    CHECK_NOTHROW(s.validate(4));
    s.relaxed_form[0][0] = 0.6f;  // breaks the sum
    CHECK_THROWS_AS(s.validate(4), ValidationError);
    CHECK(SymbolSentence{{189, 663, 277}, {}}.to_string() == "189 663 277");
}

namespace {
SenderConfig small_sender_cfg() {
    SenderConfig c;
    c.input_dim = 5;
    c.vocab_size = 12;
    c.sentence_len = 8;
    c.embed_dim = 16;
    c.layers = 2;
    return c;
}
}  // namespace

TEST_CASE("sender emits well-formed sentences of exactly N_S symbols") {
    Rng rng(201);
    Sender sender(small_sender_cfg(), rng);
    Rng noise(5);
    auto x = testutil::random_tensor({3, 5}, rng);
    for (const Mode mode : {Mode::kTraining, Mode::kInference}) {
        auto res = sender.forward(ag::constant(x), mode, &noise);
        REQUIRE(res.sentences.size() == 3);
        for (const auto& s : res.sentences) {
            CHECK(s.symbols.size() == 8);
            CHECK_NOTHROW(s.validate(12));
            CHECK((mode == Mode::kTraining ? !s.relaxed_form.empty() : s.relaxed_form.empty()));
        }
        CHECK(res.final_hidden->value.dim(1) == 16);
        for (const auto& st : res.final_states) {
            CHECK(st.hidden.size() == 16);
            CHECK_NOTHROW(st.validate());
        }
    }
}

TEST_CASE("sender with all-zero weights ties every logit and picks index 0") {
    Rng rng(202);
    Sender sender(small_sender_cfg(), rng);
    zero_module(sender);
    auto res = sender_forward(sender, {0.3f, -1.0f, 0.5f, 2.0f, 0.0f}, Mode::kInference);
    for (int s : res.sentences[0].symbols) CHECK(s == 0);
}

TEST_CASE("sender inference is deterministic for fixed weights") {
    Rng rng(203);
    Sender sender(small_sender_cfg(), rng);
    auto x = testutil::random_tensor({1, 5}, rng);
    auto a = sender.forward(ag::constant(x), Mode::kInference);
    auto b = sender.forward(ag::constant(x), Mode::kInference);
    CHECK(a.sentences[0].symbols == b.sentences[0].symbols);
    for (int64_t i = 0; i < a.final_hidden->value.numel(); ++i)
        CHECK(a.final_hidden->value[i] == b.final_hidden->value[i]);
}

TEST_CASE("sender training is reproducible through the injected noise hook") {
    Rng rng(204);
    Sender sender(small_sender_cfg(), rng);
    auto x = testutil::random_tensor({2, 5}, rng);
    auto noise_fn = [](const Shape& shape) {
        Rng nrng(99);
        Tensor t(shape);
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(nrng.gumbel());
        return t;
    };
    auto a = sender.forward(ag::constant(x), Mode::kTraining, nullptr, noise_fn);
    auto b = sender.forward(ag::constant(x), Mode::kTraining, nullptr, noise_fn);
    for (size_t i = 0; i < a.sentences.size(); ++i) {
        CHECK(a.sentences[i].symbols == b.sentences[i].symbols);
        CHECK(a.sentences[i].relaxed_form == b.sentences[i].relaxed_form);
    }
}

TEST_CASE("sender validation errors") {
    Rng rng(205);
    SenderConfig bad = small_sender_cfg();
    bad.sentence_len = 0;
    CHECK_THROWS_AS(Sender(bad, rng), ConfigError);
    Sender sender(small_sender_cfg(), rng);
    auto wrong = testutil::random_tensor({1, 4}, rng);
    CHECK_THROWS_AS(sender.forward(ag::constant(wrong), Mode::kInference), ValidationError);
    auto x = testutil::random_tensor({1, 5}, rng);
    CHECK_THROWS_AS(sender.forward(ag::constant(x), Mode::kTraining), ValidationError);
}

TEST_CASE("gradients flow from the relaxed sentence back to the sender input") {
    Rng rng(206);
    Sender sender(small_sender_cfg(), rng);
    Rng noise(7);
    ag::Var x = ag::parameter(testutil::random_tensor({2, 5}, rng));
    auto res = sender.forward(x, Mode::kTraining, &noise);
    ag::Var acc = res.steps[0];
    for (size_t t = 1; t < res.steps.size(); ++t) acc = ag::add(acc, res.steps[t]);
    ag::backward(ag::mean_all(ag::mul(acc, acc)));
    double norm = 0.0;
    for (int64_t i = 0; i < x->grad.numel(); ++i) norm += std::abs(double(x->grad[i]));
    CHECK(norm > 0.0);
}

TEST_CASE("receiver output contract and determinism") {
    Rng rng(301);
    ReceiverConfig rc;
    rc.vocab_size = 12;
    rc.embed_dim = 16;
    Receiver receiver(rc, rng);
    SymbolSentence s{{1, 4, 7, 0, 11, 2, 2, 5}, {}};
    auto a = receiver_forward(receiver, s);
    auto b = receiver_forward(receiver, s);
    CHECK(a.size() == 16);
    CHECK(a == b);

    SymbolSentence bad{{12, 0, 0, 0, 0, 0, 0, 0}, {}};
    CHECK_THROWS_AS(receiver_forward(receiver, bad), ValidationError);
}

TEST_CASE("receiver: relaxed one-hot rows equal discrete lookups") {
    Rng rng(302);
    ReceiverConfig rc;
    rc.vocab_size = 9;
    rc.embed_dim = 12;
    Receiver receiver(rc, rng);
    const std::vector<int> symbols{3, 8, 0, 5};
    std::vector<ag::Var> steps;
    for (int s : symbols) {
        Tensor row({1, 9});
        row[s] = 1.0f;
        steps.push_back(ag::constant(row));
    }
    ag::NoGradGuard ng;
    ag::Var relaxed_out = receiver.forward_steps(steps);
    SymbolSentence sent{symbols, {}};
    ag::Var discrete_out = receiver.forward_symbols({sent});
    for (int64_t i = 0; i < relaxed_out->value.numel(); ++i)
        CHECK(relaxed_out->value[i] ==
              doctest::Approx(discrete_out->value[i]).epsilon(1e-6));
}
