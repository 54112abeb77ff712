#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mlfd/autograd.hpp"
#include "mlfd/distill.hpp"
#include "mlfd/ops.hpp"
#include "mlfd/rng.hpp"

namespace mlfd::testkit {

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCase {
    std::vector<Tensor> inputs;
    Builder f;
};

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = scale * standard_normal(rng);
    return t;
}

// Values bounded away from zero so kinked functions are differentiable at every sample.
inline Tensor away_from_zero(Shape shape, Rng& rng) {
    Tensor t = random_tensor(std::move(shape), rng);
    for (double& v : t.values()) v = (v < 0 ? -1.0 : 1.0) * (0.05 + std::abs(v));
    return t;
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(hi - lo + 1));
}

// Non-scalar outputs are reduced with fixed random weights, so the whole Jacobian is exercised.
inline Var project(Tape& tape, Var out, const Tensor& weights) {
    if (out.value().size() == 1) return ops::scale(out, weights[0]);
    return ops::sum(ops::mul(out, tape.constant(weights.reshaped(out.value().shape()))));
}

/// Worst relative error |a - n| / max(|a|, |n|, 1e-4) between the analytic gradient
/// and central finite differences over every input element.
inline double gradcheck(const GradCase& c, std::uint64_t seed, double h = 1e-5) {
    Tensor weights;
    auto evaluate = [&](const std::vector<Tensor>& inputs) {
        Tape tape(false);
        std::vector<Var> vars;
        for (const auto& t : inputs) vars.push_back(tape.constant(t));
        return project(tape, c.f(tape, vars), weights).value().item();
    };
    {
        Tape probe(false);
        std::vector<Var> vars;
        for (const auto& t : c.inputs) vars.push_back(probe.constant(t));
        Rng rng(seed);
        weights = random_tensor({c.f(probe, vars).value().size()}, rng);
    }

    Tape tape;
    std::vector<Var> leaves;
    for (const auto& t : c.inputs) leaves.push_back(tape.leaf(t));
    tape.backward(project(tape, c.f(tape, leaves), weights));

    double worst = 0.0;
    std::vector<Tensor> work = c.inputs;
    for (std::size_t k = 0; k < work.size(); ++k) {
        const Tensor* g = tape.grad(leaves[k]);
        for (std::size_t i = 0; i < work[k].size(); ++i) {
            const double x0 = work[k][i];
            work[k][i] = x0 + h;
            const double up = evaluate(work);
            work[k][i] = x0 - h;
            const double down = evaluate(work);
            work[k][i] = x0;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = g ? (*g)[i] : 0.0;
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-4});
            worst = std::max(worst, std::abs(analytic - numeric) / denom);
        }
    }
    return worst;
}

struct Primitive {
    std::string name;
    std::function<GradCase(Rng&)> make;
};

inline std::vector<Primitive> gradient_primitives() {
    std::vector<Primitive> p;
    p.push_back({"matmul", [](Rng& r) {
                     const std::size_t n = pick(r, 1, 4), k = pick(r, 1, 5), m = pick(r, 1, 4);
                     return GradCase{{random_tensor({n, k}, r), random_tensor({k, m}, r)},
                                     [](Tape&, const std::vector<Var>& v) { return ops::matmul(v[0], v[1]); }};
                 }});
    p.push_back({"bias_add", [](Rng& r) {
                     const std::size_t n = pick(r, 1, 3), c = pick(r, 1, 4);
                     if (uniform01(r) < 0.5)
                         return GradCase{{random_tensor({n, c}, r), random_tensor({c}, r)},
                                         [](Tape&, const std::vector<Var>& v) { return ops::bias_add(v[0], v[1]); }};
                     const std::size_t s = pick(r, 1, 3);
                     return GradCase{{random_tensor({n, c, s, s}, r), random_tensor({c}, r)},
                                     [](Tape&, const std::vector<Var>& v) { return ops::bias_add(v[0], v[1]); }};
                 }});
    p.push_back({"add", [](Rng& r) {
                     const Shape s{pick(r, 1, 3), pick(r, 1, 4)};
                     return GradCase{{random_tensor(s, r), random_tensor(s, r)},
                                     [](Tape&, const std::vector<Var>& v) { return ops::add(v[0], v[1]); }};
                 }});
    p.push_back({"sub", [](Rng& r) {
                     const Shape s{pick(r, 1, 3), pick(r, 1, 4)};
                     return GradCase{{random_tensor(s, r), random_tensor(s, r)},
                                     [](Tape&, const std::vector<Var>& v) { return ops::sub(v[0], v[1]); }};
                 }});
    p.push_back({"mul", [](Rng& r) {
                     const Shape s{pick(r, 1, 3), pick(r, 1, 4)};
                     return GradCase{{random_tensor(s, r), random_tensor(s, r)},
                                     [](Tape&, const std::vector<Var>& v) { return ops::mul(v[0], v[1]); }};
                 }});
    p.push_back({"scale", [](Rng& r) {
                     const double s = standard_normal(r);
                     return GradCase{{random_tensor({pick(r, 1, 3), pick(r, 1, 4)}, r)},
                                     [s](Tape&, const std::vector<Var>& v) { return ops::scale(v[0], s); }};
                 }});
    p.push_back({"sum", [](Rng& r) {
                     return GradCase{{random_tensor({pick(r, 1, 3), pick(r, 1, 4)}, r)},
                                     [](Tape&, const std::vector<Var>& v) { return ops::sum(v[0]); }};
                 }});
    p.push_back({"mean", [](Rng& r) {
                     return GradCase{{random_tensor({pick(r, 1, 3), pick(r, 1, 4)}, r)},
                                     [](Tape&, const std::vector<Var>& v) { return ops::mean(v[0]); }};
                 }});
    p.push_back({"relu", [](Rng& r) {
                     return GradCase{{away_from_zero({pick(r, 1, 3), pick(r, 1, 5)}, r)},
                                     [](Tape&, const std::vector<Var>& v) { return ops::relu(v[0]); }};
                 }});
    p.push_back({"gelu", [](Rng& r) {
                     return GradCase{{random_tensor({pick(r, 1, 3), pick(r, 1, 5)}, r, 2.0)},
                                     [](Tape&, const std::vector<Var>& v) { return ops::gelu(v[0]); }};
                 }});
    p.push_back({"sigmoid", [](Rng& r) {
                     return GradCase{{random_tensor({pick(r, 1, 3), pick(r, 1, 5)}, r, 2.0)},
                                     [](Tape&, const std::vector<Var>& v) { return ops::sigmoid(v[0]); }};
                 }});
    p.push_back({"conv2d", [](Rng& r) {
                     const std::size_t n = pick(r, 1, 2), c = pick(r, 1, 3), o = pick(r, 1, 3);
                     const std::size_t k = pick(r, 1, 3), stride = pick(r, 1, 2), pad = pick(r, 0, 1);
                     const std::size_t side = k + pick(r, 0, 3);
                     return GradCase{{random_tensor({n, c, side, side}, r), random_tensor({o, c, k, k}, r)},
                                     [stride, pad](Tape&, const std::vector<Var>& v) {
                                         return ops::conv2d(v[0], v[1], stride, pad);
                                     }};
                 }});
    p.push_back({"batchnorm_train", [](Rng& r) {
                     const std::size_t n = pick(r, 2, 4), c = pick(r, 1, 3);
                     const bool spatial = uniform01(r) < 0.5;
                     const Shape xs = spatial ? Shape{n, c, 2, 2} : Shape{n, c};
                     return GradCase{{random_tensor(xs, r), random_tensor({c}, r), random_tensor({c}, r)},
                                     [c](Tape&, const std::vector<Var>& v) {
                                         BatchNormStats stats(c);
                                         return ops::batchnorm(v[0], v[1], v[2], stats, Mode::Train);
                                     }};
                 }});
    p.push_back({"batchnorm_eval", [](Rng& r) {
                     const std::size_t n = pick(r, 1, 3), c = pick(r, 1, 3);
                     BatchNormStats stats(c);
                     for (std::size_t i = 0; i < c; ++i) {
                         stats.running_mean[i] = standard_normal(r);
                         stats.running_var[i] = 0.5 + uniform01(r);
                     }
                     return GradCase{{random_tensor({n, c, 2, 2}, r), random_tensor({c}, r), random_tensor({c}, r)},
                                     [stats](Tape&, const std::vector<Var>& v) mutable {
                                         return ops::batchnorm(v[0], v[1], v[2], stats, Mode::Eval);
                                     }};
                 }});
    p.push_back({"dropout", [](Rng& r) {
                     const double prob = 0.1 + 0.7 * uniform01(r);
                     const std::uint64_t s = r();
                     return GradCase{{random_tensor({pick(r, 1, 3), pick(r, 2, 6)}, r)},
                                     [prob, s](Tape&, const std::vector<Var>& v) {
                                         return ops::dropout(v[0], prob, s, Mode::Train);
                                     }};
                 }});
    p.push_back({"avg_pool2d", [](Rng& r) {
                     const std::size_t k = pick(r, 1, 2), side = k * pick(r, 1, 3);
                     return GradCase{{random_tensor({pick(r, 1, 2), pick(r, 1, 3), side, side}, r)},
                                     [k](Tape&, const std::vector<Var>& v) { return ops::avg_pool2d(v[0], k); }};
                 }});
    p.push_back({"global_avg_pool", [](Rng& r) {
                     const std::size_t side = pick(r, 1, 4);
                     return GradCase{{random_tensor({pick(r, 1, 2), pick(r, 1, 3), side, side}, r)},
                                     [](Tape&, const std::vector<Var>& v) { return ops::global_avg_pool(v[0]); }};
                 }});
    p.push_back({"concat_channels", [](Rng& r) {
                     const std::size_t n = pick(r, 1, 2), s = pick(r, 1, 3), parts = pick(r, 1, 3);
                     std::vector<Tensor> in;
                     for (std::size_t i = 0; i < parts; ++i) in.push_back(random_tensor({n, pick(r, 1, 3), s, s}, r));
                     return GradCase{in, [](Tape&, const std::vector<Var>& v) { return ops::concat_channels(v); }};
                 }});
    p.push_back({"flatten", [](Rng& r) {
                     return GradCase{{random_tensor({pick(r, 1, 2), pick(r, 1, 3), 2, 2}, r)},
                                     [](Tape&, const std::vector<Var>& v) { return ops::flatten(v[0]); }};
                 }});
    p.push_back({"reshape", [](Rng& r) {
                     const std::size_t n = pick(r, 1, 2), c = pick(r, 1, 3);
                     return GradCase{{random_tensor({n, c * 4}, r)}, [n, c](Tape&, const std::vector<Var>& v) {
                                         return ops::reshape(v[0], {n, c, 2, 2});
                                     }};
                 }});
    p.push_back({"channel_scale", [](Rng& r) {
                     const std::size_t n = pick(r, 1, 2), c = pick(r, 1, 3), s = pick(r, 1, 3);
                     return GradCase{{random_tensor({n, c, s, s}, r), random_tensor({n, c}, r)},
                                     [](Tape&, const std::vector<Var>& v) { return ops::channel_scale(v[0], v[1]); }};
                 }});
    p.push_back({"softmax_with_temperature", [](Rng& r) {
                     const double tau = 0.5 + 3.5 * uniform01(r);
                     return GradCase{{random_tensor({pick(r, 1, 3), pick(r, 2, 6)}, r, 2.0)},
                                     [tau](Tape&, const std::vector<Var>& v) {
                                         return ops::softmax_with_temperature(v[0], tau);
                                     }};
                 }});
    // Both arguments must stay row-stochastic under perturbation, so they enter through softmax.
    p.push_back({"cross_entropy", [](Rng& r) {
                     const Shape s{pick(r, 1, 3), pick(r, 2, 6)};
                     return GradCase{{random_tensor(s, r), random_tensor(s, r)}, [](Tape&, const std::vector<Var>& v) {
                                         return ops::cross_entropy(ops::softmax_with_temperature(v[0], 1.0),
                                                                   ops::softmax_with_temperature(v[1], 1.0));
                                     }};
                 }});
    p.push_back({"mse", [](Rng& r) {
                     const Shape s{pick(r, 1, 3), pick(r, 1, 5)};
                     return GradCase{{random_tensor(s, r), random_tensor(s, r)},
                                     [](Tape&, const std::vector<Var>& v) { return ops::mse(v[0], v[1]); }};
                 }});
    p.push_back({"kd_loss", [](Rng& r) {
                     const std::size_t n = pick(r, 1, 4), classes = pick(r, 2, 6), width = pick(r, 2, 5);
                     const std::size_t ch = pick(r, 1, 3), tch = pick(r, 1, 3);
                     std::vector<std::size_t> labels;
                     for (std::size_t i = 0; i < n; ++i) labels.push_back(pick(r, 0, classes - 1));
                     Tensor hot(Shape{n, classes});
                     for (std::size_t i = 0; i < n; ++i) hot[i * classes + labels[i]] = 1.0;
                     const Tensor tprobs = softmax(random_tensor({n, classes}, r, 2.0));
                     const Tensor temb_vec = random_tensor({n, width}, r);
                     const Tensor temb_map = random_tensor({n, tch, 2, 2}, r);
                     distill::KDConfig kd;
                     kd.alpha = uniform01(r);
                     kd.betas = {uniform01(r), uniform01(r)};
                     kd.tau = 0.5 + 3.5 * uniform01(r);
                     auto adaptor = std::make_shared<distill::StudentAdaptor>("map", Shape{ch, 2, 2}, Shape{tch, 2, 2},
                                                                              r());
                     return GradCase{
                         {random_tensor({n, classes}, r), random_tensor({n, width}, r), random_tensor({n, ch, 2, 2}, r)},
                         [=](Tape& tape, const std::vector<Var>& v) {
                             const std::vector<Var> embs{v[1], adaptor->apply(tape, v[2])};
                             const std::vector<Tensor> targets{temb_vec, temb_map};
                             return distill::kd_loss(hot, v[0], embs, tprobs, targets, kd).total;
                         }};
                 }});
    return p;
}

struct PrimitiveReport {
    std::string name;
    std::size_t cases = 0;
    double worst = 0.0;
};

inline std::vector<PrimitiveReport> run_gradient_suite(std::size_t cases, std::uint64_t seed) {
    std::vector<PrimitiveReport> out;
    for (const auto& prim : gradient_primitives()) {
        PrimitiveReport rep{prim.name};
        for (std::size_t c = 0; c < cases; ++c) {
            Rng rng(derive_seed(seed, prim.name, c));
            rep.worst = std::max(rep.worst, gradcheck(prim.make(rng), derive_seed(seed, prim.name, c + 1000)));
            ++rep.cases;
        }
        out.push_back(rep);
    }
    return out;
}

}  // namespace mlfd::testkit
