#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "mlfd/autograd.hpp"
#include "mlfd/tensor.hpp"

namespace mlfd {

enum class Mode { Train, Eval };

/// Running statistics owned by a batchnorm layer (not trainable).
struct BatchNormStats {
    Tensor running_mean;
    Tensor running_var;

    explicit BatchNormStats(std::size_t channels = 1)
        : running_mean({channels}, 0.0), running_var({channels}, 1.0) {}
};

inline constexpr double kLogEpsilon = 1e-12;
inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEpsilon = 1e-5;

namespace ops {

// Linear algebra and elementwise arithmetic.
Var matmul(Var a, Var b);                // (N,K) x (K,M)
Var bias_add(Var x, Var bias);           // (N,F)+(F) or (N,C,H,W)+(C)
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var sum(Var a);
Var mean(Var a);

// Activations.
Var relu(Var x);
Var gelu(Var x);
Var sigmoid(Var x);

/// x: (N,C,H,W), w: (O,C,kh,kw).
Var conv2d(Var x, Var w, std::size_t stride, std::size_t padding);

/// Train mode normalizes with batch statistics and updates `stats` with an
/// exponential moving average; eval mode normalizes with `stats`.
Var batchnorm(Var x, Var gamma, Var beta, BatchNormStats& stats, Mode mode,
              double momentum = kBatchNormMomentum, double eps = kBatchNormEpsilon);

/// Inverted dropout. The keep mask is a pure function of `stream_seed`.
Var dropout(Var x, double p, std::uint64_t stream_seed, Mode mode);

Var avg_pool2d(Var x, std::size_t k);  // non-overlapping k x k windows
Var global_avg_pool(Var x);            // (N,C,H,W) -> (N,C)
Var concat_channels(std::span<const Var> parts);
Var flatten(Var x);                    // (N,...) -> (N,prod)
Var reshape(Var x, Shape shape);
Var channel_scale(Var x, Var s);       // (N,C,H,W) * (N,C)

// Distributions and losses.
Var softmax_with_temperature(Var logits, double tau);
/// Mean over rows of -sum(target * log(pred + 1e-12)). Both arguments must be row-stochastic.
Var cross_entropy(Var pred_probs, Var target_probs);
Var mse(Var a, Var b);

}  // namespace ops

/// Row-wise softmax(logits / tau) on plain tensors (no tape).
Tensor softmax(const Tensor& logits, double tau = 1.0);

/// Xavier/Glorot normal: i.i.d. N(0, 2 / (fan_in + fan_out)), shape (fan_in, fan_out).
Tensor xavier_init(std::size_t fan_in, std::size_t fan_out, std::uint64_t seed);
/// Same distribution for an arbitrary weight shape.
Tensor xavier_normal(Shape shape, std::size_t fan_in, std::size_t fan_out, std::uint64_t seed);

}  // namespace mlfd
