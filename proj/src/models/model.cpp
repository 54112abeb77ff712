#include <algorithm>

#include "mlfd/error.hpp"
#include "mlfd/models.hpp"
#include "mlfd/rng.hpp"

namespace mlfd::models {

LayerStack::LayerStack(Shape input_shape, std::vector<LayerSpec> layers, std::uint64_t seed, std::string prefix)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)), prefix_(std::move(prefix)) {
    stream_ = derive_seed(0, prefix_);
    shapes_.push_back(input_shape_);
    for (std::size_t i = 0; i < layers_.size(); ++i) shapes_.push_back(layer_output_shape(layers_[i], shapes_.back(), i));

    state_.resize(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        const Shape& in = shapes_[i];
        auto& st = state_[i];
        const std::string base = prefix_ + std::to_string(i) + ".";
        switch (l.kind) {
            case LayerKind::Dense:
                st.params.emplace_back(base + "weight", xavier_init(in[0], l.units, derive_seed(seed, i, 0)));
                st.params.emplace_back(base + "bias", Tensor({l.units}, 0.0));
                break;
            case LayerKind::Conv: {
                const std::size_t kk = l.kernel * l.kernel;
                st.params.emplace_back(base + "weight", xavier_normal({l.units, in[0], l.kernel, l.kernel}, in[0] * kk,
                                                                      l.units * kk, derive_seed(seed, i, 0)));
                st.params.emplace_back(base + "bias", Tensor({l.units}, 0.0));
                break;
            }
            case LayerKind::BatchNorm:
                st.params.emplace_back(base + "gamma", Tensor({in[0]}, 1.0));
                st.params.emplace_back(base + "beta", Tensor({in[0]}, 0.0));
                st.stats.emplace(in[0]);
                break;
            case LayerKind::SqueezeExcite: {
                const std::size_t c = in[0];
                const std::size_t hidden = std::max<std::size_t>(1, c / l.reduction);
                st.params.emplace_back(base + "squeeze.weight", xavier_init(c, hidden, derive_seed(seed, i, 0)));
                st.params.emplace_back(base + "squeeze.bias", Tensor({hidden}, 0.0));
                st.params.emplace_back(base + "excite.weight", xavier_init(hidden, c, derive_seed(seed, i, 1)));
                st.params.emplace_back(base + "excite.bias", Tensor({c}, 0.0));
                break;
            }
            default: break;
        }
    }
}

Var LayerStack::run(Tape& tape, Var x, std::size_t begin, std::size_t end, const RunContext& ctx,
                    const Observer& observe) {
    if (begin > end || end > layers_.size())
        throw DimensionError("layer range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside stack '" +
                             prefix_ + "'");
    Shape expect{x.shape()[0]};
    expect.insert(expect.end(), shapes_[begin].begin(), shapes_[begin].end());
    if (x.shape() != expect)
        throw DimensionError("stack '" + prefix_ + "' boundary " + std::to_string(begin) + " expects " +
                             shape_str(expect) + ", got " + shape_str(x.shape()));
    if (observe) observe(begin, x);
    for (std::size_t i = begin; i < end; ++i) {
        const auto& l = layers_[i];
        auto& st = state_[i];
        switch (l.kind) {
            case LayerKind::Dense:
                x = ops::bias_add(ops::matmul(x, tape.param(st.params[0])), tape.param(st.params[1]));
                break;
            case LayerKind::Conv:
                x = ops::bias_add(ops::conv2d(x, tape.param(st.params[0]), l.stride, l.padding),
                                  tape.param(st.params[1]));
                break;
            case LayerKind::BatchNorm:
                x = ops::batchnorm(x, tape.param(st.params[0]), tape.param(st.params[1]), *st.stats, ctx.mode);
                break;
            case LayerKind::Gelu: x = ops::gelu(x); break;
            case LayerKind::Relu: x = ops::relu(x); break;
            case LayerKind::Dropout:
                x = ops::dropout(x, l.p, derive_seed(ctx.seed, stream_ ^ i, ctx.step), ctx.mode);
                break;
            case LayerKind::AvgPool: x = ops::avg_pool2d(x, l.window); break;
            case LayerKind::GlobalAvgPool: x = ops::global_avg_pool(x); break;
            case LayerKind::Flatten: x = ops::flatten(x); break;
            case LayerKind::SqueezeExcite: {
                Var s = ops::global_avg_pool(x);
                s = ops::relu(ops::bias_add(ops::matmul(s, tape.param(st.params[0])), tape.param(st.params[1])));
                s = ops::sigmoid(ops::bias_add(ops::matmul(s, tape.param(st.params[2])), tape.param(st.params[3])));
                x = ops::channel_scale(x, s);
                break;
            }
        }
        if (observe) observe(i + 1, x);
    }
    return x;
}

std::vector<Parameter*> LayerStack::parameters() {
    std::vector<Parameter*> out;
    for (auto& st : state_)
        for (auto& p : st.params) out.push_back(&p);
    return out;
}

std::vector<const Parameter*> LayerStack::parameters() const {
    std::vector<const Parameter*> out;
    for (const auto& st : state_)
        for (const auto& p : st.params) out.push_back(&p);
    return out;
}

std::vector<std::pair<std::string, Tensor*>> LayerStack::buffers() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (std::size_t i = 0; i < state_.size(); ++i)
        if (state_[i].stats) {
            const std::string base = prefix_ + std::to_string(i) + ".";
            out.emplace_back(base + "running_mean", &state_[i].stats->running_mean);
            out.emplace_back(base + "running_var", &state_[i].stats->running_var);
        }
    return out;
}

Model::Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    body_ = LayerStack(spec_.input_shape, spec_.layers, seed, "body.");
    const std::size_t width = body_.output_shape()[0];
    head_w_ = Parameter("head.weight", xavier_init(width, spec_.classes, derive_seed(seed, spec_.layers.size(), 0)));
    head_b_ = Parameter("head.bias", Tensor({spec_.classes}, 0.0));
}

std::vector<Parameter*> Model::parameters() {
    auto out = body_.parameters();
    out.push_back(&head_w_);
    out.push_back(&head_b_);
    return out;
}

std::vector<const Parameter*> Model::parameters() const {
    auto out = body_.parameters();
    out.push_back(&head_w_);
    out.push_back(&head_b_);
    return out;
}

void Model::freeze() {
    for (auto* p : parameters()) p->frozen = true;
}

Var Model::head(Tape& tape, Var embedding) {
    return ops::bias_add(ops::matmul(embedding, tape.param(head_w_)), tape.param(head_b_));
}

Model::Output Model::forward(Tape& tape, Var x, std::span<const std::string> levels, const RunContext& ctx) {
    std::vector<std::size_t> wanted;
    for (const auto& l : levels) wanted.push_back(spec_.taps.boundary(l));
    Output out;
    std::map<std::size_t, Var> seen;
    Var pre_head = body_.run(tape, x, 0, spec_.layers.size(), ctx, [&](std::size_t b, Var v) {
        if (std::find(wanted.begin(), wanted.end(), b) != wanted.end()) seen[b] = v;
    });
    for (std::size_t i = 0; i < levels.size(); ++i) out.embeddings[levels[i]] = seen.at(wanted[i]);
    out.logits = head(tape, pre_head);
    return out;
}

Tensor Model::predict(const Tensor& inputs, std::size_t chunk) {
    std::vector<Tensor> parts;
    for (std::size_t b = 0; b < inputs.dim(0); b += chunk) {
        Tape tape(false);
        Var x = tape.constant(inputs.row_range(b, std::min(inputs.dim(0), b + chunk)));
        parts.push_back(forward(tape, x, {}, RunContext{}).logits.value());
    }
    return stack_rows(parts);
}

Tensor Model::embed(const Tensor& inputs, const std::string& level, std::size_t chunk) {
    std::vector<Tensor> parts;
    const std::string levels[] = {level};
    for (std::size_t b = 0; b < inputs.dim(0); b += chunk) {
        Tape tape(false);
        Var x = tape.constant(inputs.row_range(b, std::min(inputs.dim(0), b + chunk)));
        parts.push_back(forward(tape, x, levels, RunContext{}).embeddings.at(level).value());
    }
    return stack_rows(parts);
}

std::string Model::fingerprint() {
    std::uint64_t h = fnv1a(spec_.to_json().dump());
    for (const auto* p : parameters()) h = fnv1a(hex64(tensor_checksum(p->value)), h);
    for (const auto& [name, t] : buffers()) h = fnv1a(hex64(tensor_checksum(*t)), h);
    return hex64(h);
}

Model build_model(const ModelSpec& spec, std::uint64_t seed) { return Model(spec, seed); }

Model::Output forward_with_taps(Model& model, Tape& tape, Var inputs, std::span<const std::string> levels,
                                const RunContext& ctx) {
    return model.forward(tape, inputs, levels, ctx);
}

std::size_t count_params(std::span<const Parameter* const> params, bool exclude_frozen) {
    std::size_t n = 0;
    for (const auto* p : params)
        if (!(exclude_frozen && p->frozen)) n += p->value.size();
    return n;
}

std::size_t count_params(const Model& model, bool exclude_frozen) {
    const auto params = model.parameters();
    return count_params(params, exclude_frozen);
}

}  // namespace mlfd::models
