#include "rsp/rsp_prop.hpp"

#include "rsp/errors.hpp"

#include <algorithm>
#include <cmath>

#include <spdlog/spdlog.h>

namespace rsp {

namespace {

double stabilize(double d, double eps) { return d >= 0.0 ? d + eps : d - eps; }

std::size_t count_active(const Tensor& x) {
    return static_cast<std::size_t>(std::count_if(x.values().begin(), x.values().end(), [](float v) { return v > 0.0f; }));
}

// Splits each output's relevance over its input contributions c_i = contrib(i, w):
// acc[i] += c_i * r / z with z = sum of c_i, all in double so that the output sum
// is kept even when z is small against the individual terms. Outputs with
// |z| <= eps are skipped; their relevance is returned.
template <typename Contrib>
double redistribute(const Tensor& x, const LayerSpec& layer, const Tensor& w, const Tensor& rel, double eps,
                    std::vector<double>& acc, Contrib contrib) {
    double dead = 0.0;
    std::vector<std::pair<std::size_t, double>> terms;
    auto flush = [&](double r) {
        double z = 0.0;
        for (const auto& t : terms) z += t.second;
        if (std::fabs(z) <= eps) {
            dead += r;
            return;
        }
        const double scale = r / stabilize(z, eps);
        // The stabilizer absorbs r - scale*z; hand it back in proportion to |c_i|.
        double l1 = 0.0;
        for (const auto& t : terms) l1 += std::fabs(t.second);
        const double back = (r - scale * z) / l1;
        for (const auto& [i, c] : terms) acc[i] += c * scale + std::fabs(c) * back;
    };

    if (layer.kind == LayerKind::linear) {
        const std::size_t N = x.dim(0), I = x.dim(1), O = w.dim(0);
        require_same_shape(Tensor({N, O}), rel, "relevance");
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < O; ++o) {
                const double r = rel[n * O + o];
                if (r == 0.0) continue;
                terms.clear();
                for (std::size_t i = 0; i < I; ++i) terms.emplace_back(n * I + i, contrib(n * I + i, w[o * I + i]));
                flush(r);
            }
        return dead;
    }

    const ConvGeometry& g = layer.conv;
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t K = g.out_channels, OH = g.out_h(H), OW = g.out_w(W);
    require_same_shape(Tensor({N, K, OH, OW}), rel, "relevance");
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t oh = 0; oh < OH; ++oh)
                for (std::size_t ow = 0; ow < OW; ++ow) {
                    const double r = rel[((n * K + k) * OH + oh) * OW + ow];
                    if (r == 0.0) continue;
                    terms.clear();
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t i = 0; i < g.kernel_h; ++i) {
                            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + i) -
                                                      static_cast<std::ptrdiff_t>(g.padding);
                            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                            for (std::size_t j = 0; j < g.kernel_w; ++j) {
                                const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + j) -
                                                          static_cast<std::ptrdiff_t>(g.padding);
                                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                                const std::size_t idx =
                                    ((n * C + c) * H + static_cast<std::size_t>(ih)) * W + static_cast<std::size_t>(iw);
                                terms.emplace_back(idx, contrib(idx, w[((k * C + c) * g.kernel_h + i) * g.kernel_w + j]));
                            }
                        }
                    flush(r);
                }
    return dead;
}

void spread_evenly(std::vector<double>& acc, const Tensor& x, double mass, bool active_only) {
    if (mass == 0.0) return;
    const std::size_t n = active_only ? count_active(x) : x.size();
    if (n == 0) return;
    const double share = mass / static_cast<double>(n);
    for (std::size_t i = 0; i < acc.size(); ++i)
        if (!active_only || x[i] > 0.0f) acc[i] += share;
}

Tensor to_tensor(const Shape& shape, const std::vector<double>& acc) {
    Tensor t(shape);
    for (std::size_t i = 0; i < acc.size(); ++i) t[i] = static_cast<float>(acc[i]);
    return t;
}

} // namespace

void PropagationConfig::validate() const {
    if (!(epsilon > 0.0)) throw InputError("epsilon must be positive");
    if (zbeta_low.size() != zbeta_high.size()) throw InputError("zbeta bounds must have equal lengths");
    for (std::size_t c = 0; c < zbeta_low.size(); ++c)
        if (!(zbeta_low[c] < zbeta_high[c]))
            throw InputError("zbeta_low must be below zbeta_high for channel " + std::to_string(c));
    if (!(conservation_tolerance >= 0.0)) throw InputError("conservation tolerance must be nonnegative");
}

SectionalNu sectional_nu(const Tensor& x, const LayerSpec& layer, const SectionedRelevanceMap& relevance) {
    const Tensor pos = relevance.positive_part();
    const Tensor neg = relevance.negative_part();
    switch (layer.kind) {
    case LayerKind::conv:
        return {conv2d_weight_grad(pos, x, layer.conv), conv2d_weight_grad(neg, x, layer.conv)};
    case LayerKind::linear:
        return {linear_weight_grad(pos, x), linear_weight_grad(neg, x)};
    default:
        throw InputError("sectional_nu: layer '" + layer.name + "' has no weights");
    }
}

Tensor propagate_layer(const Tensor& x, const LayerSpec& layer, const SectionalNu& nu,
                       const SectionedRelevanceMap& relevance, double epsilon) {
    if (!layer.has_weights()) throw InputError("propagate_layer: layer '" + layer.name + "' has no weights");
    if (nu.positive.shape() != nu.negative.shape())
        throw ShapeError("propagate_layer: nu+ and nu- shapes differ");

    std::vector<double> acc(x.size(), 0.0);
    double dead = 0.0;
    const Tensor* sections[2] = {&nu.positive, &nu.negative};
    const Tensor parts[2] = {relevance.positive_part(), relevance.negative_part()};
    for (int s = 0; s < 2; ++s) {
        if (parts[s].abs_sum() == 0.0) continue;
        dead += redistribute(x, layer, *sections[s], parts[s], epsilon, acc,
                             [&](std::size_t i, float w) { return static_cast<double>(x[i]) * w; });
    }
    if (dead != 0.0) {
        spdlog::debug("layer '{}': {:.3g} relevance on outputs with zero response, spread over active inputs",
                      layer.name, dead);
        spread_evenly(acc, x, dead, true);
    }
    return to_tensor(x.shape(), acc);
}

std::vector<Tensor> propagate_weightless(const LayerSpec& layer, std::span<const Tensor* const> inputs,
                                         const Tensor& relevance, const ArgmaxTrace* argmax) {
    if (inputs.empty() || !inputs[0]) throw InputError("propagate_weightless: missing layer input");
    const Tensor& x = *inputs[0];
    switch (layer.kind) {
    case LayerKind::relu: {
        require_same_shape(x, relevance, "relu relevance");
        Tensor r(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) r[i] = x[i] > 0.0f ? relevance[i] : 0.0f;
        return {std::move(r)};
    }
    case LayerKind::maxpool:
        if (!argmax) throw InputError("maxpool '" + layer.name + "' has no argmax trace");
        return {maxpool2d_vjp(relevance, *argmax)};
    case LayerKind::avgpool: {
        const Shape out_shape = layer.pool.output_shape(x.shape());
        require_same_shape(Tensor(out_shape), relevance, "avgpool relevance");
        const std::size_t NC = out_shape[0] * out_shape[1], OH = out_shape[2], OW = out_shape[3];
        const std::size_t H = x.dim(2), W = x.dim(3), k = layer.pool.kernel, st = layer.pool.stride;
        std::vector<double> acc(x.size(), 0.0);
        std::size_t o = 0;
        for (std::size_t nc = 0; nc < NC; ++nc) {
            const std::size_t base = nc * H * W;
            for (std::size_t oh = 0; oh < OH; ++oh)
                for (std::size_t ow = 0; ow < OW; ++ow, ++o) {
                    const double r = relevance[o];
                    if (r == 0.0) continue;
                    double mass = 0.0;
                    bool nonneg = true;
                    for (std::size_t i = 0; i < k; ++i)
                        for (std::size_t j = 0; j < k; ++j) {
                            const float v = x[base + (oh * st + i) * W + ow * st + j];
                            mass += v;
                            nonneg = nonneg && v >= 0.0f;
                        }
                    const bool proportional = nonneg && mass > 0.0;
                    for (std::size_t i = 0; i < k; ++i)
                        for (std::size_t j = 0; j < k; ++j) {
                            const std::size_t idx = base + (oh * st + i) * W + ow * st + j;
                            acc[idx] += proportional ? r * x[idx] / mass : r / static_cast<double>(k * k);
                        }
                }
        }
        return {to_tensor(x.shape(), acc)};
    }
    case LayerKind::global_avg_pool: {
        if (x.rank() != 4) throw ShapeError("global_avg_pool input must be rank 4");
        const std::size_t NK = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
        if (relevance.shape() != Shape{x.dim(0), x.dim(1)})
            throw ShapeError("global_avg_pool relevance shape " + shape_str(relevance.shape()) + " mismatch");
        std::vector<double> acc(x.size(), 0.0);
        for (std::size_t nk = 0; nk < NK; ++nk) {
            const double r = relevance[nk];
            if (r == 0.0) continue;
            double mass = 0.0;
            bool nonneg = true;
            for (std::size_t p = 0; p < HW; ++p) {
                mass += x[nk * HW + p];
                nonneg = nonneg && x[nk * HW + p] >= 0.0f;
            }
            const bool proportional = nonneg && mass > 0.0;
            for (std::size_t p = 0; p < HW; ++p)
                acc[nk * HW + p] = proportional ? r * x[nk * HW + p] / mass : r / static_cast<double>(HW);
        }
        return {to_tensor(x.shape(), acc)};
    }
    case LayerKind::flatten:
        return {relevance.reshaped(x.shape())};
    case LayerKind::residual_add: {
        if (inputs.size() != 2 || !inputs[1]) throw InputError("residual_add needs two inputs");
        const Tensor& b = *inputs[1];
        require_same_shape(x, b, "residual_add branches");
        require_same_shape(x, relevance, "residual_add relevance");
        Tensor ra(x.shape()), rb(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double ma = std::fabs(x[i]), mb = std::fabs(b[i]);
            const double share = ma + mb > 0.0 ? ma / (ma + mb) : 0.5;
            const double r = relevance[i];
            ra[i] = static_cast<float>(r * share);
            rb[i] = static_cast<float>(r - static_cast<double>(ra[i]));
        }
        return {std::move(ra), std::move(rb)};
    }
    case LayerKind::conv:
    case LayerKind::linear:
        throw InputError("propagate_weightless: layer '" + layer.name + "' has weights");
    case LayerKind::batchnorm:
        throw InputError("batchnorm '" + layer.name + "' must be folded before propagation");
    }
    throw InputError("propagate_weightless: unknown layer kind");
}

Tensor uniform_shift(const Tensor& r_hat, const Tensor& x, double total) {
    require_same_shape(r_hat, x, "uniform_shift");
    const std::size_t gamma = count_active(x);
    if (gamma == 0) throw AttributionError("dead layer: no activated neuron to shift relevance onto");
    const double share = total / static_cast<double>(gamma);
    Tensor out(r_hat.shape());
    for (std::size_t i = 0; i < r_hat.size(); ++i) {
        const double twice = 2.0 * static_cast<double>(r_hat[i]);
        out[i] = static_cast<float>(x[i] > 0.0f ? twice - share : twice);
    }
    return out;
}

Tensor zbeta_input(const Tensor& x, const LayerSpec& first, const WeightArchive& weights,
                   const SectionedRelevanceMap& relevance, std::span<const float> low, std::span<const float> high,
                   double epsilon) {
    if (first.kind != LayerKind::conv)
        throw InputError("input rule needs a conv first layer, '" + first.name + "' is " +
                         std::string(to_string(first.kind)));
    if (x.rank() != 4) throw ShapeError("input rule: input must be rank 4");
    const std::size_t C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (low.size() != C || high.size() != C)
        throw ShapeError("input rule: bounds must have one entry per input channel (" + std::to_string(C) + ")");
    const Tensor& w = weights.at(*first.weight_ref("weight"));
    std::vector<float> lo(x.size()), hi(x.size());
    for (std::size_t n = 0; n < x.dim(0); ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base = (n * C + c) * HW;
            std::fill(lo.begin() + base, lo.begin() + base + HW, low[c]);
            std::fill(hi.begin() + base, hi.begin() + base + HW, high[c]);
        }
    // z_ij = x_i w_ij - l_i w_ij^+ - h_i w_ij^-
    auto contrib = [&](std::size_t i, float wv) {
        return static_cast<double>(x[i]) * wv - static_cast<double>(lo[i]) * std::max(wv, 0.0f) -
               static_cast<double>(hi[i]) * std::min(wv, 0.0f);
    };

    std::vector<double> acc(x.size(), 0.0);
    for (const Tensor& part : {relevance.positive_part(), relevance.negative_part()}) {
        if (part.abs_sum() == 0.0) continue;
        std::vector<double> section(x.size(), 0.0);
        const double dead = redistribute(x, first, w, part, epsilon, section, contrib);
        if (dead != 0.0) {
            spdlog::debug("input rule: {:.3g} relevance on outputs with zero response, spread over all pixels", dead);
            spread_evenly(section, x, dead, false);
        }
        for (std::size_t i = 0; i < x.size(); ++i) acc[i] += section[i];
    }
    return to_tensor(x.shape(), acc);
}

std::optional<std::string> RspResult::conservation_failure(double tolerance) const {
    for (const auto& entry : audit)
        if (std::fabs(entry.frontier_sum - initial_sum) > tolerance * std::fabs(initial_sum)) return entry.layer;
    return std::nullopt;
}

Tensor channel_sum(const Tensor& t) {
    if (t.rank() != 4 || t.dim(0) != 1) throw ShapeError("channel_sum needs a [1,C,H,W] tensor");
    const std::size_t C = t.dim(1), H = t.dim(2), W = t.dim(3);
    Tensor out({H, W});
    for (std::size_t p = 0; p < H * W; ++p) {
        double acc = 0.0;
        for (std::size_t c = 0; c < C; ++c) acc += t[c * H * W + p];
        out[p] = static_cast<float>(acc);
    }
    return out;
}

namespace {

// Purge followed by 2:1 re-sectioning that keeps the layer total. Left
// untouched when the total is not positive or the purge removes every positive.
Tensor resection(const Tensor& relevance, const std::string& layer) {
    const double total = relevance.sum();
    const Tensor purged = purge(relevance);
    const bool has_positive =
        std::any_of(purged.values().begin(), purged.values().end(), [](float v) { return v > 0.0f; });
    if (!(total > 0.0) || !has_positive) {
        spdlog::debug("layer '{}': re-sectioning skipped (total {:.3g})", layer, total);
        return relevance;
    }
    return normalize_sections(purged, total).values;
}

} // namespace

RspResult run_rsp(const ModelDescriptor& model_in, const WeightArchive& weights_in, const Tensor& input,
                  const ClassSpec& spec, const PropagationConfig& config) {
    config.validate();
    std::optional<FoldedModel> folded;
    if (model_in.has_batchnorm()) folded = fold_batchnorm(model_in, weights_in);
    const ModelDescriptor& model = folded ? folded->model : model_in;
    const WeightArchive& weights = folded ? folded->weights : weights_in;
    spec.validate(model.class_count());

    std::vector<float> low = config.zbeta_low, high = config.zbeta_high;
    if (low.empty()) {
        for (std::size_t c = 0; c < model.input_shape[0]; ++c) {
            const float m = model.normalization.mean[c], s = model.normalization.std[c];
            low.push_back((0.0f - m) / s);
            high.push_back((1.0f - m) / s);
        }
    }

    const ActivationTrace trace = forward_trace(model, weights, input);
    const std::size_t fe = model.feature_end_index();
    const Tensor relative = spec.mode == HostileMode::predicted
                                ? relative_map(model, weights, trace, spec)
                                : contrastive_relative_map(model, weights, trace, spec.target);
    SectionedRelevanceMap start = normalize_sections(purge(relative), config.initial_relevance);

    RspResult result;
    result.initial_sum = start.values.sum();

    std::vector<std::optional<Tensor>> pending(model.layers.size());
    std::optional<Tensor> pending_input;
    pending[fe] = start.values;

    auto deposit = [&](std::ptrdiff_t target, Tensor r) {
        auto& slot = target < 0 ? pending_input : pending[static_cast<std::size_t>(target)];
        if (slot)
            *slot = add(*slot, r);
        else
            slot = std::move(r);
    };
    auto frontier = [&] {
        double s = pending_input ? pending_input->sum() : 0.0;
        for (const auto& p : pending)
            if (p) s += p->sum();
        return s;
    };

    for (std::size_t i = fe + 1; i-- > 0;) {
        if (!pending[i]) continue;
        const auto& layer = model.layers[i];
        const double held = frontier();
        SectionedRelevanceMap rel =
            i == fe ? std::move(start) : SectionedRelevanceMap::from_values(std::move(*pending[i]));
        pending[i].reset();
        const double local = rel.values.sum();

        const auto ins = model.input_indices(i);
        try {
            if (layer.has_weights()) {
                const Tensor& x = layer_input(model, trace, i);
                if (ins[0] < 0) {
                    deposit(-1, zbeta_input(x, layer, weights, rel, low, high, config.epsilon));
                } else {
                    const SectionalNu nu = sectional_nu(x, layer, rel);
                    const Tensor r_hat = propagate_layer(x, layer, nu, rel, config.epsilon);
                    Tensor shifted = uniform_shift(r_hat, x, r_hat.sum());
                    if (config.per_layer_purge && shifted.rank() == 4)
                        shifted = resection(shifted, model.layers[static_cast<std::size_t>(ins[0])].name);
                    deposit(ins[0], std::move(shifted));
                }
            } else {
                if (std::find(ins.begin(), ins.end(), -1) != ins.end())
                    throw InputError("the network input must feed a conv layer, not '" + layer.name + "'");
                std::vector<const Tensor*> xs;
                for (std::size_t s = 0; s < ins.size(); ++s) xs.push_back(&layer_input(model, trace, i, s));
                const ArgmaxTrace* am = trace.argmax[i] ? &*trace.argmax[i] : nullptr;
                auto parts = propagate_weightless(layer, xs, rel.values, am);
                for (std::size_t s = 0; s < parts.size(); ++s) deposit(ins[s], std::move(parts[s]));
            }
        } catch (const AttributionError& e) {
            throw AttributionError("layer '" + layer.name + "': " + e.what());
        } catch (const ShapeError& e) {
            throw ShapeError("layer '" + layer.name + "': " + e.what());
        }
        result.audit.push_back({layer.name, std::move(rel), local, held});
    }

    result.pixel_relevance = pending_input ? std::move(*pending_input) : Tensor::zeros_like(trace.input);
    const double pixel_sum = result.pixel_relevance.sum();
    result.audit.push_back(
        {std::string(kInputName), SectionedRelevanceMap::from_values(result.pixel_relevance), pixel_sum, pixel_sum});
    result.pixel_map = channel_sum(result.pixel_relevance);
    return result;
}

} // namespace rsp
