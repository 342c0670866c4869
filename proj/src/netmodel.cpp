#include "iosvd/netmodel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace iosvd {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double apply_activation(Activation a, double x)
{
    switch (a) {
    case Activation::tanh:
        return std::tanh(x);
    case Activation::relu:
        return x > 0.0 ? x : 0.0;
    case Activation::gelu:
        return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
    }
    return x;
}

// Derivative at the pre-activation value; relu'(0) = 0.
double activation_derivative(Activation a, double x)
{
    switch (a) {
    case Activation::tanh: {
        const double t = std::tanh(x);
        return 1.0 - t * t;
    }
    case Activation::relu:
        return x > 0.0 ? 1.0 : 0.0;
    case Activation::gelu: {
        const double u = kGeluC * (x + kGeluA * x * x * x);
        const double t = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    }
    }
    return 1.0;
}

void check_layer_index(const NetworkSpec& net, int layer)
{
    if (layer < 0 || static_cast<std::size_t>(layer) >= net.layers.size() ||
        !net.layers[static_cast<std::size_t>(layer)].is_linear())
        throw Error("layer " + std::to_string(layer) + " is not a linear layer of the network");
}

}  // namespace

std::string to_string(Activation a)
{
    switch (a) {
    case Activation::tanh:
        return "tanh";
    case Activation::relu:
        return "relu";
    case Activation::gelu:
        return "gelu-approx";
    }
    return "?";
}

Activation activation_from_string(const std::string& s)
{
    if (s == "tanh")
        return Activation::tanh;
    if (s == "relu")
        return Activation::relu;
    if (s == "gelu-approx" || s == "gelu")
        return Activation::gelu;
    throw IoError("unknown activation kind '" + s + "'");
}

LayerDef LayerDef::linear(Matrix w, std::optional<Vector> b)
{
    LayerDef d;
    d.kind = Kind::linear;
    d.weight = std::move(w);
    d.bias = std::move(b);
    return d;
}

LayerDef LayerDef::factored(LowRankLayer f, std::optional<Vector> b)
{
    LayerDef d = linear(f.product(), std::move(b));
    d.factors = std::move(f);
    return d;
}

LayerDef LayerDef::act(Activation a)
{
    LayerDef d;
    d.kind = Kind::activation;
    d.activation = a;
    return d;
}

Index LayerDef::stored_params() const
{
    if (!is_linear())
        return 0;
    return factors ? factors->stored_params() : weight.size();
}

Index NetworkSpec::input_dim() const
{
    for (const auto& l : layers)
        if (l.is_linear())
            return l.in_dim();
    return 0;
}

const LayerDef& NetworkSpec::linear_layer(int index) const
{
    check_layer_index(*this, index);
    return layers[static_cast<std::size_t>(index)];
}

void NetworkSpec::validate() const
{
    if (layers.empty())
        throw Error("network has no layers");
    if (!layers.back().is_linear())
        throw Error("network must end in a linear logit head");
    Index dim = -1;
    for (std::size_t k = 0; k < layers.size(); ++k) {
        const auto& l = layers[k];
        if (!l.is_linear())
            continue;
        if (l.weight.size() == 0)
            throw Error("layer " + std::to_string(k) + " has an empty weight");
        require_finite(l.weight, "layer " + std::to_string(k) + " weight");
        if (l.bias) {
            if (l.bias->size() != l.out_dim())
                throw Error("layer " + std::to_string(k) + " bias length does not match output dimension");
            require_finite(*l.bias, "layer " + std::to_string(k) + " bias");
        }
        if (dim >= 0 && l.in_dim() != dim)
            throw Error("layer " + std::to_string(k) + " expects input dimension " + std::to_string(l.in_dim()) +
                        " but receives " + std::to_string(dim));
        dim = l.out_dim();
    }
    if (dim != vocab_size)
        throw Error("logit head produces " + std::to_string(dim) + " outputs but vocab_size is " +
                    std::to_string(vocab_size));
    for (int t : target_layers)
        check_layer_index(*this, t);
    if (!std::is_sorted(target_layers.begin(), target_layers.end()) ||
        std::adjacent_find(target_layers.begin(), target_layers.end()) != target_layers.end())
        throw Error("target layers must be strictly increasing");
}

void CalibrationBatch::validate(const NetworkSpec& net) const
{
    if (inputs.rows() == 0)
        throw Error("empty calibration set");
    if (static_cast<std::size_t>(inputs.rows()) != targets.size())
        throw Error("calibration batch has " + std::to_string(inputs.rows()) + " inputs but " +
                    std::to_string(targets.size()) + " targets");
    if (inputs.cols() != net.input_dim())
        throw Error("calibration inputs have dimension " + std::to_string(inputs.cols()) +
                    ", network expects " + std::to_string(net.input_dim()));
    require_finite(inputs, "calibration inputs");
    for (auto t : targets)
        if (static_cast<Index>(t) >= net.vocab_size)
            throw Error("calibration target " + std::to_string(t) + " outside vocabulary");
}

ForwardTrace forward(const NetworkSpec& net, const Vector& x)
{
    ForwardTrace trace;
    trace.layer_inputs.reserve(net.layers.size());
    trace.layer_outputs.reserve(net.layers.size());
    Vector h = x;
    for (std::size_t k = 0; k < net.layers.size(); ++k) {
        const auto& l = net.layers[k];
        trace.layer_inputs.push_back(h);
        if (l.is_linear()) {
            if (h.size() != l.in_dim())
                throw Error("forward: layer " + std::to_string(k) + " expects input dimension " +
                            std::to_string(l.in_dim()) + ", got " + std::to_string(h.size()));
            Vector out = l.weight * h;
            if (l.bias)
                out += *l.bias;
            h = std::move(out);
        } else {
            h = h.unaryExpr([a = l.activation](double v) { return apply_activation(a, v); });
        }
        trace.layer_outputs.push_back(h);
    }
    trace.logits = std::move(h);
    return trace;
}

double log_sum_exp(const Vector& logits)
{
    const double m = logits.maxCoeff();
    return m + std::log((logits.array() - m).exp().sum());
}

Vector softmax(const Vector& logits)
{
    const double m = logits.maxCoeff();
    Vector e = (logits.array() - m).exp();
    return e / e.sum();
}

std::map<int, Matrix> backprop_to_outputs(const NetworkSpec& net, const ForwardTrace& trace,
                                          const Matrix& logit_seeds, const std::vector<int>& layers)
{
    if (logit_seeds.rows() != net.vocab_size)
        throw Error("backprop: seed rows do not match vocab_size");
    for (int l : layers)
        check_layer_index(net, l);
    const int lowest = layers.empty() ? static_cast<int>(net.layers.size())
                                      : *std::min_element(layers.begin(), layers.end());

    std::map<int, Matrix> out;
    Matrix g = logit_seeds;  // gradient w.r.t. the output of layer k
    for (int k = static_cast<int>(net.layers.size()) - 1; k >= lowest; --k) {
        const auto& l = net.layers[static_cast<std::size_t>(k)];
        if (l.is_linear()) {
            if (std::find(layers.begin(), layers.end(), k) != layers.end())
                out[k] = g;
            if (k > lowest)
                g = l.weight.transpose() * g;
        } else {
            const Vector& pre = trace.layer_inputs[static_cast<std::size_t>(k)];
            const Vector d = pre.unaryExpr([a = l.activation](double v) { return activation_derivative(a, v); });
            g = d.asDiagonal() * g;
        }
    }
    return out;
}

namespace {

// Per-token loss and d loss / d logits.
double token_loss(const Vector& logits, std::uint32_t target, const Vector* reference_logits, Vector* dlogits)
{
    const double lse = log_sum_exp(logits);
    if (reference_logits == nullptr) {
        if (dlogits != nullptr) {
            *dlogits = (logits.array() - lse).exp();
            (*dlogits)(target) -= 1.0;
        }
        return lse - logits(target);
    }
    const double ref_lse = log_sum_exp(*reference_logits);
    const Vector log_q = reference_logits->array() - ref_lse;
    const Vector log_p = logits.array() - lse;
    const Vector q = log_q.array().exp();
    if (dlogits != nullptr)
        *dlogits = log_p.array().exp().matrix() - q;
    return (q.array() * (log_q - log_p).array()).sum();
}

LossAndGradients evaluate(const NetworkSpec& net, const CalibrationBatch& batch, const Objective& objective,
                          bool with_gradients)
{
    batch.validate(net);
    if (objective.kind == Objective::Kind::kl_to_reference && objective.reference == nullptr)
        throw Error("KL objective requires a reference network");

    LossAndGradients result;
    if (with_gradients)
        for (int t : net.target_layers) {
            const auto& l = net.linear_layer(t);
            result.grads[t] = Matrix::Zero(l.out_dim(), l.in_dim());
        }

    double total = 0.0;
    Vector dlogits;
    for (Index i = 0; i < batch.size(); ++i) {
        const Vector x = batch.inputs.row(i).transpose();
        const auto trace = forward(net, x);
        std::optional<Vector> ref;
        if (objective.kind == Objective::Kind::kl_to_reference)
            ref = forward(*objective.reference, x).logits;
        total += token_loss(trace.logits, batch.targets[static_cast<std::size_t>(i)],
                            ref ? &*ref : nullptr, with_gradients ? &dlogits : nullptr);
        if (!with_gradients || net.target_layers.empty())
            continue;
        const auto g = backprop_to_outputs(net, trace, dlogits, net.target_layers);
        for (int t : net.target_layers)
            result.grads[t].noalias() += g.at(t) * trace.layer_inputs[static_cast<std::size_t>(t)].transpose();
    }
    const double n = static_cast<double>(batch.size());
    result.loss = total / n;
    for (auto& [layer, grad] : result.grads)
        grad /= n;
    return result;
}

}  // namespace

double calibration_loss(const NetworkSpec& net, const CalibrationBatch& batch, const Objective& objective)
{
    return evaluate(net, batch, objective, false).loss;
}

LossAndGradients calibration_loss_and_gradients(const NetworkSpec& net, const CalibrationBatch& batch,
                                                const Objective& objective)
{
    return evaluate(net, batch, objective, true);
}

Vector vjp_from_logits(const NetworkSpec& net, const Vector& x, const Vector& v,
                       const std::vector<Index>& topk_indices, int layer)
{
    check_layer_index(net, layer);
    if (static_cast<std::size_t>(v.size()) != topk_indices.size())
        throw Error("vjp_from_logits: probe length does not match support size");
    Matrix seed = Matrix::Zero(net.vocab_size, 1);
    for (std::size_t j = 0; j < topk_indices.size(); ++j) {
        const Index idx = topk_indices[j];
        if (idx < 0 || idx >= net.vocab_size)
            throw Error("vjp_from_logits: support index " + std::to_string(idx) + " outside vocabulary");
        seed(idx, 0) += v(static_cast<Index>(j));
    }
    const auto trace = forward(net, x);
    return backprop_to_outputs(net, trace, seed, {layer}).at(layer).col(0);
}

TopK top_k_support(const Vector& logits, Index K)
{
    if (K < 1 || K > logits.size())
        throw Error("top_k_support: K=" + std::to_string(K) + " outside [1, " + std::to_string(logits.size()) + "]");
    std::vector<Index> order(static_cast<std::size_t>(logits.size()));
    std::iota(order.begin(), order.end(), Index(0));
    std::partial_sort(order.begin(), order.begin() + K, order.end(), [&](Index a, Index b) {
        return logits(a) > logits(b) || (logits(a) == logits(b) && a < b);
    });
    TopK out;
    out.indices.assign(order.begin(), order.begin() + K);
    Vector selected(K);
    for (Index j = 0; j < K; ++j)
        selected(j) = logits(out.indices[static_cast<std::size_t>(j)]);
    out.probs = softmax(selected);
    return out;
}

Vector latent_project(const Matrix& D, const Vector& x)
{
    if (D.rows() != x.size())
        throw Error("latent_project: D has " + std::to_string(D.rows()) + " rows but x has length " +
                    std::to_string(x.size()));
    return D.transpose() * x;
}

double mean_kl(const NetworkSpec& a, const NetworkSpec& b, const Matrix& inputs)
{
    if (inputs.rows() == 0)
        throw Error("mean_kl: no inputs");
    double total = 0.0;
    for (Index i = 0; i < inputs.rows(); ++i) {
        const Vector x = inputs.row(i).transpose();
        const Vector za = forward(a, x).logits;
        const Vector zb = forward(b, x).logits;
        const Vector log_p = za.array() - log_sum_exp(za);
        const Vector log_q = zb.array() - log_sum_exp(zb);
        total += (log_p.array().exp() * (log_p - log_q).array()).sum();
    }
    return total / static_cast<double>(inputs.rows());
}

Index target_weight_params(const NetworkSpec& net)
{
    Index total = 0;
    for (int t : net.target_layers)
        total += net.linear_layer(t).stored_params();
    return total;
}

Index target_dense_params(const NetworkSpec& net)
{
    Index total = 0;
    for (int t : net.target_layers)
        total += net.linear_layer(t).weight.size();
    return total;
}

}  // namespace iosvd
