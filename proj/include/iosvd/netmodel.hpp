#ifndef IOSVD_NETMODEL_HPP
#define IOSVD_NETMODEL_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "iosvd/types.hpp"

namespace iosvd {

enum class Activation { tanh, relu, gelu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

// Retained low-rank factors of a compressed linear layer: W_hat = A * D^T.
struct LowRankLayer {
    Matrix A;  // m x r
    Matrix D;  // n x r

    Index rank() const { return A.cols(); }
    Index stored_params() const { return A.size() + D.size(); }
    Matrix product() const { return A * D.transpose(); }
};

struct LayerDef {
    enum class Kind { linear, activation };

    Kind kind = Kind::linear;
    Matrix weight;                        // linear: effective dense weight, out x in
    std::optional<Vector> bias;           // linear only
    std::optional<LowRankLayer> factors;  // set when the layer is stored factored
    Activation activation = Activation::tanh;

    static LayerDef linear(Matrix w, std::optional<Vector> b = std::nullopt);
    static LayerDef factored(LowRankLayer f, std::optional<Vector> b = std::nullopt);
    static LayerDef act(Activation a);

    bool is_linear() const { return kind == Kind::linear; }
    Index out_dim() const { return weight.rows(); }
    Index in_dim() const { return weight.cols(); }
    // Stored weight parameters (factors if factored, else dense).
    Index stored_params() const;
};

struct NetworkSpec {
    std::vector<LayerDef> layers;
    Index vocab_size = 0;
    std::vector<int> target_layers;

    Index input_dim() const;
    const LayerDef& linear_layer(int index) const;
    // Throws when dimensions do not chain or targets are not linear layers.
    void validate() const;
};

struct CalibrationBatch {
    Matrix inputs;                  // tokens x input_dim
    std::vector<std::uint32_t> targets;

    Index size() const { return inputs.rows(); }
    void validate(const NetworkSpec& net) const;
};

struct ForwardTrace {
    Vector logits;
    std::vector<Vector> layer_inputs;   // input seen by every layer, by layer index
    std::vector<Vector> layer_outputs;  // output of every layer (linear outputs include bias)
};

ForwardTrace forward(const NetworkSpec& net, const Vector& x);

Vector softmax(const Vector& logits);
double log_sum_exp(const Vector& logits);

// Reverse pass from a batch of logit-space seeds (V x q). Returns, for every
// requested linear layer, the gradient with respect to that layer's output
// (out_dim x q), i.e. J^T * seeds.
std::map<int, Matrix> backprop_to_outputs(const NetworkSpec& net, const ForwardTrace& trace,
                                          const Matrix& logit_seeds, const std::vector<int>& layers);

// Calibration objective. Cross-entropy against batch targets is the default;
// the KL variant measures KL(p_reference || p_net) per token.
struct Objective {
    enum class Kind { cross_entropy, kl_to_reference };
    Kind kind = Kind::cross_entropy;
    const NetworkSpec* reference = nullptr;
};

struct LossAndGradients {
    double loss = 0.0;
    std::map<int, Matrix> grads;  // d loss / d W for every target layer
};

double calibration_loss(const NetworkSpec& net, const CalibrationBatch& batch,
                        const Objective& objective = {});
LossAndGradients calibration_loss_and_gradients(const NetworkSpec& net, const CalibrationBatch& batch,
                                                const Objective& objective = {});

// (J_K^{(layer)})^T v: gradient of sum_j v_j z_{topk[j]} w.r.t. the output of `layer`.
Vector vjp_from_logits(const NetworkSpec& net, const Vector& x, const Vector& v,
                       const std::vector<Index>& topk_indices, int layer);

struct TopK {
    std::vector<Index> indices;  // descending logit, ties by lower index
    Vector probs;                // softmax restricted to the support
};

TopK top_k_support(const Vector& logits, Index K);

// z = D^T x, the cached latent of a factored layer.
Vector latent_project(const Matrix& D, const Vector& x);

// Mean token KL(p_a || p_b) over the batch inputs, full vocabulary.
double mean_kl(const NetworkSpec& a, const NetworkSpec& b, const Matrix& inputs);

// Total stored weight parameters across the target layers.
Index target_weight_params(const NetworkSpec& net);
Index target_dense_params(const NetworkSpec& net);

}  // namespace iosvd

#endif
