#include "iosvd/toy.hpp"

#include <cmath>

#include <Eigen/QR>

namespace iosvd {

void ToyShape::validate() const
{
    if (input_dim < 1 || vocab_size < 2 || tokens < 1)
        throw Error("toy shape needs input_dim >= 1, vocab >= 2 and tokens >= 1");
    for (Index h : hidden)
        if (h < 1)
            throw Error("toy shape hidden widths must be positive");
}

namespace {

Matrix gaussian(Rng& rng, Index rows, Index cols)
{
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j)
            m(i, j) = normal(rng);
    return m;
}

Matrix orthonormal_columns(Rng& rng, Index rows, Index cols)
{
    Eigen::HouseholderQR<Matrix> qr(gaussian(rng, rows, cols));
    return qr.householderQ() * Matrix::Identity(rows, cols);
}

// U diag(s) V^T with s_i ~ 1 / (i + 1), scaled so a unit-variance input
// gives outputs of standard deviation `gain`.
Matrix spectral_weight(Rng& rng, Index rows, Index cols, double gain)
{
    const Index r = std::min(rows, cols);
    const Matrix U = orthonormal_columns(rng, rows, r);
    const Matrix V = orthonormal_columns(rng, cols, r);
    Vector s(r);
    for (Index i = 0; i < r; ++i)
        s(i) = std::pow(static_cast<double>(i + 1), -1.0);
    s *= gain * std::sqrt(static_cast<double>(rows)) / s.norm();
    return U * s.asDiagonal() * V.transpose();
}

}  // namespace

ToyData generate_toy(std::uint64_t seed, const ToyShape& shape)
{
    shape.validate();
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);

    ToyData out;
    NetworkSpec& net = out.net;
    net.vocab_size = shape.vocab_size;
    std::vector<Index> widths{shape.input_dim};
    widths.insert(widths.end(), shape.hidden.begin(), shape.hidden.end());
    widths.push_back(shape.vocab_size);

    for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
        const bool head = k + 2 == widths.size();
        const Index in = widths[k], out_dim = widths[k + 1];
        Matrix W = spectral_weight(rng, out_dim, in, head ? 2.5 : 1.2);
        std::optional<Vector> b;
        if (shape.bias)
            b = Vector(0.1 * gaussian(rng, out_dim, 1));
        net.target_layers.push_back(static_cast<int>(net.layers.size()));
        net.layers.push_back(LayerDef::linear(std::move(W), std::move(b)));
        if (!head)
            net.layers.push_back(LayerDef::act(shape.activation));
    }
    net.validate();

    // Anisotropic inputs: a random rotation of per-axis scales (j + 1)^-0.5,
    // normalized to unit mean variance.
    Vector axis(shape.input_dim);
    for (Index j = 0; j < shape.input_dim; ++j)
        axis(j) = std::pow(static_cast<double>(j + 1), -0.5);
    axis *= std::sqrt(static_cast<double>(shape.input_dim)) / axis.norm();
    const Matrix mix = orthonormal_columns(rng, shape.input_dim, shape.input_dim) * axis.asDiagonal();
    out.batch.inputs = gaussian(rng, shape.tokens, shape.input_dim) * mix.transpose();

    NetworkSpec teacher = net;
    auto& head = teacher.layers.back();
    head.weight += shape.teacher_shift * spectral_weight(rng, head.out_dim(), head.in_dim(), 2.5);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    out.batch.targets.resize(static_cast<std::size_t>(shape.tokens));
    for (Index t = 0; t < shape.tokens; ++t) {
        const Vector p = softmax(forward(teacher, out.batch.inputs.row(t).transpose()).logits);
        const double u = unit(rng);
        double acc = 0.0;
        Index pick = p.size() - 1;
        for (Index v = 0; v < p.size(); ++v) {
            acc += p(v);
            if (u < acc) {
                pick = v;
                break;
            }
        }
        out.batch.targets[static_cast<std::size_t>(t)] = static_cast<std::uint32_t>(pick);
    }
    return out;
}

}  // namespace iosvd
