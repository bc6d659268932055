#include "getmol/mlp.hpp"

#include <cmath>

namespace getmol {

Activation activation_from_string(const std::string& s) {
    if (s == "silu") return Activation::Silu;
    if (s == "relu") return Activation::Relu;
    if (s == "identity") return Activation::Identity;
    throw ContractError("unknown activation '" + s + "'");
}

std::string activation_name(Activation a) {
    switch (a) {
        case Activation::Silu: return "silu";
        case Activation::Relu: return "relu";
        case Activation::Identity: return "identity";
    }
    return "?";
}

Mlp Mlp::make(const std::vector<std::int64_t>& widths, Activation act, Rng& rng,
              double weight_gain) {
    if (widths.size() < 2) throw ContractError("an MLP needs at least one linear layer");
    Mlp m;
    m.act = act;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        const auto fan_in = widths[i];
        const auto fan_out = widths[i + 1];
        const double bound =
            weight_gain * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        m.weights.push_back(Tensor::rand_uniform({fan_in, fan_out}, rng, bound));
        m.biases.push_back(Tensor::zeros({fan_out}));
    }
    return m;
}

void Mlp::validate() const {
    if (weights.empty() || weights.size() != biases.size()) {
        throw ContractError("MLP has inconsistent layer lists");
    }
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (weights[i].rank() != 2 || biases[i].rank() != 1 ||
            biases[i].extent(0) != weights[i].extent(1)) {
            throw ShapeError("MLP layer " + std::to_string(i) + " has malformed tensors");
        }
        if (i + 1 < weights.size() && weights[i].extent(1) != weights[i + 1].extent(0)) {
            throw ShapeError("MLP layer " + std::to_string(i) + " output width " +
                             std::to_string(weights[i].extent(1)) + " does not feed layer " +
                             std::to_string(i + 1) + " input width " +
                             std::to_string(weights[i + 1].extent(0)));
        }
    }
}

Tensor Mlp::forward(const Tensor& x) const {
    validate();
    const std::int64_t d_in = in_width();
    if (x.rank() == 0 || x.extent(x.rank() - 1) != d_in) {
        throw ShapeError("MLP expects trailing extent " + std::to_string(d_in) + ", got " +
                         shape_str(x.shape()));
    }
    Shape lead(x.shape().begin(), x.shape().end() - 1);
    const std::int64_t rows = x.numel() / d_in;
    Tensor h = (x.rank() == 2) ? x : reshape(x, {rows, d_in});
    for (std::size_t i = 0; i < weights.size(); ++i) {
        h = add(matmul(h, weights[i]), biases[i]);
        if (i + 1 < weights.size()) {
            switch (act) {
                case Activation::Silu: h = silu(h); break;
                case Activation::Relu: h = relu(h); break;
                case Activation::Identity: break;
            }
        }
    }
    Shape out_shape = lead;
    out_shape.push_back(out_width());
    if (out_shape == h.shape()) return h;
    return reshape(h, std::move(out_shape));
}

void Mlp::collect(const std::string& prefix, std::vector<ParamRef>& out) {
    for (std::size_t i = 0; i < weights.size(); ++i) {
        out.push_back({prefix + ".w" + std::to_string(i), &weights[i]});
        out.push_back({prefix + ".b" + std::to_string(i), &biases[i]});
    }
}

}  // namespace getmol
