#pragma once

#include <string>
#include <vector>

#include "getmol/tensor.hpp"

namespace getmol {

enum class Activation { Silu, Relu, Identity };

Activation activation_from_string(const std::string& s);
std::string activation_name(Activation a);

/// A stack of linear layers with an activation between them (none after the
/// last). Inputs of shape [..., d_in] are flattened to rows, mapped, and
/// reshaped back with the trailing extent replaced by d_out.
struct Mlp {
    std::vector<Tensor> weights;  // each [d_in, d_out]
    std::vector<Tensor> biases;   // each [d_out]
    Activation act = Activation::Silu;

    /// Xavier-uniform weights (scaled by weight_gain), zero biases.
    static Mlp make(const std::vector<std::int64_t>& widths, Activation act, Rng& rng,
                    double weight_gain = 1.0);

    std::int64_t in_width() const { return weights.front().extent(0); }
    std::int64_t out_width() const { return weights.back().extent(1); }
    std::size_t n_layers() const { return weights.size(); }

    Tensor forward(const Tensor& x) const;

    void collect(const std::string& prefix, std::vector<ParamRef>& out);
    void validate() const;
};

}  // namespace getmol
