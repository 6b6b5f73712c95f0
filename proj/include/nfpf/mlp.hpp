#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "nfpf/autodiff.hpp"

namespace nfpf {

struct NamedParam {
    std::string name;
    ad::Tensor* tensor;
};

using ParamList = std::vector<NamedParam>;

/// Fully connected network with tanh hidden activations and a linear output.
/// Weights are drawn uniformly from [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases
/// start at zero.
class Mlp {
public:
    Mlp() = default;
    /// sizes = {input, hidden..., output}
    Mlp(std::vector<std::size_t> sizes, std::mt19937_64& rng);

    ad::Var forward(ad::Tape* tape, const ad::Var& x) const;

    std::size_t input_size() const { return sizes_.front(); }
    std::size_t output_size() const { return sizes_.back(); }
    std::size_t num_layers() const { return weights_.size(); }

    ad::Tensor& weight(std::size_t layer) { return weights_[layer]; }
    ad::Tensor& bias(std::size_t layer) { return biases_[layer]; }
    const ad::Tensor& weight(std::size_t layer) const { return weights_[layer]; }
    const ad::Tensor& bias(std::size_t layer) const { return biases_[layer]; }

    void append_parameters(const std::string& prefix, ParamList& out);
    void set_zero();

private:
    std::vector<std::size_t> sizes_;
    std::vector<ad::Tensor> weights_;
    std::vector<ad::Tensor> biases_;
};

}  // namespace nfpf
