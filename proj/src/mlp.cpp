#include "nfpf/mlp.hpp"

#include <algorithm>
#include <cmath>

#include "nfpf/errors.hpp"

namespace nfpf {

Mlp::Mlp(std::vector<std::size_t> sizes, std::mt19937_64& rng) : sizes_(std::move(sizes)) {
    if (sizes_.size() < 2) throw ConfigError("an MLP needs at least an input and an output size");
    for (auto s : sizes_) {
        if (s == 0) throw ConfigError("MLP layer sizes must be positive");
    }
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
        const std::size_t fan_in = sizes_[l];
        const std::size_t fan_out = sizes_[l + 1];
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        std::vector<double> w(fan_in * fan_out);
        for (auto& v : w) v = dist(rng);
        weights_.emplace_back(ad::Shape{fan_out, fan_in}, std::move(w), true);
        biases_.push_back(ad::Tensor::zeros({fan_out}, true));
    }
}

ad::Var Mlp::forward(ad::Tape* tape, const ad::Var& x) const {
    if (x.size() != input_size()) {
        throw DimensionError("MLP expects input of size " + std::to_string(input_size()) + ", got " +
                             std::to_string(x.size()));
    }
    ad::Var h = x;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        h = ad::affine(h, ad::param(tape, weights_[l]), ad::param(tape, biases_[l]));
        if (l + 1 < weights_.size()) h = ad::tanh(h);
    }
    return h;
}

void Mlp::append_parameters(const std::string& prefix, ParamList& out) {
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        out.push_back({prefix + ".w" + std::to_string(l), &weights_[l]});
        out.push_back({prefix + ".b" + std::to_string(l), &biases_[l]});
    }
}

void Mlp::set_zero() {
    for (auto& w : weights_) std::ranges::fill(w.mutable_data(), 0.0);
    for (auto& b : biases_) std::ranges::fill(b.mutable_data(), 0.0);
}

}  // namespace nfpf
