#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "sfuse/common.hpp"
#include "sfuse/rng.hpp"
#include "sfuse/graph.hpp"
#include "sfuse/tensor.hpp"

namespace sfuse {

// Named parameter store. std::map keeps iteration order deterministic, which
// the optimizer, checkpoint format and gradient reports all rely on.
template <class R>
using ParamStore = std::map<std::string, Tensor<R>>;

template <class R>
using GradientMap = std::map<std::string, Tensor<R>>;

// Per-step binding of parameters into a graph: every named tensor becomes a
// leaf; gradients are read back out by name after backward().
template <class R>
class ParamBinding {
public:
    ParamBinding(Graph<R>& g, const ParamStore<R>& params, bool trainable = true) : graph_(g) {
        for (const auto& [name, tensor] : params)
            vars_.emplace(name, trainable ? g.leaf(tensor) : g.constant(tensor));
    }

    // wrap existing graph handles (tests bind leaves themselves)
    ParamBinding(Graph<R>& g, std::map<std::string, typename Graph<R>::Var> vars)
        : graph_(g), vars_(std::move(vars)) {}

    typename Graph<R>::Var operator[](const std::string& name) const {
        auto it = vars_.find(name);
        if (it == vars_.end()) throw ContractError("unknown parameter '" + name + "'");
        return it->second;
    }

    bool has(const std::string& name) const { return vars_.count(name) != 0; }

    GradientMap<R> gradients() {
        GradientMap<R> out;
        for (const auto& [name, var] : vars_) out.emplace(name, graph_.grad(var));
        return out;
    }

private:
    Graph<R>& graph_;
    std::map<std::string, typename Graph<R>::Var> vars_;
};

// fan-in scaled init keeps feature magnitudes stable through projection
// chains regardless of width
template <class R>
Tensor<R> linear_init(int fan_in, int fan_out, Rng& rng) {
    return Tensor<R>::randn({fan_in, fan_out}, rng, std::sqrt(1.0 / fan_in));
}

template <class R>
std::vector<std::string> param_names(const ParamStore<R>& params) {
    std::vector<std::string> names;
    names.reserve(params.size());
    for (const auto& [name, t] : params) names.push_back(name);
    return names;
}

template <class R>
std::int64_t param_count(const ParamStore<R>& params) {
    std::int64_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
}

}  // namespace sfuse
