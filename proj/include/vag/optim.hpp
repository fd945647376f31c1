#ifndef VAG_OPTIM_HPP
#define VAG_OPTIM_HPP

#include <map>
#include <string>
#include <vector>

#include "vag/tensor.hpp"

namespace vag {

// A named trainable tensor plus its Adam moments. Moments share the
// parameter's shape and live in plain f32 vectors.
struct Parameter {
    std::string name;
    Tensor tensor;
    std::vector<float> m1, m2;

    Parameter() = default;
    Parameter(std::string n, Tensor t)
        : name(std::move(n)),
          tensor(std::move(t)),
          m1(static_cast<size_t>(tensor.numel()), 0.0f),
          m2(static_cast<size_t>(tensor.numel()), 0.0f) {
        tensor.set_requires_grad(true);
    }
};

// Ordered registry of parameters; iteration order (lexicographic by name)
// fixes checkpoint layout and optimizer update order.
class ParamStore {
public:
    // Initializes from a name-keyed rng stream so creation order is irrelevant.
    Tensor add(const std::string& name, const Shape& shape, float stddev, const Rng& master);
    Tensor add_zeros(const std::string& name, const Shape& shape);
    Tensor get(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    std::map<std::string, Parameter>& all() { return params_; }
    const std::map<std::string, Parameter>& all() const { return params_; }
    size_t size() const { return params_.size(); }

    void zero_grad();
    int64_t total_elements() const;

private:
    std::map<std::string, Parameter> params_;
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 0.0;  // 0 disables clipping
};

struct AdamStepResult {
    bool applied = false;
    double grad_norm = 0.0;
    std::string diagnostic;  // set when the step was rejected
};

class Adam {
public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    // One update over every parameter in the store. Rejects the whole step
    // (parameters and moments untouched) when any gradient is non-finite.
    AdamStepResult step(ParamStore& params);

    int64_t steps_taken() const { return t_; }
    void set_steps_taken(int64_t t) { t_ = t; }
    const AdamConfig& config() const { return cfg_; }

private:
    AdamConfig cfg_;
    int64_t t_ = 0;
};

}  // namespace vag

#endif
