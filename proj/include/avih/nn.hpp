#pragma once

#include <string>
#include <utility>
#include <vector>

#include "avih/ops.hpp"
#include "avih/rng.hpp"

namespace avih::nn {

// Layers own their parameters as graph leaves; forward calls splice them into
// the current step's graph. Initialization is uniform(-1/sqrt(fan_in),
// 1/sqrt(fan_in)), drawn in construction order from the model's Rng.

Tensor uniform_init(std::vector<std::int64_t> shape, std::int64_t fan_in, Rng& rng);

struct Conv2d {
    Var w, b;
    int stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(int c_in, int c_out, int kernel, int stride, int pad, Rng& rng);
    Var operator()(const Var& x) const { return conv2d(x, w, b, stride, pad); }
};

struct ConvTranspose2d {
    Var w, b;

    ConvTranspose2d() = default;
    ConvTranspose2d(int c_in, int c_out, Rng& rng);  // fixed kernel 2, stride 2
    Var operator()(const Var& x) const { return conv_transpose2d_k2s2(x, w, b); }
};

struct Linear {
    Var w, b;

    Linear() = default;
    Linear(int d_in, int d_out, Rng& rng);
    Var operator()(const Var& x) const { return linear(x, w, b); }
};

struct InstanceNorm2d {
    Var gamma, beta;
    double eps = 1e-5;

    InstanceNorm2d() = default;
    explicit InstanceNorm2d(int channels);
    Var operator()(const Var& x) const { return instance_norm(x, gamma, beta, eps); }
};

struct GroupNorm {
    Var gamma, beta;
    int groups = 8;
    double eps = 1e-5;

    GroupNorm() = default;
    GroupNorm(int channels, int groups);
    Var operator()(const Var& x) const { return group_norm(x, gamma, beta, groups, eps); }
};

// Base for serializable models.
class Model {
public:
    virtual ~Model() = default;
    virtual void named_params(std::vector<std::pair<std::string, Var>>& out) const = 0;

    std::vector<Var> params() const;
    std::vector<std::uint8_t> serialize() const;
    std::string weight_digest() const;
    void save(const std::string& path) const;
    void load(const std::string& path);
};

class Adam {
public:
    Adam(std::vector<Var> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);

    void zero_grad();
    void step();
    double lr() const { return lr_; }

private:
    std::vector<Var> params_;
    std::vector<Tensor> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
};

}  // namespace avih::nn
