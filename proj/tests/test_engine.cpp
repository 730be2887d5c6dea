#include <doctest.h>

#include <cmath>
#include <functional>

#include "avih/models.hpp"
#include "avih/ops.hpp"
#include "avih/rng.hpp"

using namespace avih;

namespace {

Tensor random_tensor(std::vector<std::int64_t> shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

// Central differences of a freshly evaluated scalar function.
Tensor numeric_grad(const Tensor& x, const std::function<double(const Tensor&)>& f,
                    double h = 1e-5) {
    Tensor g(x.shape());
    Tensor probe = x;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        probe[i] = x[i] + h;
        const double up = f(probe);
        probe[i] = x[i] - h;
        const double dn = f(probe);
        probe[i] = x[i];
        g[i] = (up - dn) / (2.0 * h);
    }
    return g;
}

void check_grads_match(const Tensor& analytic, const Tensor& numeric, double rtol = 1e-5,
                       double atol = 1e-8) {
    REQUIRE(analytic.same_shape(numeric));
    for (std::int64_t i = 0; i < analytic.numel(); ++i) {
        const double tol = atol + rtol * std::max(std::fabs(analytic[i]), std::fabs(numeric[i]));
        INFO("index ", i, ": analytic=", analytic[i], " numeric=", numeric[i]);
        CHECK(std::fabs(analytic[i] - numeric[i]) <= tol);
    }
}

// Scalarizes an arbitrary tensor through a fixed random projection so that
// every output element influences the loss.
Var project_to_scalar(const Var& v, std::uint64_t seed) {
    Rng rng(seed);
    Tensor w(v->value.shape());
    for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-1.0, 1.0);
    Var flat = reshape(mul(v, constant(w)), {1, v->value.numel()});
    return batch_l2_norm_mean(flat);
}

void check_op_gradient(const std::vector<Tensor>& inputs,
                       const std::function<Var(const std::vector<Var>&)>& op,
                       double rtol = 1e-5) {
    // Analytic gradients.
    std::vector<Var> leaves;
    for (const auto& t : inputs) leaves.push_back(leaf(t));
    Var out = op(leaves);
    Var loss = out->value.numel() == 1 ? out : project_to_scalar(out, 99);
    backward(loss);

    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto f = [&](const Tensor& probe) {
            std::vector<Var> args;
            for (std::size_t j = 0; j < inputs.size(); ++j)
                args.push_back(constant(j == k ? probe : inputs[j]));
            Var o = op(args);
            Var l = o->value.numel() == 1 ? o : project_to_scalar(o, 99);
            return l->value.item();
        };
        REQUIRE(leaves[k]->grad_ready);
        check_grads_match(leaves[k]->grad, numeric_grad(inputs[k], f), rtol);
    }
}

}  // namespace

TEST_CASE("batch_l2_norm_mean gradient and value") {
    Rng rng(7);
    Tensor x = random_tensor({3, 2, 4, 4}, rng, -1.0, 1.0);
    Var lx = leaf(x);
    Var loss = batch_l2_norm_mean(lx);
    double expect = 0.0;
    for (int b = 0; b < 3; ++b) {
        double s = 0.0;
        for (int i = 0; i < 32; ++i) s += x[b * 32 + i] * x[b * 32 + i];
        expect += std::sqrt(s);
    }
    expect /= 3.0;
    CHECK(loss->value.item() == doctest::Approx(expect).epsilon(1e-12));
    backward(loss);
    auto f = [](const Tensor& t) { return batch_l2_norm_mean(constant(t))->value.item(); };
    check_grads_match(lx->grad, numeric_grad(x, f));
}

TEST_CASE("elementwise op gradients") {
    Rng rng(11);
    Tensor a = random_tensor({2, 3, 4, 4}, rng, -1.0, 1.0);
    Tensor b = random_tensor({2, 3, 4, 4}, rng, -1.0, 1.0);
    check_op_gradient({a, b}, [](const std::vector<Var>& v) { return add(v[0], v[1]); });
    check_op_gradient({a, b}, [](const std::vector<Var>& v) { return sub(v[0], v[1]); });
    check_op_gradient({a, b}, [](const std::vector<Var>& v) { return mul(v[0], v[1]); });
    check_op_gradient({a}, [](const std::vector<Var>& v) { return scale(v[0], -2.5); });

    // Keep inputs away from the ReLU kink for finite differences.
    Tensor c(a.shape());
    for (std::int64_t i = 0; i < c.numel(); ++i)
        c[i] = (a[i] >= 0 ? 1.0 : -1.0) * (0.05 + std::fabs(a[i]));
    check_op_gradient({c}, [](const std::vector<Var>& v) { return relu(v[0]); });
    check_op_gradient({c}, [](const std::vector<Var>& v) { return leaky_relu(v[0], 0.2); });
    check_op_gradient({c}, [](const std::vector<Var>& v) { return tanh_probability(v[0], 1e-9); });
}

TEST_CASE("reduction op gradients") {
    Rng rng(13);
    Tensor p = random_tensor({2, 1, 3, 3}, rng, 0.1, 0.9);
    check_op_gradient({p}, [](const std::vector<Var>& v) { return mean_log(v[0]); });
    check_op_gradient({p}, [](const std::vector<Var>& v) { return mean_log1m(v[0]); });

    Tensor logits = random_tensor({4, 5}, rng, -2.0, 2.0);
    std::vector<int> labels{0, 3, 2, 4};
    check_op_gradient({logits},
                      [&labels](const std::vector<Var>& v) { return cross_entropy(v[0], labels); });
}

TEST_CASE("conv2d gradients (stride 1 and 2)") {
    Rng rng(17);
    Tensor x = random_tensor({2, 3, 6, 6}, rng, -1.0, 1.0);
    Tensor w = random_tensor({4, 3, 3, 3}, rng, -0.5, 0.5);
    Tensor b = random_tensor({4}, rng, -0.5, 0.5);
    check_op_gradient({x, w, b},
                      [](const std::vector<Var>& v) { return conv2d(v[0], v[1], v[2], 1, 1); });
    check_op_gradient({x, w, b},
                      [](const std::vector<Var>& v) { return conv2d(v[0], v[1], v[2], 2, 1); });
    Tensor w4 = random_tensor({2, 3, 4, 4}, rng, -0.5, 0.5);
    Tensor b4 = random_tensor({2}, rng, -0.5, 0.5);
    check_op_gradient({x, w4, b4},
                      [](const std::vector<Var>& v) { return conv2d(v[0], v[1], v[2], 2, 1); });
}

TEST_CASE("conv_transpose2d gradients") {
    Rng rng(19);
    Tensor x = random_tensor({2, 3, 4, 4}, rng, -1.0, 1.0);
    Tensor w = random_tensor({3, 5, 2, 2}, rng, -0.5, 0.5);
    Tensor b = random_tensor({5}, rng, -0.5, 0.5);
    check_op_gradient({x, w, b}, [](const std::vector<Var>& v) {
        return conv_transpose2d_k2s2(v[0], v[1], v[2]);
    });
}

TEST_CASE("pooling and shape op gradients") {
    Rng rng(23);
    Tensor x = random_tensor({2, 3, 6, 6}, rng, -1.0, 1.0);
    check_op_gradient({x}, [](const std::vector<Var>& v) { return maxpool2x2(v[0]); });
    check_op_gradient({x}, [](const std::vector<Var>& v) { return global_avg_pool(v[0]); });
    check_op_gradient({x}, [](const std::vector<Var>& v) { return reshape(v[0], {2, 108}); });
    Tensor y = random_tensor({2, 2, 6, 6}, rng, -1.0, 1.0);
    check_op_gradient({x, y},
                      [](const std::vector<Var>& v) { return concat_channels(v[0], v[1]); });
}

TEST_CASE("normalization gradients") {
    Rng rng(29);
    Tensor x = random_tensor({2, 4, 5, 5}, rng, -1.0, 1.0);
    Tensor gamma = random_tensor({4}, rng, 0.5, 1.5);
    Tensor beta = random_tensor({4}, rng, -0.5, 0.5);
    check_op_gradient({x, gamma, beta}, [](const std::vector<Var>& v) {
        return instance_norm(v[0], v[1], v[2], 1e-5);
    }, 1e-4);
    check_op_gradient({x, gamma, beta}, [](const std::vector<Var>& v) {
        return group_norm(v[0], v[1], v[2], 2, 1e-5);
    }, 1e-4);
}

TEST_CASE("linear and row normalization gradients") {
    Rng rng(31);
    Tensor x = random_tensor({3, 6}, rng, -1.0, 1.0);
    Tensor w = random_tensor({4, 6}, rng, -0.5, 0.5);
    Tensor b = random_tensor({4}, rng, -0.5, 0.5);
    check_op_gradient({x, w, b},
                      [](const std::vector<Var>& v) { return linear(v[0], v[1], v[2]); });
    check_op_gradient({x}, [](const std::vector<Var>& v) { return l2_normalize_rows(v[0], 1e-12); });
}

TEST_CASE("patch_sum_variance gradient") {
    Rng rng(37);
    Tensor x = random_tensor({2, 3, 6, 6}, rng);
    check_op_gradient({x}, [](const std::vector<Var>& v) {
        return patch_sum_variance(v[0], 3, 2, 2);
    });
    check_op_gradient({x}, [](const std::vector<Var>& v) {
        return patch_sum_variance(v[0], 1, 1, 1);
    });
}

TEST_CASE("spatial jitter gradients") {
    Rng rng(41);
    Tensor x = random_tensor({3, 3, 6, 6}, rng);
    std::vector<TranslateFlipSpec> specs{{true, 2, 1, 3}, {false, 2, 4, 0}, {true, 2, 2, 2}};
    check_op_gradient({x},
                      [&specs](const std::vector<Var>& v) { return translate_flip(v[0], specs); });
    std::vector<bool> flips{true, false, true};
    check_op_gradient({x},
                      [&flips](const std::vector<Var>& v) { return pad_flip(v[0], 2, flips); });
}

TEST_CASE("model forward/backward smoke: gradients reach inputs") {
    Rng rng(43);
    models::UNetSpec uspec;
    uspec.depth = 2;
    uspec.base_channels = 4;
    models::UNet unet(uspec, 5);
    Tensor x = random_tensor({1, 3, 8, 8}, rng);
    Var lx = leaf(x);
    Var out = unet.forward(lx);
    CHECK(out->value.same_shape(x));
    Var loss = batch_l2_norm_mean(out);
    backward(loss);
    REQUIRE(lx->grad_ready);
    double gsum = 0.0;
    for (std::int64_t i = 0; i < lx->grad.numel(); ++i) gsum += std::fabs(lx->grad[i]);
    CHECK(gsum > 0.0);

    // Spot-check a few coordinates against finite differences.
    auto f = [&unet](const Tensor& probe) {
        return batch_l2_norm_mean(unet.forward(constant(probe)))->value.item();
    };
    Tensor probe = x;
    for (std::int64_t idx : {0L, 17L, 63L, 100L, 191L}) {
        const double h = 1e-5;
        probe[idx] = x[idx] + h;
        double up = f(probe);
        probe[idx] = x[idx] - h;
        double dn = f(probe);
        probe[idx] = x[idx];
        const double num = (up - dn) / (2 * h);
        CHECK(std::fabs(lx->grad[idx] - num) <=
              1e-6 + 1e-4 * std::max(std::fabs(num), std::fabs(lx->grad[idx])));
    }
}

TEST_CASE("service model end-to-end gradient spot check") {
    Rng rng(47);
    models::ServiceModelSpec spec;
    spec.base_channels = 8;
    spec.embedding_dim = 16;
    spec.groups = 4;
    models::ServiceModel fs(spec, 3);
    Tensor x = random_tensor({2, 3, 16, 16}, rng);
    Var lx = leaf(x);
    Var emb = fs.embed(lx);
    CHECK(emb->value.dim(0) == 2);
    CHECK(emb->value.dim(1) == 16);
    // unit-norm rows
    for (int b = 0; b < 2; ++b) {
        double s = 0.0;
        for (int j = 0; j < 16; ++j) s += emb->value[b * 16 + j] * emb->value[b * 16 + j];
        CHECK(std::sqrt(s) == doctest::Approx(1.0).epsilon(1e-9));
    }
    Var loss = project_to_scalar(emb, 123);
    backward(loss);
    REQUIRE(lx->grad_ready);
    auto f = [&fs](const Tensor& probe) {
        return project_to_scalar(fs.embed(constant(probe)), 123)->value.item();
    };
    Tensor probe = x;
    for (std::int64_t idx : {3L, 77L, 400L, 911L, 1500L}) {
        const double h = 1e-5;
        probe[idx] = x[idx] + h;
        double up = f(probe);
        probe[idx] = x[idx] - h;
        double dn = f(probe);
        probe[idx] = x[idx];
        const double num = (up - dn) / (2 * h);
        CHECK(std::fabs(lx->grad[idx] - num) <=
              1e-6 + 1e-4 * std::max(std::fabs(num), std::fabs(lx->grad[idx])));
    }
}

TEST_CASE("deterministic construction and forward") {
    models::UNetSpec spec;
    spec.depth = 2;
    spec.base_channels = 4;
    models::UNet a(spec, 77), b(spec, 77), c(spec, 78);
    CHECK(a.weight_digest() == b.weight_digest());
    CHECK(a.weight_digest() != c.weight_digest());

    Rng rng(51);
    Tensor x = random_tensor({1, 3, 8, 8}, rng);
    Tensor o1 = a.forward(constant(x))->value;
    Tensor o2 = a.forward(constant(x))->value;
    for (std::int64_t i = 0; i < o1.numel(); ++i) CHECK(o1[i] == o2[i]);
}
