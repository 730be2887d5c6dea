#pragma once

#include <vector>

#include "avih/autodiff.hpp"

namespace avih {

// Differentiable ops over Var. Image tensors are B x C x H x W, matrices are
// B x D. Every op validates shapes and builds the backward closure only when
// some parent requires gradients.

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var relu(const Var& a);
Var leaky_relu(const Var& a, double negative_slope);
// Discriminator head: probability map clamp((tanh(z) + 1) / 2, eps, 1 - eps).
Var tanh_probability(const Var& z, double eps);

// Reductions (scalar results, shape {1}).
Var mean_log(const Var& a);    // mean of log(a_i); a_i must be > 0
Var mean_log1m(const Var& a);  // mean of log(1 - a_i); a_i must be < 1
// Mean over batch of the per-sample Euclidean norm over all remaining dims.
Var batch_l2_norm_mean(const Var& a);
// Mean cross entropy of row-wise logits {B,K} against integer labels.
Var cross_entropy(const Var& logits, const std::vector<int>& labels);

// Shape.
Var reshape(const Var& a, std::vector<std::int64_t> shape);
Var concat_channels(const Var& a, const Var& b);
Var detach(const Var& a);

// Convolution stack.
// w: {C_out, C_in, kh, kw}, b: {C_out}.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
// 2x upsampling transposed conv; w: {C_in, C_out, 2, 2}, b: {C_out}.
Var conv_transpose2d_k2s2(const Var& x, const Var& w, const Var& b);
Var maxpool2x2(const Var& x);
Var avgpool2x2(const Var& x);
Var global_avg_pool(const Var& x);  // {B,C,H,W} -> {B,C}

// Normalization. gamma/beta: {C}.
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps);
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps);

// Fully connected: x {B,D}, w {O,D}, b {O}.
Var linear(const Var& x, const Var& w, const Var& b);
Var l2_normalize_rows(const Var& x, double eps);

// Channel-wise variance of overlapping-patch pixel sums (population variance
// over the patch grid), summed over the 3 channels and averaged over batch.
Var patch_sum_variance(const Var& x, int patch_h, int patch_w, int stride);

// Per-sample spatial jitter: optional horizontal flip, then zero-pad by `pad`
// on every side, then crop back to the original size at offset (dy, dx) with
// 0 <= dy, dx <= 2 * pad. Output shape equals input shape.
struct TranslateFlipSpec {
    bool flip = false;
    int pad = 0;
    int dy = 0;
    int dx = 0;
};
Var translate_flip(const Var& x, const std::vector<TranslateFlipSpec>& specs);

// Zero padding by `pad` pixels on every side, optionally flipping each
// sample first; output is B x C x (H+2p) x (W+2p).
Var pad_flip(const Var& x, int pad, const std::vector<bool>& flips);

}  // namespace avih
