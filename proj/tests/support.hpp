#pragma once

// Reference implementations used as oracles. None of this code calls into
// the routing module, and the block oracle works on plain vectors with
// explicit loops rather than the tensor ops it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "morvit/config.hpp"
#include "morvit/model.hpp"
#include "morvit/rng.hpp"
#include "morvit/tensor.hpp"
#include "morvit/vit.hpp"

namespace testing {

using morvit::Tensor;
using Mat = std::vector<std::vector<double>>;

inline Tensor random_tensor(morvit::Shape shape, morvit::Rng& rng, double lo = -1.0, double hi = 1.0,
                            bool grad = true) {
    std::vector<double> v(morvit::shape_numel(shape));
    for (auto& x : v) {
        x = rng.uniform(lo, hi);
    }
    auto t = Tensor::from(std::move(shape), std::move(v));
    if (grad) {
        t.set_requires_grad();
    }
    return t;
}

inline Tensor random_image(const morvit::ModelConfig& c, morvit::Rng& rng) {
    return random_tensor({c.image_h, c.image_w, c.channels}, rng, 0.0, 1.0, false);
}

/// |a - n| / max(|a|, |n|, floor); floor keeps entries whose true value is
/// ~0 from reporting finite-difference noise as a huge relative error.
inline double rel_err(double a, double n, double floor = 1e-6) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Central differences of f() with respect to every entry of `leaf`.
inline std::vector<double> numeric_grad(Tensor& leaf, const std::function<double()>& f, double h = 1e-5) {
    auto data = leaf.mutable_data<double>();
    std::vector<double> out(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double keep = data[i];
        data[i] = keep + h;
        const double up = f();
        data[i] = keep - h;
        const double down = f();
        data[i] = keep;
        out[i] = (up - down) / (2.0 * h);
    }
    return out;
}

/// Largest relative error between analytic and numeric gradients over `leaves`.
/// `loss` must build a fresh graph on each call.
inline double max_grad_error(std::vector<Tensor*> leaves, const std::function<Tensor()>& loss,
                             double h = 1e-5, double floor = 1e-6) {
    for (auto* t : leaves) {
        t->zero_grad();
    }
    loss().backward();
    std::vector<std::vector<double>> analytic;
    for (auto* t : leaves) {
        analytic.push_back(t->grad_vector());
    }
    double worst = 0.0;
    morvit::NoGradGuard guard;
    auto f = [&] { return loss().item(); };
    for (std::size_t k = 0; k < leaves.size(); ++k) {
        const auto numeric = numeric_grad(*leaves[k], f, h);
        for (std::size_t i = 0; i < numeric.size(); ++i) {
            worst = std::max(worst, rel_err(analytic[k][i], numeric[i], floor));
        }
    }
    return worst;
}

inline Mat to_mat(const Tensor& t) {
    const std::size_t rows = t.rank() == 1 ? 1 : t.dim(0);
    const std::size_t cols = t.rank() == 1 ? t.dim(0) : t.dim(1);
    const auto v = t.to_vector();
    Mat m(rows, std::vector<double>(cols));
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            m[i][j] = v[i * cols + j];
        }
    }
    return m;
}

inline Mat mat_mul(const Mat& a, const Mat& b) {
    Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < b[0].size(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < b.size(); ++k) {
                s += a[i][k] * b[k][j];
            }
            c[i][j] = s;
        }
    }
    return c;
}

inline Mat affine_rows(const Mat& x, const Tensor& w, const Tensor& b) {
    Mat out = mat_mul(x, to_mat(w));
    const auto bias = b.to_vector();
    for (auto& row : out) {
        for (std::size_t j = 0; j < row.size(); ++j) {
            row[j] += bias[j];
        }
    }
    return out;
}

inline Mat layernorm_rows(const Mat& x, const Tensor& gain, const Tensor& bias, double eps) {
    const auto g = gain.to_vector();
    const auto b = bias.to_vector();
    Mat out = x;
    for (auto& row : out) {
        double mu = 0.0;
        for (double v : row) mu += v;
        mu /= static_cast<double>(row.size());
        double var = 0.0;
        for (double v : row) var += (v - mu) * (v - mu);
        var /= static_cast<double>(row.size());
        for (std::size_t j = 0; j < row.size(); ++j) {
            row[j] = (row[j] - mu) / std::sqrt(var + eps) * g[j] + b[j];
        }
    }
    return out;
}

/// Pre-norm block with explicit per-head, per-query, per-key loops.
inline Mat block_oracle(const Mat& h, const morvit::BlockParams& p, std::size_t heads, double eps) {
    const std::size_t m = h.size();
    const std::size_t d = h[0].size();
    const std::size_t dh = d / heads;
    const Mat x = layernorm_rows(h, p.ln1_gain, p.ln1_bias, eps);
    const Mat q = affine_rows(x, p.wq, p.bq);
    const Mat k = affine_rows(x, p.wk, p.bk);
    const Mat v = affine_rows(x, p.wv, p.bv);
    Mat mixed(m, std::vector<double>(d, 0.0));
    for (std::size_t hd = 0; hd < heads; ++hd) {
        for (std::size_t i = 0; i < m; ++i) {
            std::vector<double> logits(m);
            for (std::size_t j = 0; j < m; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) {
                    s += q[i][hd * dh + c] * k[j][hd * dh + c];
                }
                logits[j] = s / std::sqrt(static_cast<double>(dh));
            }
            const double mx = *std::max_element(logits.begin(), logits.end());
            double z = 0.0;
            for (auto& l : logits) {
                l = std::exp(l - mx);
                z += l;
            }
            for (std::size_t j = 0; j < m; ++j) {
                for (std::size_t c = 0; c < dh; ++c) {
                    mixed[i][hd * dh + c] += logits[j] / z * v[j][hd * dh + c];
                }
            }
        }
    }
    const Mat attn = affine_rows(mixed, p.wo, p.bo);
    Mat h1 = h;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) h1[i][j] += attn[i][j];
    Mat hidden = affine_rows(layernorm_rows(h1, p.ln2_gain, p.ln2_bias, eps), p.w1, p.b1);
    for (auto& row : hidden)
        for (auto& u : row) u = 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0)));
    const Mat mlp = affine_rows(hidden, p.w2, p.b2);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) h1[i][j] += mlp[i][j];
    return h1;
}

/// R applications of h <- 1 * f(h) + h over all tokens, then the classifier,
/// composed from vit-backbone operations only.
inline Tensor weight_tied_logits(const Tensor& image, const morvit::ModelParams& params,
                                 const morvit::ModelConfig& c, std::size_t steps) {
    Tensor h = morvit::embed(morvit::patchify(image, c.patch_size), params.embed);
    for (std::size_t r = 0; r < steps; ++r) {
        const auto& block = params.blocks.size() == 1 ? params.blocks[0] : params.blocks[r];
        h = morvit::add(morvit::encoder_block(h, block, c.heads, c.layernorm_eps), h);
    }
    const std::size_t row0[] = {0};
    return morvit::classify(morvit::gather_rows(h, row0), params.embed.head);
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double worst = a.size() == b.size() ? 0.0 : INFINITY;
    for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    return worst;
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].size(); ++j) worst = std::max(worst, std::abs(a[i][j] - b[i][j]));
    return worst;
}

/// Scalar Adam with constant gradient g: the bias-corrected moments equal g and
/// g^2 exactly, so every step moves by lr * g / (|g| + eps).
inline double adam_constant_grad_oracle(double p0, double g, double lr, double eps, std::size_t t) {
    return p0 - static_cast<double>(t) * lr * g / (std::abs(g) + eps);
}

} // namespace testing
