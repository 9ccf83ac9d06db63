#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "morvit/config.hpp"
#include "morvit/rng.hpp"
#include "morvit/tensor.hpp"

namespace morvit {

/// (name, tensor) pairs in a fixed order; the order defines checkpoint layout.
using NamedTensors = std::vector<std::pair<std::string, Tensor*>>;

/// Parameters of one pre-norm transformer encoder block.
struct BlockParams {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gain, ln2_bias;
    Tensor w1, b1, w2, b2;

    void collect(const std::string& prefix, NamedTensors& out);
};

struct ClassifierHead {
    Tensor weight;  // D x num_classes
    Tensor bias;    // num_classes

    void collect(const std::string& prefix, NamedTensors& out);
};

struct EmbedParams {
    Tensor patch_weight;  // (P*P*C) x D
    Tensor patch_bias;    // D
    Tensor cls_token;     // 1 x D
    Tensor pos_embed;     // (N+1) x D
    ClassifierHead head;

    void collect(const std::string& prefix, NamedTensors& out);
};

BlockParams init_block(std::size_t hidden, std::size_t mlp_size, Rng& rng);
EmbedParams init_embed(const ModelConfig& config, Rng& rng);

/// Closed-form parameter count of one encoder block.
std::size_t block_param_count(std::size_t hidden, std::size_t mlp_size);

/// Splits an H x W x C image into N = HW/P^2 rows of flattened P x P x C
/// patches, patch grid in row-major order.
Tensor patchify(const Tensor& image, std::size_t patch_size);

/// Z_0 = [cls; patches * W_e + b_e] + E_pos.
Tensor embed(const Tensor& patches, const EmbedParams& params);

/// h + MHSA(LN(h)), then + MLP(LN(.)); attention spans exactly the M rows given.
Tensor encoder_block(const Tensor& h, const BlockParams& params, std::size_t heads,
                     double eps = 1e-5);

/// Affine map of the class-token row (1 x D) to logits (1 x num_classes).
Tensor classify(const Tensor& h_cls, const ClassifierHead& head);

} // namespace morvit
