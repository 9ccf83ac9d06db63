#include "morvit/vit.hpp"

#include <cmath>

namespace morvit {

namespace {

constexpr double kInitStd = 0.02;

Tensor normal_weight(Shape shape, Rng& rng) {
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) {
        v = rng.truncated_normal(kInitStd);
    }
    return Tensor::from(std::move(shape), std::move(values)).set_requires_grad();
}

Tensor zeros_param(Shape shape) { return Tensor::zeros(std::move(shape)).set_requires_grad(); }

Tensor ones_param(Shape shape) { return Tensor::full(std::move(shape), 1.0).set_requires_grad(); }

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

} // namespace

void BlockParams::collect(const std::string& prefix, NamedTensors& out) {
    out.emplace_back(prefix + "ln1.gain", &ln1_gain);
    out.emplace_back(prefix + "ln1.bias", &ln1_bias);
    out.emplace_back(prefix + "attn.wq", &wq);
    out.emplace_back(prefix + "attn.bq", &bq);
    out.emplace_back(prefix + "attn.wk", &wk);
    out.emplace_back(prefix + "attn.bk", &bk);
    out.emplace_back(prefix + "attn.wv", &wv);
    out.emplace_back(prefix + "attn.bv", &bv);
    out.emplace_back(prefix + "attn.wo", &wo);
    out.emplace_back(prefix + "attn.bo", &bo);
    out.emplace_back(prefix + "ln2.gain", &ln2_gain);
    out.emplace_back(prefix + "ln2.bias", &ln2_bias);
    out.emplace_back(prefix + "mlp.w1", &w1);
    out.emplace_back(prefix + "mlp.b1", &b1);
    out.emplace_back(prefix + "mlp.w2", &w2);
    out.emplace_back(prefix + "mlp.b2", &b2);
}

void ClassifierHead::collect(const std::string& prefix, NamedTensors& out) {
    out.emplace_back(prefix + "weight", &weight);
    out.emplace_back(prefix + "bias", &bias);
}

void EmbedParams::collect(const std::string& prefix, NamedTensors& out) {
    out.emplace_back(prefix + "patch_weight", &patch_weight);
    out.emplace_back(prefix + "patch_bias", &patch_bias);
    out.emplace_back(prefix + "cls_token", &cls_token);
    out.emplace_back(prefix + "pos_embed", &pos_embed);
    head.collect(prefix + "head.", out);
}

BlockParams init_block(std::size_t hidden, std::size_t mlp_size, Rng& rng) {
    const std::size_t d = hidden;
    BlockParams p;
    p.ln1_gain = ones_param({d});
    p.ln1_bias = zeros_param({d});
    p.wq = normal_weight({d, d}, rng);
    p.bq = zeros_param({d});
    p.wk = normal_weight({d, d}, rng);
    p.bk = zeros_param({d});
    p.wv = normal_weight({d, d}, rng);
    p.bv = zeros_param({d});
    p.wo = normal_weight({d, d}, rng);
    p.bo = zeros_param({d});
    p.ln2_gain = ones_param({d});
    p.ln2_bias = zeros_param({d});
    p.w1 = normal_weight({d, mlp_size}, rng);
    p.b1 = zeros_param({mlp_size});
    p.w2 = normal_weight({mlp_size, d}, rng);
    p.b2 = zeros_param({d});
    return p;
}

EmbedParams init_embed(const ModelConfig& config, Rng& rng) {
    const std::size_t d = config.hidden;
    EmbedParams p;
    p.patch_weight = normal_weight({config.patch_dim(), d}, rng);
    p.patch_bias = zeros_param({d});
    p.cls_token = zeros_param({1, d});
    p.pos_embed = normal_weight({config.num_patches() + 1, d}, rng);
    p.head.weight = normal_weight({d, config.num_classes}, rng);
    p.head.bias = zeros_param({config.num_classes});
    return p;
}

std::size_t block_param_count(std::size_t hidden, std::size_t mlp_size) {
    const std::size_t d = hidden;
    const std::size_t attention = 4 * d * d + 4 * d;
    const std::size_t mlp = 2 * d * mlp_size + d + mlp_size;
    const std::size_t norms = 4 * d;
    return attention + mlp + norms;
}

Tensor patchify(const Tensor& image, std::size_t patch_size) {
    if (image.rank() != 3) {
        throw ShapeError("patchify: expected an H x W x C image, got shape " +
                         to_string(image.shape()));
    }
    const std::size_t h = image.dim(0);
    const std::size_t w = image.dim(1);
    const std::size_t c = image.dim(2);
    const std::size_t p = patch_size;
    if (p == 0 || h % p != 0 || w % p != 0) {
        throw ShapeError("patchify: image " + std::to_string(h) + "x" + std::to_string(w) +
                         " is not divisible into " + std::to_string(p) + "x" +
                         std::to_string(p) + " patches");
    }
    const std::size_t gr = h / p;
    const std::size_t gc = w / p;
    const std::size_t row_len = p * p * c;
    const auto src = image.to_vector();
    std::vector<double> out(gr * gc * row_len);
    for (std::size_t pr = 0; pr < gr; ++pr) {
        for (std::size_t pc = 0; pc < gc; ++pc) {
            double* dst = out.data() + (pr * gc + pc) * row_len;
            for (std::size_t y = 0; y < p; ++y) {
                const double* line = src.data() + ((pr * p + y) * w + pc * p) * c;
                std::copy_n(line, p * c, dst + y * p * c);
            }
        }
    }
    return Tensor::from({gr * gc, row_len}, std::move(out), image.dtype());
}

Tensor embed(const Tensor& patches, const EmbedParams& params) {
    if (patches.rank() != 2 || patches.dim(1) != params.patch_weight.dim(0)) {
        throw ShapeError("embed: patches " + to_string(patches.shape()) +
                         " do not match projection " + to_string(params.patch_weight.shape()));
    }
    if (params.pos_embed.dim(0) != patches.dim(0) + 1) {
        throw ShapeError("embed: positional table " + to_string(params.pos_embed.shape()) +
                         " needs " + std::to_string(patches.dim(0) + 1) + " rows");
    }
    const Tensor tokens = affine(patches, params.patch_weight, params.patch_bias);
    const Tensor parts[] = {params.cls_token, tokens};
    return add(concat_rows(parts), params.pos_embed);
}

Tensor encoder_block(const Tensor& h, const BlockParams& params, std::size_t heads, double eps) {
    if (h.rank() != 2 || h.dim(0) == 0) {
        throw ShapeError("encoder_block: expected M x D with M >= 1, got " + to_string(h.shape()));
    }
    const std::size_t d = h.dim(1);
    if (heads == 0 || d % heads != 0) {
        throw ShapeError("encoder_block: hidden " + std::to_string(d) +
                         " not divisible by heads " + std::to_string(heads));
    }
    const std::size_t dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    const Tensor x = layernorm(h, params.ln1_gain, params.ln1_bias, eps);
    const Tensor q = affine(x, params.wq, params.bq);
    const Tensor k = affine(x, params.wk, params.bk);
    const Tensor v = affine(x, params.wv, params.bv);
    std::vector<Tensor> head_out;
    head_out.reserve(heads);
    for (std::size_t i = 0; i < heads; ++i) {
        const Tensor qh = slice_cols(q, i * dh, (i + 1) * dh);
        const Tensor kh = slice_cols(k, i * dh, (i + 1) * dh);
        const Tensor vh = slice_cols(v, i * dh, (i + 1) * dh);
        const Tensor attn = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
        head_out.push_back(matmul(attn, vh));
    }
    const Tensor mixed = heads == 1 ? head_out[0] : concat_cols(head_out);
    const Tensor h1 = add(h, affine(mixed, params.wo, params.bo));

    const Tensor y = layernorm(h1, params.ln2_gain, params.ln2_bias, eps);
    const Tensor hidden = gelu(affine(y, params.w1, params.b1));
    return add(h1, affine(hidden, params.w2, params.b2));
}

Tensor classify(const Tensor& h_cls, const ClassifierHead& head) {
    return affine(h_cls, head.weight, head.bias);
}

} // namespace morvit
