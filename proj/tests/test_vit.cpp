#include <doctest.h>

#include "morvit/model.hpp"
#include "morvit/vit.hpp"
#include "support.hpp"

using namespace morvit;
using testing::block_oracle;
using testing::max_abs_diff;
using testing::random_tensor;
using testing::to_mat;

namespace {

BlockParams random_block(std::size_t d, std::size_t mlp, Rng& rng) {
    BlockParams p = init_block(d, mlp, rng);
    NamedTensors named;
    p.collect("", named);
    for (auto& [name, t] : named) {
        for (auto& v : t->mutable_data<double>()) {
            v = rng.uniform(-0.5, 0.5);
        }
    }
    return p;
}

void zero_all(BlockParams& p) {
    NamedTensors named;
    p.collect("", named);
    for (auto& [name, t] : named) {
        for (auto& v : t->mutable_data<double>()) {
            v = 0.0;
        }
    }
}

} // namespace

TEST_CASE("patchify geometry") {
    CHECK(patchify(Tensor::zeros({224, 224, 3}), 16).shape() == Shape{196, 768});
    CHECK(patchify(Tensor::zeros({32, 32, 3}), 16).shape() == Shape{4, 768});
    CHECK_THROWS_AS(patchify(Tensor::zeros({30, 32, 3}), 16), ShapeError);
}

TEST_CASE("patchify 4x4x1 by hand") {
    std::vector<double> v(16);
    for (std::size_t i = 0; i < 16; ++i) {
        v[i] = static_cast<double>(i);
    }
    const auto rows = patchify(Tensor::from({4, 4, 1}, v), 2).to_vector();
    const std::vector<double> expect = {0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15};
    CHECK(rows == expect);
}

TEST_CASE("embed") {
    ModelConfig c = model_preset("tiny-desk");
    Rng rng(1);
    EmbedParams p = init_embed(c, rng);
    auto zero_image = patchify(Tensor::zeros({c.image_h, c.image_w, c.channels}), c.patch_size);
    CHECK(embed(zero_image, p).to_vector() == p.pos_embed.to_vector());

    // Identity-like projection on a single patch with no positional signal.
    ModelConfig one = c;
    one.image_h = one.image_w = one.patch_size = 2;
    one.channels = 2;
    one.hidden = 8;
    EmbedParams q = init_embed(one, rng);
    for (auto& x : q.pos_embed.mutable_data<double>()) x = 0.0;
    auto w = q.patch_weight.mutable_data<double>();
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) w[i * 8 + j] = i == j ? 1.0 : 0.0;
    auto image = random_tensor({2, 2, 2}, rng, 0, 1, false);
    auto z = embed(patchify(image, 2), q).to_vector();
    const auto flat = patchify(image, 2).to_vector();
    for (std::size_t j = 0; j < 8; ++j) {
        CHECK(z[8 + j] == flat[j]);
    }

    // Independent matrix-product oracle on random parameters.
    for (auto* t : {&p.patch_weight, &p.patch_bias, &p.cls_token, &p.pos_embed}) {
        for (auto& x : t->mutable_data<double>()) x = rng.uniform(-1, 1);
    }
    auto img = random_tensor({c.image_h, c.image_w, c.channels}, rng, 0, 1, false);
    auto got = to_mat(embed(patchify(img, c.patch_size), p));
    auto proj = testing::affine_rows(to_mat(patchify(img, c.patch_size)), p.patch_weight, p.patch_bias);
    auto pos = to_mat(p.pos_embed);
    auto cls = p.cls_token.to_vector();
    double worst = 0.0;
    for (std::size_t j = 0; j < c.hidden; ++j) worst = std::max(worst, std::abs(got[0][j] - (cls[j] + pos[0][j])));
    for (std::size_t r = 0; r < proj.size(); ++r)
        for (std::size_t j = 0; j < c.hidden; ++j)
            worst = std::max(worst, std::abs(got[r + 1][j] - (proj[r][j] + pos[r + 1][j])));
    CHECK(worst < 1e-12);
}

TEST_CASE("encoder_block with a single token") {
    Rng rng(2);
    BlockParams p = random_block(4, 8, rng);
    auto h = random_tensor({1, 4}, rng, -1, 1, false);
    // One key: softmax is exactly 1, so attention returns the value projection.
    auto x = layernorm(h, p.ln1_gain, p.ln1_bias);
    auto v = add(matmul(x, p.wv), p.bv);
    auto h1 = add(h, add(matmul(v, p.wo), p.bo));
    auto y = layernorm(h1, p.ln2_gain, p.ln2_bias);
    auto expect = add(h1, add(matmul(gelu(add(matmul(y, p.w1), p.b1)), p.w2), p.b2));
    CHECK(max_abs_diff(encoder_block(h, p, 2).to_vector(), expect.to_vector()) < 1e-12);
}

TEST_CASE("encoder_block with zero weights is the identity") {
    Rng rng(3);
    BlockParams p = random_block(8, 16, rng);
    zero_all(p);
    auto h = random_tensor({5, 8}, rng, -2, 2, false);
    CHECK(encoder_block(h, p, 2).to_vector() == h.to_vector());
}

TEST_CASE("encoder_block vs brute-force attention oracle") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        BlockParams p = random_block(4, 8, rng);
        auto h = random_tensor({3, 4}, rng, -1, 1, false);
        auto got = to_mat(encoder_block(h, p, 2, 1e-5));
        CHECK(max_abs_diff(got, block_oracle(to_mat(h), p, 2, 1e-5)) < 1e-12);
    }
}

TEST_CASE("classify") {
    Rng rng(4);
    ClassifierHead head{Tensor::zeros({4, 3}), random_tensor({3}, rng)};
    auto h = random_tensor({1, 4}, rng, -1, 1, false);
    CHECK(classify(h, head).to_vector() == head.bias.to_vector());

    // Column j of the weight is one-hot on coordinate j.
    ClassifierHead pick{Tensor::zeros({4, 3}), Tensor::zeros({3})};
    auto w = pick.weight.mutable_data<double>();
    for (std::size_t j = 0; j < 3; ++j) w[j * 3 + j] = 1.0;
    auto logits = classify(h, pick).to_vector();
    for (std::size_t j = 0; j < 3; ++j) CHECK(logits[j] == h.at(j));
}

// Composite graphs use the 1e-4 bound; single ops use 1e-6.
TEST_CASE("gradient through classify and encoder_block") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        BlockParams p = random_block(4, 8, rng);
        for (auto* t : {&p.wq, &p.wk, &p.wv, &p.wo, &p.w1, &p.w2, &p.ln1_gain, &p.ln2_bias}) {
            t->set_requires_grad();
        }
        ClassifierHead head{random_tensor({4, 3}, rng), random_tensor({3}, rng)};
        auto h = random_tensor({3, 4}, rng);
        const std::size_t row0[] = {0};
        const std::size_t label[] = {1};
        auto loss = [&] {
            return cross_entropy(classify(gather_rows(encoder_block(h, p, 2), row0), head), label);
        };
        CHECK(testing::max_grad_error({&h, &p.wq, &p.wk, &p.wv, &p.wo, &p.w1, &p.w2, &p.ln1_gain,
                                       &p.ln2_bias, &head.weight, &head.bias},
                                      loss) < 1e-4);
    }
}

TEST_CASE("block parameter count matches the closed form for every preset") {
    for (const auto& name : preset_names()) {
        ModelConfig c = model_preset(name);
        const std::size_t d = c.hidden;
        const std::size_t m = c.mlp_size;
        const std::size_t closed = 4 * d * d + 4 * d + 2 * d * m + d + m + 4 * d;
        CHECK(block_param_count(d, m) == closed);
        if (d <= 64) {
            Rng rng(0);
            BlockParams p = init_block(d, m, rng);
            NamedTensors named;
            p.collect("", named);
            std::size_t n = 0;
            for (auto& [k, t] : named) n += t->numel();
            CHECK(n == closed);
        }
    }
}
