#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>
#include <set>

#include "distillforge/data.hpp"
#include "distillforge/ops.hpp"

using namespace distillforge;
namespace op = distillforge::ops;

TEST_CASE("vocabulary is contiguous with a stable NULL id") {
    Vocab v;
    CHECK(Vocab::kNull == 0);
    CHECK(v.token(0) == "<null>");
    CHECK(v.size() == 9);
    for (long i = 0; i < v.size(); ++i) CHECK(v.id(v.token(i)) == i);
    CHECK_THROWS_AS(v.id("pentagon"), std::invalid_argument);
}

TEST_CASE("n=18 covers every label combination exactly once") {
    auto data = gen_dataset(18, 16, 16, 5);
    std::set<std::string> captions;
    for (const auto& s : data) captions.insert(caption_string(s.label));
    CHECK(captions.size() == 18);
}

TEST_CASE("generation is pure in (n, H, W, seed)") {
    auto a = gen_dataset(7, 16, 16, 42);
    auto b = gen_dataset(7, 16, 16, 42);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].image.bit_equal(b[i].image));
        CHECK(a[i].caption_tokens == b[i].caption_tokens);
    }
    // Prefixes agree for different n under the same seed.
    auto longer = gen_dataset(12, 16, 16, 42);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].image.bit_equal(longer[i].image));
    auto c = gen_dataset(7, 16, 16, 43);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.size(); ++i)
        any_diff = any_diff || !a[i].image.bit_equal(c[i].image);
    CHECK(any_diff);
}

TEST_CASE("red shapes have a hotter red channel than blue") {
    auto data = gen_dataset(90, 32, 32, 11);
    for (const auto& s : data) {
        if (s.label.color != ColorKind::Red) continue;
        double mean_r = 0, mean_b = 0;
        long hw = 32 * 32;
        for (long i = 0; i < hw; ++i) {
            mean_r += s.image.get(i);
            mean_b += s.image.get(2 * hw + i);
        }
        CHECK(mean_r > mean_b);
    }
}

TEST_CASE("images stay in range and hold a visible shape") {
    auto data = gen_dataset(18, 32, 32, 3);
    for (const auto& s : data) {
        double mn = 1e9, mx = -1e9;
        for (long i = 0; i < s.image.numel(); ++i) {
            mn = std::min(mn, s.image.get(i));
            mx = std::max(mx, s.image.get(i));
        }
        CHECK(mn >= -1.0);
        CHECK(mx <= 1.0);
        CHECK(mx - mn > 0.5);  // not a blank canvas
    }
}

TEST_CASE("caption/label bijection") {
    auto data = gen_dataset(18, 16, 16, 9);
    for (const auto& s : data) {
        CHECK(parse_caption(caption_string(s.label)) == s.label);
        CHECK(label_from_tokens(s.caption_tokens) == s.label);
        CHECK(caption_tokens_for(s.label) == s.caption_tokens);
        CHECK(s.caption_tokens.size() == kCaptionLen);
        CHECK(s.caption_tokens.back() == Vocab::kNull);
    }
    CHECK_THROWS_AS(parse_caption("big red circle"), std::invalid_argument);
    CHECK_THROWS_AS(parse_caption("large red"), std::invalid_argument);
}

TEST_CASE("size constraint is enforced") {
    CHECK_THROWS_AS(gen_dataset(1, 8, 16, 0), std::invalid_argument);
    CHECK_THROWS_AS(gen_dataset(1, 16, 15, 0), std::invalid_argument);
}

TEST_CASE("embedding lookups are deterministic and NULL rows repeat") {
    ParameterStore store;
    auto table = add_text_embedder(store, 8, 42, Dtype::F64);

    auto nulls = embed_captions(table, {null_tokens()});
    REQUIRE(nulls->shape() == std::vector<long>{1, kCaptionLen, 8});
    for (long l = 1; l < kCaptionLen; ++l)
        for (long d = 0; d < 8; ++d)
            CHECK(nulls->value.get(l * 8 + d) == nulls->value.get(d));

    ShapeLabel label{ShapeKind::Square, ColorKind::Green, SizeKind::Large};
    auto a = embed_captions(table, {caption_tokens_for(label)});
    auto b = embed_captions(table, {caption_tokens_for(label)});
    CHECK(a->value.bit_equal(b->value));

    CHECK_THROWS_AS(embed_captions(table, {{0, 1, 99, 0}}), std::invalid_argument);
    CHECK_THROWS_AS(embed_captions(table, {{0, 1}, {0, 1, 2}}), std::invalid_argument);
}

TEST_CASE("gradients reach exactly the embedding rows a batch uses") {
    ParameterStore store;
    auto table = add_text_embedder(store, 6, 7, Dtype::F64);
    ShapeLabel label{ShapeKind::Circle, ColorKind::Red, SizeKind::Small};
    auto ctx = embed_captions(table, {caption_tokens_for(label)});
    auto target = make_leaf(Tensor::zeros({1, kCaptionLen, 6}, Dtype::F64));
    auto loss = op::mse(ctx, target);
    backward(loss);

    auto tokens = caption_tokens_for(label);
    std::set<long> used(tokens.begin(), tokens.end());
    REQUIRE(table->has_grad());
    Vocab v;
    for (long row = 0; row < v.size(); ++row) {
        bool nonzero = false;
        for (long d = 0; d < 6; ++d) nonzero = nonzero || table->grad.get(row * 6 + d) != 0.0;
        CHECK(nonzero == (used.count(row) > 0));
    }
}
