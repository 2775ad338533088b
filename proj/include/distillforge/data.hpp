#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "distillforge/autodiff.hpp"
#include "distillforge/rng.hpp"
#include "distillforge/tensor.hpp"

namespace distillforge {

enum class ShapeKind { Circle, Square, Triangle };
enum class ColorKind { Red, Green, Blue };
enum class SizeKind { Small, Large };

struct ShapeLabel {
    ShapeKind shape = ShapeKind::Circle;
    ColorKind color = ColorKind::Red;
    SizeKind size = SizeKind::Small;
    bool operator==(const ShapeLabel&) const = default;
};

/// Closed caption vocabulary. Token 0 is the NULL token, which doubles as
/// padding and as the unconditional context for classifier-free guidance.
class Vocab {
public:
    static constexpr long kNull = 0;
    long size() const;
    long id(const std::string& token) const;  // throws on unknown tokens
    const std::string& token(long id) const;
};

struct ShapeSample {
    Tensor image;  // [3,H,W], values in [-1,1]
    std::vector<long> caption_tokens;  // fixed length kCaptionLen
    ShapeLabel label;
};

inline constexpr long kCaptionLen = 4;

/// Caption is always "<size> <color> <shape>", e.g. "large red circle".
std::string caption_string(const ShapeLabel& label);
ShapeLabel parse_caption(const std::string& caption);
std::vector<long> caption_tokens_for(const ShapeLabel& label);   // padded with NULL
ShapeLabel label_from_tokens(const std::vector<long>& tokens);
std::vector<long> null_tokens();

/// Renders one anti-aliased shape on a neutral background. Deterministic in
/// (label, position rng stream).
Tensor render_shape(const ShapeLabel& label, long h, long w, Rng& position_rng);

/// n samples balanced over the 18 label combinations (combo i % 18), each
/// with its own position stream derived from (seed, index).
std::vector<ShapeSample> gen_dataset(long n, long h, long w, std::uint64_t seed);

/// Embedding lookup producing the context tensor [B, L, context_dim].
/// All caption rows must share length L; all-NULL rows give the
/// unconditional context.
NodePtr embed_captions(const NodePtr& table, const std::vector<std::vector<long>>& captions);

/// Creates the "text.table" parameter in a store.
NodePtr add_text_embedder(ParameterStore& params, long context_dim, std::uint64_t seed,
                          Dtype dtype);

}  // namespace distillforge
