#include "distillforge/data.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "distillforge/ops.hpp"

namespace distillforge {

namespace {

const std::vector<std::string>& vocab_tokens() {
    static const std::vector<std::string> kTokens = {
        "<null>", "small", "large", "red", "green", "blue", "circle", "square", "triangle"};
    return kTokens;
}

const char* size_word(SizeKind s) { return s == SizeKind::Small ? "small" : "large"; }

const char* color_word(ColorKind c) {
    switch (c) {
        case ColorKind::Red: return "red";
        case ColorKind::Green: return "green";
        case ColorKind::Blue: return "blue";
    }
    return "?";
}

const char* shape_word(ShapeKind s) {
    switch (s) {
        case ShapeKind::Circle: return "circle";
        case ShapeKind::Square: return "square";
        case ShapeKind::Triangle: return "triangle";
    }
    return "?";
}

}  // namespace

long Vocab::size() const { return static_cast<long>(vocab_tokens().size()); }

long Vocab::id(const std::string& token) const {
    const auto& toks = vocab_tokens();
    for (std::size_t i = 0; i < toks.size(); ++i)
        if (toks[i] == token) return static_cast<long>(i);
    throw std::invalid_argument("unknown token: '" + token + "'");
}

const std::string& Vocab::token(long id) const {
    const auto& toks = vocab_tokens();
    if (id < 0 || id >= static_cast<long>(toks.size()))
        throw std::out_of_range("token id out of range: " + std::to_string(id));
    return toks[static_cast<std::size_t>(id)];
}

std::string caption_string(const ShapeLabel& label) {
    std::ostringstream os;
    os << size_word(label.size) << " " << color_word(label.color) << " "
       << shape_word(label.shape);
    return os.str();
}

ShapeLabel parse_caption(const std::string& caption) {
    std::istringstream is(caption);
    std::string s, c, f;
    if (!(is >> s >> c >> f)) throw std::invalid_argument("caption must be '<size> <color> <shape>'");
    std::string extra;
    if (is >> extra) throw std::invalid_argument("caption must be '<size> <color> <shape>'");
    ShapeLabel label;
    if (s == "small")
        label.size = SizeKind::Small;
    else if (s == "large")
        label.size = SizeKind::Large;
    else
        throw std::invalid_argument("unknown size word: " + s);
    if (c == "red")
        label.color = ColorKind::Red;
    else if (c == "green")
        label.color = ColorKind::Green;
    else if (c == "blue")
        label.color = ColorKind::Blue;
    else
        throw std::invalid_argument("unknown color word: " + c);
    if (f == "circle")
        label.shape = ShapeKind::Circle;
    else if (f == "square")
        label.shape = ShapeKind::Square;
    else if (f == "triangle")
        label.shape = ShapeKind::Triangle;
    else
        throw std::invalid_argument("unknown shape word: " + f);
    return label;
}

std::vector<long> caption_tokens_for(const ShapeLabel& label) {
    Vocab v;
    return {v.id(size_word(label.size)), v.id(color_word(label.color)),
            v.id(shape_word(label.shape)), Vocab::kNull};
}

ShapeLabel label_from_tokens(const std::vector<long>& tokens) {
    if (static_cast<long>(tokens.size()) != kCaptionLen)
        throw std::invalid_argument("caption token sequence must have length 4");
    Vocab v;
    return parse_caption(v.token(tokens[0]) + " " + v.token(tokens[1]) + " " + v.token(tokens[2]));
}

std::vector<long> null_tokens() { return std::vector<long>(kCaptionLen, Vocab::kNull); }

namespace {

double shape_sdf(const ShapeLabel& label, double px, double py, double r) {
    switch (label.shape) {
        case ShapeKind::Circle:
            return std::sqrt(px * px + py * py) - r;
        case ShapeKind::Square: {
            double dx = std::fabs(px), dy = std::fabs(py);
            return std::max(dx, dy) - r;
        }
        case ShapeKind::Triangle: {
            // Equilateral triangle with half-width r.
            const double k = std::sqrt(3.0);
            double x = std::fabs(px) - r;
            double y = py + r / k;
            if (x + k * y > 0.0) {
                double nx = (x - k * y) / 2.0;
                double ny = (-k * x - y) / 2.0;
                x = nx;
                y = ny;
            }
            double cl = x;
            if (cl < -2.0 * r) cl = -2.0 * r;
            if (cl > 0.0) cl = 0.0;
            x -= cl;
            double len = std::sqrt(x * x + y * y);
            return y > 0.0 ? -len : len;
        }
    }
    return 0.0;
}

void color_values(ColorKind c, double rgb[3]) {
    switch (c) {
        case ColorKind::Red:
            rgb[0] = 0.9; rgb[1] = -0.7; rgb[2] = -0.7;
            return;
        case ColorKind::Green:
            rgb[0] = -0.7; rgb[1] = 0.9; rgb[2] = -0.7;
            return;
        case ColorKind::Blue:
            rgb[0] = -0.7; rgb[1] = -0.7; rgb[2] = 0.9;
            return;
    }
}

}  // namespace

Tensor render_shape(const ShapeLabel& label, long h, long w, Rng& position_rng) {
    if (h < 16 || w < 16) throw std::invalid_argument("render_shape: H and W must be >= 16");
    const double m = static_cast<double>(std::min(h, w));
    const double r = (label.size == SizeKind::Small ? 0.12 : 0.22) * m;
    const double margin = r + 1.5;
    const double cx = position_rng.uniform(margin, static_cast<double>(w) - margin);
    const double cy = position_rng.uniform(margin, static_cast<double>(h) - margin);

    double rgb[3];
    color_values(label.color, rgb);
    const double bg = 0.0;

    Tensor img({3, h, w}, Dtype::F32);
    for (long y = 0; y < h; ++y) {
        for (long x = 0; x < w; ++x) {
            double sdf = shape_sdf(label, static_cast<double>(x) + 0.5 - cx,
                                   static_cast<double>(y) + 0.5 - cy, r);
            double cov = 0.5 - sdf;  // one-pixel anti-aliased edge
            if (cov < 0.0) cov = 0.0;
            if (cov > 1.0) cov = 1.0;
            for (long ch = 0; ch < 3; ++ch)
                img.set(ch * h * w + y * w + x, bg + cov * (rgb[ch] - bg));
        }
    }
    return img;
}

std::vector<ShapeSample> gen_dataset(long n, long h, long w, std::uint64_t seed) {
    std::vector<ShapeSample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) {
        long combo = i % 18;
        ShapeLabel label;
        label.size = combo / 9 == 0 ? SizeKind::Small : SizeKind::Large;
        label.color = static_cast<ColorKind>((combo / 3) % 3);
        label.shape = static_cast<ShapeKind>(combo % 3);
        Rng rng(seed, static_cast<std::uint64_t>(i) + 1);
        ShapeSample s;
        s.label = label;
        s.caption_tokens = caption_tokens_for(label);
        s.image = render_shape(label, h, w, rng);
        out.push_back(std::move(s));
    }
    return out;
}

NodePtr embed_captions(const NodePtr& table, const std::vector<std::vector<long>>& captions) {
    if (captions.empty()) throw std::invalid_argument("embed_captions: empty batch");
    const long batch = static_cast<long>(captions.size());
    const long len = static_cast<long>(captions.front().size());
    std::vector<long> flat;
    flat.reserve(static_cast<std::size_t>(batch * len));
    for (const auto& row : captions) {
        if (static_cast<long>(row.size()) != len)
            throw std::invalid_argument("embed_captions: caption rows must share one length");
        flat.insert(flat.end(), row.begin(), row.end());
    }
    auto emb = ops::embedding(table, flat);
    return ops::reshape(emb, {batch, len, table->dim(1)});
}

NodePtr add_text_embedder(ParameterStore& params, long context_dim, std::uint64_t seed,
                          Dtype dtype) {
    Vocab vocab;
    Tensor table({vocab.size(), context_dim}, dtype);
    Rng rng = named_rng(seed, "text.table");
    rng.fill_normal(table);
    return params.add("text.table", std::move(table), /*trainable=*/true);
}

}  // namespace distillforge
