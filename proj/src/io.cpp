#include "distillforge/io.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace distillforge {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    json j;
    in >> j;
    return j;
}

void append_tensor_bytes(std::ofstream& out, const Tensor& t) {
    if (t.dtype() == Dtype::F32)
        out.write(reinterpret_cast<const char*>(t.data<float>()),
                  static_cast<std::streamsize>(t.numel() * sizeof(float)));
    else
        out.write(reinterpret_cast<const char*>(t.data<double>()),
                  static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

void read_tensor_bytes(std::ifstream& in, Tensor& t, std::uint64_t offset) {
    in.seekg(static_cast<std::streamoff>(offset));
    if (t.dtype() == Dtype::F32)
        in.read(reinterpret_cast<char*>(t.data<float>()),
                static_cast<std::streamsize>(t.numel() * sizeof(float)));
    else
        in.read(reinterpret_cast<char*>(t.data<double>()),
                static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated binary blob");
}

}  // namespace

void save_checkpoint(const std::string& dir, const ParameterStore& params,
                     const json& config_echo, long step) {
    fs::create_directories(dir);
    json manifest;
    manifest["format_version"] = 1;
    manifest["config"] = config_echo;
    manifest["step"] = step;
    manifest["params"] = json::array();
    std::uint64_t offset = 0;
    for (const auto& p : params.all()) {
        json entry;
        entry["name"] = p->name;
        entry["shape"] = p->shape();
        entry["dtype"] = dtype_name(p->dtype());
        entry["offset"] = offset;
        manifest["params"].push_back(entry);
        offset += static_cast<std::uint64_t>(p->numel()) * dtype_size(p->dtype());
    }
    write_file(dir + "/manifest.json", manifest.dump(2) + "\n");
    std::ofstream bin(dir + "/weights.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("cannot write " + dir + "/weights.bin");
    for (const auto& p : params.all()) append_tensor_bytes(bin, p->value);
}

CheckpointInfo read_checkpoint_manifest(const std::string& dir) {
    json manifest = read_json(dir + "/manifest.json");
    CheckpointInfo info;
    info.config = manifest.at("config");
    info.step = manifest.at("step").get<long>();
    return info;
}

CheckpointInfo load_checkpoint(const std::string& dir, ParameterStore& params) {
    json manifest = read_json(dir + "/manifest.json");
    if (manifest.at("format_version").get<int>() != 1)
        throw std::runtime_error(dir + ": unsupported checkpoint format version");
    std::ifstream bin(dir + "/weights.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("cannot open " + dir + "/weights.bin");
    for (const auto& entry : manifest.at("params")) {
        std::string name = entry.at("name").get<std::string>();
        NodePtr p = params.find(name);
        if (!p) throw std::runtime_error("checkpoint parameter '" + name + "' not in model");
        auto shape = entry.at("shape").get<std::vector<long>>();
        Dtype dt = dtype_from_name(entry.at("dtype").get<std::string>());
        if (shape != p->shape() || dt != p->dtype())
            throw std::runtime_error("checkpoint parameter '" + name +
                                     "' does not match the model (shape/dtype)");
        read_tensor_bytes(bin, p->value, entry.at("offset").get<std::uint64_t>());
    }
    CheckpointInfo info;
    info.config = manifest.at("config");
    info.step = manifest.at("step").get<long>();
    return info;
}

void save_train_state(const std::string& dir, const TrainStateBlob& state, const AdamW& opt) {
    fs::create_directories(dir);
    json j;
    j["step"] = state.step;
    j["rng_state"] = state.rng_state;
    j["rng_inc"] = state.rng_inc;
    j["avg_task"] = state.avg_task;
    j["avg_out"] = state.avg_out;
    j["avg_feat"] = state.avg_feat;
    j["avg_total"] = state.avg_total;
    j["opt_step"] = opt.step_count();
    write_file(dir + "/train_state.json", j.dump(2) + "\n");
    std::ofstream bin(dir + "/moments.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("cannot write " + dir + "/moments.bin");
    for (const auto& slot : opt.slots()) {
        append_tensor_bytes(bin, slot.m);
        append_tensor_bytes(bin, slot.v);
    }
}

TrainStateBlob load_train_state(const std::string& dir, AdamW& opt) {
    json j = read_json(dir + "/train_state.json");
    TrainStateBlob state;
    state.step = j.at("step").get<long>();
    state.rng_state = j.at("rng_state").get<std::uint64_t>();
    state.rng_inc = j.at("rng_inc").get<std::uint64_t>();
    state.avg_task = j.at("avg_task").get<double>();
    state.avg_out = j.at("avg_out").get<double>();
    state.avg_feat = j.at("avg_feat").get<double>();
    state.avg_total = j.at("avg_total").get<double>();
    opt.set_step_count(j.at("opt_step").get<long>());
    std::ifstream bin(dir + "/moments.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("cannot open " + dir + "/moments.bin");
    std::uint64_t offset = 0;
    for (auto& slot : opt.slots()) {
        read_tensor_bytes(bin, slot.m, offset);
        offset += static_cast<std::uint64_t>(slot.m.numel()) * dtype_size(slot.m.dtype());
        read_tensor_bytes(bin, slot.v, offset);
        offset += static_cast<std::uint64_t>(slot.v.numel()) * dtype_size(slot.v.dtype());
    }
    return state;
}

// ---------------------------------------------------------------------------

void write_dump(const std::string& dir, const std::vector<DumpEntry>& entries) {
    fs::create_directories(dir);
    json manifest = json::array();
    std::uint64_t offset = 0;
    for (const auto& e : entries) {
        json je;
        je["name"] = e.name;
        je["stage"] = e.stage;
        je["block_index"] = e.block_index;
        je["kind"] = e.kind;
        je["shape"] = e.tensor.shape();
        je["dtype"] = dtype_name(e.tensor.dtype());
        je["offset"] = offset;
        std::uint64_t len =
            static_cast<std::uint64_t>(e.tensor.numel()) * dtype_size(e.tensor.dtype());
        je["byte_length"] = len;
        manifest.push_back(je);
        offset += len;
    }
    write_file(dir + "/manifest.json", manifest.dump(2) + "\n");
    std::ofstream bin(dir + "/data.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("cannot write " + dir + "/data.bin");
    for (const auto& e : entries) append_tensor_bytes(bin, e.tensor);
}

std::vector<DumpEntry> read_dump(const std::string& dir) {
    json manifest = read_json(dir + "/manifest.json");
    std::ifstream bin(dir + "/data.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("cannot open " + dir + "/data.bin");
    std::vector<DumpEntry> out;
    for (const auto& je : manifest) {
        DumpEntry e;
        e.name = je.at("name").get<std::string>();
        e.stage = je.at("stage").get<std::string>();
        e.block_index = je.at("block_index").get<int>();
        e.kind = je.at("kind").get<std::string>();
        auto shape = je.at("shape").get<std::vector<long>>();
        Dtype dt = dtype_from_name(je.at("dtype").get<std::string>());
        e.tensor = Tensor(shape, dt);
        std::uint64_t expect =
            static_cast<std::uint64_t>(e.tensor.numel()) * dtype_size(dt);
        if (je.at("byte_length").get<std::uint64_t>() != expect)
            throw std::runtime_error(dir + ": byte_length mismatch for entry '" + e.name + "'");
        read_tensor_bytes(bin, e.tensor, je.at("offset").get<std::uint64_t>());
        out.push_back(std::move(e));
    }
    return out;
}

// ---------------------------------------------------------------------------
// PNG writing. Stored (uncompressed) deflate blocks keep the encoder tiny and
// byte-deterministic.

namespace {

std::uint32_t crc32_table_entry(std::uint32_t n) {
    for (int k = 0; k < 8; ++k) n = (n & 1) ? 0xedb88320u ^ (n >> 1) : n >> 1;
    return n;
}

std::uint32_t crc32(const std::uint8_t* data, std::size_t len, std::uint32_t crc = 0) {
    static std::uint32_t table[256];
    static bool init = false;
    if (!init) {
        for (std::uint32_t n = 0; n < 256; ++n) table[n] = crc32_table_entry(n);
        init = true;
    }
    crc ^= 0xffffffffu;
    for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
    return crc ^ 0xffffffffu;
}

void push_u32be(std::vector<std::uint8_t>& v, std::uint32_t x) {
    v.push_back(static_cast<std::uint8_t>(x >> 24));
    v.push_back(static_cast<std::uint8_t>(x >> 16));
    v.push_back(static_cast<std::uint8_t>(x >> 8));
    v.push_back(static_cast<std::uint8_t>(x));
}

void push_chunk(std::vector<std::uint8_t>& out, const char type[4],
                const std::vector<std::uint8_t>& payload) {
    push_u32be(out, static_cast<std::uint32_t>(payload.size()));
    std::vector<std::uint8_t> body(type, type + 4);
    body.insert(body.end(), payload.begin(), payload.end());
    out.insert(out.end(), body.begin(), body.end());
    push_u32be(out, crc32(body.data(), body.size()));
}

}  // namespace

void write_png_rgb(const std::string& path, const std::vector<std::uint8_t>& rgb, long width,
                   long height) {
    if (static_cast<long>(rgb.size()) != width * height * 3)
        throw std::invalid_argument("write_png_rgb: buffer size mismatch");

    // Raw scanlines with filter byte 0.
    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<std::size_t>(height * (width * 3 + 1)));
    for (long y = 0; y < height; ++y) {
        raw.push_back(0);
        const std::uint8_t* row = rgb.data() + y * width * 3;
        raw.insert(raw.end(), row, row + width * 3);
    }

    // zlib stream: header, stored deflate blocks, adler32.
    std::vector<std::uint8_t> z;
    z.push_back(0x78);
    z.push_back(0x01);
    std::size_t pos = 0;
    while (pos < raw.size() || raw.empty()) {
        std::size_t n = std::min<std::size_t>(raw.size() - pos, 65535);
        bool last = pos + n == raw.size();
        z.push_back(last ? 1 : 0);
        z.push_back(static_cast<std::uint8_t>(n & 0xff));
        z.push_back(static_cast<std::uint8_t>(n >> 8));
        z.push_back(static_cast<std::uint8_t>(~n & 0xff));
        z.push_back(static_cast<std::uint8_t>((~n >> 8) & 0xff));
        z.insert(z.end(), raw.begin() + static_cast<std::ptrdiff_t>(pos),
                 raw.begin() + static_cast<std::ptrdiff_t>(pos + n));
        pos += n;
        if (raw.empty()) break;
    }
    std::uint32_t a = 1, b = 0;
    for (std::uint8_t byte : raw) {
        a = (a + byte) % 65521;
        b = (b + a) % 65521;
    }
    push_u32be(z, (b << 16) | a);

    std::vector<std::uint8_t> png = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<std::uint8_t> ihdr;
    push_u32be(ihdr, static_cast<std::uint32_t>(width));
    push_u32be(ihdr, static_cast<std::uint32_t>(height));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // color type RGB
    ihdr.push_back(0);   // compression
    ihdr.push_back(0);   // filter
    ihdr.push_back(0);   // interlace
    push_chunk(png, "IHDR", ihdr);
    push_chunk(png, "IDAT", z);
    push_chunk(png, "IEND", {});

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(reinterpret_cast<const char*>(png.data()), static_cast<std::streamsize>(png.size()));
}

std::vector<std::uint8_t> image_to_rgb8(const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3)
        throw std::invalid_argument("image_to_rgb8: expected [3,H,W]");
    long h = image.dim(1), w = image.dim(2);
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(3 * h * w));
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x)
            for (long c = 0; c < 3; ++c) {
                double v = image.get(c * h * w + y * w + x);
                v = (v + 1.0) * 0.5 * 255.0;
                long q = std::lround(v);
                if (q < 0) q = 0;
                if (q > 255) q = 255;
                rgb[static_cast<std::size_t>((y * w + x) * 3 + c)] =
                    static_cast<std::uint8_t>(q);
            }
    return rgb;
}

}  // namespace distillforge
