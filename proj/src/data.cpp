#include "lnprune/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "lnprune/errors.hpp"

namespace lnprune {

namespace {

constexpr u64 kImagesMagic = 0x00000803;
constexpr u64 kLabelsMagic = 0x00000801;

bool known_split(const std::string& s) { return s == "train" || s == "val" || s == "test"; }

u64 read_be32(std::istream& in, const std::string& path, const char* what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw DataError(path + ": truncated while reading " + what);
    return (u64{b[0]} << 24) | (u64{b[1]} << 16) | (u64{b[2]} << 8) | u64{b[3]};
}

void write_be32(std::ostream& out, u64 v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::vector<unsigned char> read_payload(std::istream& in, i64 count, const std::string& path) {
    std::vector<unsigned char> bytes(static_cast<std::size_t>(count));
    in.read(reinterpret_cast<char*>(bytes.data()), count);
    if (in.gcount() != count)
        throw DataError(path + ": truncated, expected " + std::to_string(count) +
                        " payload bytes, got " + std::to_string(in.gcount()));
    if (in.peek() != std::ifstream::traits_type::eof())
        throw DataError(path + ": trailing bytes after payload");
    return bytes;
}

std::ifstream open_input(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    return in;
}

void write_file_atomic(const std::string& path, const std::vector<unsigned char>& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot open " + tmp + " for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
        if (!out) throw DataError("short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

// Class templates are kept in double precision so that noisy samples and the
// float template agree bit-exactly at sigma = 0.
std::vector<double> template_values(i64 cls, i64 size) {
    if (cls < 0) throw ConfigError("class index must be non-negative");
    if (size < 8) throw ConfigError("synthetic image size must be >= 8");
    const double theta = std::numbers::pi * static_cast<double>(cls % 4) / 4.0;
    const double freq = 3.0 + 2.0 * static_cast<double>(cls / 4);
    const double phase = 2.399963229728653 * static_cast<double>(cls);
    const double ct = std::cos(theta), st = std::sin(theta);
    std::vector<double> vals(static_cast<std::size_t>(size * size));
    for (i64 y = 0; y < size; ++y)
        for (i64 x = 0; x < size; ++x) {
            double u = (static_cast<double>(x) * ct + static_cast<double>(y) * st) /
                       static_cast<double>(size);
            vals[static_cast<std::size_t>(y * size + x)] =
                0.5 + 0.35 * std::sin(2.0 * std::numbers::pi * freq * u + phase);
        }
    return vals;
}

Dataset make_split(const SynthSpec& spec, const std::vector<std::vector<double>>& templates,
                   i64 per_class, u64 salt, const char* tag) {
    const i64 n = spec.class_count * per_class;
    const i64 plane = spec.size * spec.size;
    Dataset ds;
    ds.images = Tensor({n, 1, spec.size, spec.size});
    ds.labels.resize(static_cast<std::size_t>(n));
    ds.class_count = spec.class_count;
    ds.split = tag;
    std::mt19937_64 rng(mix_seed(spec.seed, salt));
    std::normal_distribution<double> gauss(0.0, 1.0);
    i64 row = 0;
    for (i64 c = 0; c < spec.class_count; ++c) {
        const std::vector<double>& tmpl = templates[static_cast<std::size_t>(c)];
        for (i64 s = 0; s < per_class; ++s, ++row) {
            ds.labels[static_cast<std::size_t>(row)] = c;
            float* dst = ds.images.data.data() + row * plane;
            for (i64 p = 0; p < plane; ++p) {
                double v = tmpl[static_cast<std::size_t>(p)] + spec.sigma * gauss(rng);
                dst[p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    return ds;
}

}  // namespace

void Dataset::validate() const {
    if (images.rank() != 4 || images.dim(0) < 1)
        throw DataError("dataset images must be a non-empty [N,C,H,W] tensor, got " +
                        shape_str(images.shape));
    if (static_cast<i64>(labels.size()) != images.dim(0))
        throw DataError("dataset count mismatch: " + std::to_string(images.dim(0)) +
                        " images vs " + std::to_string(labels.size()) + " labels");
    if (class_count < 1) throw DataError("dataset class_count must be positive");
    for (i64 l : labels)
        if (l < 0 || l >= class_count)
            throw DataError("label " + std::to_string(l) + " outside [0, " +
                            std::to_string(class_count) + ")");
    for (float v : images.data)
        if (!(v >= 0.0f && v <= 1.0f))
            throw DataError("pixel value " + format_float(v) + " outside [0,1]");
    if (!known_split(split)) throw DataError("unknown split tag '" + split + "'");
}

Tensor synth_template(i64 cls, i64 size) {
    std::vector<double> vals = template_values(cls, size);
    Tensor t({1, size, size});
    for (i64 i = 0; i < t.numel(); ++i) t.at(i) = static_cast<float>(vals[static_cast<std::size_t>(i)]);
    return t;
}

SynthSplits synth_generate(const SynthSpec& spec) {
    if (spec.class_count < 2) throw ConfigError("synthetic class_count must be >= 2");
    if (spec.size < 8) throw ConfigError("synthetic image size must be >= 8");
    if (spec.train_per_class < 1 || spec.val_per_class < 1 || spec.test_per_class < 1)
        throw ConfigError("per-class sample counts must be positive");
    if (!(spec.sigma >= 0.0)) throw ConfigError("sigma must be >= 0");
    std::vector<std::vector<double>> templates;
    templates.reserve(static_cast<std::size_t>(spec.class_count));
    for (i64 c = 0; c < spec.class_count; ++c) templates.push_back(template_values(c, spec.size));
    SynthSplits out;
    out.train = make_split(spec, templates, spec.train_per_class, 1, "train");
    out.val = make_split(spec, templates, spec.val_per_class, 2, "val");
    out.test = make_split(spec, templates, spec.test_per_class, 3, "test");
    return out;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::string& split) {
    if (!known_split(split)) throw DataError("unknown split tag '" + split + "'");

    std::ifstream img = open_input(images_path);
    u64 magic = read_be32(img, images_path, "magic");
    if (magic != kImagesMagic)
        throw DataError(images_path + ": bad magic " + std::to_string(magic) +
                        ", expected IDX image file");
    const i64 n = static_cast<i64>(read_be32(img, images_path, "image count"));
    const i64 rows = static_cast<i64>(read_be32(img, images_path, "row count"));
    const i64 cols = static_cast<i64>(read_be32(img, images_path, "column count"));
    if (n < 1 || rows < 1 || cols < 1)
        throw DataError(images_path + ": degenerate dimensions " + std::to_string(n) + "x" +
                        std::to_string(rows) + "x" + std::to_string(cols));
    std::vector<unsigned char> pixels = read_payload(img, n * rows * cols, images_path);

    std::ifstream lab = open_input(labels_path);
    magic = read_be32(lab, labels_path, "magic");
    if (magic != kLabelsMagic)
        throw DataError(labels_path + ": bad magic " + std::to_string(magic) +
                        ", expected IDX label file");
    const i64 ln = static_cast<i64>(read_be32(lab, labels_path, "label count"));
    if (ln != n)
        throw DataError("count mismatch: " + std::to_string(n) + " images in " + images_path +
                        " vs " + std::to_string(ln) + " labels in " + labels_path);
    std::vector<unsigned char> raw_labels = read_payload(lab, ln, labels_path);

    Dataset ds;
    ds.images = Tensor({n, 1, rows, cols});
    for (i64 i = 0; i < ds.images.numel(); ++i)
        ds.images.at(i) = static_cast<float>(pixels[static_cast<std::size_t>(i)]) / 255.0f;
    ds.labels.assign(raw_labels.begin(), raw_labels.end());
    i64 max_label = 0;
    for (i64 l : ds.labels) max_label = std::max(max_label, l);
    ds.class_count = max_label + 1;
    ds.split = split;
    ds.validate();
    return ds;
}

void save_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
    ds.validate();
    if (ds.images.dim(1) != 1)
        throw DataError("IDX export supports single-channel images, got " +
                        std::to_string(ds.images.dim(1)) + " channels");
    if (ds.class_count > 256) throw DataError("IDX labels are bytes; class_count > 256");

    const i64 n = ds.size(), rows = ds.images.dim(2), cols = ds.images.dim(3);
    std::vector<unsigned char> img_bytes;
    img_bytes.reserve(static_cast<std::size_t>(16 + n * rows * cols));
    {
        std::ostringstream head;  // headers are 16 / 8 bytes; build in memory, write atomically
        write_be32(head, kImagesMagic);
        write_be32(head, static_cast<u64>(n));
        write_be32(head, static_cast<u64>(rows));
        write_be32(head, static_cast<u64>(cols));
        const std::string h = head.str();
        img_bytes.assign(h.begin(), h.end());
    }
    for (float v : ds.images.data)
        img_bytes.push_back(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
    write_file_atomic(images_path, img_bytes);

    std::vector<unsigned char> lab_bytes;
    {
        std::ostringstream head;
        write_be32(head, kLabelsMagic);
        write_be32(head, static_cast<u64>(n));
        const std::string h = head.str();
        lab_bytes.assign(h.begin(), h.end());
    }
    for (i64 l : ds.labels) lab_bytes.push_back(static_cast<unsigned char>(l));
    write_file_atomic(labels_path, lab_bytes);
}

Dataset sample_subset(const Dataset& ds, i64 count, u64 seed) {
    ds.validate();
    const std::vector<i64> picked = sample_indices(ds.size(), count, seed);
    const i64 plane = ds.images.numel() / ds.size();
    Dataset out;
    out.images = Tensor({count, ds.images.dim(1), ds.images.dim(2), ds.images.dim(3)});
    out.labels.resize(static_cast<std::size_t>(count));
    out.class_count = ds.class_count;
    out.split = ds.split;
    for (i64 i = 0; i < count; ++i) {
        std::memcpy(out.images.data.data() + i * plane, ds.images.data.data() + picked[static_cast<std::size_t>(i)] * plane,
                    static_cast<std::size_t>(plane) * sizeof(float));
        out.labels[static_cast<std::size_t>(i)] = ds.labels[static_cast<std::size_t>(picked[static_cast<std::size_t>(i)])];
    }
    return out;
}

namespace {

Tensor crop_batch(const Tensor& batch, i64 crop, const std::function<void(i64, i64&, i64&, bool&)>& place) {
    if (batch.rank() != 4)
        throw ShapeError("augmentation expects a [N,C,H,W] batch, got " + shape_str(batch.shape));
    const i64 n = batch.dim(0), ch = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    if (crop < 1 || crop > h || crop > w)
        throw ConfigError("crop size " + std::to_string(crop) + " outside image extents " +
                          std::to_string(h) + "x" + std::to_string(w));
    Tensor out({n, ch, crop, crop});
    for (i64 i = 0; i < n; ++i) {
        i64 oy = 0, ox = 0;
        bool flip = false;
        place(i, oy, ox, flip);
        for (i64 c = 0; c < ch; ++c)
            for (i64 y = 0; y < crop; ++y)
                for (i64 x = 0; x < crop; ++x)
                    out.at(i, c, y, x) = batch.at(i, c, oy + y, flip ? ox + crop - 1 - x : ox + x);
    }
    return out;
}

}  // namespace

Tensor augment(const Tensor& batch, i64 crop, bool mirror, u64 seed) {
    std::mt19937_64 rng(seed);
    const i64 h = batch.rank() == 4 ? batch.dim(2) : 0;
    const i64 w = batch.rank() == 4 ? batch.dim(3) : 0;
    return crop_batch(batch, crop, [&](i64, i64& oy, i64& ox, bool& flip) {
        oy = std::uniform_int_distribution<i64>(0, h - crop)(rng);
        ox = std::uniform_int_distribution<i64>(0, w - crop)(rng);
        flip = mirror && std::uniform_int_distribution<int>(0, 1)(rng) == 1;
    });
}

Tensor center_crop(const Tensor& batch, i64 crop) {
    const i64 h = batch.rank() == 4 ? batch.dim(2) : 0;
    const i64 w = batch.rank() == 4 ? batch.dim(3) : 0;
    return crop_batch(batch, crop, [&](i64, i64& oy, i64& ox, bool& flip) {
        oy = (h - crop) / 2;
        ox = (w - crop) / 2;
        flip = false;
    });
}

Tensor mirror_horizontal(const Tensor& batch) {
    if (batch.rank() != 4)
        throw ShapeError("mirror expects a [N,C,H,W] batch, got " + shape_str(batch.shape));
    Tensor out(batch.shape);
    const i64 n = batch.dim(0), ch = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    for (i64 i = 0; i < n; ++i)
        for (i64 c = 0; c < ch; ++c)
            for (i64 y = 0; y < h; ++y)
                for (i64 x = 0; x < w; ++x) out.at(i, c, y, x) = batch.at(i, c, y, w - 1 - x);
    return out;
}

}  // namespace lnprune
