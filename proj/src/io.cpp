#include "protoreg/io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "protoreg/log.hpp"

namespace protoreg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "raw I/O assumes a little-endian host");

// ---------------------------------------------------------------- raw format

struct RawHeader {
    Dims dims;
    Spacing spacing = Spacing::Ones();
    std::string kind;
    int num_classes = 0;
};

fs::path payload_path(const fs::path& base) { return fs::path(base.string() + ".f32raw"); }
fs::path sidecar_path(const fs::path& base) { return fs::path(base.string() + ".json"); }

void write_raw_pair(const fs::path& path, const json& header, const std::vector<float>& payload) {
    const fs::path base = raw_base(path);
    {
        std::ofstream out(payload_path(base), std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + payload_path(base).string() + " for writing");
        out.write(reinterpret_cast<const char*>(payload.data()),
                  std::streamsize(payload.size() * sizeof(float)));
        if (!out) throw IoError("failed writing " + payload_path(base).string());
    }
    std::ofstream out(sidecar_path(base), std::ios::trunc);
    if (!out) throw IoError("cannot open " + sidecar_path(base).string() + " for writing");
    out << header.dump(2) << '\n';
    if (!out) throw IoError("failed writing " + sidecar_path(base).string());
}

json header_json(const Dims& d, const Spacing& s, const std::string& kind) {
    return json{{"dims", {d.nx, d.ny, d.nz}}, {"spacing", {s[0], s[1], s[2]}}, {"kind", kind}};
}

RawHeader read_sidecar(const fs::path& base) {
    const fs::path side = sidecar_path(base);
    std::ifstream in(side);
    if (!in) throw IoError("cannot open " + side.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw MalformedHeader(side.string() + ": " + e.what());
    }
    RawHeader h;
    try {
        const auto& dims = j.at("dims");
        const auto& sp = j.at("spacing");
        if (!dims.is_array() || dims.size() != 3 || !sp.is_array() || sp.size() != 3) {
            throw MalformedHeader(side.string() + ": dims and spacing need 3 entries");
        }
        h.dims = {dims[0].get<int>(), dims[1].get<int>(), dims[2].get<int>()};
        h.spacing = {sp[0].get<double>(), sp[1].get<double>(), sp[2].get<double>()};
        h.kind = j.at("kind").get<std::string>();
        h.num_classes = j.value("num_classes", 0);
    } catch (const json::exception& e) {
        throw MalformedHeader(side.string() + ": " + e.what());
    }
    if (!h.dims.valid() || (h.spacing.array() <= 0.0).any()) {
        throw MalformedHeader(side.string() + ": dims must be >= 1 and spacing > 0");
    }
    return h;
}

std::vector<float> read_payload(const fs::path& base, Eigen::Index count) {
    const fs::path p = payload_path(base);
    std::ifstream in(p, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open " + p.string());
    const auto bytes = std::size_t(in.tellg());
    const std::size_t expected = std::size_t(count) * sizeof(float);
    if (bytes < expected) {
        throw TruncatedPayload(p.string() + ": expected " + std::to_string(expected) + " bytes, found " +
                               std::to_string(bytes));
    }
    if (bytes > expected) {
        throw MalformedHeader(p.string() + ": payload longer than header dims imply");
    }
    std::vector<float> data(static_cast<std::size_t>(count));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(data.data()), std::streamsize(expected));
    if (!in) throw TruncatedPayload(p.string() + ": short read");
    return data;
}

// ---------------------------------------------------------------- NIfTI-1

constexpr int kNiftiHeaderSize = 348;
constexpr int kNiftiVoxOffset = 352;

enum NiftiType : std::int16_t { kUint8 = 2, kInt16 = 4, kFloat32 = 16 };

class GzFile {
public:
    GzFile(const fs::path& p, const char* mode) : file_(gzopen(p.string().c_str(), mode)) {}
    ~GzFile() {
        if (file_) gzclose(file_);
    }
    GzFile(const GzFile&) = delete;
    GzFile& operator=(const GzFile&) = delete;

    explicit operator bool() const { return file_ != nullptr; }

    std::size_t read(void* dst, std::size_t n) {
        std::size_t total = 0;
        auto* out = static_cast<unsigned char*>(dst);
        while (total < n) {
            const unsigned chunk = unsigned(std::min<std::size_t>(n - total, 1u << 30));
            const int got = gzread(file_, out + total, chunk);
            if (got <= 0) break;
            total += std::size_t(got);
        }
        return total;
    }

    bool write(const void* src, std::size_t n) {
        return n == 0 || gzwrite(file_, src, unsigned(n)) == int(n);
    }

    bool close() {
        const int rc = gzclose(file_);
        file_ = nullptr;
        return rc == Z_OK;
    }

private:
    gzFile file_;
};

template <typename T>
T load(const unsigned char* p, bool swap) {
    std::array<unsigned char, sizeof(T)> b;
    std::memcpy(b.data(), p, sizeof(T));
    if (swap) std::reverse(b.begin(), b.end());
    T v;
    std::memcpy(&v, b.data(), sizeof(T));
    return v;
}

template <typename T>
void store(unsigned char* p, T v) {
    std::memcpy(p, &v, sizeof(T));
}

struct NiftiImage {
    Dims dims;
    Spacing spacing = Spacing::Ones();
    std::int16_t datatype = 0;
    Eigen::ArrayXd values;
};

bool has_suffix(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

NiftiImage read_nifti(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("cannot open " + path.string());
    GzFile in(path, "rb");
    if (!in) throw IoError("cannot open " + path.string());
    std::array<unsigned char, kNiftiHeaderSize> hdr{};
    if (in.read(hdr.data(), hdr.size()) != hdr.size()) {
        throw MalformedHeader(path.string() + ": header shorter than 348 bytes");
    }
    bool swap = false;
    if (load<std::int32_t>(hdr.data(), false) != kNiftiHeaderSize) {
        if (load<std::int32_t>(hdr.data(), true) != kNiftiHeaderSize) {
            throw MalformedHeader(path.string() + ": sizeof_hdr is not 348");
        }
        swap = true;
    }
    const std::string magic(reinterpret_cast<const char*>(hdr.data() + 344), 3);
    const bool single_file = magic == "n+1";
    if (!single_file && magic != "ni1") {
        throw MalformedHeader(path.string() + ": bad magic, expected \"n+1\" or \"ni1\"");
    }

    std::array<std::int16_t, 8> dim{};
    for (int i = 0; i < 8; ++i) dim[std::size_t(i)] = load<std::int16_t>(hdr.data() + 40 + 2 * i, swap);
    if (dim[0] < 1 || dim[0] > 7) throw MalformedHeader(path.string() + ": dim[0] out of range");
    for (int i = 1; i <= dim[0]; ++i) {
        if (dim[std::size_t(i)] < 1) throw MalformedHeader(path.string() + ": non-positive dim");
        if (i > 3 && dim[std::size_t(i)] != 1) {
            throw MalformedHeader(path.string() + ": only 3D images are supported");
        }
    }
    NiftiImage img;
    img.dims = {dim[1], dim[0] >= 2 ? dim[2] : 1, dim[0] >= 3 ? dim[3] : 1};

    img.datatype = load<std::int16_t>(hdr.data() + 70, swap);
    const std::int16_t bitpix = load<std::int16_t>(hdr.data() + 72, swap);
    int bytes_per = 0;
    switch (img.datatype) {
        case kUint8: bytes_per = 1; break;
        case kInt16: bytes_per = 2; break;
        case kFloat32: bytes_per = 4; break;
        default:
            throw UnsupportedDatatype(path.string() + ": datatype code " + std::to_string(img.datatype) +
                                      " (supported: 2 uint8, 4 int16, 16 float32)");
    }
    if (bitpix != 8 * bytes_per) throw MalformedHeader(path.string() + ": bitpix disagrees with datatype");

    for (int a = 0; a < 3; ++a) {
        const double s = std::abs(double(load<float>(hdr.data() + 76 + 4 * (a + 1), swap)));
        img.spacing[a] = (s > 0.0 && std::isfinite(s)) ? s : 1.0;
    }
    const float vox_offset = load<float>(hdr.data() + 108, swap);
    const float slope = load<float>(hdr.data() + 112, swap);
    const float inter = load<float>(hdr.data() + 116, swap);
    const std::int16_t qform = load<std::int16_t>(hdr.data() + 252, swap);
    const std::int16_t sform = load<std::int16_t>(hdr.data() + 254, swap);
    if (qform > 0 || sform > 0) {
        warn(path.string() + ": NIfTI orientation (qform/sform) ignored; only voxel spacing is used");
    }

    const std::size_t n = std::size_t(img.dims.size());
    std::vector<unsigned char> raw(n * std::size_t(bytes_per));
    std::size_t got = 0;
    if (single_file) {
        if (vox_offset < float(kNiftiHeaderSize)) throw MalformedHeader(path.string() + ": vox_offset < 348");
        std::vector<unsigned char> skip(std::size_t(vox_offset) - kNiftiHeaderSize);
        if (in.read(skip.data(), skip.size()) != skip.size()) {
            throw TruncatedPayload(path.string() + ": file ends before vox_offset");
        }
        got = in.read(raw.data(), raw.size());
    } else {
        std::string img_path = path.string();
        if (has_suffix(img_path, ".hdr.gz")) img_path.replace(img_path.size() - 7, 7, ".img.gz");
        else if (has_suffix(img_path, ".hdr")) img_path.replace(img_path.size() - 4, 4, ".img");
        GzFile data(img_path, "rb");
        if (!data) throw IoError("cannot open " + img_path);
        std::vector<unsigned char> skip(std::size_t(std::max(0.0f, vox_offset)));
        if (data.read(skip.data(), skip.size()) != skip.size()) {
            throw TruncatedPayload(img_path + ": file ends before vox_offset");
        }
        got = data.read(raw.data(), raw.size());
    }
    if (got != raw.size()) {
        throw TruncatedPayload(path.string() + ": expected " + std::to_string(raw.size()) +
                               " payload bytes, found " + std::to_string(got));
    }

    img.values.resize(Eigen::Index(n));
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* p = raw.data() + i * std::size_t(bytes_per);
        switch (img.datatype) {
            case kUint8: img.values[Eigen::Index(i)] = double(*p); break;
            case kInt16: img.values[Eigen::Index(i)] = double(load<std::int16_t>(p, swap)); break;
            default: img.values[Eigen::Index(i)] = double(load<float>(p, swap)); break;
        }
    }
    if (slope != 0.0f && std::isfinite(slope) && !(slope == 1.0f && inter == 0.0f)) {
        img.values = img.values * double(slope) + double(inter);
    }
    return img;
}

void write_nifti(const fs::path& path, const Dims& d, const Spacing& s, std::int16_t datatype,
                 const std::vector<unsigned char>& payload) {
    std::array<unsigned char, kNiftiVoxOffset> hdr{};
    store<std::int32_t>(hdr.data(), kNiftiHeaderSize);
    const std::int16_t dim[8] = {3, std::int16_t(d.nx), std::int16_t(d.ny), std::int16_t(d.nz), 1, 1, 1, 1};
    for (int i = 0; i < 8; ++i) store<std::int16_t>(hdr.data() + 40 + 2 * i, dim[i]);
    store<std::int16_t>(hdr.data() + 70, datatype);
    store<std::int16_t>(hdr.data() + 72, std::int16_t(datatype == kFloat32 ? 32 : (datatype == kInt16 ? 16 : 8)));
    const float pixdim[8] = {1.0f, float(s[0]), float(s[1]), float(s[2]), 1.0f, 1.0f, 1.0f, 1.0f};
    for (int i = 0; i < 8; ++i) store<float>(hdr.data() + 76 + 4 * i, pixdim[i]);
    store<float>(hdr.data() + 108, float(kNiftiVoxOffset));
    std::memcpy(hdr.data() + 344, "n+1\0", 4);

    const bool gz = has_suffix(path.string(), ".gz");
    GzFile out(path, gz ? "wb6" : "wbT");
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    if (!out.write(hdr.data(), hdr.size()) || !out.write(payload.data(), payload.size()) || !out.close()) {
        throw IoError("failed writing " + path.string());
    }
}

}  // namespace

fs::path raw_base(const fs::path& path) {
    const auto ext = path.extension();
    if (ext == ".f32raw" || ext == ".json") return fs::path(path).replace_extension();
    return path;
}

bool is_nifti_path(const fs::path& path) {
    const std::string s = path.string();
    return has_suffix(s, ".nii") || has_suffix(s, ".nii.gz") || has_suffix(s, ".hdr") ||
           has_suffix(s, ".hdr.gz");
}

Volume read_volume(const fs::path& path) {
    if (is_nifti_path(path)) {
        NiftiImage img = read_nifti(path);
        return Volume(img.dims, img.spacing, std::move(img.values));
    }
    const fs::path base = raw_base(path);
    const RawHeader h = read_sidecar(base);
    if (h.kind != "volume" && h.kind != "labels") {
        throw MalformedHeader(sidecar_path(base).string() + ": kind \"" + h.kind + "\" is not a volume");
    }
    const std::vector<float> payload = read_payload(base, h.dims.size());
    Volume::Array data = Eigen::Map<const Eigen::ArrayXf>(payload.data(), Eigen::Index(payload.size())).cast<double>();
    return Volume(h.dims, h.spacing, std::move(data));
}

LabelVolume read_labels(const fs::path& path) {
    Dims dims;
    Spacing spacing;
    Eigen::ArrayXd values;
    int num_classes = -1;
    if (is_nifti_path(path)) {
        NiftiImage img = read_nifti(path);
        dims = img.dims;
        spacing = img.spacing;
        values = std::move(img.values);
    } else {
        const fs::path base = raw_base(path);
        const RawHeader h = read_sidecar(base);
        if (h.kind != "labels" && h.kind != "volume") {
            throw MalformedHeader(sidecar_path(base).string() + ": kind \"" + h.kind + "\" is not a label volume");
        }
        if (h.kind == "labels") num_classes = h.num_classes;
        dims = h.dims;
        spacing = h.spacing;
        const std::vector<float> payload = read_payload(base, h.dims.size());
        values = Eigen::Map<const Eigen::ArrayXf>(payload.data(), Eigen::Index(payload.size())).cast<double>();
    }
    if ((values < 0.0).any() || (values != values.round()).any()) {
        throw MalformedHeader(path.string() + ": label values must be non-negative integers");
    }
    LabelVolume::Array labels = values.cast<std::int32_t>();
    const int max_label = labels.size() ? int(labels.maxCoeff()) : 0;
    if (num_classes < 0) num_classes = max_label;
    if (max_label > num_classes) {
        throw MalformedHeader(path.string() + ": label " + std::to_string(max_label) + " exceeds num_classes " +
                              std::to_string(num_classes));
    }
    return LabelVolume(dims, spacing, std::move(labels), num_classes);
}

DisplacementField read_field(const fs::path& path) {
    const fs::path base = raw_base(path);
    const RawHeader h = read_sidecar(base);
    if (h.kind != "field") {
        throw MalformedHeader(sidecar_path(base).string() + ": kind \"" + h.kind + "\" is not a field");
    }
    const std::vector<float> payload = read_payload(base, 3 * h.dims.size());
    DisplacementField::Matrix u =
        Eigen::Map<const Eigen::Matrix<float, 3, Eigen::Dynamic>>(payload.data(), 3, h.dims.size()).cast<double>();
    return DisplacementField(h.dims, h.spacing, std::move(u));
}

template <typename Scalar>
void write_volume(const BasicVolume<Scalar>& vol, const fs::path& path) {
    if (is_nifti_path(path)) {
        std::vector<unsigned char> payload(std::size_t(vol.data().size()) * 4);
        for (Eigen::Index i = 0; i < vol.data().size(); ++i) {
            store<float>(payload.data() + 4 * i, float(vol.data()[i]));
        }
        write_nifti(path, vol.dims(), vol.spacing(), kFloat32, payload);
        return;
    }
    std::vector<float> payload(std::size_t(vol.data().size()));
    Eigen::Map<Eigen::ArrayXf>(payload.data(), vol.data().size()) = vol.data().template cast<float>();
    write_raw_pair(path, header_json(vol.dims(), vol.spacing(), "volume"), payload);
}

template void write_volume(const BasicVolume<double>&, const fs::path&);
template void write_volume(const BasicVolume<float>&, const fs::path&);

void write_labels(const LabelVolume& labels, const fs::path& path) {
    if (is_nifti_path(path)) {
        if (labels.num_classes() > 32767) throw InvalidArgument("too many classes for int16 NIfTI");
        std::vector<unsigned char> payload(std::size_t(labels.labels().size()) * 2);
        for (Eigen::Index i = 0; i < labels.labels().size(); ++i) {
            store<std::int16_t>(payload.data() + 2 * i, std::int16_t(labels.labels()[i]));
        }
        write_nifti(path, labels.dims(), labels.spacing(), kInt16, payload);
        return;
    }
    std::vector<float> payload(std::size_t(labels.labels().size()));
    Eigen::Map<Eigen::ArrayXf>(payload.data(), labels.labels().size()) = labels.labels().cast<float>();
    json h = header_json(labels.dims(), labels.spacing(), "labels");
    h["num_classes"] = labels.num_classes();
    write_raw_pair(path, h, payload);
}

void write_field(const DisplacementField& field, const fs::path& path) {
    std::vector<float> payload(std::size_t(field.u().size()));
    Eigen::Map<Eigen::Matrix<float, 3, Eigen::Dynamic>>(payload.data(), 3, field.u().cols()) =
        field.u().cast<float>();
    json h = header_json(field.dims(), field.spacing(), "field");
    h["units"] = "voxels";
    write_raw_pair(path, h, payload);
}

}  // namespace protoreg
