#include <cstring>
#include <fstream>

#include <zlib.h>

#include "doctest.h"
#include "protoreg/io.hpp"
#include "protoreg/log.hpp"
#include "support.hpp"

using namespace protoreg;
using namespace testing;

namespace {

// 348-byte NIfTI-1 header followed by 4 pad bytes, laid out field by field.
std::vector<unsigned char> nifti_header(const Dims& d, std::int16_t datatype, std::int16_t bitpix,
                                        const char* magic = "n+1", std::int16_t qform = 0) {
    std::vector<unsigned char> h(352, 0);
    auto put32 = [&](int off, std::int32_t v) { std::memcpy(&h[std::size_t(off)], &v, 4); };
    auto put16 = [&](int off, std::int16_t v) { std::memcpy(&h[std::size_t(off)], &v, 2); };
    auto putf = [&](int off, float v) { std::memcpy(&h[std::size_t(off)], &v, 4); };
    put32(0, 348);                       // sizeof_hdr
    put16(40, 3);                        // dim[0]
    put16(42, std::int16_t(d.nx));       // dim[1]
    put16(44, std::int16_t(d.ny));       // dim[2]
    put16(46, std::int16_t(d.nz));       // dim[3]
    for (int i = 4; i < 8; ++i) put16(40 + 2 * i, 1);
    put16(70, datatype);
    put16(72, bitpix);
    putf(76, 1.0f);                      // pixdim[0] (qfac)
    putf(80, 0.8f);
    putf(84, 1.5f);
    putf(88, 2.0f);
    putf(108, 352.0f);                   // vox_offset
    put16(252, qform);
    std::memcpy(&h[344], magic, 4);
    return h;
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

void write_gz(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
    gzFile f = gzopen(p.string().c_str(), "wb");
    REQUIRE(f != nullptr);
    REQUIRE(gzwrite(f, bytes.data(), unsigned(bytes.size())) == int(bytes.size()));
    gzclose(f);
}

std::vector<unsigned char> int16_fixture(const std::vector<std::int16_t>& values) {
    std::vector<unsigned char> bytes = nifti_header({2, 2, 2}, 4, 16);
    for (std::int16_t v : values) {
        unsigned char b[2];
        std::memcpy(b, &v, 2);
        bytes.push_back(b[0]);
        bytes.push_back(b[1]);
    }
    return bytes;
}

const std::vector<std::int16_t> kInt16Values = {-32768, -7, 0, 1, 2, 300, 12345, 32767};

}  // namespace

TEST_SUITE("io") {

TEST_CASE("raw volume round trip is bit-exact") {
    TempDir tmp("io");
    std::mt19937_64 rng(1);
    Volumef v(Dims{8, 8, 8}, Spacing(0.5, 1.0, 2.5));
    std::normal_distribution<float> n(0.0f, 100.0f);
    for (Eigen::Index i = 0; i < v.data().size(); ++i) v.data()[i] = n(rng);
    write_volume(v, tmp / "vol");
    const Volume back = read_volume(tmp / "vol.f32raw");
    CHECK(back.dims() == v.dims());
    CHECK(back.spacing() == v.spacing());
    CHECK((back.data() == v.data().cast<double>()).all());
    CHECK((read_volume(tmp / "vol.json").data() == back.data()).all());
    CHECK((read_volume(tmp / "vol").data() == back.data()).all());
}

TEST_CASE("raw labels and field round trip") {
    TempDir tmp("io");
    std::mt19937_64 rng(2);
    const LabelVolume labels = random_labels({5, 4, 3}, 6, rng);
    write_labels(labels, tmp / "labels");
    const LabelVolume lb = read_labels(tmp / "labels");
    CHECK((lb.labels() == labels.labels()).all());
    CHECK(lb.num_classes() == 6);

    DisplacementField f(Dims{3, 4, 5}, Spacing(1.0, 2.0, 3.0));
    std::uniform_real_distribution<float> u(-3.0f, 3.0f);
    for (Eigen::Index i = 0; i < f.u().size(); ++i) f.u().data()[i] = double(u(rng));
    write_field(f, tmp / "field");
    const DisplacementField fb = read_field(tmp / "field");
    CHECK(fb.dims() == f.dims());
    CHECK(fb.spacing() == f.spacing());
    CHECK(fb.u() == f.u());

    std::ifstream side(tmp / "field.json");
    const std::string text((std::istreambuf_iterator<char>(side)), std::istreambuf_iterator<char>());
    CHECK(text.find("\"voxels\"") != std::string::npos);
    CHECK(text.find("\"field\"") != std::string::npos);
}

TEST_CASE("reading a field as a volume is a malformed header") {
    TempDir tmp("io");
    write_field(DisplacementField(Dims{2, 2, 2}), tmp / "field");
    CHECK_THROWS_AS(read_volume(tmp / "field"), MalformedHeader);
}

TEST_CASE("truncated raw payload") {
    TempDir tmp("io");
    write_volume(Volume(Dims{4, 4, 4}, Spacing::Ones(), 1.0), tmp / "vol");
    std::filesystem::resize_file(tmp / "vol.f32raw", 4 * 63);
    CHECK_THROWS_AS(read_volume(tmp / "vol"), TruncatedPayload);
}

TEST_CASE("missing raw files") {
    TempDir tmp("io");
    CHECK_THROWS_AS(read_volume(tmp / "nothing"), IoError);
    write_volume(Volume(Dims{2, 2, 2}), tmp / "vol");
    std::filesystem::remove(tmp / "vol.f32raw");
    CHECK_THROWS_AS(read_volume(tmp / "vol"), IoError);
}

TEST_CASE("malformed sidecar") {
    TempDir tmp("io");
    write_volume(Volume(Dims{2, 2, 2}), tmp / "vol");
    {
        std::ofstream side(tmp / "vol.json");
        side << "{\"dims\": [2, 2], \"spacing\": [1, 1, 1], \"kind\": \"volume\"}";
    }
    CHECK_THROWS_AS(read_volume(tmp / "vol"), MalformedHeader);
    {
        std::ofstream side(tmp / "vol.json");
        side << "not json";
    }
    CHECK_THROWS_AS(read_volume(tmp / "vol"), MalformedHeader);
}

TEST_CASE("hand-built int16 NIfTI converts values exactly") {
    TempDir tmp("io");
    write_bytes(tmp / "img.nii", int16_fixture(kInt16Values));
    const Volume v = read_volume(tmp / "img.nii");
    CHECK(v.dims() == Dims{2, 2, 2});
    CHECK(v.spacing()[0] == double(0.8f));
    CHECK(v.spacing()[1] == 1.5);
    CHECK(v.spacing()[2] == 2.0);
    for (int i = 0; i < 8; ++i) CHECK(v.data()[i] == double(kInt16Values[std::size_t(i)]));
    // x-fastest ordering
    CHECK(v(1, 0, 0) == -7.0);
    CHECK(v(0, 1, 0) == double(kInt16Values[2]));
    CHECK(v(0, 0, 1) == double(kInt16Values[4]));
}

TEST_CASE("gzipped NIfTI reads like the plain file") {
    TempDir tmp("io");
    write_gz(tmp / "img.nii.gz", int16_fixture(kInt16Values));
    const Volume v = read_volume(tmp / "img.nii.gz");
    for (int i = 0; i < 8; ++i) CHECK(v.data()[i] == double(kInt16Values[std::size_t(i)]));
}

TEST_CASE("uint8 NIfTI labels") {
    TempDir tmp("io");
    std::vector<unsigned char> bytes = nifti_header({2, 2, 2}, 2, 8);
    for (unsigned char b : {0, 1, 2, 3, 0, 0, 1, 3}) bytes.push_back(b);
    write_bytes(tmp / "labels.nii", bytes);
    const LabelVolume l = read_labels(tmp / "labels.nii");
    CHECK(l.num_classes() == 3);
    CHECK(l.labels()[3] == 3);
    CHECK(l.labels()[6] == 1);
}

TEST_CASE("bad NIfTI magic is a malformed header") {
    TempDir tmp("io");
    std::vector<unsigned char> bytes = int16_fixture(kInt16Values);
    std::memcpy(&bytes[344], "abc\0", 4);
    write_bytes(tmp / "img.nii", bytes);
    CHECK_THROWS_AS(read_volume(tmp / "img.nii"), MalformedHeader);
}

TEST_CASE("unsupported NIfTI datatype") {
    TempDir tmp("io");
    std::vector<unsigned char> bytes = nifti_header({2, 2, 2}, 64, 64);
    bytes.resize(bytes.size() + 64, 0);
    write_bytes(tmp / "img.nii", bytes);
    CHECK_THROWS_AS(read_volume(tmp / "img.nii"), UnsupportedDatatype);
}

TEST_CASE("truncated NIfTI payload") {
    TempDir tmp("io");
    std::vector<unsigned char> bytes = int16_fixture(kInt16Values);
    bytes.resize(bytes.size() - 3);
    write_bytes(tmp / "img.nii", bytes);
    CHECK_THROWS_AS(read_volume(tmp / "img.nii"), TruncatedPayload);
}

TEST_CASE("short NIfTI header") {
    TempDir tmp("io");
    std::vector<unsigned char> bytes = int16_fixture(kInt16Values);
    bytes.resize(100);
    write_bytes(tmp / "img.nii", bytes);
    CHECK_THROWS_AS(read_volume(tmp / "img.nii"), MalformedHeader);
}

TEST_CASE("the three NIfTI failure kinds are distinct types") {
    TempDir tmp("io");
    std::vector<unsigned char> magic = int16_fixture(kInt16Values);
    std::memcpy(&magic[344], "xyz\0", 4);
    write_bytes(tmp / "a.nii", magic);
    write_bytes(tmp / "b.nii", nifti_header({2, 2, 2}, 8, 32));
    std::vector<unsigned char> shortp = int16_fixture(kInt16Values);
    shortp.pop_back();
    write_bytes(tmp / "c.nii", shortp);
    auto kind = [](const std::filesystem::path& p) -> std::string {
        try {
            read_volume(p);
        } catch (const MalformedHeader&) {
            return "malformed";
        } catch (const UnsupportedDatatype&) {
            return "datatype";
        } catch (const TruncatedPayload&) {
            return "truncated";
        }
        return "none";
    };
    CHECK(kind(tmp / "a.nii") == "malformed");
    CHECK(kind(tmp / "b.nii") == "datatype");
    CHECK(kind(tmp / "c.nii") == "truncated");
}

TEST_CASE("NIfTI orientation is ignored with a warning") {
    TempDir tmp("io");
    std::vector<unsigned char> bytes = nifti_header({2, 2, 2}, 4, 16, "n+1", 1);
    bytes.resize(bytes.size() + 16, 0);
    write_bytes(tmp / "img.nii", bytes);
    std::vector<std::string> warnings;
    const WarningSink previous = set_warning_sink([&](const std::string& m) { warnings.push_back(m); });
    const Volume v = read_volume(tmp / "img.nii");
    set_warning_sink(previous);
    CHECK(v.dims() == Dims{2, 2, 2});
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find("orientation") != std::string::npos);
}

TEST_CASE("NIfTI write then read") {
    TempDir tmp("io");
    std::mt19937_64 rng(3);
    Volumef v(Dims{4, 3, 2}, Spacing(1.0, 2.0, 0.5));
    std::uniform_real_distribution<float> u(-5.0f, 5.0f);
    for (Eigen::Index i = 0; i < v.data().size(); ++i) v.data()[i] = u(rng);
    for (const char* name : {"v.nii", "v.nii.gz"}) {
        write_volume(v, tmp / name);
        const Volume back = read_volume(tmp / name);
        CHECK(back.dims() == v.dims());
        CHECK(back.spacing() == v.spacing());
        CHECK((back.data() == v.data().cast<double>()).all());
    }
    const LabelVolume labels = random_labels({4, 3, 2}, 5, rng);
    write_labels(labels, tmp / "l.nii.gz");
    CHECK((read_labels(tmp / "l.nii.gz").labels() == labels.labels()).all());
}

TEST_CASE("path helpers") {
    CHECK(raw_base("a/b.f32raw") == std::filesystem::path("a/b"));
    CHECK(raw_base("a/b.json") == std::filesystem::path("a/b"));
    CHECK(raw_base("a/b") == std::filesystem::path("a/b"));
    CHECK(is_nifti_path("x.nii"));
    CHECK(is_nifti_path("x.nii.gz"));
    CHECK_FALSE(is_nifti_path("x.json"));
}

}  // TEST_SUITE
