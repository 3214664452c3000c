#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "doctest.h"
#include "protoreg/io.hpp"
#include "support.hpp"

using namespace protoreg;
using namespace testing;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result call(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

// 24^3 single-blob phantom plus a short two-level config in `dir`.
void make_inputs(const TempDir& dir) {
    write_text(dir / "spec.json", R"({"dims":[24,24,24],"blobs":1,"magnitude":2,"seed":3})");
    write_text(dir / "config.json", R"({"levels":2,"iterations":[15],"learning_rate":0.05})");
    const Result r = call({"phantom", "--spec", (dir / "spec.json").string(), "--out-dir", (dir / "ph").string()});
    REQUIRE(r.code == 0);
}

std::vector<std::string> register_args(const TempDir& dir, const std::string& out, bool masks) {
    std::vector<std::string> a = {"register",  "--fixed",  (dir / "ph/fixed").string(), "--moving",
                                  (dir / "ph/moving").string(), "--config", (dir / "config.json").string(),
                                  "--out-dir", (dir / out).string()};
    if (masks) {
        a.insert(a.end(), {"--fixed-mask", (dir / "ph/fixed_labels").string(), "--moving-mask",
                           (dir / "ph/moving_labels").string()});
    }
    return a;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("parse errors exit with code 2") {
    CHECK(call({}).code == 2);
    CHECK(call({"register"}).code == 2);
    CHECK(call({"no-such-command"}).code == 2);
    CHECK(call({"check-grad", "--size", "banana"}).code == 2);
    CHECK(call({"--help"}).code == 0);
}

TEST_CASE("missing input files exit with code 3 and name the path") {
    TempDir dir("cli_missing");
    const std::string missing = (dir / "nowhere.json").string();
    const Result r = call({"eval", "--fixed-mask", missing, "--warped-mask", missing, "--field", missing, "--out",
                           (dir / "rep").string()});
    CHECK(r.code == 3);
    CHECK(r.err.find("nowhere") != std::string::npos);
}

TEST_CASE("phantom writes every volume and phantom_spec.json") {
    TempDir dir("cli_phantom");
    make_inputs(dir);
    for (const char* base : {"fixed", "moving", "fixed_labels", "moving_labels", "truth_field"}) {
        CHECK(fs::exists(dir / (std::string("ph/") + base + ".f32raw")));
        CHECK(fs::exists(dir / (std::string("ph/") + base + ".json")));
    }
    CHECK(fs::exists(dir / "ph/phantom_spec.json"));
    CHECK(read_field(dir / "ph/truth_field").dims() == Dims{24, 24, 24});
}

TEST_CASE("register with masks writes exactly the declared artifacts") {
    TempDir dir("cli_register");
    make_inputs(dir);
    const Result r = call(register_args(dir, "run", true));
    REQUIRE(r.code == 0);
    std::set<std::string> names;
    for (const auto& e : fs::directory_iterator(dir / "run")) names.insert(e.path().filename().string());
    const std::set<std::string> expected = {"field.f32raw",  "field.json",         "warped.f32raw",
                                            "warped.json",   "warped_labels.f32raw", "warped_labels.json",
                                            "loss.json",     "eval.json",          "eval.csv",
                                            "manifest.json"};
    CHECK(names == expected);

    const auto loss = nlohmann::json::parse(slurp(dir / "run/loss.json"));
    CHECK(loss.at("levels").size() == 2);
    CHECK(loss.at("unsupervised") == false);
    const auto eval = nlohmann::json::parse(slurp(dir / "run/eval.json"));
    CHECK(eval.at("registered").at("avg_dsc").get<double>() > 0.0);
    CHECK(eval.contains("initial"));

    CHECK(cli::verify_manifest(dir / "run/manifest.json").empty());
    {
        std::ofstream(dir / "run/eval.csv", std::ios::app) << "tampered\n";
    }
    const auto problems = cli::verify_manifest(dir / "run/manifest.json");
    REQUIRE(problems.size() == 1);
    CHECK(problems[0].find("eval.csv") != std::string::npos);
}

TEST_CASE("register is byte-reproducible") {
    TempDir dir("cli_repro");
    make_inputs(dir);
    REQUIRE(call(register_args(dir, "a", true)).code == 0);
    REQUIRE(call(register_args(dir, "b", true)).code == 0);
    CHECK(slurp(dir / "a/field.f32raw") == slurp(dir / "b/field.f32raw"));
    CHECK(slurp(dir / "a/field.json") == slurp(dir / "b/field.json"));
    CHECK(slurp(dir / "a/loss.json") == slurp(dir / "b/loss.json"));
}

TEST_CASE("register without masks warns about unsupervised mode") {
    TempDir dir("cli_unsup");
    make_inputs(dir);
    const Result r = call(register_args(dir, "run", false));
    REQUIRE(r.code == 0);
    CHECK(r.err.find("unsupervised mode") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "run/warped_labels.f32raw"));
    CHECK(nlohmann::json::parse(slurp(dir / "run/loss.json")).at("unsupervised") == true);
}

TEST_CASE("register with a missing field input reports the path") {
    TempDir dir("cli_reg_missing");
    make_inputs(dir);
    std::vector<std::string> a = register_args(dir, "run", false);
    a[2] = (dir / "ph/absent").string();
    const Result r = call(a);
    CHECK(r.code == 3);
    CHECK(r.err.find("absent") != std::string::npos);
}

TEST_CASE("eval of the identity field") {
    TempDir dir("cli_eval");
    make_inputs(dir);
    write_field(DisplacementField(Dims{24, 24, 24}), dir / "zero");
    const Result r = call({"eval", "--fixed-mask", (dir / "ph/fixed_labels").string(), "--warped-mask",
                           (dir / "ph/fixed_labels").string(), "--field", (dir / "zero").string(), "--out",
                           (dir / "rep").string(), "--pair-id", "ident"});
    REQUIRE(r.code == 0);
    const auto j = nlohmann::json::parse(slurp(dir / "rep.json"));
    CHECK(j.at("pair_id") == "ident");
    CHECK(j.at("registered").at("avg_dsc").get<double>() == 1.0);
    CHECK(j.at("sdlogj").get<double>() == 0.0);
    CHECK(fs::exists(dir / "rep.csv"));
}

TEST_CASE("slices of a constant volume are black") {
    TempDir dir("cli_slices_black");
    write_volume(Volume(Dims{4, 3, 2}), dir / "zeros");
    const Result r = call({"slices", "--volume", (dir / "zeros").string(), "--axis", "z", "--index", "1", "--out",
                           (dir / "s.ppm").string()});
    REQUIRE(r.code == 0);
    const std::string ppm = slurp(dir / "s.ppm");
    const std::string header = "P6\n4 3\n255\n";
    REQUIRE(ppm.size() == header.size() + 4 * 3 * 3);
    CHECK(ppm.substr(0, header.size()) == header);
    for (std::size_t i = header.size(); i < ppm.size(); ++i) CHECK(ppm[i] == '\0');
}

TEST_CASE("slices outline a single labeled voxel") {
    TempDir dir("cli_slices_label");
    const Dims d{5, 5, 3};
    write_volume(Volume(d), dir / "zeros");
    LabelVolume::Array a = LabelVolume::Array::Zero(d.size());
    a[d.index(2, 3, 1)] = 1;
    write_labels(LabelVolume(d, Spacing::Ones(), a, 1), dir / "labels");
    const Result r = call({"slices", "--volume", (dir / "zeros").string(), "--labels", (dir / "labels").string(),
                           "--axis", "z", "--index", "1", "--out", (dir / "s.ppm").string()});
    REQUIRE(r.code == 0);
    const std::string ppm = slurp(dir / "s.ppm");
    const std::size_t offset = std::string("P6\n5 5\n255\n").size();
    REQUIRE(ppm.size() == offset + 75);
    int colored = 0;
    for (int row = 0; row < 5; ++row) {
        for (int col = 0; col < 5; ++col) {
            const auto* px = reinterpret_cast<const unsigned char*>(ppm.data() + offset + std::size_t(row * 5 + col) * 3);
            if (px[0] == 0 && px[1] == 0 && px[2] == 0) continue;
            ++colored;
            CHECK(col == 2);
            CHECK(row == 3);
            CHECK(px[0] == 230);
            CHECK(px[1] == 25);
            CHECK(px[2] == 75);
        }
    }
    CHECK(colored == 1);
}

TEST_CASE("slices reject a bad axis or index") {
    TempDir dir("cli_slices_bad");
    write_volume(Volume(Dims{4, 3, 2}), dir / "zeros");
    CHECK(call({"slices", "--volume", (dir / "zeros").string(), "--axis", "w", "--index", "0", "--out",
                (dir / "s.ppm").string()})
              .code == 2);
    CHECK(call({"slices", "--volume", (dir / "zeros").string(), "--axis", "z", "--index", "2", "--out",
                (dir / "s.ppm").string()})
              .code == 2);
}

TEST_CASE("ablate writes three rows") {
    TempDir dir("cli_ablate");
    write_text(dir / "spec.json",
               R"({"dims":[24,24,24],"blobs":1,"magnitude":0,"noise_sigma":0,"seed":2,)"
               R"("registration":{"levels":1,"iterations":[5],"learning_rate":0.05}})");
    const Result r = call({"ablate", "--phantom-spec", (dir / "spec.json").string(), "--out", (dir / "ab.csv").string()});
    REQUIRE(r.code == 0);
    std::istringstream in(slurp(dir / "ab.csv"));
    std::string line;
    std::getline(in, line);
    CHECK(line == "prototype,contour,avg_dsc,sdlogj");
    std::vector<std::string> prefixes;
    while (std::getline(in, line)) {
        prefixes.push_back(line.substr(0, line.find(',', line.find(',') + 1)));
        const auto first = line.find(',', line.find(',') + 1);
        const double avg = std::stod(line.substr(first + 1));
        CHECK(avg == doctest::Approx(1.0).epsilon(0.02));
    }
    CHECK(prefixes == std::vector<std::string>{"off,off", "on,off", "on,on"});
}

TEST_CASE("check-grad passes on the default instance") {
    const Result r = call({"check-grad"});
    CHECK(r.code == 0);
    CHECK(r.out.find("FAIL") == std::string::npos);
    CHECK(r.out.find("contour") != std::string::npos);
}

TEST_CASE("check-grad fails loudly with an impossible tolerance") {
    CHECK(call({"check-grad", "--probes", "4", "--tolerance", "0"}).code == 4);
}

TEST_CASE("demo-attention prints the worked example") {
    const Result r = call({"demo-attention"});
    CHECK(r.code == 0);
    CHECK(r.out.find("fused") != std::string::npos);
    CHECK(r.out.find("shift 1") != std::string::npos);
}

}  // TEST_SUITE
