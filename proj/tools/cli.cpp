#include "cli.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "protoreg/attention.hpp"
#include "protoreg/errors.hpp"
#include "protoreg/gradients.hpp"
#include "protoreg/io.hpp"
#include "protoreg/log.hpp"
#include "protoreg/metrics.hpp"
#include "protoreg/optimizer.hpp"
#include "protoreg/phantom.hpp"

#ifndef PROTOREG_VERSION
#define PROTOREG_VERSION "0.0.0"
#endif

namespace protoreg::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------- small helpers

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream s;
    s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return s.str();
}

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw InvalidArgument(path.string() + ": " + e.what());
    }
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    const fs::path tmp = fs::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out << text;
        if (!out) throw IoError("failed writing " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void write_json(const fs::path& path, const json& j) { write_text_atomic(path, j.dump(2) + "\n"); }

// Files that make up a volume/field on disk (both halves of a raw pair).
std::vector<fs::path> files_of(const fs::path& path) {
    if (is_nifti_path(path)) return {path};
    const fs::path base = raw_base(path);
    return {fs::path(base.string() + ".f32raw"), fs::path(base.string() + ".json")};
}

json hashed(const fs::path& path) {
    json files = json::array();
    for (const fs::path& f : files_of(path)) {
        files.push_back({{"path", fs::absolute(f).lexically_normal().string()}, {"sha256", sha256_file(f)}});
    }
    return files;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
}

LossWeights weights_from(const std::vector<double>& w) {
    if (w.size() != 5) throw InvalidArgument("--weights needs 5 values (sim smooth seg prototype contour)");
    return {w[0], w[1], w[2], w[3], w[4]};
}

json trace_json(const RegistrationResult& r) {
    json levels = json::array();
    for (const LevelTrace& t : r.levels) {
        levels.push_back({{"level", t.level},
                          {"dims", {t.dims.nx, t.dims.ny, t.dims.nz}},
                          {"iterations", int(t.totals.size()) - 1},
                          {"start", t.start},
                          {"end", t.end},
                          {"totals", t.totals}});
    }
    return levels;
}

// ---------------------------------------------------------------- register

struct RegisterArgs {
    std::string fixed, moving, fixed_mask, moving_mask, config, out_dir, classes, pair_id = "pair";
    std::uint64_t seed = 0;
    int levels = 0;
    std::vector<int> iterations;
    double lr = 0, beta1 = 0, beta2 = 0, adam_eps = 0, temperature = 0;
    std::vector<double> weights;
    int lncc_window = 0, max_points = 0;
};

struct RegisterFlags {
    CLI::Option *seed, *levels, *iterations, *lr, *beta1, *beta2, *adam_eps, *weights, *window, *max_points,
        *temperature;
};

RegistrationConfig build_config(const RegisterArgs& a, const RegisterFlags& f) {
    RegistrationConfig c;
    if (!a.config.empty()) c = read_json_file(a.config).get<RegistrationConfig>();
    if (f.seed->count()) c.seed = a.seed;
    if (f.levels->count()) c.levels = a.levels;
    if (f.iterations->count()) c.iterations = a.iterations;
    if (f.lr->count()) c.adam.learning_rate = a.lr;
    if (f.beta1->count()) c.adam.beta1 = a.beta1;
    if (f.beta2->count()) c.adam.beta2 = a.beta2;
    if (f.adam_eps->count()) c.adam.eps = a.adam_eps;
    if (f.weights->count()) c.weights = weights_from(a.weights);
    if (f.window->count()) c.lncc_window = a.lncc_window;
    if (f.max_points->count()) c.max_contour_points = a.max_points;
    if (f.temperature->count()) c.temperature = a.temperature;
    c.validate();
    return c;
}

int cmd_register(const RegisterArgs& a, const RegisterFlags& f, std::ostream& out) {
    const std::string started = utc_now();
    if (a.fixed_mask.empty() != a.moving_mask.empty()) {
        throw InvalidArgument("--fixed-mask and --moving-mask must be given together");
    }
    const RegistrationConfig config = build_config(a, f);
    const bool masks = !a.fixed_mask.empty();

    const Volume fixed = read_volume(a.fixed);
    const Volume moving = read_volume(a.moving);
    LabelVolume fixed_mask, moving_mask;
    if (masks) {
        fixed_mask = read_labels(a.fixed_mask);
        moving_mask = read_labels(a.moving_mask);
    }
    const fs::path dir(a.out_dir);
    ensure_dir(dir);

    const RegistrationResult r = masks ? register_pair(fixed, moving, fixed_mask, moving_mask, config)
                                       : register_pair(fixed, moving, config);

    json outputs = json::array();
    auto record_file = [&](const std::string& role, const fs::path& file) {
        outputs.push_back({{"role", role}, {"path", file.filename().string()}, {"sha256", sha256_file(file)}});
    };
    auto record = [&](const std::string& role, const fs::path& p) {
        for (const fs::path& file : files_of(p)) record_file(role, file);
    };

    write_field(r.field, dir / "field");
    record("field", dir / "field");
    write_volume(warp_volume(moving, r.field), dir / "warped");
    record("warped", dir / "warped");

    EvalReport report;
    if (masks) {
        const LabelVolume warped_labels = warp_labels(moving_mask, r.field);
        write_labels(warped_labels, dir / "warped_labels");
        record("warped_labels", dir / "warped_labels");
        const int k = std::max(fixed_mask.num_classes(), moving_mask.num_classes());
        const auto names = a.classes.empty() ? class_names("", k) : class_names(a.classes, k);
        report = evaluate(fixed_mask, warped_labels, r.field, a.pair_id, names, &moving_mask);
    } else {
        report = evaluate_field(r.field, a.pair_id);
    }

    const json loss = {{"final", r.final_breakdown},
                       {"levels", trace_json(r)},
                       {"sdlogj", r.jacobian.sdlogj},
                       {"sdlogj_excluded_voxels", r.jacobian.excluded},
                       {"unsupervised", r.unsupervised}};
    write_json(dir / "loss.json", loss);
    record_file("loss", dir / "loss.json");

    write_json(dir / "eval.json", report);
    {
        std::ostringstream csv;
        write_csv(csv, report);
        write_text_atomic(dir / "eval.csv", csv.str());
    }
    record_file("eval", dir / "eval.json");
    record_file("eval", dir / "eval.csv");

    json inputs = {{"fixed", hashed(a.fixed)}, {"moving", hashed(a.moving)}};
    if (masks) {
        inputs["fixed_mask"] = hashed(a.fixed_mask);
        inputs["moving_mask"] = hashed(a.moving_mask);
    }
    json timings = json::array();
    for (const LevelTrace& t : r.levels) timings.push_back({{"level", t.level}, {"seconds", t.seconds}});
    const json manifest = {{"tool", "protoreg"},
                           {"version", PROTOREG_VERSION},
                           {"command", "register"},
                           {"seed", config.seed},
                           {"config", config},
                           {"inputs", inputs},
                           {"outputs", outputs},
                           {"level_seconds", timings},
                           {"started_at", started},
                           {"finished_at", utc_now()}};
    write_json(dir / "manifest.json", manifest);

    out << "registered " << a.moving << " -> " << a.fixed << (r.unsupervised ? " (unsupervised)" : "") << "\n";
    out << "final loss " << format_number(r.final_breakdown.total) << ", SDlogJ " << format_number(r.jacobian.sdlogj);
    if (report.registered.average) out << ", avg DSC " << format_number(*report.registered.average);
    out << "\noutputs in " << dir.string() << "\n";
    return kOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
    std::string fixed_mask, warped_mask, field, out, moving_mask, classes, pair_id = "pair";
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    const LabelVolume fixed = read_labels(a.fixed_mask);
    const LabelVolume warped = read_labels(a.warped_mask);
    const DisplacementField field = read_field(a.field);
    LabelVolume moving;
    if (!a.moving_mask.empty()) moving = read_labels(a.moving_mask);
    const int k = std::max({fixed.num_classes(), warped.num_classes(), a.moving_mask.empty() ? 0 : moving.num_classes()});
    const auto names = a.classes.empty() ? class_names("", k) : class_names(a.classes, k);
    const EvalReport report =
        evaluate(fixed, warped, field, a.pair_id, names, a.moving_mask.empty() ? nullptr : &moving);

    fs::path base(a.out);
    if (base.extension() == ".json" || base.extension() == ".csv") base.replace_extension();
    if (base.has_parent_path()) ensure_dir(base.parent_path());
    write_json(fs::path(base.string() + ".json"), report);
    std::ostringstream csv;
    write_csv(csv, report);
    write_text_atomic(fs::path(base.string() + ".csv"), csv.str());

    out << "avg DSC " << (report.registered.average ? format_number(*report.registered.average) : "absent")
        << ", SDlogJ " << format_number(report.sdlogj) << "\n";
    return kOk;
}

// ---------------------------------------------------------------- slices

struct SlicesArgs {
    std::string volume, labels, axis, out;
    int index = 0;
};

constexpr std::array<std::array<unsigned char, 3>, 12> kPalette = {{{230, 25, 75},
                                                                  {60, 180, 75},
                                                                  {255, 225, 25},
                                                                  {0, 130, 200},
                                                                  {245, 130, 48},
                                                                  {145, 30, 180},
                                                                  {70, 240, 240},
                                                                  {240, 50, 230},
                                                                  {210, 245, 60},
                                                                  {250, 190, 212},
                                                                  {0, 128, 128},
                                                                  {170, 110, 40}}};

int cmd_slices(const SlicesArgs& a, std::ostream& out) {
    if (a.axis != "x" && a.axis != "y" && a.axis != "z") throw InvalidArgument("--axis must be x, y or z");
    const int axis = a.axis[0] - 'x';
    const Volume vol = read_volume(a.volume);
    LabelVolume labels;
    const bool overlay = !a.labels.empty();
    if (overlay) {
        labels = read_labels(a.labels);
        require_same_dims(vol.dims(), labels.dims(), "slices");
    }
    const Dims& d = vol.dims();
    if (a.index < 0 || a.index >= d[axis]) {
        throw InvalidArgument("--index " + std::to_string(a.index) + " outside [0, " + std::to_string(d[axis] - 1) +
                              "] on axis " + a.axis);
    }
    // Image columns follow the lower remaining axis, rows the higher one.
    const int col_axis = axis == 0 ? 1 : 0;
    const int row_axis = axis == 2 ? 1 : 2;
    const int width = d[col_axis];
    const int height = d[row_axis];
    auto voxel = [&](int c, int r) {
        int p[3];
        p[axis] = a.index;
        p[col_axis] = c;
        p[row_axis] = r;
        return d.index(p[0], p[1], p[2]);
    };

    const double lo = vol.data().minCoeff();
    const double hi = vol.data().maxCoeff();
    std::vector<unsigned char> rgb(std::size_t(width) * std::size_t(height) * 3);
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            const double v = hi > lo ? (vol.data()[voxel(c, r)] - lo) / (hi - lo) : 0.0;
            const auto g = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            unsigned char* px = &rgb[(std::size_t(r) * std::size_t(width) + std::size_t(c)) * 3];
            px[0] = px[1] = px[2] = g;
            if (!overlay) continue;
            const int k = labels.labels()[voxel(c, r)];
            if (k == 0) continue;
            // In-slice 4-neighbourhood; the image border counts as outside.
            const bool contour = c == 0 || r == 0 || c == width - 1 || r == height - 1 ||
                                 labels.labels()[voxel(c - 1, r)] != k || labels.labels()[voxel(c + 1, r)] != k ||
                                 labels.labels()[voxel(c, r - 1)] != k || labels.labels()[voxel(c, r + 1)] != k;
            if (!contour) continue;
            const auto& color = kPalette[std::size_t(k - 1) % kPalette.size()];
            std::copy(color.begin(), color.end(), px);
        }
    }
    const fs::path path(a.out);
    if (path.has_parent_path()) ensure_dir(path.parent_path());
    std::ostringstream ppm;
    ppm << "P6\n" << width << ' ' << height << "\n255\n";
    ppm.write(reinterpret_cast<const char*>(rgb.data()), std::streamsize(rgb.size()));
    write_text_atomic(path, ppm.str());
    out << "wrote " << width << "x" << height << " slice to " << path.string() << "\n";
    return kOk;
}

// ---------------------------------------------------------------- phantom

struct PhantomArgs {
    std::string spec, out_dir;
    std::uint64_t seed = 0;
};

PhantomSpec load_phantom_spec(const std::string& path, json* registration) {
    PhantomSpec spec;
    if (path.empty()) return spec;
    json j = read_json_file(path);
    if (!j.is_object()) throw InvalidArgument(path + ": phantom spec must be a JSON object");
    if (j.contains("registration")) {
        if (registration) *registration = j.at("registration");
        j.erase("registration");
    }
    spec = j.get<PhantomSpec>();
    return spec;
}

int cmd_phantom(const PhantomArgs& a, CLI::Option* seed_flag, std::ostream& out) {
    PhantomSpec spec = load_phantom_spec(a.spec, nullptr);
    if (seed_flag->count()) spec.seed = a.seed;
    const PhantomCase pc = generate(spec);
    const fs::path dir(a.out_dir);
    ensure_dir(dir);
    write_volume(pc.fixed, dir / "fixed");
    write_volume(pc.moving, dir / "moving");
    write_labels(pc.fixed_labels, dir / "fixed_labels");
    write_labels(pc.moving_labels, dir / "moving_labels");
    write_field(pc.truth, dir / "truth_field");
    write_json(dir / "phantom_spec.json", spec);
    const auto initial = summarize_dsc(pc.fixed_labels, pc.moving_labels);
    out << "phantom " << to_string(spec.dims) << " with " << spec.blobs << " blobs written to " << dir.string()
        << "\ninitial avg DSC " << (initial.average ? format_number(*initial.average) : "absent") << "\n";
    return kOk;
}

// ---------------------------------------------------------------- ablate

struct AblateArgs {
    std::string spec, out;
    std::uint64_t seed = 0;
};

int cmd_ablate(const AblateArgs& a, CLI::Option* seed_flag, std::ostream& out) {
    json registration;
    PhantomSpec spec = load_phantom_spec(a.spec, &registration);
    if (seed_flag->count()) spec.seed = a.seed;
    RegistrationConfig base;
    if (!registration.is_null()) base = registration.get<RegistrationConfig>();
    base.seed = spec.seed;
    base.validate();
    const PhantomCase pc = generate(spec);

    struct Row {
        bool prototype, contour;
    };
    const Row rows[] = {{false, false}, {true, false}, {true, true}};
    std::ostringstream csv;
    csv << "prototype,contour,avg_dsc,sdlogj\n";
    out << "prototype  contour  avg_dsc   sdlogj\n";
    for (const Row& row : rows) {
        RegistrationConfig c = base;
        if (!row.prototype) c.weights.prototype = 0.0;
        if (!row.contour) c.weights.contour = 0.0;
        const RegistrationResult r = register_pair(pc.fixed, pc.moving, pc.fixed_labels, pc.moving_labels, c);
        const auto s = summarize_dsc(pc.fixed_labels, warp_labels(pc.moving_labels, r.field));
        const std::string dsc_text = s.average ? format_number(*s.average) : "absent";
        csv << (row.prototype ? "on" : "off") << ',' << (row.contour ? "on" : "off") << ',' << dsc_text << ','
            << format_number(r.jacobian.sdlogj) << '\n';
        out << std::left << std::setw(11) << (row.prototype ? "on" : "off") << std::setw(9)
            << (row.contour ? "on" : "off") << std::setw(10) << std::fixed << std::setprecision(4)
            << s.average.value_or(std::nan("")) << r.jacobian.sdlogj << std::defaultfloat << "\n";
    }
    const fs::path path(a.out);
    if (path.has_parent_path()) ensure_dir(path.parent_path());
    write_text_atomic(path, csv.str());
    return kOk;
}

// ---------------------------------------------------------------- check-grad

struct CheckGradArgs {
    int size = 6;
    int probes = 64;
    double eps = 1e-3;
    double tolerance = 1e-3;
    std::uint64_t seed = 0;
};

int cmd_check_grad(const CheckGradArgs& a, std::ostream& out) {
    if (a.size < 4) throw InvalidArgument("--size must be >= 4");
    if (a.probes < 1) throw InvalidArgument("--probes must be >= 1");
    if (!(a.eps > 0.0)) throw InvalidArgument("--eps must be > 0");
    const GradientInstance inst = random_gradient_instance(a.size, a.seed);
    bool all_pass = true;
    out << std::left << std::setw(10) << "term" << std::setw(8) << "probes" << std::setw(9) << "skipped"
        << std::setw(14) << "max_abs_err" << std::setw(14) << "max_rel_err" << "result\n";
    for (LossTerm term : kAllTerms) {
        const FieldGradient g = term_gradient(inst.inputs, inst.field, term);
        const FiniteDiffReport rep = finite_diff_check(
            [&](const DisplacementField& f) { return term_value(inst.inputs, f, term); }, inst.field, g, a.probes,
            a.eps, a.seed + 1,
            [&](Eigen::Index v, int c) { return is_nonsmooth_probe(inst.inputs, inst.field, term, v, c, a.eps); });
        const bool pass = rep.probes == a.probes && rep.max_rel_err < a.tolerance;
        all_pass = all_pass && pass;
        out << std::setw(10) << term_name(term) << std::setw(8) << rep.probes << std::setw(9) << rep.skipped
            << std::setw(14) << std::scientific << std::setprecision(3) << rep.max_abs_err << std::setw(14)
            << rep.max_rel_err << std::defaultfloat << (pass ? "PASS" : "FAIL") << "\n";
    }
    return all_pass ? kOk : kNumerical;
}

// ---------------------------------------------------------------- demo-attention

void print_matrix(std::ostream& out, const std::string& name, const Eigen::MatrixXd& m) {
    const Eigen::IOFormat fmt(4, 0, "  ", "\n", "    ", "");
    out << name << " (" << m.rows() << "x" << m.cols() << ")\n" << m.format(fmt) << "\n";
}

int cmd_demo_attention(std::ostream& out) {
    using namespace attention;
    Eigen::MatrixXd q(2, 2), k(3, 2), v(3, 2);
    q << 1, 0, 0, 1;
    k << 1, 0, 0, 1, 1, 1;
    v << 1, 0, 0, 1, 0.5, 0.5;
    out << "cross-attention: Softmax(Q K^T / sqrt(d)) V\n";
    print_matrix(out, "Q", q);
    print_matrix(out, "K", k);
    print_matrix(out, "V", v);
    print_matrix(out, "weights", attention_weights(q, k));
    print_matrix(out, "output", cross_attention(q, k, v));

    Eigen::MatrixXd img(3, 2), mask(3, 2);
    img << 1, 0, 0.5, 0.5, 0, 1;
    mask << 0, 1, 1, 0, 1, 1;
    out << "\nfusion attention: 0.5 * (CA(img, mask, mask) + CA(mask, img, img))\n";
    print_matrix(out, "img tokens", img);
    print_matrix(out, "mask tokens", mask);
    print_matrix(out, "fused", fusion_attention(img, mask));

    out << "\nwindow layout on a 4x4 grid, window 2 (row r holds grid token source(r))\n";
    for (int shift : {0, 1}) {
        const WindowLayout layout({4, 4}, 2, shift);
        out << "  shift " << shift << ":";
        for (Eigen::Index w = 0; w < layout.num_windows(); ++w) {
            out << "  [";
            for (Eigen::Index t = 0; t < layout.tokens_per_window(); ++t) {
                const Eigen::Index src = layout.source(w * layout.tokens_per_window() + t);
                out << (t ? " " : "") << "(" << src / 4 << "," << src % 4 << ")";
            }
            out << "]";
        }
        out << "\n";
    }
    return kOk;
}

}  // namespace

// ---------------------------------------------------------------- public helpers

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
        EVP_MD_CTX_free(ctx);
        throw IoError("SHA-256 unavailable");
    }
    std::array<char, 1 << 16> buf;
    while (in) {
        in.read(buf.data(), std::streamsize(buf.size()));
        if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), std::size_t(in.gcount()));
    }
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, md.data(), &len);
    EVP_MD_CTX_free(ctx);
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return hex.str();
}

std::vector<std::string> verify_manifest(const fs::path& manifest) {
    const json m = read_json_file(manifest);
    std::vector<std::string> problems;
    auto check = [&](const fs::path& p, const std::string& expected) {
        if (!fs::exists(p)) {
            problems.push_back("missing " + p.string());
        } else if (sha256_file(p) != expected) {
            problems.push_back("hash mismatch for " + p.string());
        }
    };
    for (const auto& [role, files] : m.at("inputs").items()) {
        for (const auto& f : files) check(f.at("path").get<std::string>(), f.at("sha256").get<std::string>());
    }
    for (const auto& f : m.at("outputs")) {
        check(manifest.parent_path() / f.at("path").get<std::string>(), f.at("sha256").get<std::string>());
    }
    return problems;
}

GradientInstance random_gradient_instance(int n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const Dims d{n, n, n};

    auto smooth_image = [&]() {
        Volume v(d);
        std::vector<Eigen::Vector4d> bumps;
        for (int b = 0; b < 4; ++b) {
            bumps.emplace_back(unit(rng) * (n - 1), unit(rng) * (n - 1), unit(rng) * (n - 1), 0.5 + unit(rng));
        }
        for (Eigen::Index i = 0; i < d.size(); ++i) {
            const Eigen::Vector3d p = voxel_point(d, i);
            double s = 0.1 * unit(rng);
            for (const auto& b : bumps) s += b[3] * std::exp(-(p - b.head<3>()).squaredNorm() / (0.4 * n * n / 4.0));
            v.data()[i] = s;
        }
        return v;
    };
    auto random_labels = [&]() {
        // Three non-empty classes: two random boxes over a background, plus one slab.
        LabelVolume::Array lab = LabelVolume::Array::Zero(d.size());
        for (Eigen::Index i = 0; i < d.size(); ++i) {
            const Eigen::Vector3i p = voxel_of(d, i);
            if (p.z() < n / 3 && unit(rng) < 0.9) lab[i] = 3;
        }
        for (int k = 1; k <= 2; ++k) {
            const int x0 = int(unit(rng) * (n - 3));
            const int y0 = int(unit(rng) * (n - 3));
            const int z0 = n / 3 + int(unit(rng) * (n - 3 - n / 3));
            for (int z = z0; z < std::min(n, z0 + 3); ++z)
                for (int y = y0; y < std::min(n, y0 + 3); ++y)
                    for (int x = x0; x < std::min(n, x0 + 3); ++x) lab[d.index(x, y, z)] = k;
        }
        return LabelVolume(d, Spacing::Ones(), std::move(lab), 3);
    };

    const Volume fixed = smooth_image();
    const Volume moving = smooth_image();
    const OneHotMask fixed_mask = one_hot(random_labels());
    const OneHotMask moving_mask = one_hot(random_labels());
    ObjectiveOptions options;
    options.window = 3;
    options.max_contour_points = 100000;
    options.seed = seed;

    GradientInstance inst{make_objective_inputs(fixed, moving, &fixed_mask, &moving_mask, options), DisplacementField(d)};
    for (Eigen::Index i = 0; i < d.size(); ++i) {
        for (int c = 0; c < 3; ++c) inst.field.u()(c, i) = 1.2 * (unit(rng) - 0.5);
    }
    return inst;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"protoreg: prototype- and contour-guided deformable registration"};
    app.require_subcommand(1);
    app.set_version_flag("--version", PROTOREG_VERSION);

    RegisterArgs reg;
    RegisterFlags rf{};
    auto* c_reg = app.add_subcommand("register", "Register a moving volume to a fixed volume");
    c_reg->add_option("--fixed", reg.fixed, "Fixed volume")->required();
    c_reg->add_option("--moving", reg.moving, "Moving volume")->required();
    c_reg->add_option("--fixed-mask", reg.fixed_mask, "Fixed label volume");
    c_reg->add_option("--moving-mask", reg.moving_mask, "Moving label volume");
    c_reg->add_option("--config", reg.config, "Registration config JSON");
    c_reg->add_option("--out-dir", reg.out_dir, "Output directory")->required();
    rf.seed = c_reg->add_option("--seed", reg.seed, "Random seed");
    rf.levels = c_reg->add_option("--levels", reg.levels, "Pyramid levels");
    rf.iterations = c_reg->add_option("--iterations", reg.iterations, "Iterations per level, coarse to fine");
    rf.lr = c_reg->add_option("--lr", reg.lr, "Adam learning rate");
    rf.beta1 = c_reg->add_option("--beta1", reg.beta1, "Adam beta1");
    rf.beta2 = c_reg->add_option("--beta2", reg.beta2, "Adam beta2");
    rf.adam_eps = c_reg->add_option("--adam-eps", reg.adam_eps, "Adam epsilon");
    rf.weights = c_reg->add_option("--weights", reg.weights, "Weights: sim smooth seg prototype contour")
                     ->expected(5);
    rf.window = c_reg->add_option("--lncc-window", reg.lncc_window, "LNCC window edge (odd)");
    rf.max_points = c_reg->add_option("--max-points", reg.max_points, "Contour points per class");
    rf.temperature = c_reg->add_option("--temperature", reg.temperature, "Contrast temperature");
    c_reg->add_option("--classes", reg.classes, "Class-name preset for reports (abdomen, acdc)");
    c_reg->add_option("--pair-id", reg.pair_id, "Identifier used in reports");

    EvalArgs ev;
    auto* c_eval = app.add_subcommand("eval", "Evaluate warped labels and a field");
    c_eval->add_option("--fixed-mask", ev.fixed_mask, "Fixed label volume")->required();
    c_eval->add_option("--warped-mask", ev.warped_mask, "Warped moving label volume")->required();
    c_eval->add_option("--field", ev.field, "Displacement field")->required();
    c_eval->add_option("--out", ev.out, "Report base path (.json and .csv are written)")->required();
    c_eval->add_option("--moving-mask", ev.moving_mask, "Unregistered moving labels (adds the initial row)");
    c_eval->add_option("--classes", ev.classes, "Class-name preset (abdomen, acdc)");
    c_eval->add_option("--pair-id", ev.pair_id, "Identifier used in reports");

    SlicesArgs sl;
    auto* c_slices = app.add_subcommand("slices", "Write a PPM slice with label contours");
    c_slices->add_option("--volume", sl.volume, "Intensity volume")->required();
    c_slices->add_option("--labels", sl.labels, "Label volume to outline");
    c_slices->add_option("--axis", sl.axis, "Slice axis: x, y or z")->required();
    c_slices->add_option("--index", sl.index, "Slice index")->required();
    c_slices->add_option("--out", sl.out, "Output .ppm")->required();

    PhantomArgs ph;
    auto* c_phantom = app.add_subcommand("phantom", "Generate a synthetic pair with a known field");
    c_phantom->add_option("--spec", ph.spec, "Phantom spec JSON");
    c_phantom->add_option("--out-dir", ph.out_dir, "Output directory")->required();
    auto* ph_seed = c_phantom->add_option("--seed", ph.seed, "Random seed");

    AblateArgs ab;
    auto* c_ablate = app.add_subcommand("ablate", "Loss-term ablation on a phantom pair");
    c_ablate->add_option("--phantom-spec", ab.spec, "Phantom spec JSON (optional \"registration\" object)")
        ->required();
    c_ablate->add_option("--out", ab.out, "Output CSV")->required();
    auto* ab_seed = c_ablate->add_option("--seed", ab.seed, "Random seed");

    CheckGradArgs cg;
    auto* c_grad = app.add_subcommand("check-grad", "Compare analytic and finite-difference gradients");
    c_grad->add_option("--size", cg.size, "Cube edge of the random instance");
    c_grad->add_option("--probes", cg.probes, "Probes per term");
    c_grad->add_option("--eps", cg.eps, "Central-difference step");
    c_grad->add_option("--tolerance", cg.tolerance, "Pass threshold on max relative error");
    c_grad->add_option("--seed", cg.seed, "Random seed");

    auto* c_demo = app.add_subcommand("demo-attention", "Print a worked attention example");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kInvalidArgs;
    }

    // Library warnings go to the caller's error stream for the duration of the command.
    const WarningSink previous = set_warning_sink([&err](const std::string& m) { err << "warning: " << m << "\n"; });
    struct Restore {
        WarningSink sink;
        ~Restore() { set_warning_sink(std::move(sink)); }
    } restore{previous};

    try {
        if (*c_reg) return cmd_register(reg, rf, out);
        if (*c_eval) return cmd_eval(ev, out);
        if (*c_slices) return cmd_slices(sl, out);
        if (*c_phantom) return cmd_phantom(ph, ph_seed, out);
        if (*c_ablate) return cmd_ablate(ab, ab_seed, out);
        if (*c_grad) return cmd_check_grad(cg, out);
        if (*c_demo) return cmd_demo_attention(out);
    } catch (const InvalidArgument& e) {
        err << "error: " << e.what() << "\n";
        return kInvalidArgs;
    } catch (const IoError& e) {
        err << "error: " << e.what() << "\n";
        return kIoFailure;
    } catch (const NumericalError& e) {
        err << "error: numerical failure in term '" << e.term() << "': " << e.what() << "\n";
        return kNumerical;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kFailure;
    }
    return kInvalidArgs;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv;
    argv.push_back("protoreg");
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(int(argv.size()), argv.data(), out, err);
}

}  // namespace protoreg::cli
