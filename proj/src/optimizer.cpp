#include "protoreg/optimizer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iterator>
#include <limits>
#include <optional>

#include <nlohmann/json.hpp>

#include "protoreg/log.hpp"

namespace protoreg {

using nlohmann::json;

void adam_step(Eigen::Ref<Eigen::Matrix3Xd> params, const Eigen::Matrix3Xd& grad, AdamState& state,
               const AdamConfig& config) {
    if (params.cols() != grad.cols() || state.m.cols() != grad.cols()) {
        throw InvalidArgument("adam_step: parameter, gradient and moment sizes differ");
    }
    ++state.t;
    state.m = config.beta1 * state.m + (1.0 - config.beta1) * grad;
    state.v = config.beta2 * state.v + (1.0 - config.beta2) * grad.cwiseAbs2();
    const double bc1 = 1.0 - std::pow(config.beta1, state.t);
    const double bc2 = 1.0 - std::pow(config.beta2, state.t);
    params.array() -=
        config.learning_rate * (state.m.array() / bc1) / ((state.v.array() / bc2).sqrt() + config.eps);
}

void RegistrationConfig::validate() const {
    if (levels < 1) throw InvalidArgument("levels must be >= 1");
    if (iterations.empty()) throw InvalidArgument("iterations must not be empty");
    if (iterations.size() != 1 && int(iterations.size()) < levels) {
        throw InvalidArgument("iterations lists " + std::to_string(iterations.size()) + " entries for " +
                              std::to_string(levels) + " levels");
    }
    for (int it : iterations) {
        if (it < 1) throw InvalidArgument("iterations must be >= 1");
    }
    if (!(adam.learning_rate > 0.0)) throw InvalidArgument("learning rate must be > 0");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
        throw InvalidArgument("Adam betas must lie in [0, 1)");
    }
    if (!(adam.eps > 0.0)) throw InvalidArgument("Adam eps must be > 0");
    weights.validate();
    if (lncc_window < 3 || lncc_window % 2 == 0) throw InvalidArgument("lncc window must be odd and >= 3");
    if (max_contour_points < 1) throw InvalidArgument("max contour points must be >= 1");
    if (!(temperature > 0.0)) throw InvalidArgument("temperature must be > 0");
}

int RegistrationConfig::iterations_at(int level) const {
    if (iterations.size() == 1) return iterations.front();
    // coarse -> fine list; level 0 is the last entry
    return iterations[iterations.size() - 1 - std::size_t(level)];
}

void to_json(json& j, const RegistrationConfig& c) {
    j = json{{"levels", c.levels},
             {"iterations", c.iterations},
             {"learning_rate", c.adam.learning_rate},
             {"beta1", c.adam.beta1},
             {"beta2", c.adam.beta2},
             {"adam_eps", c.adam.eps},
             {"weights", {c.weights.sim, c.weights.smooth, c.weights.seg, c.weights.prototype, c.weights.contour}},
             {"lncc_window", c.lncc_window},
             {"max_contour_points", c.max_contour_points},
             {"temperature", c.temperature},
             {"seed", c.seed}};
}

void from_json(const json& j, RegistrationConfig& c) {
    if (!j.is_object()) throw InvalidArgument("config must be a JSON object");
    try {
        c.levels = j.value("levels", c.levels);
        if (j.contains("iterations")) {
            const auto& it = j.at("iterations");
            c.iterations = it.is_array() ? it.get<std::vector<int>>() : std::vector<int>{it.get<int>()};
        }
        c.adam.learning_rate = j.value("learning_rate", c.adam.learning_rate);
        c.adam.beta1 = j.value("beta1", c.adam.beta1);
        c.adam.beta2 = j.value("beta2", c.adam.beta2);
        c.adam.eps = j.value("adam_eps", c.adam.eps);
        if (j.contains("weights")) {
            const auto w = j.at("weights").get<std::vector<double>>();
            if (w.size() != 5) throw InvalidArgument("weights needs 5 entries (sim, smooth, seg, prototype, contour)");
            c.weights = {w[0], w[1], w[2], w[3], w[4]};
        }
        c.lncc_window = j.value("lncc_window", c.lncc_window);
        c.max_contour_points = j.value("max_contour_points", c.max_contour_points);
        c.temperature = j.value("temperature", c.temperature);
        c.seed = j.value("seed", c.seed);
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("config: ") + e.what());
    }
    static const char* known[] = {"levels",  "iterations",  "learning_rate", "beta1",
                                  "beta2",   "adam_eps",    "weights",       "lncc_window",
                                  "max_contour_points", "temperature", "seed"};
    for (const auto& [key, value] : j.items()) {
        if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
            throw InvalidArgument("config: unknown key \"" + key + "\"");
        }
    }
}

void to_json(json& j, const LossBreakdown& b) {
    j = json{{"total", b.total},
             {"terms",
              {{"sim", {{"value", b.sim}, {"weight", b.weights.sim}}},
               {"smooth", {{"value", b.smooth}, {"weight", b.weights.smooth}}},
               {"seg", {{"value", b.seg}, {"weight", b.weights.seg}}},
               {"prototype",
                {{"value", b.prototype}, {"weight", b.weights.prototype}, {"contrast", b.contrast}, {"align", b.align}}},
               {"contour", {{"value", b.contour}, {"weight", b.weights.contour}}}}}};
}

namespace {

RegistrationResult run(const Volume& fixed, const Volume& moving, const LabelVolume* fixed_mask,
                       const LabelVolume* moving_mask, RegistrationConfig config) {
    config.validate();
    require_same_dims(fixed.dims(), moving.dims(), "register_pair");
    check_pyramid_levels(fixed.dims(), config.levels);

    RegistrationResult result;
    if (!fixed_mask) {
        if (config.weights.uses_masks()) warn("unsupervised mode: ω₃,ω₄,ω₅ disabled (no masks given)");
        config.weights.seg = config.weights.prototype = config.weights.contour = 0.0;
        result.unsupervised = true;
    }
    const bool use_masks = config.weights.uses_masks();
    if (use_masks) {
        require_same_dims(fixed.dims(), fixed_mask->dims(), "fixed mask");
        require_same_dims(fixed.dims(), moving_mask->dims(), "moving mask");
        if (fixed_mask->num_classes() != moving_mask->num_classes()) {
            throw InvalidArgument("fixed and moving masks disagree on the class universe (" +
                                  std::to_string(fixed_mask->num_classes()) + " vs " +
                                  std::to_string(moving_mask->num_classes()) + " classes)");
        }
    }

    const auto fixed_pyr = build_pyramid(fixed, config.levels);
    const auto moving_pyr = build_pyramid(moving, config.levels);
    Pyramid<OneHotMask> fixed_mask_pyr;
    Pyramid<OneHotMask> moving_mask_pyr;
    if (use_masks) {
        fixed_mask_pyr = build_pyramid(one_hot(*fixed_mask), config.levels);
        moving_mask_pyr = build_pyramid(one_hot(*moving_mask), config.levels);
    }

    std::optional<DisplacementField> previous;
    for (int level = config.levels - 1; level >= 0; --level) {
        const auto t0 = std::chrono::steady_clock::now();
        const Volume& f = fixed_pyr[level];
        const Volume& m = moving_pyr[level];
        ObjectiveOptions options{config.lncc_window, config.temperature, config.max_contour_points,
                                 config.seed + std::uint64_t(level)};
        const ObjectiveInputs inputs =
            use_masks ? make_objective_inputs(f, m, &fixed_mask_pyr[level], &moving_mask_pyr[level], options)
                      : make_objective_inputs(f, m, nullptr, nullptr, options);
        if (inputs.window == 0 && config.weights.sim != 0.0) {
            warn("level " + std::to_string(level) + " (" + to_string(f.dims()) +
                 ") is too small for an LNCC window; similarity term skipped there");
        }

        const DisplacementField base =
            previous ? upsample_field(*previous, f.dims(), f.spacing()) : DisplacementField(f.dims(), f.spacing());
        DisplacementField delta(f.dims(), f.spacing());
        AdamState adam(f.dims().size());

        LevelTrace trace;
        trace.level = level;
        trace.dims = f.dims();
        DisplacementField best = delta;
        double best_total = std::numeric_limits<double>::infinity();

        auto check = [&](const LossBreakdown& b) {
            if (auto bad = b.non_finite_term()) {
                throw NumericalError(*bad, "non-finite loss term '" + *bad + "' at level " + std::to_string(level) +
                                               " iteration " + std::to_string(trace.totals.size()));
            }
        };

        const int iterations = config.iterations_at(level);
        for (int it = 0; it <= iterations; ++it) {
            const DisplacementField current = superpose(base, delta);
            LossBreakdown b;
            FieldGradient g;
            if (it < iterations) {
                LossAndGradient lg = grad_total(inputs, current, config.weights);
                b = lg.breakdown;
                g = std::move(lg.gradient);
            } else {
                b = total_loss(inputs, current, config.weights);
            }
            check(b);
            if (it == 0) trace.start = b;
            trace.totals.push_back(b.total);
            if (b.total < best_total) {
                best_total = b.total;
                best = delta;
                trace.end = b;
            }
            if (it < iterations) {
                if (!g.values.allFinite()) throw NumericalError("gradient", "non-finite gradient at level " + std::to_string(level));
                adam_step(delta.u(), g.values, adam, config.adam);
            }
        }
        previous = superpose(base, best);
        trace.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.levels.push_back(std::move(trace));
    }

    result.field = std::move(*previous);
    result.final_breakdown = result.levels.back().end;
    result.jacobian = sdlogj(result.field);
    return result;
}

}  // namespace

RegistrationResult register_pair(const Volume& fixed, const Volume& moving, const RegistrationConfig& config) {
    return run(fixed, moving, nullptr, nullptr, config);
}

RegistrationResult register_pair(const Volume& fixed, const Volume& moving, const LabelVolume& fixed_mask,
                                 const LabelVolume& moving_mask, const RegistrationConfig& config) {
    return run(fixed, moving, &fixed_mask, &moving_mask, config);
}

}  // namespace protoreg
