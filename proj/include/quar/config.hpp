/*
 * Copyright 2026 The QuarFlow Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef QUAR_CONFIG_HPP
#define QUAR_CONFIG_HPP

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "chain.hpp"
#include "datasets.hpp"
#include "errors.hpp"
#include "training.hpp"

namespace quar {

using json = nlohmann::json;

enum class ModelKind { Quar, QuarConv, Residual, ARAffine };

inline const char* to_string(ModelKind k)
{
    switch (k) {
    case ModelKind::Quar:
        return "quar";
    case ModelKind::QuarConv:
        return "quar_conv";
    case ModelKind::Residual:
        return "residual";
    case ModelKind::ARAffine:
        return "ar_affine";
    }
    return "?";
}

/// Architecture of a flow chain. `hidden` lists hidden-layer widths for the
/// dense kinds (multiples of the data dimension for masked networks).
struct ModelSpec {
    ModelKind kind = ModelKind::Quar;
    std::size_t flows = 16;
    std::vector<std::size_t> hidden{128, 128};
    double sigma = 0.97;
    bool learn_theta = true;
    double coeff = 0.97;
    bool actnorm = true;
    double logit_alpha = 0.05;
    std::size_t conv_multiplier = 4;
    std::size_t kernel = 3;
    std::size_t squeeze_factor = 2;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    DatasetSpec dataset;
    ModelSpec model;
    TrainConfig train;
};

// ---------------------------------------------------------------------------
// Strict JSON reading

namespace detail {

inline void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> known)
{
    if (!j.is_object())
        throw ConfigError(where + ": expected an object");
    const std::set<std::string> ok(known.begin(), known.end());
    for (const auto& [k, _] : j.items())
        if (!ok.count(k))
            throw ConfigError(where + ": unknown field '" + k + "'");
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where)
{
    if (!j.contains(key))
        return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

template <class E, std::size_t N>
void read_enum(const json& j, const char* key, E& out, const std::string& where, const E (&all)[N])
{
    if (!j.contains(key))
        return;
    if (!j.at(key).is_string())
        throw ConfigError(where + "." + key + ": expected a string");
    const auto s = j.at(key).get<std::string>();
    for (E e : all)
        if (s == to_string(e)) {
            out = e;
            return;
        }
    throw ConfigError(where + "." + key + ": unknown value '" + s + "'");
}

inline const DatasetKind kDatasetKinds[] = {DatasetKind::EightGaussians, DatasetKind::TwoUniforms,
                                            DatasetKind::ToyImages};
inline const ModelKind kModelKinds[] = {ModelKind::Quar, ModelKind::QuarConv, ModelKind::Residual,
                                        ModelKind::ARAffine};
inline const OptimizerKind kOptimizerKinds[] = {OptimizerKind::Adam, OptimizerKind::Adamax};

} // namespace detail

inline DatasetSpec dataset_from_json(const json& j)
{
    detail::reject_unknown(j, "dataset",
                           {"kind", "radius", "std", "intervals", "weights", "side", "levels", "pattern_seed",
                            "patterns", "train_size", "heldout_size"});
    DatasetSpec d;
    detail::read_enum(j, "kind", d.kind, "dataset", detail::kDatasetKinds);
    detail::read(j, "radius", d.radius, "dataset");
    detail::read(j, "std", d.std, "dataset");
    if (j.contains("intervals")) {
        const auto& arr = j.at("intervals");
        if (!arr.is_array())
            throw ConfigError("dataset.intervals: expected an array of [lo, hi] pairs");
        d.intervals.clear();
        for (const auto& iv : arr) {
            if (!iv.is_array() || iv.size() != 2 || !iv[0].is_number() || !iv[1].is_number())
                throw ConfigError("dataset.intervals: expected [lo, hi] pairs");
            d.intervals.push_back({iv[0].get<double>(), iv[1].get<double>()});
        }
    }
    detail::read(j, "weights", d.weights, "dataset");
    detail::read(j, "side", d.side, "dataset");
    detail::read(j, "levels", d.levels, "dataset");
    detail::read(j, "pattern_seed", d.pattern_seed, "dataset");
    detail::read(j, "patterns", d.patterns, "dataset");
    detail::read(j, "train_size", d.train_size, "dataset");
    detail::read(j, "heldout_size", d.heldout_size, "dataset");
    try {
        d.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return d;
}

inline json to_json(const DatasetSpec& d)
{
    json iv = json::array();
    for (const auto& i : d.intervals)
        iv.push_back({i.lo, i.hi});
    return {{"kind", to_string(d.kind)},     {"radius", d.radius},
            {"std", d.std},                  {"intervals", iv},
            {"weights", d.weights},          {"side", d.side},
            {"levels", d.levels},            {"pattern_seed", d.pattern_seed},
            {"patterns", d.patterns},        {"train_size", d.train_size},
            {"heldout_size", d.heldout_size}};
}

inline ModelSpec model_from_json(const json& j)
{
    detail::reject_unknown(j, "model",
                           {"kind", "flows", "hidden", "sigma", "learn_theta", "coeff", "actnorm", "logit_alpha",
                            "conv_multiplier", "kernel", "squeeze_factor"});
    ModelSpec m;
    detail::read_enum(j, "kind", m.kind, "model", detail::kModelKinds);
    detail::read(j, "flows", m.flows, "model");
    detail::read(j, "hidden", m.hidden, "model");
    detail::read(j, "sigma", m.sigma, "model");
    detail::read(j, "learn_theta", m.learn_theta, "model");
    detail::read(j, "coeff", m.coeff, "model");
    detail::read(j, "actnorm", m.actnorm, "model");
    detail::read(j, "logit_alpha", m.logit_alpha, "model");
    detail::read(j, "conv_multiplier", m.conv_multiplier, "model");
    detail::read(j, "kernel", m.kernel, "model");
    detail::read(j, "squeeze_factor", m.squeeze_factor, "model");
    if (!(m.sigma >= 0.0 && m.sigma < 1.0))
        throw ConfigError("model.sigma must lie in [0, 1)");
    if (!(m.coeff > 0.0 && m.coeff < 1.0))
        throw ConfigError("model.coeff must lie in (0, 1)");
    if (!(m.logit_alpha >= 0.0 && m.logit_alpha < 0.5))
        throw ConfigError("model.logit_alpha must lie in [0, 0.5)");
    if (m.kernel % 2 == 0)
        throw ConfigError("model.kernel must be odd");
    return m;
}

inline json to_json(const ModelSpec& m)
{
    return {{"kind", to_string(m.kind)},
            {"flows", m.flows},
            {"hidden", m.hidden},
            {"sigma", m.sigma},
            {"learn_theta", m.learn_theta},
            {"coeff", m.coeff},
            {"actnorm", m.actnorm},
            {"logit_alpha", m.logit_alpha},
            {"conv_multiplier", m.conv_multiplier},
            {"kernel", m.kernel},
            {"squeeze_factor", m.squeeze_factor}};
}

inline TrainConfig train_from_json(const json& j)
{
    detail::reject_unknown(j, "train",
                           {"batch_size", "learning_rate", "updates", "optimizer", "polyak_decay", "power_iters",
                            "power_tol"});
    TrainConfig t;
    detail::read(j, "batch_size", t.batch_size, "train");
    detail::read(j, "learning_rate", t.learning_rate, "train");
    detail::read(j, "updates", t.updates, "train");
    detail::read_enum(j, "optimizer", t.optimizer, "train", detail::kOptimizerKinds);
    detail::read(j, "polyak_decay", t.polyak_decay, "train");
    detail::read(j, "power_iters", t.power_iters, "train");
    detail::read(j, "power_tol", t.power_tol, "train");
    if (t.batch_size < 2)
        throw ConfigError("train.batch_size must be at least 2");
    if (!(t.learning_rate > 0.0))
        throw ConfigError("train.learning_rate must be positive");
    if (!(t.polyak_decay >= 0.0 && t.polyak_decay < 1.0))
        throw ConfigError("train.polyak_decay must lie in [0, 1)");
    if (t.power_iters < 1)
        throw ConfigError("train.power_iters must be at least 1");
    return t;
}

inline json to_json(const TrainConfig& t)
{
    return {{"batch_size", t.batch_size},     {"learning_rate", t.learning_rate},
            {"updates", t.updates},           {"optimizer", to_string(t.optimizer)},
            {"polyak_decay", t.polyak_decay}, {"power_iters", t.power_iters},
            {"power_tol", t.power_tol}};
}

inline ExperimentConfig config_from_json(const json& j)
{
    detail::reject_unknown(j, "config", {"seed", "dataset", "model", "train"});
    ExperimentConfig c;
    detail::read(j, "seed", c.seed, "config");
    if (j.contains("dataset"))
        c.dataset = dataset_from_json(j.at("dataset"));
    if (j.contains("model"))
        c.model = model_from_json(j.at("model"));
    if (j.contains("train"))
        c.train = train_from_json(j.at("train"));
    c.train.seed = c.seed;
    return c;
}

/// Full echo with every field explicit.
inline json to_json(const ExperimentConfig& c)
{
    return {{"seed", c.seed}, {"dataset", to_json(c.dataset)}, {"model", to_json(c.model)}, {"train", to_json(c.train)}};
}

inline ExperimentConfig parse_config(const std::string& text)
{
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return config_from_json(j);
}

inline ExperimentConfig load_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return parse_config(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Model construction

/// Builds the chain for `spec` over data of shape `shape`. Dense kinds use
/// an actnorm before and after every flow; AR flows are interleaved with an
/// order reversal so every coordinate gets conditioned on the others.
inline FlowChain build_model(const ModelSpec& spec, const Shape& shape, bool logit, Rng& rng)
{
    FlowChain c;
    c.input_shape = shape;
    const std::size_t dim = shape.size();
    auto add_norm = [&](std::size_t d) {
        if (spec.actnorm)
            c.steps.push_back(ActNorm::identity(d, true));
    };
    if (logit)
        c.steps.push_back(LogitTransform{spec.logit_alpha});

    if (spec.kind == ModelKind::QuarConv) {
        Shape cur = shape;
        add_norm(dim);
        const std::size_t before = spec.squeeze_factor > 1 ? spec.flows / 2 : spec.flows;
        for (std::size_t f = 0; f < spec.flows; ++f) {
            if (f == before && spec.squeeze_factor > 1) {
                c.steps.push_back(SqueezeStep{spec.squeeze_factor});
                cur = squeezed(cur, spec.squeeze_factor);
            }
            c.steps.push_back(
                make_quar_conv_block(cur, spec.conv_multiplier, spec.kernel, spec.sigma, spec.learn_theta, rng));
            add_norm(dim);
        }
        return c;
    }

    std::vector<std::size_t> multipliers;
    for (std::size_t w : spec.hidden) {
        if (spec.kind != ModelKind::Residual && (w == 0 || w % dim != 0))
            throw ConfigError("model.hidden: width " + std::to_string(w) + " is not a positive multiple of dimension " +
                              std::to_string(dim));
        multipliers.push_back(w / dim);
    }
    add_norm(dim);
    for (std::size_t f = 0; f < spec.flows; ++f) {
        switch (spec.kind) {
        case ModelKind::Quar:
            c.steps.push_back(make_quar_block(GroupedLayout{dim, multipliers}, spec.sigma, spec.learn_theta, rng));
            break;
        case ModelKind::Residual:
            c.steps.push_back(make_residual_block(dim, spec.hidden, spec.coeff, rng));
            break;
        case ModelKind::ARAffine:
            if (f > 0)
                c.steps.push_back(ReverseStep{});
            c.steps.push_back(make_ar_flow(dim, multipliers, rng));
            break;
        case ModelKind::QuarConv:
            break;
        }
        add_norm(dim);
    }
    return c;
}

inline FlowChain build_model(const ExperimentConfig& cfg)
{
    Rng rng(cfg.seed, 0);
    return build_model(cfg.model, cfg.dataset.shape(), cfg.dataset.kind == DatasetKind::ToyImages, rng);
}

} // namespace quar

#endif // QUAR_CONFIG_HPP
