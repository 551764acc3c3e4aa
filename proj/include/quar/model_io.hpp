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

#ifndef QUAR_MODEL_IO_HPP
#define QUAR_MODEL_IO_HPP

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include "chain.hpp"
#include "config.hpp"
#include "errors.hpp"

namespace quar {

// Layout, all integers and floats little-endian:
//   "QFLW" u32:version
//   u64:len  config echo (JSON text)
//   parameter table: u64:count, then per array
//       u32:len name, u64:rows, u64:cols, rows*cols f64
//   u64:count actnorm flags, one byte each
//   spectral table: u64:count, then per layer
//       u32:len name, u64:n u, u64:m v, f64 sigma_estimate, f64 noise_scale
//   u8:has_polyak, then a second parameter table and spectral table when set
inline constexpr char kModelMagic[4] = {'Q', 'F', 'L', 'W'};
inline constexpr std::uint32_t kModelVersion = 1;

struct ModelFile {
    json config;
    FlowChain model;
    std::optional<FlowChain> polyak;
};

namespace detail {

class Writer {
public:
    void bytes(const void* p, std::size_t n)
    {
        const auto* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    template <class U>
    void uint(U v)
    {
        for (std::size_t i = 0; i < sizeof(U); ++i)
            buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void f64(double d) { uint(std::bit_cast<std::uint64_t>(d)); }
    void str(const std::string& s)
    {
        uint(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    const std::vector<char>& data() const { return buf_; }

private:
    std::vector<char> buf_;
};

class Reader {
public:
    explicit Reader(std::vector<char> data) : buf_(std::move(data)) {}

    void need(std::size_t n, const char* what) const
    {
        if (buf_.size() - pos_ < n)
            throw TruncatedFile(std::string("model file truncated while reading ") + what);
    }
    template <class U>
    U uint(const char* what)
    {
        need(sizeof(U), what);
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i)
            v |= static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += sizeof(U);
        return v;
    }
    double f64(const char* what) { return std::bit_cast<double>(uint<std::uint64_t>(what)); }
    std::string str(const char* what)
    {
        const auto n = uint<std::uint32_t>(what);
        need(n, what);
        std::string s(buf_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    std::string raw(std::size_t n, const char* what)
    {
        need(n, what);
        std::string s(buf_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    bool at_end() const { return pos_ == buf_.size(); }

private:
    std::vector<char> buf_;
    std::size_t pos_ = 0;
};

inline void write_params(Writer& w, const FlowChain& chain)
{
    std::uint64_t count = 0;
    visit_params(chain, [&](const std::string&, const std::vector<double>&, std::size_t, std::size_t) { ++count; });
    w.uint(count);
    visit_params(chain, [&](const std::string& name, const std::vector<double>& v, std::size_t rows, std::size_t cols) {
        w.str(name);
        w.uint(static_cast<std::uint64_t>(rows));
        w.uint(static_cast<std::uint64_t>(cols));
        for (double x : v)
            w.f64(x);
    });
}

inline void read_params(Reader& r, FlowChain& chain)
{
    std::uint64_t expected = 0;
    visit_params(chain, [&](const std::string&, const std::vector<double>&, std::size_t, std::size_t) { ++expected; });
    const auto count = r.uint<std::uint64_t>("parameter count");
    if (count != expected)
        throw ShapeMismatch("model file has " + std::to_string(count) + " parameter arrays, architecture expects " +
                            std::to_string(expected));
    visit_params(chain, [&](const std::string& name, std::vector<double>& v, std::size_t rows, std::size_t cols) {
        const auto got = r.str("parameter name");
        if (got != name)
            throw ShapeMismatch("parameter '" + name + "': file holds '" + got + "' at this position");
        const auto fr = r.uint<std::uint64_t>("parameter shape");
        const auto fc = r.uint<std::uint64_t>("parameter shape");
        if (fr != rows || fc != cols)
            throw ShapeMismatch("parameter '" + name + "': file shape " + std::to_string(fr) + "x" +
                                std::to_string(fc) + ", expected " + std::to_string(rows) + "x" +
                                std::to_string(cols));
        r.need(v.size() * 8, "parameter values");
        for (double& x : v)
            x = r.f64("parameter values");
    });
}

inline void write_spectral(Writer& w, const FlowChain& chain)
{
    std::uint64_t n_spec = 0;
    visit_spectral(chain, [&](const std::string&, const SpectralState&) { ++n_spec; });
    w.uint(n_spec);
    visit_spectral(chain, [&](const std::string& name, const SpectralState& s) {
        w.str(name);
        w.uint(static_cast<std::uint64_t>(s.u.size()));
        for (double x : s.u)
            w.f64(x);
        w.uint(static_cast<std::uint64_t>(s.v.size()));
        for (double x : s.v)
            w.f64(x);
        w.f64(s.sigma_estimate);
        w.f64(s.noise_scale);
    });
}

inline void read_spectral(Reader& r, FlowChain& chain)
{
    std::uint64_t n_spec = 0;
    visit_spectral(chain, [&](const std::string&, const SpectralState&) { ++n_spec; });
    const auto file_spec = r.uint<std::uint64_t>("spectral count");
    if (file_spec != n_spec)
        throw ShapeMismatch("model file has " + std::to_string(file_spec) + " spectral states, architecture expects " +
                            std::to_string(n_spec));
    visit_spectral(chain, [&](const std::string& name, SpectralState& s) {
        const auto got = r.str("spectral name");
        if (got != name)
            throw ShapeMismatch("spectral state '" + name + "': file holds '" + got + "' at this position");
        const auto nu = r.uint<std::uint64_t>("spectral u");
        if (nu != s.u.size())
            throw ShapeMismatch("spectral state '" + name + "': u has length " + std::to_string(nu));
        r.need(nu * 8, "spectral u");
        for (double& x : s.u)
            x = r.f64("spectral u");
        const auto nv = r.uint<std::uint64_t>("spectral v");
        if (nv != s.v.size())
            throw ShapeMismatch("spectral state '" + name + "': v has length " + std::to_string(nv));
        r.need(nv * 8, "spectral v");
        for (double& x : s.v)
            x = r.f64("spectral v");
        s.sigma_estimate = r.f64("spectral sigma");
        s.noise_scale = r.f64("spectral noise");
    });
}

inline json read_header(Reader& r)
{
    if (r.raw(4, "magic") != std::string(kModelMagic, 4))
        throw FormatError("not a model file (bad magic)");
    const auto version = r.uint<std::uint32_t>("version");
    if (version != kModelVersion)
        throw VersionMismatch("model file version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(kModelVersion) + ")");
    const auto cfg_len = r.uint<std::uint64_t>("config length");
    const std::string cfg = r.raw(cfg_len, "config");
    try {
        return json::parse(cfg);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("model file config echo is not valid JSON: ") + e.what());
    }
}

} // namespace detail

inline std::vector<char> serialize_model(const json& config, const FlowChain& model, const FlowChain* polyak)
{
    detail::Writer w;
    w.bytes(kModelMagic, 4);
    w.uint(kModelVersion);
    const std::string cfg = config.dump();
    w.uint(static_cast<std::uint64_t>(cfg.size()));
    w.bytes(cfg.data(), cfg.size());
    detail::write_params(w, model);

    std::vector<char> flags;
    for (const auto& s : model.steps)
        if (const auto* a = std::get_if<ActNorm>(&s))
            flags.push_back(a->initialized ? 1 : 0);
    w.uint(static_cast<std::uint64_t>(flags.size()));
    w.bytes(flags.data(), flags.size());

    detail::write_spectral(w, model);

    w.uint(static_cast<std::uint8_t>(polyak ? 1 : 0));
    if (polyak) {
        detail::write_params(w, *polyak);
        detail::write_spectral(w, *polyak);
    }
    return w.data();
}

/// Fills parameters, actnorm flags, spectral states and the optional Polyak
/// shadow into `model`, whose architecture must match the file.
inline std::optional<FlowChain> deserialize_into(std::vector<char> data, FlowChain& model, json* config_out = nullptr)
{
    detail::Reader r(std::move(data));
    const json cfg = detail::read_header(r);
    if (config_out)
        *config_out = cfg;
    FlowChain loaded = model;
    detail::read_params(r, loaded);

    const auto n_flags = r.uint<std::uint64_t>("actnorm flag count");
    std::size_t n_act = 0;
    for (const auto& s : loaded.steps)
        n_act += std::holds_alternative<ActNorm>(s);
    if (n_flags != n_act)
        throw ShapeMismatch("model file has " + std::to_string(n_flags) + " actnorm steps, architecture expects " +
                            std::to_string(n_act));
    const std::string flags = r.raw(n_flags, "actnorm flags");
    std::size_t fi = 0;
    for (auto& s : loaded.steps)
        if (auto* a = std::get_if<ActNorm>(&s))
            a->initialized = flags[fi++] != 0;

    detail::read_spectral(r, loaded);

    std::optional<FlowChain> polyak;
    if (r.uint<std::uint8_t>("polyak flag")) {
        FlowChain p = loaded;
        detail::read_params(r, p);
        detail::read_spectral(r, p);
        polyak = std::move(p);
    }
    if (!r.at_end())
        throw FormatError("model file has trailing bytes");
    model = std::move(loaded);
    return polyak;
}

inline std::vector<char> read_file_bytes(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw FormatError("cannot open model file '" + path + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes to a temporary sibling and renames it into place.
inline void write_file_atomic(const std::string& path, const std::string& data)
{
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw std::runtime_error("cannot write '" + tmp + "'");
        out.write(data.data(), static_cast<std::streamsize>(data.size()));
        if (!out)
            throw std::runtime_error("write failed for '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline void save_model(const std::string& path, const json& config, const FlowChain& model,
                       const FlowChain* polyak = nullptr)
{
    const auto bytes = serialize_model(config, model, polyak);
    write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

/// Rebuilds the architecture from the embedded config, then loads into it.
inline ModelFile load_model(const std::string& path)
{
    auto bytes = read_file_bytes(path);
    detail::Reader header(bytes);
    const json cfg = detail::read_header(header);
    ModelFile mf;
    mf.config = cfg;
    try {
        mf.model = build_model(config_from_json(cfg));
    } catch (const ConfigError& e) {
        throw FormatError(std::string("model file config echo: ") + e.what());
    }
    mf.polyak = deserialize_into(std::move(bytes), mf.model);
    return mf;
}

} // namespace quar

#endif // QUAR_MODEL_IO_HPP
