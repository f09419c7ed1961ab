// Copyright (c) 2026 The movekit Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Self-describing tensor archive.
//
//   bytes 0..7    magic "MVKTARC1"
//   bytes 8..15   header length H, uint64 little-endian
//   next H bytes  UTF-8 JSON: {"meta": {...}, "tensors": [{"name","rows","cols"}, ...]}
//   remainder     tensors in header order, row-major IEEE-754 float64, little-endian
//
// Values are copied bit-for-bit, so save/load is an exact round trip.

#include "movekit/core.hpp"
#include "movekit/moe_layer.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace movekit {

static_assert(std::endian::native == std::endian::little, "archive format assumes a little-endian host");

class TensorArchive {
public:
    nlohmann::json meta = nlohmann::json::object();

    void put(const std::string& name, const Matrix& m) {
        if (index_.count(name)) throw DataError("archive: duplicate tensor '" + name + "'");
        index_[name] = entries_.size();
        entries_.push_back({name, m});
    }
    void put(const std::string& name, const Vector& v) { put(name, Matrix(v)); }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const Matrix& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw DataError("archive: missing tensor '" + name + "'");
        return entries_[it->second].value;
    }

    std::size_t size() const { return entries_.size(); }

    std::string to_bytes() const {
        nlohmann::json header;
        header["meta"] = meta;
        header["tensors"] = nlohmann::json::array();
        for (const auto& e : entries_)
            header["tensors"].push_back({{"name", e.name}, {"rows", e.value.rows()}, {"cols", e.value.cols()}});
        const std::string text = header.dump();
        std::string out = "MVKTARC1";
        const std::uint64_t len = text.size();
        out.append(reinterpret_cast<const char*>(&len), sizeof len);
        out += text;
        for (const auto& e : entries_) {
            for (Eigen::Index i = 0; i < e.value.rows(); ++i)
                for (Eigen::Index j = 0; j < e.value.cols(); ++j) {
                    const double v = e.value(i, j);
                    out.append(reinterpret_cast<const char*>(&v), sizeof v);
                }
        }
        return out;
    }

    static TensorArchive from_bytes(const std::string& bytes) {
        if (bytes.size() < 16 || bytes.compare(0, 8, "MVKTARC1") != 0)
            throw DataError("archive: bad magic");
        std::uint64_t len = 0;
        std::memcpy(&len, bytes.data() + 8, sizeof len);
        if (16 + len > bytes.size()) throw DataError("archive: truncated header");
        const auto header = nlohmann::json::parse(bytes.substr(16, len));
        TensorArchive ar;
        ar.meta = header.at("meta");
        std::size_t pos = 16 + len;
        for (const auto& t : header.at("tensors")) {
            const auto rows = t.at("rows").get<Eigen::Index>();
            const auto cols = t.at("cols").get<Eigen::Index>();
            const std::size_t nbytes = static_cast<std::size_t>(rows * cols) * sizeof(double);
            if (pos + nbytes > bytes.size()) throw DataError("archive: truncated tensor data");
            Matrix m(rows, cols);
            for (Eigen::Index i = 0; i < rows; ++i)
                for (Eigen::Index j = 0; j < cols; ++j) {
                    double v;
                    std::memcpy(&v, bytes.data() + pos, sizeof v);
                    pos += sizeof v;
                    m(i, j) = v;
                }
            ar.put(t.at("name").get<std::string>(), m);
        }
        if (pos != bytes.size()) throw DataError("archive: trailing bytes");
        return ar;
    }

    void save(const std::filesystem::path& path) const {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        std::ofstream f(path, std::ios::binary);
        if (!f) throw DataError("archive: cannot open " + path.string() + " for writing");
        const std::string b = to_bytes();
        f.write(b.data(), static_cast<std::streamsize>(b.size()));
    }

    static TensorArchive load(const std::filesystem::path& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw DataError("archive: cannot open " + path.string());
        std::ostringstream ss;
        ss << f.rdbuf();
        return from_bytes(ss.str());
    }

private:
    struct Entry {
        std::string name;
        Matrix value;
    };
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// MoVE layer <-> archive. Metadata lives under meta["layers"][prefix].

inline void put_layer(TensorArchive& ar, const std::string& prefix, const MoVELayer& layer) {
    nlohmann::json info = {{"site", std::string(to_string(layer.site))},
                           {"n_experts", layer.n_experts()},
                           {"rank", layer.rank()},
                           {"in_dim", layer.in_dim()},
                           {"out_dim", layer.out_dim()},
                           {"alpha", layer.alpha()},
                           {"manifolds", nlohmann::json::array()}};
    for (const auto& e : layer.experts) info["manifolds"].push_back(std::string(to_string(e.manifold)));
    ar.meta["layers"][prefix] = info;
    ar.put(prefix + ".base", layer.base_weight);
    for (int i = 0; i < layer.n_experts(); ++i) {
        ar.put(prefix + ".expert" + std::to_string(i) + ".A", layer.experts[i].A);
        ar.put(prefix + ".expert" + std::to_string(i) + ".B", layer.experts[i].B);
    }
    if (layer.n_experts() > 0) {
        ar.put(prefix + ".router.weight", layer.router.weight);
        ar.put(prefix + ".router.bias", layer.router.bias);
    }
}

inline MoVELayer get_layer(const TensorArchive& ar, const std::string& prefix) {
    if (!ar.meta.contains("layers") || !ar.meta["layers"].contains(prefix))
        throw DataError("archive: no layer '" + prefix + "'");
    const auto& info = ar.meta["layers"][prefix];
    MoVELayer layer;
    layer.site = site_from_string(info.at("site").get<std::string>());
    layer.base_weight = ar.get(prefix + ".base");
    const int n = info.at("n_experts").get<int>();
    const int rank = info.at("rank").get<int>();
    const double alpha = info.at("alpha").get<double>();
    for (int i = 0; i < n; ++i) {
        LoRAExpert e;
        e.A = ar.get(prefix + ".expert" + std::to_string(i) + ".A");
        e.B = ar.get(prefix + ".expert" + std::to_string(i) + ".B");
        e.rank = rank;
        e.scale = alpha;
        e.manifold = manifold_from_string(info.at("manifolds").at(i).get<std::string>());
        layer.experts.push_back(std::move(e));
    }
    if (n > 0) {
        layer.router.weight = ar.get(prefix + ".router.weight");
        layer.router.bias = ar.get(prefix + ".router.bias");
    }
    layer.validate();
    return layer;
}

} // namespace movekit
