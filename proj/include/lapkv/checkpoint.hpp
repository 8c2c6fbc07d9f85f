#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "lapkv/kvmem.hpp"
#include "lapkv/model.hpp"

namespace lapkv {

// Self-describing binary container: 8-byte magic "LAPKVBIN", u32 format
// version, u64 JSON header length, the JSON header (kind, metadata and a
// tensor index with names/dtypes/shapes), then the raw tensor data in index
// order as little-endian 64-bit values.
struct NamedTensor {
    std::string name;
    std::string dtype;  // "f64" or "i64"
    std::vector<int64_t> shape;
    std::vector<double> f64;
    std::vector<int64_t> i64;

    size_t element_count() const;
};

struct Container {
    std::string kind;
    nlohmann::json meta;
    std::vector<NamedTensor> tensors;

    void save(const std::string& path) const;
    static Container load(const std::string& path);
    const NamedTensor& get(const std::string& name) const;
};

void save_model(const std::string& path, const ToyTransformer& model);
ToyTransformer load_model(const std::string& path);

void save_memory(const std::string& path, const KvMemory& memory);
KvMemory load_memory(const std::string& path);

}  // namespace lapkv
