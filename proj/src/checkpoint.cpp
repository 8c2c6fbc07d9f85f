#include "lapkv/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace lapkv {

namespace {

constexpr char kMagic[8] = {'L', 'A', 'P', 'K', 'V', 'B', 'I', 'N'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_raw(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_raw(std::ifstream& in, T& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
}

}  // namespace

size_t NamedTensor::element_count() const {
    size_t n = 1;
    for (int64_t d : shape) n *= static_cast<size_t>(d);
    return n;
}

void Container::save(const std::string& path) const {
    nlohmann::json header;
    header["kind"] = kind;
    header["meta"] = meta;
    nlohmann::json index = nlohmann::json::array();
    for (const NamedTensor& t : tensors) {
        index.push_back({{"name", t.name}, {"dtype", t.dtype}, {"shape", t.shape}});
    }
    header["tensors"] = index;
    const std::string hs = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out.write(kMagic, sizeof(kMagic));
    write_raw(out, kVersion);
    const uint64_t hlen = hs.size();
    write_raw(out, hlen);
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const NamedTensor& t : tensors) {
        if (t.dtype == "f64") {
            out.write(reinterpret_cast<const char*>(t.f64.data()),
                      static_cast<std::streamsize>(t.f64.size() * sizeof(double)));
        } else if (t.dtype == "i64") {
            out.write(reinterpret_cast<const char*>(t.i64.data()),
                      static_cast<std::streamsize>(t.i64.size() * sizeof(int64_t)));
        } else {
            throw std::runtime_error("container: unknown dtype " + t.dtype);
        }
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

Container Container::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw std::runtime_error("not a container file: " + path);
    }
    uint32_t version = 0;
    read_raw(in, version);
    if (version != kVersion) {
        throw std::runtime_error("unsupported container version in " + path);
    }
    uint64_t hlen = 0;
    read_raw(in, hlen);
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    nlohmann::json header = nlohmann::json::parse(hs);

    Container c;
    c.kind = header.at("kind").get<std::string>();
    c.meta = header.at("meta");
    for (const auto& entry : header.at("tensors")) {
        NamedTensor t;
        t.name = entry.at("name").get<std::string>();
        t.dtype = entry.at("dtype").get<std::string>();
        t.shape = entry.at("shape").get<std::vector<int64_t>>();
        const size_t n = t.element_count();
        if (t.dtype == "f64") {
            t.f64.resize(n);
            in.read(reinterpret_cast<char*>(t.f64.data()),
                    static_cast<std::streamsize>(n * sizeof(double)));
        } else if (t.dtype == "i64") {
            t.i64.resize(n);
            in.read(reinterpret_cast<char*>(t.i64.data()),
                    static_cast<std::streamsize>(n * sizeof(int64_t)));
        } else {
            throw std::runtime_error("container: unknown dtype " + t.dtype);
        }
        c.tensors.push_back(std::move(t));
    }
    if (!in) throw std::runtime_error("truncated container: " + path);
    return c;
}

const NamedTensor& Container::get(const std::string& name) const {
    for (const NamedTensor& t : tensors) {
        if (t.name == name) return t;
    }
    throw std::runtime_error("container: missing tensor " + name);
}

namespace {

NamedTensor tensor_of(const std::string& name, const Matrix& m) {
    NamedTensor t;
    t.name = name;
    t.dtype = "f64";
    t.shape = {m.rows, m.cols};
    t.f64 = m.data;
    return t;
}

NamedTensor tensor_of(const std::string& name, const std::vector<double>& v) {
    NamedTensor t;
    t.name = name;
    t.dtype = "f64";
    t.shape = {static_cast<int64_t>(v.size())};
    t.f64 = v;
    return t;
}

NamedTensor tensor_of(const std::string& name, const std::vector<int64_t>& v) {
    NamedTensor t;
    t.name = name;
    t.dtype = "i64";
    t.shape = {static_cast<int64_t>(v.size())};
    t.i64 = v;
    return t;
}

Matrix matrix_of(const NamedTensor& t) {
    if (t.shape.size() != 2) throw std::runtime_error("container: expected a matrix for " + t.name);
    Matrix m(static_cast<int>(t.shape[0]), static_cast<int>(t.shape[1]));
    m.data = t.f64;
    return m;
}

}  // namespace

void save_model(const std::string& path, const ToyTransformer& model) {
    const ModelConfig& cfg = model.config;
    Container c;
    c.kind = "model";
    c.meta = {{"num_layers", cfg.num_layers},
              {"num_heads", cfg.num_heads},
              {"d_model", cfg.d_model},
              {"vocab_size", cfg.vocab_size},
              {"max_position", cfg.max_position},
              {"rope_base", cfg.rope_base},
              {"attn_reduce", cfg.attn_reduce == AttnReduce::Mean ? "mean" : "sum"}};
    c.tensors.push_back(tensor_of("embed", model.embed));
    c.tensors.push_back(tensor_of("unembed", model.unembed));
    c.tensors.push_back(tensor_of("final_gain", model.final_gain));
    for (int l = 0; l < cfg.num_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        const LayerWeights& lw = model.layers[l];
        c.tensors.push_back(tensor_of(p + "wq", lw.wq));
        c.tensors.push_back(tensor_of(p + "wk", lw.wk));
        c.tensors.push_back(tensor_of(p + "wv", lw.wv));
        c.tensors.push_back(tensor_of(p + "wo", lw.wo));
        c.tensors.push_back(tensor_of(p + "w_up", lw.w_up));
        c.tensors.push_back(tensor_of(p + "w_down", lw.w_down));
        c.tensors.push_back(tensor_of(p + "attn_gain", lw.attn_gain));
        c.tensors.push_back(tensor_of(p + "mlp_gain", lw.mlp_gain));
    }
    c.save(path);
}

ToyTransformer load_model(const std::string& path) {
    Container c = Container::load(path);
    if (c.kind != "model") throw std::runtime_error("not a model container: " + path);
    ToyTransformer m;
    m.config.num_layers = c.meta.at("num_layers").get<int>();
    m.config.num_heads = c.meta.at("num_heads").get<int>();
    m.config.d_model = c.meta.at("d_model").get<int>();
    m.config.vocab_size = c.meta.at("vocab_size").get<int>();
    m.config.max_position = c.meta.at("max_position").get<int>();
    m.config.rope_base = c.meta.at("rope_base").get<double>();
    m.config.attn_reduce =
        c.meta.at("attn_reduce").get<std::string>() == "sum" ? AttnReduce::Sum : AttnReduce::Mean;
    m.embed = matrix_of(c.get("embed"));
    m.unembed = matrix_of(c.get("unembed"));
    m.final_gain = c.get("final_gain").f64;
    m.layers.resize(m.config.num_layers);
    for (int l = 0; l < m.config.num_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        LayerWeights& lw = m.layers[l];
        lw.wq = matrix_of(c.get(p + "wq"));
        lw.wk = matrix_of(c.get(p + "wk"));
        lw.wv = matrix_of(c.get(p + "wv"));
        lw.wo = matrix_of(c.get(p + "wo"));
        lw.w_up = matrix_of(c.get(p + "w_up"));
        lw.w_down = matrix_of(c.get(p + "w_down"));
        lw.attn_gain = c.get(p + "attn_gain").f64;
        lw.mlp_gain = c.get(p + "mlp_gain").f64;
    }
    m.validate();
    return m;
}

void save_memory(const std::string& path, const KvMemory& memory) {
    Container c;
    c.kind = "memory";
    const int d = memory.num_layers() > 0 ? memory.layers[0].keys.cols : 0;
    c.meta = {{"num_layers", memory.num_layers()}, {"d_model", d}};
    for (int l = 0; l < memory.num_layers(); ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        const KvLayer& layer = memory.layers[l];
        c.tensors.push_back(tensor_of(p + "keys", layer.keys));
        c.tensors.push_back(tensor_of(p + "values", layer.values));
        c.tensors.push_back(tensor_of(p + "positions", layer.positions));
        std::vector<int64_t> roles(layer.roles.size());
        for (size_t i = 0; i < roles.size(); ++i) roles[i] = static_cast<int64_t>(layer.roles[i]);
        c.tensors.push_back(tensor_of(p + "roles", roles));
        std::vector<int64_t> chunks(layer.source_chunk.begin(), layer.source_chunk.end());
        c.tensors.push_back(tensor_of(p + "chunks", chunks));
    }
    c.save(path);
}

KvMemory load_memory(const std::string& path) {
    Container c = Container::load(path);
    if (c.kind != "memory") throw std::runtime_error("not a memory container: " + path);
    const int L = c.meta.at("num_layers").get<int>();
    const int d = c.meta.at("d_model").get<int>();
    KvMemory m = KvMemory::empty(L, d);
    for (int l = 0; l < L; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        KvLayer& layer = m.layers[l];
        layer.keys = matrix_of(c.get(p + "keys"));
        layer.values = matrix_of(c.get(p + "values"));
        layer.positions = c.get(p + "positions").i64;
        for (int64_t r : c.get(p + "roles").i64) {
            layer.roles.push_back(static_cast<TokenRole>(r));
        }
        for (int64_t s : c.get(p + "chunks").i64) {
            layer.source_chunk.push_back(static_cast<int>(s));
        }
    }
    m.validate();
    return m;
}

}  // namespace lapkv
