#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "comemo/model.hpp"

namespace comemo {

// Checkpoint file layout: 8-byte magic, little-endian u64 manifest length,
// JSON manifest (config + tensor names/shapes/dtype), then the raw f32
// little-endian payload in manifest order. Master precision is double; the
// payload is stored in f32, so save(load(file)) reproduces the file exactly.
inline constexpr char kCheckpointMagic[8] = {'C', 'M', 'M', 'O', 'C', 'K', 'P', 'T'};
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
    return nlohmann::json{{"d_model", cfg.d_model},
                          {"n_heads", cfg.n_heads},
                          {"n_layers", cfg.n_layers},
                          {"mixin_every", cfg.mixin_every},
                          {"vocab_size", cfg.vocab_size},
                          {"d_vit", cfg.d_vit},
                          {"d_ff", cfg.d_ff},
                          {"shuffle_factor", cfg.shuffle_factor},
                          {"rope_theta", cfg.rope_theta},
                          {"context_detail", to_string(cfg.context_detail)},
                          {"memory_detail", to_string(cfg.memory_detail)},
                          {"use_memory", cfg.use_memory}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.d_model = j.at("d_model").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.mixin_every = j.at("mixin_every").get<int>();
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.d_vit = j.at("d_vit").get<int>();
    cfg.d_ff = j.at("d_ff").get<int>();
    cfg.shuffle_factor = j.at("shuffle_factor").get<int>();
    cfg.rope_theta = j.at("rope_theta").get<double>();
    cfg.context_detail = detail_from(j.at("context_detail").get<std::string>());
    cfg.memory_detail = detail_from(j.at("memory_detail").get<std::string>());
    cfg.use_memory = j.at("use_memory").get<bool>();
    validate_config(cfg);
    return cfg;
}

inline std::string serialize_checkpoint(const ModelParams& params) {
    nlohmann::json manifest;
    manifest["format"] = "comemo-checkpoint";
    manifest["version"] = kCheckpointVersion;
    manifest["config"] = config_to_json(params.cfg);
    nlohmann::json tensors = nlohmann::json::array();
    params.for_each([&](const std::string& name, const Tensor& t) {
        tensors.push_back({{"name", name}, {"shape", t.shape}, {"dtype", "f32"}});
    });
    manifest["tensors"] = std::move(tensors);
    std::string mjson = manifest.dump();

    std::string out;
    out.append(kCheckpointMagic, sizeof(kCheckpointMagic));
    uint64_t mlen = mjson.size();
    out.append(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
    out += mjson;
    params.for_each([&](const std::string&, const Tensor& t) {
        for (double x : t.v) {
            float f = static_cast<float>(x);
            out.append(reinterpret_cast<const char*>(&f), sizeof(f));
        }
    });
    return out;
}

inline void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
    std::string bytes = serialize_checkpoint(params);
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw CheckpointError("cannot open for writing: " + tmp.string());
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw CheckpointError("short write: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline ModelParams deserialize_checkpoint(const std::string& bytes) {
    if (bytes.size() < sizeof(kCheckpointMagic) + sizeof(uint64_t) ||
        std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
        throw CheckpointError("not a checkpoint file (bad magic)");
    uint64_t mlen;
    std::memcpy(&mlen, bytes.data() + sizeof(kCheckpointMagic), sizeof(mlen));
    size_t header = sizeof(kCheckpointMagic) + sizeof(uint64_t);
    if (bytes.size() < header + mlen) throw CheckpointError("truncated manifest");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.substr(header, mlen));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("manifest is not valid JSON: ") + e.what());
    }
    if (manifest.value("format", "") != "comemo-checkpoint")
        throw CheckpointError("unknown checkpoint format tag");
    if (manifest.value("version", -1) != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version");

    ModelParams params = make_params(config_from_json(manifest.at("config")));
    const nlohmann::json& tensors = manifest.at("tensors");
    if (static_cast<int>(tensors.size()) != params.tensor_count())
        throw CheckpointError("manifest lists " + std::to_string(tensors.size()) + " tensors, config implies " +
                              std::to_string(params.tensor_count()));

    // expected order/shapes from the parameter registry
    std::vector<std::string> names;
    std::vector<Tensor*> slots;
    params.for_each([&](const std::string& n, Tensor& t) {
        names.push_back(n);
        slots.push_back(&t);
    });
    size_t off = header + mlen;
    for (size_t i = 0; i < slots.size(); ++i) {
        const nlohmann::json& e = tensors.at(i);
        std::string name = e.at("name").get<std::string>();
        if (name != names[i])
            throw CheckpointError("unexpected tensor at index " + std::to_string(i) + ": got '" + name +
                                      "', expected '" + names[i] + "'",
                                  name);
        if (e.at("dtype").get<std::string>() != "f32") throw CheckpointError("unsupported dtype", name);
        std::vector<int64_t> shape = e.at("shape").get<std::vector<int64_t>>();
        if (shape != slots[i]->shape)
            throw CheckpointError("shape mismatch against model config", name);
        size_t need = slots[i]->v.size() * sizeof(float);
        if (off + need > bytes.size()) throw CheckpointError("payload truncated", name);
        const char* src = bytes.data() + off;
        for (size_t k = 0; k < slots[i]->v.size(); ++k) {
            float f;
            std::memcpy(&f, src + k * sizeof(float), sizeof(float));
            slots[i]->v[k] = static_cast<double>(f);
        }
        off += need;
    }
    if (off != bytes.size()) throw CheckpointError("trailing bytes after payload");
    return params;
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

}  // namespace comemo
