#include <cstring>
#include <fstream>

#include <zlib.h>

#include "rpm/model.hpp"

namespace rpm::model {

namespace {

constexpr char kMagic[4] = {'R', 'P', 'G', 'C'};
constexpr std::uint32_t kVersion = 1;

void append_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t read_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void append_tensor(std::string& payload, const Tensor& t) {
    static_assert(sizeof(double) == 8);
    const std::size_t bytes = t.numel() * sizeof(double);
    const std::size_t off = payload.size();
    payload.resize(off + bytes);
    std::memcpy(payload.data() + off, t.data(), bytes);
}

struct NamedTensorView {
    std::string name;
    Shape shape;
    const Tensor* tensor;
};

std::vector<NamedTensorView> model_tensors(const LatentModel& model) {
    std::vector<NamedTensorView> out;
    for (const auto* p : model.store().params()) out.push_back({p->name, p->value.shape(), &p->value});
    auto& mutable_store = const_cast<nn::ParamStore&>(model.store());
    for (auto& [name, run] : mutable_store.runnings()) {
        out.push_back({name + ".mean", run->mean.shape(), &run->mean});
        out.push_back({name + ".var", run->var.shape(), &run->var});
    }
    return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const LatentModel& model,
                     const TrainingState* training) {
    nlohmann::json header;
    header["config"] = model.config().to_json();
    nlohmann::json dir = nlohmann::json::array();
    std::string payload;

    auto add = [&](const std::string& name, const Tensor& t) {
        dir.push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size()}});
        append_tensor(payload, t);
    };
    for (const auto& v : model_tensors(model)) add(v.name, *v.tensor);
    if (training && training->present) {
        for (const auto& [name, t] : training->extra_tensors) add("training." + name, t);
        header["training"] = training->state;
    }
    header["tensors"] = dir;

    const std::string hs = header.dump();
    std::string blob;
    blob.append(kMagic, 4);
    append_u32(blob, kVersion);
    append_u32(blob, static_cast<std::uint32_t>(hs.size()));
    blob += hs;
    blob += payload;
    std::uint32_t crc = static_cast<std::uint32_t>(
        crc32(0, reinterpret_cast<const Bytef*>(hs.data()), static_cast<uInt>(hs.size())));
    crc = static_cast<std::uint32_t>(crc32(
        crc, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size())));
    append_u32(blob, crc);

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path);
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!f) throw IoError("checkpoint write failed: " + path);
}

std::unique_ptr<LatentModel> load_checkpoint(const std::string& path, TrainingState* training) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (blob.size() < 16) throw IoError("checkpoint truncated: " + path);
    if (std::memcmp(blob.data(), kMagic, 4) != 0)
        throw IoError("bad checkpoint magic in " + path);
    const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
    const std::uint32_t version = read_u32(bytes + 4);
    if (version != kVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
    const std::uint32_t hlen = read_u32(bytes + 8);
    if (blob.size() < 16 + static_cast<std::size_t>(hlen)) throw IoError("checkpoint truncated: " + path);
    const char* hstart = blob.data() + 12;
    const char* pstart = hstart + hlen;
    const std::size_t plen = blob.size() - 12 - hlen - 4;
    const std::uint32_t stored_crc = read_u32(bytes + blob.size() - 4);
    std::uint32_t crc = static_cast<std::uint32_t>(
        crc32(0, reinterpret_cast<const Bytef*>(hstart), static_cast<uInt>(hlen)));
    crc = static_cast<std::uint32_t>(
        crc32(crc, reinterpret_cast<const Bytef*>(pstart), static_cast<uInt>(plen)));
    if (crc != stored_crc) throw IoError("checkpoint CRC mismatch in " + path);

    nlohmann::json header = nlohmann::json::parse(std::string(hstart, hlen));
    auto model = std::make_unique<LatentModel>(ModelConfig::from_json(header.at("config")));

    auto read_tensor = [&](const nlohmann::json& entry) {
        const Shape shape = entry.at("shape").get<Shape>();
        const std::size_t off = entry.at("offset").get<std::size_t>();
        Tensor t(shape);
        const std::size_t bytes2 = t.numel() * sizeof(double);
        if (off + bytes2 > plen) throw IoError("checkpoint tensor out of bounds in " + path);
        std::memcpy(t.data(), pstart + off, bytes2);
        return t;
    };

    if (training) {
        training->present = header.contains("training");
        training->extra_tensors.clear();
        if (training->present) training->state = header["training"];
    }

    std::size_t applied = 0;
    auto views = model_tensors(*model);
    for (const auto& entry : header.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        if (name.rfind("training.", 0) == 0) {
            if (training) training->extra_tensors.emplace_back(name.substr(9), read_tensor(entry));
            continue;
        }
        bool found = false;
        for (const auto& v : views) {
            if (v.name == name) {
                Tensor t = read_tensor(entry);
                if (t.shape() != v.shape)
                    throw IoError("checkpoint tensor shape mismatch for " + name + " in " + path);
                *const_cast<Tensor*>(v.tensor) = std::move(t);
                found = true;
                ++applied;
                break;
            }
        }
        if (!found) throw IoError("checkpoint tensor " + name + " unknown to this model");
    }
    if (applied != views.size())
        throw IoError("checkpoint is missing tensors for this model in " + path);
    return model;
}

}  // namespace rpm::model
