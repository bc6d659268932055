#include "getmol/params_io.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace getmol {

namespace {

constexpr char kMagic[8] = {'G', 'E', 'T', 'P', 'A', 'R', 'v', '1'};

using Json = nlohmann::ordered_json;

}  // namespace

void atomic_write_file(const std::string& path, const std::string& contents) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw std::runtime_error("short write to " + tmp.string());
    }
    fs::rename(tmp, target);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void save_model(const GetModel& model, const std::string& path,
                const std::map<std::string, double>& meta) {
    GetModel& m = const_cast<GetModel&>(model);
    auto params = m.collect();

    Json index;
    index["format"] = 1;
    Json cfg;
    cfg["d_h"] = m.encoder.cfg.d_h;
    cfg["d_r"] = m.encoder.cfg.d_r;
    cfg["d_e"] = m.encoder.cfg.d_e;
    cfg["n_layers"] = m.encoder.cfg.n_layers;
    cfg["d_scalar"] = m.encoder.cfg.d_scalar;
    index["config"] = std::move(cfg);
    index["mlp_activation"] = "silu";
    if (!meta.empty()) {
        Json jm;
        for (const auto& [k, v] : meta) jm[k] = v;
        index["meta"] = std::move(jm);
    }

    Json records = Json::array();
    std::string payload;
    std::uint64_t offset = 0;
    for (const auto& p : params) {
        Json rec;
        rec["name"] = p.name;
        rec["shape"] = p.tensor->shape();
        rec["offset"] = offset;
        rec["count"] = p.tensor->numel();
        records.push_back(std::move(rec));
        const auto span = p.tensor->data();
        const std::size_t bytes = span.size() * sizeof(double);
        const std::size_t old = payload.size();
        payload.resize(old + bytes);
        std::memcpy(payload.data() + old, span.data(), bytes);
        offset += static_cast<std::uint64_t>(span.size());
    }
    index["records"] = std::move(records);

    const std::string index_str = index.dump();
    std::string blob;
    blob.reserve(8 + 8 + index_str.size() + payload.size());
    blob.append(kMagic, sizeof(kMagic));
    std::uint64_t len = index_str.size();
    char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((len >> (8 * i)) & 0xff);
    blob.append(lenbuf, 8);
    blob.append(index_str);
    blob.append(payload);
    atomic_write_file(path, blob);
}

GetModel load_model(const std::string& path, std::map<std::string, double>* meta) {
    const std::string blob = read_file(path);
    if (blob.size() < 16 || std::memcmp(blob.data(), kMagic, sizeof(kMagic)) != 0) {
        throw std::runtime_error(path + " is not a parameter container");
    }
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i)
        len |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[8 + static_cast<std::size_t>(i)]))
               << (8 * i);
    if (blob.size() < 16 + len) throw std::runtime_error(path + ": truncated index");
    Json index;
    try {
        index = Json::parse(blob.substr(16, len));
    } catch (const std::exception& e) {
        throw std::runtime_error(path + ": bad index: " + e.what());
    }
    GetConfig cfg;
    cfg.d_h = index.at("config").at("d_h").get<std::int64_t>();
    cfg.d_r = index.at("config").at("d_r").get<std::int64_t>();
    cfg.d_e = index.at("config").at("d_e").get<std::int64_t>();
    cfg.n_layers = index.at("config").at("n_layers").get<int>();
    cfg.d_scalar = index.at("config").value("d_scalar", cfg.d_scalar);

    if (meta) {
        meta->clear();
        if (index.contains("meta")) {
            for (const auto& [k, v] : index["meta"].items()) (*meta)[k] = v.get<double>();
        }
    }

    GetModel model = GetModel::make(cfg, 0);
    auto params = model.collect();

    const char* payload = blob.data() + 16 + len;
    const std::size_t payload_count = (blob.size() - 16 - len) / sizeof(double);

    std::size_t filled = 0;
    for (const auto& rec : index.at("records")) {
        const std::string name = rec.at("name").get<std::string>();
        const Shape shape = rec.at("shape").get<Shape>();
        const auto offset = rec.at("offset").get<std::uint64_t>();
        const auto count = rec.at("count").get<std::uint64_t>();
        if (offset + count > payload_count) throw std::runtime_error(path + ": record past payload");
        ParamRef* target = nullptr;
        for (auto& p : params) {
            if (p.name == name) {
                target = &p;
                break;
            }
        }
        if (!target) throw std::runtime_error(path + ": unknown parameter '" + name + "'");
        if (target->tensor->shape() != shape) {
            throw std::runtime_error(path + ": shape mismatch for '" + name + "'");
        }
        std::vector<double> values(count);
        std::memcpy(values.data(), payload + offset * sizeof(double), count * sizeof(double));
        *target->tensor = Tensor(shape, std::move(values));
        ++filled;
    }
    if (filled != params.size()) {
        throw std::runtime_error(path + ": container fills " + std::to_string(filled) + " of " +
                                 std::to_string(params.size()) + " parameters");
    }
    return model;
}

}  // namespace getmol
