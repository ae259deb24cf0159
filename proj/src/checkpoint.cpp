#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "hyret/checkpoint.hpp"
#include "hyret/config.hpp"

namespace hyret {

namespace {

constexpr char kMagic[8] = {'H', 'Y', 'R', 'E', 'T', 'C', 'K', 'P'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct Header {
    nlohmann::json json;
    std::uint64_t data_start = 0;
};

Header read_header(std::ifstream& in, const std::filesystem::path& path) {
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
        throw IoError("not a checkpoint file: " + path.string());
    std::uint64_t len = 0;
    if (!in.read(reinterpret_cast<char*>(&len), 8) || len > (1ull << 30))
        throw IoError("corrupt checkpoint header: " + path.string());
    std::string text(len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw IoError("truncated checkpoint: " + path.string());
    Header h;
    try {
        h.json = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
    }
    if (!h.json.contains("version") || !h.json["version"].is_number_integer())
        throw IoError("checkpoint header has no version: " + path.string());
    if (h.json["version"].get<int>() != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + h.json["version"].dump() + " in " + path.string());
    h.data_start = 16 + len;
    return h;
}

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    return in;
}

} // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, ChangeDetector<T>& model) {
    const StateList<T> state = model.state();
    nlohmann::json tensors = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& nt : state) {
        const Shape& s = nt.tensor->shape();
        const std::uint64_t bytes = nt.tensor->size() * sizeof(float);
        tensors.push_back({{"name", nt.name}, {"shape", {s.n, s.c, s.h, s.w}}, {"offset", offset}, {"size", bytes}});
        offset += bytes;
    }
    const nlohmann::json header = {{"version", kCheckpointVersion},
                                   {"dtype", "float32"},
                                   {"model_config", to_json(model.config())},
                                   {"tensors", tensors}};
    const std::string text = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write checkpoint " + path.string());
        const std::uint64_t len = text.size();
        out.write(kMagic, 8);
        out.write(reinterpret_cast<const char*>(&len), 8);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        std::vector<float> buf;
        for (const auto& nt : state) {
            buf.assign(nt.tensor->data(), nt.tensor->data() + nt.tensor->size());
            out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
        }
        if (!out) throw IoError("failed writing checkpoint " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

template <typename T>
void load_checkpoint(const std::filesystem::path& path, ChangeDetector<T>& model) {
    std::ifstream in = open_in(path);
    const Header h = read_header(in, path);
    if (h.json.value("dtype", "") != "float32") throw IoError("unsupported checkpoint dtype in " + path.string());

    if (!h.json.contains("model_config")) throw IoError("checkpoint has no model_config: " + path.string());
    if (parse_model_config(h.json["model_config"], "model_config") != model.config())
        throw ConfigError("checkpoint " + path.string() + " was saved with a different model config");

    std::map<std::string, const nlohmann::json*> entries;
    for (const auto& t : h.json.at("tensors")) entries[t.at("name").get<std::string>()] = &t;

    const StateList<T> state = model.state();
    if (entries.size() != state.size())
        throw ConfigError("checkpoint " + path.string() + " holds " + std::to_string(entries.size()) +
                          " tensors, model expects " + std::to_string(state.size()));
    std::vector<float> buf;
    for (const auto& nt : state) {
        auto it = entries.find(nt.name);
        if (it == entries.end()) throw ConfigError("checkpoint " + path.string() + " lacks tensor " + nt.name);
        const auto& e = *it->second;
        const auto dims = e.at("shape").template get<std::vector<int>>();
        const Shape s = nt.tensor->shape();
        if (dims.size() != 4 || !(Shape{dims[0], dims[1], dims[2], dims[3]} == s))
            throw ConfigError("checkpoint tensor " + nt.name + " has shape " + e.at("shape").dump() + ", model expects " +
                              s.str());
        const auto offset = e.at("offset").template get<std::uint64_t>();
        buf.resize(nt.tensor->size());
        in.seekg(static_cast<std::streamoff>(h.data_start + offset));
        if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float))))
            throw IoError("truncated checkpoint data for " + nt.name + " in " + path.string());
        for (std::size_t i = 0; i < buf.size(); ++i) (*nt.tensor)[i] = static_cast<T>(buf[i]);
    }
}

ModelConfig read_checkpoint_config(const std::filesystem::path& path) {
    std::ifstream in = open_in(path);
    const Header h = read_header(in, path);
    if (!h.json.contains("model_config")) throw IoError("checkpoint has no model_config: " + path.string());
    return parse_model_config(h.json["model_config"], "model_config");
}

template void save_checkpoint(const std::filesystem::path&, ChangeDetector<float>&);
template void save_checkpoint(const std::filesystem::path&, ChangeDetector<double>&);
template void load_checkpoint(const std::filesystem::path&, ChangeDetector<float>&);
template void load_checkpoint(const std::filesystem::path&, ChangeDetector<double>&);

} // namespace hyret
