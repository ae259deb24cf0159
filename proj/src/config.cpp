#include <fstream>
#include <set>

#include "hyret/config.hpp"

namespace hyret {

using nlohmann::json;

namespace {

std::string type_name(const json& j) { return j.type_name(); }

class ObjectReader {
public:
    ObjectReader(const json& obj, std::string path) : path_(std::move(path)) {
        if (obj.is_null()) return;
        if (!obj.is_object()) throw ConfigError(path_ + ": expected an object, got " + type_name(obj));
        obj_ = &obj;
    }

    const json* find(const std::string& key) {
        seen_.insert(key);
        if (!obj_ || !obj_->contains(key)) return nullptr;
        return &(*obj_)[key];
    }

    std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    void read(const std::string& key, int& out) {
        if (const json* v = find(key)) out = as_int(*v, key_path(key));
    }
    void read(const std::string& key, std::uint64_t& out) {
        if (const json* v = find(key)) out = as_u64(*v, key_path(key));
    }
    void read(const std::string& key, double& out) {
        if (const json* v = find(key)) {
            if (!v->is_number()) throw ConfigError(key_path(key) + ": expected a number, got " + type_name(*v));
            out = v->get<double>();
        }
    }
    void read(const std::string& key, bool& out) {
        if (const json* v = find(key)) {
            if (!v->is_boolean()) throw ConfigError(key_path(key) + ": expected a boolean, got " + type_name(*v));
            out = v->get<bool>();
        }
    }
    void read(const std::string& key, std::string& out) {
        if (const json* v = find(key)) {
            if (!v->is_string()) throw ConfigError(key_path(key) + ": expected a string, got " + type_name(*v));
            out = v->get<std::string>();
        }
    }
    template <std::size_t N>
    void read(const std::string& key, std::array<int, N>& out) {
        if (const json* v = find(key)) {
            if (!v->is_array() || v->size() != N)
                throw ConfigError(key_path(key) + ": expected an array of " + std::to_string(N) + " integers");
            for (std::size_t i = 0; i < N; ++i) out[i] = as_int((*v)[i], key_path(key) + "[" + std::to_string(i) + "]");
        }
    }
    void read(const std::string& key, std::vector<int>& out) {
        if (const json* v = find(key)) {
            out.clear();
            for (std::size_t i = 0; i < array(*v, key).size(); ++i)
                out.push_back(as_int((*v)[i], key_path(key) + "[" + std::to_string(i) + "]"));
        }
    }
    void read(const std::string& key, std::vector<std::uint64_t>& out) {
        if (const json* v = find(key)) {
            out.clear();
            for (std::size_t i = 0; i < array(*v, key).size(); ++i)
                out.push_back(as_u64((*v)[i], key_path(key) + "[" + std::to_string(i) + "]"));
        }
    }
    void read(const std::string& key, std::vector<std::string>& out) {
        if (const json* v = find(key)) {
            out.clear();
            for (std::size_t i = 0; i < array(*v, key).size(); ++i) {
                const json& e = (*v)[i];
                if (!e.is_string())
                    throw ConfigError(key_path(key) + "[" + std::to_string(i) + "]: expected a string, got " +
                                      type_name(e));
                out.push_back(e.get<std::string>());
            }
        }
    }

    void finish() {
        if (!obj_) return;
        for (const auto& [key, _] : obj_->items())
            if (!seen_.count(key)) throw ConfigError(key_path(key) + ": unknown key");
    }

private:
    const json& array(const json& v, const std::string& key) const {
        if (!v.is_array()) throw ConfigError(key_path(key) + ": expected an array, got " + type_name(v));
        return v;
    }
    static int as_int(const json& v, const std::string& path) {
        if (!v.is_number_integer()) throw ConfigError(path + ": expected an integer, got " + type_name(v));
        const auto x = v.get<long long>();
        if (x < INT32_MIN || x > INT32_MAX) throw ConfigError(path + ": integer out of range");
        return static_cast<int>(x);
    }
    static std::uint64_t as_u64(const json& v, const std::string& path) {
        if (v.is_number_unsigned()) return v.get<std::uint64_t>();
        if (v.is_number_integer() && v.get<long long>() >= 0) return static_cast<std::uint64_t>(v.get<long long>());
        throw ConfigError(path + ": expected a non-negative integer, got " + type_name(v));
    }

    const json* obj_ = nullptr;
    std::string path_;
    std::set<std::string> seen_;
};

const json& section(const json& doc, const char* key) {
    static const json null_json;
    return doc.contains(key) ? doc[key] : null_json;
}

} // namespace

ModelConfig parse_model_config(const json& doc, const std::string& prefix) {
    ModelConfig m;
    ObjectReader r(doc, prefix);
    r.read("stem_width", m.stem_width);
    r.read("backbone_widths", m.backbone_widths);
    r.read("fdm_width", m.fdm_width);
    r.read("heads", m.heads);
    r.read("head_dim", m.head_dim);
    r.read("theta_base", m.theta_base);
    r.read("renormalize", m.renormalize);
    r.read("decoder_widths", m.decoder_widths);
    r.read("tconv_kernel", m.tconv_kernel);
    r.read("use_msf", m.use_msf);
    r.read("use_lfb", m.use_lfb);
    r.read("use_grb", m.use_grb);
    r.read("use_lg", m.use_lg);
    r.read("use_attention", m.use_attention);
    r.read("fdm_norm", m.fdm_norm);
    r.read("num_classes", m.num_classes);
    r.finish();
    return m;
}

json to_json(const ModelConfig& m) {
    return {{"stem_width", m.stem_width},   {"backbone_widths", m.backbone_widths},
            {"fdm_width", m.fdm_width},     {"heads", m.heads},
            {"head_dim", m.head_dim},       {"theta_base", m.theta_base},
            {"renormalize", m.renormalize}, {"decoder_widths", m.decoder_widths},
            {"tconv_kernel", m.tconv_kernel}, {"use_msf", m.use_msf},
            {"use_lfb", m.use_lfb},         {"use_grb", m.use_grb},
            {"use_lg", m.use_lg},           {"use_attention", m.use_attention},
            {"fdm_norm", m.fdm_norm},       {"num_classes", m.num_classes}};
}

RunConfig parse_run_config(const json& doc) {
    if (!doc.is_object()) throw ConfigError("config: top level must be an object");
    RunConfig c;
    ObjectReader top(doc, "");
    for (const char* key : {"model", "train", "data", "eval", "predict", "ablate", "bench", "gradcheck"}) top.find(key);
    top.finish();

    c.model = parse_model_config(section(doc, "model"), "model");
    {
        ObjectReader r(section(doc, "train"), "train");
        r.read("lr0", c.train.lr0);
        r.read("weight_decay", c.train.weight_decay);
        r.read("beta1", c.train.beta1);
        r.read("beta2", c.train.beta2);
        r.read("adam_eps", c.train.adam_eps);
        r.read("batch_size", c.train.batch_size);
        r.read("total_steps", c.train.total_steps);
        r.read("seed", c.train.seed);
        r.read("eval_interval", c.train.eval_interval);
        r.read("eval_batch_size", c.train.eval_batch_size);
        r.read("hflip", c.train.hflip);
        r.finish();
    }
    {
        ObjectReader r(section(doc, "data"), "data");
        r.read("source", c.data.source);
        r.read("root", c.data.root);
        std::string difficulty = difficulty_name(c.data.difficulty);
        r.read("difficulty", difficulty);
        try {
            c.data.difficulty = parse_difficulty(difficulty);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("data.difficulty: ") + e.what());
        }
        r.read("image_size", c.data.image_size);
        r.read("seed", c.data.seed);
        r.read("train_count", c.data.train_count);
        r.read("val_count", c.data.val_count);
        r.read("test_count", c.data.test_count);
        r.finish();
    }
    {
        ObjectReader r(section(doc, "eval"), "eval");
        r.read("split", c.eval.split);
        r.read("predictions", c.eval.predictions);
        r.finish();
    }
    {
        ObjectReader r(section(doc, "predict"), "predict");
        r.read("pre", c.predict.pre);
        r.read("post", c.predict.post);
        r.read("label", c.predict.label);
        r.read("panel", c.predict.panel);
        r.finish();
    }
    {
        ObjectReader r(section(doc, "ablate"), "ablate");
        r.read("rows", c.ablate.rows);
        r.read("seeds", c.ablate.seeds);
        r.finish();
    }
    {
        ObjectReader r(section(doc, "bench"), "bench");
        r.read("grid_sizes", c.bench.grid_sizes);
        r.read("trials", c.bench.trials);
        r.read("channels", c.bench.channels);
        r.read("heads", c.bench.heads);
        r.read("head_dim", c.bench.head_dim);
        r.finish();
    }
    {
        ObjectReader r(section(doc, "gradcheck"), "gradcheck");
        r.read("image_size", c.gradcheck.image_size);
        r.read("samples", c.gradcheck.samples);
        r.read("block_tolerance", c.gradcheck.block_tolerance);
        r.read("model_tolerance", c.gradcheck.model_tolerance);
        r.read("seed", c.gradcheck.seed);
        r.finish();
    }
    c.validate();
    return c;
}

void RunConfig::validate() const {
    model.validate();
    train.validate();
    if (data.source != "synthetic" && data.source != "tiles")
        throw ConfigError("data.source: must be \"synthetic\" or \"tiles\", got \"" + data.source + "\"");
    if (data.source == "tiles" && data.root.empty()) throw ConfigError("data.root: required when data.source is tiles");
    if (data.image_size < 32 || data.image_size % 32 != 0)
        throw ConfigError("data.image_size: must be a positive multiple of 32");
    if (data.train_count < 1) throw ConfigError("data.train_count: must be >= 1");
    if (data.val_count < 1) throw ConfigError("data.val_count: must be >= 1");
    if (data.test_count < 1) throw ConfigError("data.test_count: must be >= 1");
    if (eval.split != "train" && eval.split != "val" && eval.split != "test")
        throw ConfigError("eval.split: must be train, val or test");
    for (const auto& row : ablate.rows) {
        try {
            parse_ablation_row(row);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("ablate.rows: ") + e.what());
        }
    }
    if (ablate.seeds.empty()) throw ConfigError("ablate.seeds: must not be empty");
    if (bench.grid_sizes.empty()) throw ConfigError("bench.grid_sizes: must not be empty");
    for (int g : bench.grid_sizes)
        if (g < 1) throw ConfigError("bench.grid_sizes: sizes must be >= 1");
    if (bench.trials < 1) throw ConfigError("bench.trials: must be >= 1");
    if (bench.heads < 1 || bench.head_dim < 4 || bench.head_dim % 4 != 0 || bench.heads * bench.head_dim != bench.channels)
        throw ConfigError("bench.channels: must equal heads * head_dim with head_dim a multiple of 4");
    if (gradcheck.image_size < 32 || gradcheck.image_size % 32 != 0)
        throw ConfigError("gradcheck.image_size: must be a positive multiple of 32");
    if (gradcheck.samples < 1) throw ConfigError("gradcheck.samples: must be >= 1");
    if (!(gradcheck.block_tolerance > 0) || !(gradcheck.model_tolerance > 0))
        throw ConfigError("gradcheck.block_tolerance: tolerances must be > 0");
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path.string() + ": invalid JSON: " + e.what());
    }
    return parse_run_config(doc);
}

json to_json(const RunConfig& c) {
    return {
        {"model", to_json(c.model)},
        {"train",
         {{"lr0", c.train.lr0},
          {"weight_decay", c.train.weight_decay},
          {"beta1", c.train.beta1},
          {"beta2", c.train.beta2},
          {"adam_eps", c.train.adam_eps},
          {"batch_size", c.train.batch_size},
          {"total_steps", c.train.total_steps},
          {"seed", c.train.seed},
          {"eval_interval", c.train.eval_interval},
          {"eval_batch_size", c.train.eval_batch_size},
          {"hflip", c.train.hflip}}},
        {"data",
         {{"source", c.data.source},
          {"root", c.data.root},
          {"difficulty", difficulty_name(c.data.difficulty)},
          {"image_size", c.data.image_size},
          {"seed", c.data.seed},
          {"train_count", c.data.train_count},
          {"val_count", c.data.val_count},
          {"test_count", c.data.test_count}}},
        {"eval", {{"split", c.eval.split}, {"predictions", c.eval.predictions}}},
        {"predict",
         {{"pre", c.predict.pre}, {"post", c.predict.post}, {"label", c.predict.label}, {"panel", c.predict.panel}}},
        {"ablate", {{"rows", c.ablate.rows}, {"seeds", c.ablate.seeds}}},
        {"bench",
         {{"grid_sizes", c.bench.grid_sizes},
          {"trials", c.bench.trials},
          {"channels", c.bench.channels},
          {"heads", c.bench.heads},
          {"head_dim", c.bench.head_dim}}},
        {"gradcheck",
         {{"image_size", c.gradcheck.image_size},
          {"samples", c.gradcheck.samples},
          {"block_tolerance", c.gradcheck.block_tolerance},
          {"model_tolerance", c.gradcheck.model_tolerance},
          {"seed", c.gradcheck.seed}}},
    };
}

} // namespace hyret
