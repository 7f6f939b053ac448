#include "lc/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "json.hpp"

namespace lc {

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct Field {
    std::string key;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, const std::string&)> set;
};

int64_t parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        int64_t r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ValidationError("config: bad integer for " + key + ": '" + v + "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ValidationError("config: bad real for " + key + ": '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ValidationError("config: bad bool for " + key + ": '" + v + "'");
}

#define INT_FIELD(name)                                                         \
    Field{#name, [](const ExperimentConfig& c) { return std::to_string(c.name); }, \
          [](ExperimentConfig& c, const std::string& v) {                       \
              c.name = static_cast<decltype(c.name)>(parse_int(#name, v));      \
          }}
#define DBL_FIELD(name)                                                       \
    Field{#name, [](const ExperimentConfig& c) { return fmt_double(c.name); }, \
          [](ExperimentConfig& c, const std::string& v) { c.name = parse_double(#name, v); }}
#define STR_FIELD(name)                                              \
    Field{#name, [](const ExperimentConfig& c) { return c.name; },    \
          [](ExperimentConfig& c, const std::string& v) { c.name = v; }}
#define BOOL_FIELD(name)                                                                 \
    Field{#name, [](const ExperimentConfig& c) { return c.name ? "true" : "false"; },     \
          [](ExperimentConfig& c, const std::string& v) { c.name = parse_bool(#name, v); }}

const std::vector<Field>& fields() {
    static const std::vector<Field> f = {
        INT_FIELD(depth), INT_FIELD(width), INT_FIELD(heads), INT_FIELD(tokens),
        INT_FIELD(classes), INT_FIELD(time_embed_dim), INT_FIELD(ffn_dim), BOOL_FIELD(long_skip),
        STR_FIELD(schedule), INT_FIELD(t_train), INT_FIELD(nfe), STR_FIELD(spacing),
        STR_FIELD(solver), DBL_FIELD(lambda), DBL_FIELD(theta), DBL_FIELD(alpha),
        STR_FIELD(cache_mode), STR_FIELD(threshold_direction), BOOL_FIELD(shifted_cache),
        INT_FIELD(steps), INT_FIELD(batch), DBL_FIELD(lr), DBL_FIELD(weight_decay),
        DBL_FIELD(label_drop), INT_FIELD(seed), INT_FIELD(threads), DBL_FIELD(guidance),
        INT_FIELD(n_samples), INT_FIELD(modes), INT_FIELD(n_points), DBL_FIELD(mode_radius),
        DBL_FIELD(mode_sigma),
    };
    return f;
}

#undef INT_FIELD
#undef DBL_FIELD
#undef STR_FIELD
#undef BOOL_FIELD

}  // namespace

std::string ExperimentConfig::to_kv() const {
    std::ostringstream os;
    for (const Field& f : fields()) os << f.key << "=" << f.get(*this) << "\n";
    return os.str();
}

ExperimentConfig ExperimentConfig::from_kv(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ValidationError("config: line " + std::to_string(lineno) + " is not key=value");
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        bool known = false;
        for (const Field& f : fields()) {
            if (f.key == key) {
                f.set(cfg, value);
                known = true;
                break;
            }
        }
        if (!known) throw ValidationError("config: unknown key '" + key + "'");
    }
    return cfg;
}

ModelConfig ExperimentConfig::model_config() const {
    ModelConfig mc;
    mc.depth = depth;
    mc.width = width;
    mc.heads = heads;
    mc.tokens = tokens;
    mc.num_classes = classes;
    mc.long_skip = long_skip;
    mc.time_embed_dim = time_embed_dim;
    mc.ffn_dim = ffn_dim;
    mc.validate();
    return mc;
}

ScheduleKind ExperimentConfig::schedule_kind() const {
    if (schedule == "vp-linear") return ScheduleKind::VpLinear;
    if (schedule == "vp-cosine") return ScheduleKind::VpCosine;
    throw ValidationError("config: unknown schedule kind '" + schedule + "'");
}

GridSpacing ExperimentConfig::grid_spacing() const {
    if (spacing == "uniform-t") return GridSpacing::UniformT;
    if (spacing == "uniform-lambda") return GridSpacing::UniformLambda;
    throw ValidationError("config: unknown grid spacing '" + spacing + "'");
}

Solver ExperimentConfig::solver_kind() const {
    if (solver == "ddim") return Solver::Ddim;
    if (solver == "dpm2") return Solver::Dpm2;
    throw ValidationError("config: unknown solver '" + solver + "'");
}

CacheMode ExperimentConfig::cache_mode_kind() const {
    if (cache_mode == "paper-literal") return CacheMode::PaperLiteral;
    if (cache_mode == "exact-endpoint") return CacheMode::ExactEndpoint;
    throw ValidationError("config: unknown cache mode '" + cache_mode + "'");
}

ThresholdDirection ExperimentConfig::direction_kind() const {
    if (threshold_direction == "cache_low") return ThresholdDirection::CacheLowSigmoid;
    if (threshold_direction == "cache_high") return ThresholdDirection::CacheHighSigmoid;
    throw ValidationError("config: unknown threshold direction '" + threshold_direction + "'");
}

int ExperimentConfig::resolved_threads() const {
    return threads > 0 ? threads : default_threads();
}

void save_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("io: cannot write " + path);
    out << text;
}

std::string load_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("io: cannot read " + path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

uint64_t file_hash(const std::string& path) {
    std::string text = load_text_file(path);
    return fnv1a(text.data(), text.size());
}

void write_manifest(const std::string& out_path, const std::string& command,
                    const ExperimentConfig& cfg, const std::vector<std::string>& input_paths,
                    const std::vector<std::string>& output_paths) {
    nlohmann::json j;
    j["command"] = command;
    j["version"] = kVersion;
    j["seed"] = cfg.seed;
    j["threads"] = cfg.resolved_threads();
    std::string kv = cfg.to_kv();
    char hash_buf[24];
    std::snprintf(hash_buf, sizeof(hash_buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a(kv.data(), kv.size())));
    j["config_hash"] = hash_buf;
    nlohmann::json inputs = nlohmann::json::array();
    for (const auto& p : input_paths) {
        char h[24];
        std::snprintf(h, sizeof(h), "%016llx", static_cast<unsigned long long>(file_hash(p)));
        inputs.push_back({{"path", p}, {"fnv64", h}});
    }
    j["inputs"] = inputs;
    j["outputs"] = output_paths;
    save_text_file(out_path, j.dump(2) + "\n");
}

}  // namespace lc
