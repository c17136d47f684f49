#include "rled/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace rled {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

long long parse_int(const std::string& key, const std::string& v) {
    long long out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size())
        throw ConfigError("invalid integer for '" + key + "': " + v);
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("invalid number for '" + key + "': " + v);
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("invalid boolean for '" + key + "': " + v);
}

struct Entry {
    std::function<void(CliConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const CliConfig&)> get;
};

template <typename Getter, typename Field>
Entry int_entry(Getter member) {
    return Entry{
        [member](CliConfig& c, const std::string& k, const std::string& v) {
            *member(c) = static_cast<Field>(parse_int(k, v));
        },
        [member](const CliConfig& c) {
            return std::to_string(*member(const_cast<CliConfig&>(c)));
        }};
}

#define INT_FIELD(path, type) \
    int_entry<std::function<type*(CliConfig&)>, type>([](CliConfig& c) { return &c.path; })

Entry double_field(std::function<double*(CliConfig&)> member) {
    return Entry{
        [member](CliConfig& c, const std::string& k, const std::string& v) {
            *member(c) = parse_double(k, v);
        },
        [member](const CliConfig& c) {
            std::ostringstream os;
            os.precision(17);
            os << *member(const_cast<CliConfig&>(c));
            return os.str();
        }};
}

Entry bool_field(std::function<bool*(CliConfig&)> member) {
    return Entry{
        [member](CliConfig& c, const std::string& k, const std::string& v) {
            *member(c) = parse_bool(k, v);
        },
        [member](const CliConfig& c) {
            return *member(const_cast<CliConfig&>(c)) ? std::string("true") : std::string("false");
        }};
}

const std::map<std::string, Entry>& schema() {
    static const std::map<std::string, Entry> s = [] {
        std::map<std::string, Entry> m;
        m["c"] = INT_FIELD(model.c, int);
        m["rank"] = INT_FIELD(model.rank, int);
        m["n_enc"] = INT_FIELD(model.n_enc, int);
        m["n_frb"] = INT_FIELD(model.n_frb, int);
        m["window"] = INT_FIELD(model.window, int);
        m["heads_sab"] = INT_FIELD(model.heads_sab, int);
        m["heads_cab"] = INT_FIELD(model.heads_cab, int);
        m["mlp_ratio"] = INT_FIELD(model.mlp_ratio, int);
        m["levels"] = INT_FIELD(model.levels, int);
        m["enable_lsrb"] = bool_field([](CliConfig& c) { return &c.model.enable_lsrb; });
        m["enable_sab"] = bool_field([](CliConfig& c) { return &c.model.enable_sab; });
        m["enable_cab"] = bool_field([](CliConfig& c) { return &c.model.enable_cab; });
        m["rel_pos_bias"] = bool_field([](CliConfig& c) { return &c.model.rel_pos_bias; });
        m["v_source"] = Entry{
            [](CliConfig& c, const std::string& k, const std::string& v) {
                if (v == "f_v") c.model.v_source = VSource::f_v;
                else if (v == "f_u") c.model.v_source = VSource::f_u;
                else throw ConfigError("invalid v_source for '" + k + "': " + v + " (expected f_v|f_u)");
            },
            [](const CliConfig& c) { return to_string(c.model.v_source); }};
        m["lambda_tv"] = double_field([](CliConfig& c) { return &c.loss.lambda_tv; });
        m["ssim_window"] = INT_FIELD(loss.ssim_window, int);
        m["ssim_sigma"] = double_field([](CliConfig& c) { return &c.loss.ssim_sigma; });
        m["ssim_c1"] = double_field([](CliConfig& c) { return &c.loss.ssim_c1; });
        m["ssim_c2"] = double_field([](CliConfig& c) { return &c.loss.ssim_c2; });
        m["tv_variant"] = Entry{
            [](CliConfig& c, const std::string& k, const std::string& v) {
                if (v == "anisotropic") c.loss.tv_variant = TvVariant::anisotropic;
                else if (v == "isotropic") c.loss.tv_variant = TvVariant::isotropic;
                else throw ConfigError("invalid tv_variant for '" + k + "': " + v);
            },
            [](const CliConfig& c) { return to_string(c.loss.tv_variant); }};
        m["sigma"] = double_field([](CliConfig& c) { return &c.degrade.sigma; });
        m["gamma"] = double_field([](CliConfig& c) { return &c.degrade.gamma; });
        m["gain"] = double_field([](CliConfig& c) { return &c.degrade.gain; });
        m["degrade_seed"] = INT_FIELD(degrade.seed, std::uint64_t);
        m["iterations"] = INT_FIELD(train.iterations, std::int64_t);
        m["batch_size"] = INT_FIELD(train.batch_size, int);
        m["patch_size"] = INT_FIELD(train.patch_size, int);
        m["eval_interval"] = INT_FIELD(train.eval_interval, std::int64_t);
        m["checkpoint_interval"] = INT_FIELD(train.checkpoint_interval, std::int64_t);
        m["seed"] = INT_FIELD(train.seed, std::uint64_t);
        m["lr"] = double_field([](CliConfig& c) { return &c.train.lr; });
        m["beta1"] = double_field([](CliConfig& c) { return &c.train.beta1; });
        m["beta2"] = double_field([](CliConfig& c) { return &c.train.beta2; });
        m["adam_eps"] = double_field([](CliConfig& c) { return &c.train.adam_eps; });
        m["grad_clip"] = double_field([](CliConfig& c) { return &c.train.grad_clip; });
        m["augment_hflip"] = bool_field([](CliConfig& c) { return &c.train.augment_hflip; });
        return m;
    }();
    return s;
}

// Subset of the schema that defines ModelConfig, for canonical encoding.
const std::vector<std::string>& model_keys() {
    static const std::vector<std::string> keys = {
        "c",          "rank",        "n_enc",      "n_frb",        "window",
        "heads_sab",  "heads_cab",   "mlp_ratio",  "levels",       "enable_lsrb",
        "enable_sab", "enable_cab",  "rel_pos_bias", "v_source"};
    return keys;
}

} // namespace

void ModelConfig::validate() const {
    if (c < 2) throw ConfigError("c must be >= 2");
    if (rank < 1) throw ConfigError("rank must be >= 1");
    if (n_enc < 2 || n_enc % 2 != 0)
        throw ConfigError("n_enc must be even and >= 2 (SAB pairs W-MSA with SW-MSA)");
    if (n_frb < 2 || n_frb % 2 != 0) throw ConfigError("n_frb must be even and >= 2");
    if (window < 1) throw ConfigError("window must be >= 1");
    if (levels < 1 || levels > 6) throw ConfigError("levels must be in [1,6]");
    if (heads_sab < 1 || heads_cab < 1) throw ConfigError("head counts must be >= 1");
    if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be >= 1");
    if (!enable_sab && !enable_cab)
        throw ConfigError("at least one of enable_sab/enable_cab must be set");
    if (v_source == VSource::f_u && rank != c)
        throw ConfigError(
            "v_source=f_u builds the basis from the coefficient path and is only "
            "dimensionally valid when rank == c (got rank=" +
            std::to_string(rank) + ", c=" + std::to_string(c) + ")");
    // Every stage width must split across branches and heads.
    for (int lvl = 0; lvl < levels; ++lvl) {
        const int width = c << std::min(lvl, levels - 1);
        if (enable_sab && enable_cab && width % 2 != 0)
            throw ConfigError("stage width " + std::to_string(width) +
                              " not divisible by 2 for the SAB/CAB split");
        const int m = !enable_sab ? 0 : (enable_cab ? width / 2 : width);
        const int k = width - m;
        if (m > 0 && m % heads_sab != 0)
            throw ConfigError("SAB channels " + std::to_string(m) + " not divisible by heads_sab");
        if (k > 0 && k % heads_cab != 0)
            throw ConfigError("CAB channels " + std::to_string(k) + " not divisible by heads_cab");
    }
}

void LossConfig::validate() const {
    if (lambda_tv < 0) throw ConfigError("lambda_tv must be >= 0");
    if (ssim_window < 3 || ssim_window % 2 == 0) throw ConfigError("ssim_window must be odd and >= 3");
    if (ssim_sigma <= 0) throw ConfigError("ssim_sigma must be positive");
    if (ssim_c1 <= 0 || ssim_c2 <= 0) throw ConfigError("ssim stabilizers must be positive");
}

void DegradeConfig::validate() const {
    if (sigma < 0) throw ConfigError("sigma must be >= 0");
    if (gamma <= 0) throw ConfigError("gamma must be positive");
    if (gain <= 0 || gain > 1) throw ConfigError("gain must be in (0,1]");
}

void TrainConfig::validate() const {
    if (iterations < 0) throw ConfigError("iterations must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (patch_size < 1) throw ConfigError("patch_size must be >= 1");
    if (eval_interval < 1) throw ConfigError("eval_interval must be >= 1");
    if (checkpoint_interval < 0) throw ConfigError("checkpoint_interval must be >= 0");
    if (lr <= 0) throw ConfigError("lr must be positive");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
        throw ConfigError("Adam betas must be in [0,1)");
    if (adam_eps <= 0) throw ConfigError("adam_eps must be positive");
    if (grad_clip < 0) throw ConfigError("grad_clip must be >= 0");
}

void CliConfig::set(const std::string& key, const std::string& value) {
    const auto& s = schema();
    const auto it = s.find(key);
    if (it == s.end()) throw ConfigError("unknown config key: " + key);
    it->second.set(*this, key, value);
}

void CliConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
        set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

void CliConfig::validate() const {
    model.validate();
    loss.validate();
    degrade.validate();
    train.validate();
}

std::string to_string(VSource v) { return v == VSource::f_v ? "f_v" : "f_u"; }
std::string to_string(TvVariant v) {
    return v == TvVariant::anisotropic ? "anisotropic" : "isotropic";
}

std::string encode_model_config(const ModelConfig& cfg) {
    CliConfig holder;
    holder.model = cfg;
    const auto& s = schema();
    std::ostringstream os;
    for (const auto& key : model_keys()) os << key << " = " << s.at(key).get(holder) << "\n";
    return os.str();
}

ModelConfig decode_model_config(const std::string& text) {
    CliConfig holder;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("malformed model config line: " + line);
        holder.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return holder.model;
}

} // namespace rled
