#include "tokenseg/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace tokenseg {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

KvConfig KvConfig::parse(const std::string& text) {
    KvConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected key = value");
        std::string key = trim(t.substr(0, eq));
        std::string val = trim(t.substr(eq + 1));
        if (key.empty())
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": empty key");
        cfg.entries_[key] = val;
    }
    return cfg;
}

KvConfig KvConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
}

std::string KvConfig::get(const std::string& key, const std::string& fallback) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? fallback : it->second;
}

int KvConfig::get_int(const std::string& key, int fallback) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    return std::stoi(it->second);
}

double KvConfig::get_double(const std::string& key, double fallback) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    return std::stod(it->second);
}

std::uint64_t KvConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    return std::stoull(it->second);
}

std::vector<int> KvConfig::get_int_list(const std::string& key,
                                        const std::vector<int>& fallback) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    std::vector<int> out;
    std::istringstream in(it->second);
    std::string tok;
    while (std::getline(in, tok, ',')) out.push_back(std::stoi(trim(tok)));
    return out;
}

void KvConfig::set(const std::string& key, const std::string& value) {
    entries_[key] = value;
}

void KvConfig::set_int(const std::string& key, long long value) {
    entries_[key] = std::to_string(value);
}

void KvConfig::set_double(const std::string& key, double value) {
    std::ostringstream os;
    os.precision(17);
    os << value;
    entries_[key] = os.str();
}

std::string KvConfig::to_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : entries_) os << k << " = " << v << "\n";
    return os.str();
}

void TrainConfig::validate() const {
    if (min_lr > base_lr) throw std::invalid_argument("config: min_lr > base_lr");
    if (patience < 1) throw std::invalid_argument("config: patience < 1");
    if (batch_size < 1) throw std::invalid_argument("config: batch_size < 1");
    if (model.k < 1 || model.k > model.encoder.pool_size())
        throw std::invalid_argument("config: k outside [1, N]");
    if (model.codebook_size < 2) throw std::invalid_argument("config: codebook_size < 2");
    if (model.theta < 0.0 || model.theta > 1.0)
        throw std::invalid_argument("config: theta outside [0,1]");
    if (int(model.encoder.channels.size()) != model.encoder.levels ||
        int(model.encoder.layout.size()) != model.encoder.levels)
        throw std::invalid_argument("config: channels/layout length != levels");
}

TrainConfig config_from_kv(const KvConfig& kv) {
    TrainConfig cfg;
    cfg.model.encoder.levels = kv.get_int("levels", cfg.model.encoder.levels);
    cfg.model.encoder.channels = kv.get_int_list("channels", cfg.model.encoder.channels);
    cfg.model.encoder.layout = kv.get_int_list("layout", cfg.model.encoder.layout);
    cfg.model.encoder.token_width = kv.get_int("token_width", cfg.model.encoder.token_width);
    cfg.model.codebook_size = kv.get_int("codebook_size", cfg.model.codebook_size);
    cfg.model.k = kv.get_int("k", cfg.model.k);
    cfg.model.theta = kv.get_double("theta", cfg.model.theta);
    cfg.model.strategy = parse_strategy(kv.get("strategy", "combined"));
    cfg.model.loss.dice = kv.get_double("lambda_dice", cfg.model.loss.dice);
    cfg.model.loss.bce = kv.get_double("lambda_bce", cfg.model.loss.bce);
    cfg.model.loss.vq = kv.get_double("lambda_vq", cfg.model.loss.vq);
    cfg.model.loss.beta = kv.get_double("beta", cfg.model.loss.beta);
    cfg.model.loss.eps = kv.get_double("eps", cfg.model.loss.eps);
    cfg.base_lr = kv.get_double("base_lr", cfg.base_lr);
    cfg.min_lr = kv.get_double("min_lr", cfg.min_lr);
    cfg.beta1 = kv.get_double("beta1", cfg.beta1);
    cfg.beta2 = kv.get_double("beta2", cfg.beta2);
    cfg.weight_decay = kv.get_double("weight_decay", cfg.weight_decay);
    cfg.batch_size = kv.get_int("batch_size", cfg.batch_size);
    cfg.max_epochs = kv.get_int("max_epochs", cfg.max_epochs);
    cfg.patience = kv.get_int("patience", cfg.patience);
    cfg.target_val_dice = kv.get_double("target_val_dice", cfg.target_val_dice);
    cfg.seed = kv.get_u64("seed", cfg.seed);
    cfg.model.seed = cfg.seed;
    cfg.validate();
    return cfg;
}

KvConfig config_to_kv(const TrainConfig& cfg) {
    KvConfig kv;
    kv.set_int("levels", cfg.model.encoder.levels);
    std::string ch, ly;
    for (std::size_t i = 0; i < cfg.model.encoder.channels.size(); ++i)
        ch += (i ? "," : "") + std::to_string(cfg.model.encoder.channels[i]);
    for (std::size_t i = 0; i < cfg.model.encoder.layout.size(); ++i)
        ly += (i ? "," : "") + std::to_string(cfg.model.encoder.layout[i]);
    kv.set("channels", ch);
    kv.set("layout", ly);
    kv.set_int("token_width", cfg.model.encoder.token_width);
    kv.set_int("n_tokens", cfg.model.encoder.pool_size());
    kv.set_int("codebook_size", cfg.model.codebook_size);
    kv.set_int("k", cfg.model.k);
    kv.set_double("theta", cfg.model.theta);
    kv.set("strategy", strategy_name(cfg.model.strategy));
    kv.set_double("lambda_dice", cfg.model.loss.dice);
    kv.set_double("lambda_bce", cfg.model.loss.bce);
    kv.set_double("lambda_vq", cfg.model.loss.vq);
    kv.set_double("beta", cfg.model.loss.beta);
    kv.set_double("eps", cfg.model.loss.eps);
    kv.set_double("base_lr", cfg.base_lr);
    kv.set_double("min_lr", cfg.min_lr);
    kv.set_double("beta1", cfg.beta1);
    kv.set_double("beta2", cfg.beta2);
    kv.set_double("weight_decay", cfg.weight_decay);
    kv.set_int("batch_size", cfg.batch_size);
    kv.set_int("max_epochs", cfg.max_epochs);
    kv.set_int("patience", cfg.patience);
    kv.set_double("target_val_dice", cfg.target_val_dice);
    kv.set_int("seed", (long long)cfg.seed);
    return kv;
}

}  // namespace tokenseg
