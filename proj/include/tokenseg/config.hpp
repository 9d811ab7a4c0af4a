#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tokenseg/model.hpp"

namespace tokenseg {

// Flat `key = value` text, one entry per line, '#' comments.
class KvConfig {
public:
    static KvConfig parse(const std::string& text);
    static KvConfig load(const std::string& path);

    bool has(const std::string& key) const { return entries_.count(key) != 0; }
    std::string get(const std::string& key, const std::string& fallback) const;
    int get_int(const std::string& key, int fallback) const;
    double get_double(const std::string& key, double fallback) const;
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
    std::vector<int> get_int_list(const std::string& key,
                                  const std::vector<int>& fallback) const;

    void set(const std::string& key, const std::string& value);
    void set_int(const std::string& key, long long value);
    void set_double(const std::string& key, double value);

    std::string to_text() const;  // sorted by key

private:
    std::map<std::string, std::string> entries_;
};

struct TrainConfig {
    ModelConfig model;
    double base_lr = 1e-4;
    double min_lr = 1e-6;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 1e-5;
    double adam_eps = 1e-8;
    int batch_size = 2;
    int max_epochs = 300;
    int patience = 30;
    double target_val_dice = 0.0;  // 0 disables the early exit
    std::uint64_t seed = 0;

    void validate() const;
};

TrainConfig config_from_kv(const KvConfig& kv);
KvConfig config_to_kv(const TrainConfig& cfg);

}  // namespace tokenseg
