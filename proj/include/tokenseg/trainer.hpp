#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "tokenseg/config.hpp"
#include "tokenseg/model.hpp"
#include "tokenseg/objective.hpp"

namespace tokenseg {

struct AdamWHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 1e-5;
    double eps = 1e-8;
};

// Decoupled weight decay applied before the bias-corrected adaptive update;
// gradients are zeroed after every step.
class AdamW {
public:
    AdamW(std::vector<Parameter*> params, const AdamWHyper& hyper);
    void step(double lr);
    long long steps() const { return step_count_; }

private:
    std::vector<Parameter*> params_;
    AdamWHyper hyper_;
    std::vector<std::vector<double>> m_, v_;
    long long step_count_ = 0;
};

double cosine_lr(int epoch, double base_lr, double min_lr, int total_epochs);

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_dice = 0.0;
    double val_iou = 0.0;
    double lr = 0.0;
    double wall_ms = 0.0;
};

using RunLog = std::vector<EpochLog>;

// True when validation Dice has not strictly improved for `patience`
// consecutive epochs.
bool early_stop(const RunLog& log, int patience);

std::string runlog_to_csv(const RunLog& log);

struct Case {
    Volume3D volume;
    MaskVolume mask;
};

struct TrainResult {
    RunLog log;
    int best_epoch = 0;       // 1-based; 0 when no epoch completed
    double best_dice = -1.0;
    std::vector<std::vector<double>> best_values;  // parameter snapshot
    bool aborted_non_finite = false;
};

// Deterministic per seed. Throws on invalid configs; a non-finite loss stops
// the loop with aborted_non_finite set and the last good snapshot retained.
TrainResult train(Model& model, const TrainConfig& cfg, const std::vector<Case>& train_set,
                  const std::vector<Case>& val_set, std::ostream* progress = nullptr);

void restore_snapshot(Model& model, const std::vector<std::vector<double>>& values);

struct EvalOutcome {
    MetricsReport aggregate;
    std::vector<MetricsReport> per_case;
    std::size_t undefined_hd95 = 0;
    std::size_t undefined_boundary = 0;
};

EvalOutcome evaluate(Model& model, const std::vector<Case>& dataset, double theta);

// Named-tensor checkpoint container with the config embedded as kv text.
void save_checkpoint(const std::string& path, const Model& model, const TrainConfig& cfg);
struct LoadedCheckpoint {
    TrainConfig cfg;
    Model model;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace tokenseg
