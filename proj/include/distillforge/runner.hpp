#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "distillforge/runconfig.hpp"

namespace distillforge {

/// Never reuses an existing non-empty directory: appends a timestamp (and a
/// counter if needed) instead of overwriting.
std::string resolve_run_dir(const std::string& requested);

struct RunResult {
    std::string run_dir;
    std::string final_checkpoint;
    TrainState state;
};

/// Plain denoising training; writes config.json, metrics.csv and
/// checkpoints/step-N/ under the run directory.
RunResult run_train_teacher(const RunConfig& cfg, const std::string& out_dir, std::ostream& log);

/// Distillation run: loads and freezes the teacher checkpoint, derives the
/// student via the compression spec, inherits weights, plans the feature
/// match, and trains the student. plan.json documents the match plan used.
RunResult run_distill(const RunConfig& cfg, const std::string& teacher_ckpt,
                      const std::string& out_dir, std::ostream& log);

/// Rebuilds a model from a checkpoint directory (architecture from the
/// config echo, weights from weights.bin).
Model load_model_checkpoint(const std::string& ckpt_dir, RunConfig* out_cfg);

struct SampleOverrides {
    long steps = -1;          // <0: keep checkpoint default
    double cfg_scale = -1.0;  // <0: keep default
    long long seed = -1;      // <0: keep default
};

std::vector<std::string> run_sample(const std::string& ckpt_dir, const std::string& caption,
                                    const SampleOverrides& overrides, long count,
                                    const std::string& out_dir, std::ostream& log);

}  // namespace distillforge
