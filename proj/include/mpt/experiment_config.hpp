#pragma once

#include <string>

#include "mpt/model_config.hpp"
#include "mpt/training.hpp"
#include "mpt/workbench.hpp"

namespace mpt {

// Full experiment description as read from a JSON config file. Parsing is
// strict: unknown keys are errors, not warnings.
struct ExperimentConfig {
    MptConfig model;
    TrainConfig train;
    ToyTask task;
    DecodeConfig decode;
    std::string out_dir = "runs/default";

    static ExperimentConfig from_json_text(const std::string& text);
    static ExperimentConfig from_json_file(const std::string& path);
    std::string to_json_text() const;

    void validate() const;
};

}  // namespace mpt
