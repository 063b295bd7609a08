#pragma once

#include <string>

#include "mslau/network.hpp"

namespace mslau {

struct TrainConfig {
    std::string optimizer = "adamw";  // adamw | sgd
    double lr = 3e-4;
    double momentum = 0.9;      // sgd only
    double weight_decay = 5e-4;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;  // adamw
    int64_t epochs = 400;
    int64_t batch_size = 24;
    double lambda = 0.6;        // hybrid loss weight; 1.0 = dice only
    double augment_prob = 0.25;
    double val_fraction = 0.1;
    std::string lr_schedule = "constant";  // constant | poly
    double poly_power = 0.9;

    void validate() const;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
};

// Flat key=value lines, '#' comments. Unknown keys are rejected with the
// offending line number; constraint violations name the constraint.
RunConfig parse_config(const std::string& text);
RunConfig parse_config_file(const std::string& path);

}  // namespace mslau
