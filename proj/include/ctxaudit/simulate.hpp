#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxaudit/config.hpp"

namespace ctxaudit {

struct PowerRow {
    std::string scenario;
    int n_per_cell = 0;
    int seeds = 0;
    int detections = 0;
    double detection_rate = 0.0;
};

struct SimulateOptions {
    std::string scenario;        // repeater | stereotype | contextual | null
    std::vector<int> n_grid{50, 200, 800};
    int n_seeds = 200;
    double target_delta = 0.5;   // contextual scenario: designed delta-C
    int n_pairs = 0;             // 0: scenario default
};

// Monte Carlo power analysis: for each n in the grid, runs the scenario's
// strategy mock end-to-end n_seeds times and reports how often the scenario's
// detection signature fires. Detection rules:
//   repeater    - prime_gender ranks first in the primed-regime MI table
//   stereotype  - unprimed Spearman rho > 0 with p < 0.05
//   contextual  - pooled CbD verdict (config pooling rule and CI gate)
//   null        - same as contextual (the rate is the false-positive rate)
std::vector<PowerRow> run_simulation(const RunConfig& config, const SimulateOptions& opts);

nlohmann::json power_rows_to_json(const std::vector<PowerRow>& rows);

} // namespace ctxaudit
