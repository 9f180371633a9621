#include "unmix/eval.hpp"

#include <nlohmann/json.hpp>

using json = nlohmann::json;

namespace unmix::eval {

std::string eval_report_to_json(const EvalReport& report) {
    json layers = json::array();
    for (const auto& mass : report.layer_block_mass) {
        json rows = json::array();
        const std::size_t n = mass.dim(0);
        for (std::size_t i = 0; i < n; ++i) {
            json row = json::array();
            for (std::size_t j = 0; j < n; ++j) row.push_back(mass[i * n + j]);
            rows.push_back(row);
        }
        layers.push_back(rows);
    }
    json j{{"num_encoders", report.num_encoders},
           {"permutation", {{"triangle", report.permutation[0]},
                            {"circle", report.permutation[1]}}},
           {"source_mae", {{"triangle", report.triangle_mae}, {"circle", report.circle_mae}}},
           {"mixture_mae", report.mixture_mae},
           {"dead_encoder_scores", report.dead_scores},
           {"dead_encoder_flags", report.dead_flags},
           {"pathway_diagonal_mass", report.diagonal_mass},
           {"decoder_block_mass", layers},
           {"decoder_output_layer_mass", report.output_layer_mass},
           {"samples_evaluated", report.samples_evaluated}};
    return j.dump(2) + "\n";
}

}  // namespace unmix::eval
