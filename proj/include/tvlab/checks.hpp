#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tvlab/analysis.hpp"

namespace tvlab {

// Settings shared by the named verification checks. Zero counts keep each
// check's own default.
struct CheckOptions {
  std::uint64_t seed = 0;
  PromptFormat format = PromptFormat::Pairwise;  // critpoint
  bool spd_sigma = false;                        // critpoint: random SPD covariance
  bool perturb = false;                          // critpoint: add off-support mass to every D
  int trials = 0;
  int batch = 0;
  const ModelParams* params = nullptr;  // lambda4 and structure
  std::string params_ref;
};

const std::vector<std::string>& check_names();
bool is_check(const std::string& name);

// Throws ContractError for an unknown name or missing inputs.
CheckReport run_check(const std::string& name, const CheckOptions& opts);

CheckReport check_gradients(const CheckOptions& opts);
CheckReport check_single_layer_construction(const CheckOptions& opts);
CheckReport check_reformulated_risk(const CheckOptions& opts);
CheckReport check_critical_point(const CheckOptions& opts);
CheckReport check_lambda4(const CheckOptions& opts);
CheckReport check_structure(const CheckOptions& opts);
CheckReport check_rank_one_bijection(const CheckOptions& opts);
CheckReport check_decaying_weights(const CheckOptions& opts);
CheckReport check_eos_equivalence(const CheckOptions& opts);
CheckReport check_gd_decomposition(const CheckOptions& opts);
CheckReport check_structural_equivalence(const CheckOptions& opts);

// Structured parameters used by critpoint: random blocks in every layer,
// arrow weights zero for the triplet format, c_basis = Σ⁻¹.
ModelParams structured_test_params(PromptFormat format, int layers, int d, int n, const Matrix& sigma, Rng& rng);

// Fraction of a model's largest position matrix below which a layer counts
// as the zero member of the structured set.
inline constexpr double kNegligibleLayer = 1e-2;

}  // namespace tvlab
