#pragma once

// Finite-difference checks over every differentiable component, shared by the
// CLI `gradcheck` command and the acceptance run.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace neco {

struct GradcheckRow {
  std::string component;  // relax_fn, swap_layer, soft_sort, roi_align, cross_entropy_perm, neco_loss
  std::string variant;    // family / network / size
  std::size_t instances = 0;
  double max_error = 0;   // max relative error over instances
  bool pass = false;
};

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::vector<std::size_t> sizes{2, 4, 8, 16};  // soft_sort lengths
  std::size_t instances = 10;
  double eps = 1e-6;
  double tolerance = 1e-5;
};

std::vector<GradcheckRow> run_gradcheck(const GradcheckOptions& opt);

nlohmann::json to_json(const GradcheckRow& r);

}  // namespace neco
