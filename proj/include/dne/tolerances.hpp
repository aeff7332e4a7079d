// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace dne {

// Every numeric tolerance used by the checks and tests lives here.
struct Tolerances {
  static constexpr double fd_step = 1e-5;
  static constexpr double fd_relative = 1e-4;
  static constexpr double fd_floor = 1e-6;  // denominator floor for relative error
  static constexpr int fd_points = 10;

  static constexpr double softmax_row_sum = 1e-6;
  static constexpr double matmul_oracle = 1e-12;
  static constexpr double layer_norm_oracle = 1e-10;
  static constexpr double block_oracle = 1e-8;
  static constexpr double ia_reduction = 1e-10;
  static constexpr double mlp_reduction = 1e-6;
  static constexpr double kl_oracle = 1e-10;
  static constexpr double portion_sum = 1e-6;
  static constexpr double flops_ratio = 0.05;

  static constexpr double layer_norm_eps = 1e-5;
};

}  // namespace dne
