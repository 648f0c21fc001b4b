#pragma once

#include "common.hpp"

namespace condgap::cli {

int demo_univariate(const Context& ctx);
int demo_bimodal(const Context& ctx);
int gap_lgssm(const Context& ctx);
int gen_data(const Context& ctx);
int train(const Context& ctx);
int eval_elbo(const Context& ctx);
int prefix_sample(const Context& ctx);

}  // namespace condgap::cli
