#pragma once

#include "cassle/config.hpp"
#include "cassle/report.hpp"

namespace cassle {

// Builds the task stream, trains task by task, evaluates the accuracy matrix
// row after every task, and assembles the report. When out_dir is non-empty a
// per-task checkpoint (task_<t>.ckpt) is written there.
RunReport run_scenario(const RunConfig& config, const std::string& out_dir = "");

// Independent runs fanned out over worker threads; CSSL_THREADS caps the
// worker count (default 1). Results keep the input order.
std::vector<RunReport> run_many(const std::vector<RunConfig>& configs);

int cssl_thread_cap();

}  // namespace cassle
