#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "tvlab/training.hpp"

namespace tvlab::cli {

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kUsage = 2, kDiverged = 3 };

// Entry point shared by the binary and the tests.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Grid file: {"base": {...}, "formats": [...], "L": [...], "n": [...]} for a
// full product, or {"base": {...}, "cells": [{...}, ...]} for explicit cells.
// Cell entries override base keys.
std::vector<TrainConfig> grid_from_json(const nlohmann::json& j);

// Writes config.json, sweep.csv, params/<format>_L<L>_n<n>.json and
// reports/sweep.json.
void write_sweep_dir(const std::filesystem::path& out, const nlohmann::json& grid, int seeds,
                     const std::vector<SweepCell>& cells);

// Best params of one cell of a sweep directory.
std::filesystem::path sweep_params_path(const std::filesystem::path& dir, PromptFormat format, int L, int n);

// --threads, then TVLAB_THREADS, then 1.
int resolve_threads(int flag);

}  // namespace tvlab::cli
