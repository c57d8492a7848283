// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace selfroute::cli {

/// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;   ///< configuration or input error
inline constexpr int kExitNumeric = 3; ///< non-finite loss

struct TrainArgs {
    std::string config;
    std::string out;
};

struct EvalArgs {
    std::string checkpoint;
    std::string corpus;
    std::int64_t tokens = 65536;
    std::string stats;
};

struct CompareArgs {
    std::vector<std::string> runs;
    std::string out;
};

struct ParamsArgs {
    std::string config;
};

/// File names inside run and stats directories.
inline constexpr const char* kCheckpointFile = "model.ckpt";
inline constexpr const char* kMetricsFile = "metrics.log";
inline constexpr const char* kResolvedConfigFile = "config.resolved";
inline constexpr const char* kHeatmapFile = "heatmap.csv";
inline constexpr const char* kSummaryFile = "summary.txt";
inline constexpr const char* kEvalFile = "eval.txt";

/// Each command reports progress on `out`, problems on `err`, and returns
/// an exit code. A relative data.corpus is resolved against the config
/// file's directory.
int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err);
int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err);
int cmd_compare(const CompareArgs& args, std::ostream& out, std::ostream& err);
int cmd_params(const ParamsArgs& args, std::ostream& out, std::ostream& err);

/// Full command line, including CLI parsing errors (exit 2).
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace selfroute::cli
