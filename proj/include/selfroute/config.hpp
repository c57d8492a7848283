// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "selfroute/model.hpp"
#include "selfroute/train.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace selfroute {

/// Model and training settings of one run.
///
/// Serialized as `key = value` lines; `#` starts a comment. Keys:
///   model.depth model.hidden model.heads model.seq_len model.vocab
///   model.moe_placement model.num_experts model.top_k model.gate
///   model.slice_offset (integer or `auto`)
///   train.steps train.batch_size train.learning_rate train.warmup_steps
///   train.weight_decay train.balance_weight train.seed train.eval_every
///   data.corpus
/// The model is initialized from train.seed.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;

    /// Both halves; throws ConfigError.
    void validate() const;
};

/// Every recognized key, in serialization order.
const std::vector<std::string_view>& config_keys();

/// Starts from defaults and applies the given keys. Unknown or repeated keys
/// and unparsable values throw ConfigError naming the key. The result is
/// validated.
RunConfig parse_config(std::string_view text);

/// Reads and parses a file; IoError when it cannot be read.
RunConfig load_config(const std::string& path);

/// All keys with their resolved values; parse_config(format_config(c))
/// reproduces c.
std::string format_config(const RunConfig& cfg);

/// Shortest decimal text that reads back to the same double.
std::string format_double(double v);

} // namespace selfroute
