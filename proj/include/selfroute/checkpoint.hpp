// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "selfroute/train.hpp"

#include <string>
#include <string_view>

namespace selfroute {

/// Checkpoint file layout.
///
/// A text header followed by a binary blob. The header starts with
///
///     selfroute-checkpoint
///     version = 1
///     header_bytes = 0000004096
///
/// where header_bytes is the header's full length including the closing
/// `end` line, then the resolved run config, the step, generator states,
/// pending metric sums, one `tensor name dims offset count` line per blob
/// entry (parameters, then `adam.m.*`, then `adam.v.*`) and the per-parameter
/// optimizer step counts. The blob holds every tensor as little-endian
/// 32-bit floats, concatenated in manifest order; offsets are in bytes from
/// the start of the blob.
inline constexpr int kCheckpointVersion = 1;

std::string encode_checkpoint(const Checkpoint& c);

/// Validates everything against a freshly built model of the recorded
/// config before returning; any disagreement throws FormatError.
Checkpoint decode_checkpoint(std::string_view bytes);

/// Writes through a temporary file and a rename. IoError on failure.
void save_checkpoint(const Checkpoint& c, const std::string& path);

/// IoError when unreadable, FormatError when malformed.
Checkpoint load_checkpoint(const std::string& path);

} // namespace selfroute
