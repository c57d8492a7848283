// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "selfroute/routing.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace selfroute {

/// Per-layer expert assignment counts. One count per (token, selected expert).
class ExpertUsageStats {
public:
    ExpertUsageStats() = default;
    ExpertUsageStats(int layers, int num_experts);

    int layers() const { return static_cast<int>(counts_.size()); }
    int num_experts() const { return num_experts_; }
    bool empty() const;

    /// decisions[l] holds layer l's decisions. Throws ShapeError when the
    /// layer count differs and RangeError on an expert id outside [0, N).
    void accumulate(const std::vector<std::vector<RoutingDecision>>& decisions);
    void accumulate_layer(int layer, std::span<const int> experts);

    std::span<const std::int64_t> counts(int layer) const;
    std::int64_t total(int layer) const { return totals_.at(static_cast<std::size_t>(layer)); }

    /// counts / total; all zero for a layer with no assignments.
    std::vector<double> fractions(int layer) const;

    friend bool operator==(const ExpertUsageStats&, const ExpertUsageStats&) = default;
    friend ExpertUsageStats merge(const ExpertUsageStats& a, const ExpertUsageStats& b);

private:
    int num_experts_ = 0;
    std::vector<std::vector<std::int64_t>> counts_;
    std::vector<std::int64_t> totals_;
};

/// Elementwise count addition. A stats object with no layers is the identity;
/// otherwise layer count and N must agree (ShapeError).
ExpertUsageStats merge(const ExpertUsageStats& a, const ExpertUsageStats& b);

/// -Σ f ln f / ln N with 0 ln 0 = 0. N = 1 gives 0.
double normalized_entropy(std::span<const double> f, int num_experts);

double max_expert_fraction(std::span<const double> f);

struct LayerSummary {
    int layer = 0;
    std::int64_t assignments = 0;
    double normalized_entropy = 0;
    double max_fraction = 0;
};

/// Per-layer statistics plus their unweighted means over layers.
struct UsageSummary {
    std::vector<LayerSummary> layers;
    double mean_normalized_entropy = 0;
    double mean_max_fraction = 0;
};

/// Throws ContractError when there are no layers or a layer saw no tokens.
UsageSummary summarize(const ExpertUsageStats& stats);

enum class StatsFormat { heatmap_csv, summary };

/// `layer,expert_0,...` header and one row of fractions (6 decimals) per layer.
std::string heatmap_csv(const ExpertUsageStats& stats);

/// One record per layer and a final `mean` record, fixed field order.
std::string summary_text(const ExpertUsageStats& stats);

/// Reads back summary_text output. Throws FormatError.
UsageSummary parse_summary(const std::string& text);

/// Writes the chosen format to `path`. Throws ContractError on empty stats
/// and IoError when the file cannot be written.
void export_stats(const ExpertUsageStats& stats, StatsFormat format, const std::string& path);

} // namespace selfroute
