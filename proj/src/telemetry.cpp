// SPDX-License-Identifier: Apache-2.0
#include "selfroute/telemetry.hpp"

#include "selfroute/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace selfroute {

namespace {

std::string fixed6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

} // namespace

ExpertUsageStats::ExpertUsageStats(int layers, int num_experts)
    : num_experts_(num_experts),
      counts_(static_cast<std::size_t>(layers), std::vector<std::int64_t>(static_cast<std::size_t>(num_experts), 0)),
      totals_(static_cast<std::size_t>(layers), 0) {
    if (layers < 0 || num_experts < 1) {
        throw ShapeError("usage stats need layers >= 0 and at least one expert");
    }
}

bool ExpertUsageStats::empty() const {
    return std::all_of(totals_.begin(), totals_.end(), [](std::int64_t t) { return t == 0; });
}

void ExpertUsageStats::accumulate(const std::vector<std::vector<RoutingDecision>>& decisions) {
    if (static_cast<int>(decisions.size()) != layers()) {
        throw ShapeError("usage stats track " + std::to_string(layers()) + " layers, got decisions for " +
                         std::to_string(decisions.size()));
    }
    for (std::size_t l = 0; l < decisions.size(); ++l) {
        for (const auto& d : decisions[l]) {
            accumulate_layer(static_cast<int>(l), d.indices);
        }
    }
}

void ExpertUsageStats::accumulate_layer(int layer, std::span<const int> experts) {
    if (layer < 0 || layer >= layers()) {
        throw ShapeError("layer " + std::to_string(layer) + " outside [0, " + std::to_string(layers()) + ")");
    }
    auto& c = counts_[static_cast<std::size_t>(layer)];
    for (int e : experts) {
        if (e < 0 || e >= num_experts_) {
            throw RangeError("expert " + std::to_string(e) + " outside [0, " + std::to_string(num_experts_) + ")");
        }
        ++c[static_cast<std::size_t>(e)];
    }
    totals_[static_cast<std::size_t>(layer)] += static_cast<std::int64_t>(experts.size());
}

std::span<const std::int64_t> ExpertUsageStats::counts(int layer) const {
    return counts_.at(static_cast<std::size_t>(layer));
}

std::vector<double> ExpertUsageStats::fractions(int layer) const {
    const auto c = counts(layer);
    const auto t = total(layer);
    std::vector<double> f(c.size(), 0.0);
    if (t > 0) {
        for (std::size_t i = 0; i < c.size(); ++i) {
            f[i] = static_cast<double>(c[i]) / static_cast<double>(t);
        }
    }
    return f;
}

ExpertUsageStats merge(const ExpertUsageStats& a, const ExpertUsageStats& b) {
    if (a.layers() == 0) {
        return b;
    }
    if (b.layers() == 0) {
        return a;
    }
    if (a.layers() != b.layers() || a.num_experts() != b.num_experts()) {
        throw ShapeError("cannot merge usage stats of different shapes");
    }
    ExpertUsageStats out = a;
    for (std::size_t l = 0; l < out.counts_.size(); ++l) {
        for (std::size_t e = 0; e < out.counts_[l].size(); ++e) {
            out.counts_[l][e] += b.counts_[l][e];
        }
        out.totals_[l] += b.totals_[l];
    }
    return out;
}

double normalized_entropy(std::span<const double> f, int num_experts) {
    if (num_experts <= 1) {
        return 0.0;
    }
    double h = 0;
    for (double p : f) {
        if (p > 0) {
            h -= p * std::log(p);
        }
    }
    return h / std::log(static_cast<double>(num_experts));
}

double max_expert_fraction(std::span<const double> f) {
    return f.empty() ? 0.0 : *std::max_element(f.begin(), f.end());
}

UsageSummary summarize(const ExpertUsageStats& stats) {
    if (stats.layers() == 0) {
        throw ContractError("usage stats have no layers");
    }
    UsageSummary s;
    for (int l = 0; l < stats.layers(); ++l) {
        if (stats.total(l) == 0) {
            throw ContractError("layer " + std::to_string(l) + " saw no routed tokens");
        }
        const auto f = stats.fractions(l);
        LayerSummary ls;
        ls.layer = l;
        ls.assignments = stats.total(l);
        ls.normalized_entropy = normalized_entropy(f, stats.num_experts());
        ls.max_fraction = max_expert_fraction(f);
        s.mean_normalized_entropy += ls.normalized_entropy;
        s.mean_max_fraction += ls.max_fraction;
        s.layers.push_back(ls);
    }
    s.mean_normalized_entropy /= static_cast<double>(stats.layers());
    s.mean_max_fraction /= static_cast<double>(stats.layers());
    return s;
}

std::string heatmap_csv(const ExpertUsageStats& stats) {
    summarize(stats); // same emptiness rules as the summary
    std::string out = "layer";
    for (int e = 0; e < stats.num_experts(); ++e) {
        out += ",expert_" + std::to_string(e);
    }
    out += '\n';
    for (int l = 0; l < stats.layers(); ++l) {
        out += std::to_string(l);
        for (double f : stats.fractions(l)) {
            out += ',' + fixed6(f);
        }
        out += '\n';
    }
    return out;
}

std::string summary_text(const ExpertUsageStats& stats) {
    const auto s = summarize(stats);
    std::string out = "# normalized_entropy = H / ln N; mean is the unweighted mean over layers\n";
    out += "experts " + std::to_string(stats.num_experts()) + " layers " + std::to_string(stats.layers()) + '\n';
    for (const auto& l : s.layers) {
        out += "layer " + std::to_string(l.layer) + " assignments=" + std::to_string(l.assignments) +
               " normalized_entropy=" + fixed6(l.normalized_entropy) + " max_fraction=" + fixed6(l.max_fraction) +
               '\n';
    }
    out += "mean normalized_entropy=" + fixed6(s.mean_normalized_entropy) +
           " max_fraction=" + fixed6(s.mean_max_fraction) + '\n';
    return out;
}

UsageSummary parse_summary(const std::string& text) {
    UsageSummary s;
    bool have_mean = false;
    std::istringstream in(text);
    std::string line;
    auto field = [](const std::string& line, const std::string& key) {
        const auto pos = line.find(key + '=');
        if (pos == std::string::npos) {
            throw FormatError("summary record lacks " + key + ": " + line);
        }
        try {
            return std::stod(line.substr(pos + key.size() + 1));
        } catch (const std::exception&) {
            throw FormatError("bad value for " + key + ": " + line);
        }
    };
    while (std::getline(in, line)) {
        if (line.rfind("layer ", 0) == 0) {
            LayerSummary l;
            l.layer = static_cast<int>(s.layers.size());
            l.assignments = static_cast<std::int64_t>(field(line, "assignments"));
            l.normalized_entropy = field(line, "normalized_entropy");
            l.max_fraction = field(line, "max_fraction");
            s.layers.push_back(l);
        } else if (line.rfind("mean ", 0) == 0) {
            s.mean_normalized_entropy = field(line, "normalized_entropy");
            s.mean_max_fraction = field(line, "max_fraction");
            have_mean = true;
        }
    }
    if (!have_mean) {
        throw FormatError("summary has no mean record");
    }
    return s;
}

void export_stats(const ExpertUsageStats& stats, StatsFormat format, const std::string& path) {
    const std::string text = format == StatsFormat::heatmap_csv ? heatmap_csv(stats) : summary_text(stats);
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) {
        throw IoError("cannot write " + path);
    }
}

} // namespace selfroute
