// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "selfroute/errors.hpp"
#include "selfroute/tensor.hpp"

#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

namespace selfroute {

/// Ordered record of differentiable operations.
///
/// Each entry holds the op's output node and a backward rule that reads the
/// output's gradient and accumulates into its inputs. Ops are appended as
/// they execute, so inputs always precede the ops that consume them and a
/// reverse replay applies the chain rule. A tape constructed with
/// `recording = false` is a no-grad context: ops compute values only.
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const noexcept { return recording_; }
    std::size_t size() const noexcept { return entries_.size(); }

    /// True when an op over these inputs needs a backward rule.
    template <typename T>
    bool needs_grad(std::initializer_list<const BasicTensor<T>*> inputs) const {
        if (!recording_) {
            return false;
        }
        for (const auto* t : inputs) {
            if (t->defined() && t->requires_grad()) {
                return true;
            }
        }
        return false;
    }

    /// Appends an op. The output is marked as requiring grad.
    template <typename T>
    void record(BasicTensor<T>& output, std::function<void()> backward) {
        output.set_requires_grad(true);
        output.storage()->node = static_cast<std::int64_t>(entries_.size());
        entries_.push_back({output.storage(), std::move(backward)});
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Gradients of intermediate op outputs are cleared first; leaf gradients
    /// accumulate across calls until the caller zeroes them.
    template <typename T>
    void backward(BasicTensor<T>& loss) {
        if (loss.numel() != 1) {
            throw ContractError("backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
        }
        if (!loss.requires_grad()) {
            return;
        }
        for (auto& e : entries_) {
            e.output->reset_grad();
        }
        loss.grad()[0] += T(1);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            it->backward();
        }
    }

    /// Drops all entries, releasing the intermediates they keep alive.
    void clear() { entries_.clear(); }

private:
    struct Entry {
        std::shared_ptr<TensorNode> output;
        std::function<void()> backward;
    };

    bool recording_;
    std::vector<Entry> entries_;
};

} // namespace selfroute
