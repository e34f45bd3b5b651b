#pragma once

// Internal helpers shared by the op implementations. Not installed.

#include <stdexcept>
#include <string>

#include "vitta/tensor.hpp"

namespace vitta {

// Creates the output of an op: grad participation is inherited from inputs
// when a tape is active.
Tensor make_op_output(Dims dims, const std::vector<const Tensor*>& inputs);

// Records a backward closure for the innermost active tape (no-op otherwise).
void record_node(std::vector<std::shared_ptr<detail::TensorImpl>> outputs,
                 std::function<void()> fn);

inline bool wants_grad(const detail::TensorImpl& t) {
  return t.requires_grad || t.grad_required;
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace vitta
