"""Reverse-mode differentiation on numpy arrays.

Builds a tiny expression, backpropagates through it, and compares the
result against central finite differences. The same check, applied to every
training loss, is what ``protoalign gradcheck`` runs.
"""

import numpy as np

from protoalign import tensor as T
from protoalign.gradcheck import run_suite
from protoalign.tensor import Tensor

with T.precision("double"):
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)

    def f():
        y = T.tanh(T.matmul(x, w))
        return T.sum(y * y)

    T.backward(f())
    print("d/dw of sum(tanh(xw)^2):")
    print(np.round(w.grad, 4))
    print("max relative error vs finite differences:", T.finite_difference_check(f, [x, w]))

print("\nper-loss suite (5 random instances each):")
for r in run_suite(cases=5):
    print(f"  {r.name:20s} {r.max_error:.2e}")
