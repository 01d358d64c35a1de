"""
Reverse-mode differentiation on a tape
======================================
"""

import numpy as np

from chartreason.autodiff import (
    ParamStore,
    Tape,
    Tensor,
    backward,
    finite_diff_check,
    gelu,
    matmul,
    mul,
    sum_all,
)

# operations recorded while a tape is active can be replayed backwards
x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
with Tape():
    y = sum_all(mul(x, x))
    backward(y)
print("d/dx sum(x*x) =")
print(x.grad)  # 2x

# a parameter store hands out named, seeded tensors
store = ParamStore(seed=0)
w1 = store.matrix("w1", 2, 8)
w2 = store.matrix("w2", 8, 1)

def tiny_mlp(*_):
    h = gelu(matmul(x, w1))
    return sum_all(matmul(h, w2))

# central differences agree with the tape to near machine precision
err = finite_diff_check(tiny_mlp, [x, w1, w2], h=1e-4)
print(f"max relative error vs finite differences: {err:.2e}")
