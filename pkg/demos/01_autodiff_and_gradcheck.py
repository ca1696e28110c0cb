"""A tour of the autodiff engine: building graphs, backprop, and checking
analytic gradients against central finite differences."""

import numpy as np

from gridtnp import tensor as T
from gridtnp.tensor import Tensor, backward, grad_check

rng = np.random.default_rng(0)

# A tiny two-layer network on random data, built define-by-run.
w1 = Tensor(rng.normal(size=(3, 8)) * 0.5, requires_grad=True)
w2 = Tensor(rng.normal(size=(8, 1)) * 0.5, requires_grad=True)
x = Tensor(rng.normal(size=(16, 3)))
y = Tensor(rng.normal(size=(16, 1)))

pred = T.matmul(T.gelu(T.matmul(x, w1)), w2)
err = T.sub(pred, y)
loss = T.tmean(T.mul(err, err))
print(f"loss = {float(loss.data):.4f}")

backward(loss)
print(f"|dL/dw1| = {np.abs(w1.grad).mean():.4f}, |dL/dw2| = {np.abs(w2.grad).mean():.4f}")

# The gradient checker compares against central finite differences.
for name, w in [("w1", w1), ("w2", w2)]:
    w.zero_grad()
    rep = grad_check(
        lambda t: T.tmean(T.mul(T.sub(T.matmul(T.gelu(T.matmul(x, w1)), w2), y),
                                T.sub(T.matmul(T.gelu(T.matmul(x, w1)), w2), y))),
        w,
    )
    print(f"{name}: {rep}")

# Softmax and layer norm carry their own backward rules; spot-check them.
for op_name, fn in [
    ("softmax", lambda t: T.tsum(T.mul(T.softmax(t, -1), Tensor(np.arange(4.0))))),
    ("layer_norm", lambda t: T.tsum(T.mul(T.layer_norm(t), Tensor(np.arange(4.0))))),
]:
    t = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    print(f"{op_name}: {grad_check(fn, t)}")
