"""
Gradients, double backward and Hessian-vector products
======================================================

The tape records every primitive; a backward pass written in the same
primitives can itself be recorded, which is all MLDG and MetaReg need.
"""

import numpy as np

from crossdepict.autodiff import ParamSet, Tape, grad, hessian_vector_product, tanh, tsum, value_and_grad

# f(w) = sum(tanh(w)^2); its gradient is 2 tanh(w) (1 - tanh(w)^2)
w = np.array([0.3, -1.2, 2.0])
value, g = value_and_grad(lambda p: tsum(tanh(p["w"]) * tanh(p["w"])), {"w": w})
t = np.tanh(w)
print("f =", value)
print("grad      ", g["w"])
print("by hand   ", 2 * t * (1 - t ** 2))

# create_graph=True keeps the backward pass on the tape, so the gradient can be
# differentiated again. Here d/dw of sum(grad f * v) is H v.
tape = Tape()
leaves = ParamSet({"w": tape.leaf(w)})
gw = grad(tsum(tanh(leaves["w"]) * tanh(leaves["w"])), leaves, create_graph=True)
v = np.array([1.0, 0.0, 0.0])
hv = grad(tsum(gw["w"] * tape.const(v)), leaves)["w"].numpy()
print("H v (double backward)", hv)

# the packaged helper, in both modes
f = lambda p: tsum(tanh(p["w"]) * tanh(p["w"]))
print("H v exact      ", hessian_vector_product(f, {"w": w}, {"w": v}, "exact")["w"])
print("H v finite-diff", hessian_vector_product(f, {"w": w}, {"w": v}, "finite-diff")["w"])
