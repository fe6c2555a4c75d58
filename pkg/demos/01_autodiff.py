"""
Reverse-mode gradients on a tiny tensor engine
==============================================

Build a small expression, ask for gradients, and compare them with central
finite differences.
"""
import numpy as np

from stllmdf import autodiff as ad
from stllmdf.autodiff import Tensor

rng = np.random.default_rng(0)

# leaves that should receive a gradient are created with requires_grad=True
W = Tensor(rng.standard_normal((3, 4)), True, np.float64)
x = Tensor(rng.standard_normal((5, 3)), dtype=np.float64)
b = Tensor(np.zeros(4), True, np.float64)

def loss():
    h = ad.relu(ad.matmul(x, W) + b)
    return ad.softmax_last(h).sum() + (h * h).mean()

grads = ad.backward(loss())
print("dL/dW =")
print(np.round(grads[W], 4))
print("dL/db =", np.round(grads[b], 4))

# the same numbers, from finite differences (h = 1e-5)
err = ad.finite_diff_check(loss, [W, b], h=1e-5)
print("worst relative error against finite differences: %.2e" % err)

# frozen leaves take part in the forward pass but get no gradient entry
W.requires_grad = False
print("W still in the gradient map after freezing?", W in ad.backward(loss()))

# inside no_grad nothing is traced at all
with ad.no_grad():
    print("traced under no_grad?", loss().requires_grad)

print("\nregistered gradient rules:", ", ".join(sorted(ad.GRADIENT_RULES)))
