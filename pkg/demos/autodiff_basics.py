"""Tour of the reverse-mode tensor core: building a graph, backpropagating,
and verifying a composite gradient against central finite differences.
"""

import numpy as np

from crispdec.gradcheck import rel_err
from crispdec.tensor import Tensor, conv2d, softmax

rng = np.random.default_rng(0)

# --- a tiny expression graph ------------------------------------------------
x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
y = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
loss = ((x * y).relu() + x.sigmoid()).sum()
loss.backward()
print("loss:", float(loss.data))
print("dloss/dx:\n", x.grad)

# --- gradients through a convolution -----------------------------------------
img = Tensor(rng.standard_normal((1, 2, 8, 8)), requires_grad=True)
w = Tensor(rng.standard_normal((4, 2, 3, 3)) * 0.3, requires_grad=True)
out = conv2d(img, w, padding=1)
probs = softmax(out, axis=1)
(probs * probs).sum().backward()  # sum of squared probabilities
print("\nconv weight grad norm:", float(np.linalg.norm(w.grad)))

# --- finite-difference agreement ---------------------------------------------
def f(arr):
    t = conv2d(Tensor(arr), w.detach(), padding=1)
    p = softmax(t, axis=1)
    return float((p * p).sum().data)

eps = 1e-6
numeric = np.zeros_like(img.data)
it = np.nditer(img.data, flags=["multi_index"])
for _ in it:
    idx = it.multi_index
    base = img.data[idx]
    img_p = img.data.copy(); img_p[idx] = base + eps
    img_m = img.data.copy(); img_m[idx] = base - eps
    numeric[idx] = (f(img_p) - f(img_m)) / (2 * eps)

print("max relative error vs central differences:",
      f"{rel_err(img.grad, numeric):.2e}")
