"""Invertible prompter stacks: forward, inverse, and why nothing is lost.

Run:  python demos/01_coupling_roundtrip.py
"""

import numpy as np

from misskit.prompter import PrompterConfig, build_stack
from misskit.tensor import Tensor

rng = np.random.default_rng(0)

# %% A fresh stack is the identity: S and T start at zero.
cfg = PrompterConfig(num_blocks=4)
stack = build_stack("rgb2tir", layer=1, width=16, cfg=cfg, rng=rng)
x = Tensor(rng.uniform(-10, 10, size=(12, 16)))
print("fresh stack changes x by", np.abs(stack.forward(x).data - x.data).max())

# %% Give every subnet random weights; the map is now far from identity...
for p in stack.parameters():
    p.data[...] = rng.normal(0, 0.5, size=p.data.shape)
y = stack.forward(x)
print("after randomising, |y - x|_max =", round(float(np.abs(y.data - x.data).max()), 3))

# %% ...but the inverse still undoes it to rounding error, with the same weights.
x_back = stack.inverse(y)
print("|inverse(forward(x)) - x|_max =", float(np.abs(x_back.data - x.data).max()))
print("|forward(inverse(y)) - y|_max =", float(np.abs(stack.forward(stack.inverse(y)).data - y.data).max()))

# %% Odd widths cannot be split in half.
try:
    build_stack("rgb2tir", 1, 15, cfg)
except Exception as err:
    print("width 15:", err)
