"""Differentiate a small loss by hand-built tape and compare against finite differences.

Run: python demos/01_gradients.py
"""
import numpy as np

from slotground import fusion, grounding, rewards, slots, trainer  # noqa: F401  (registers composites)
from slotground.numkit import REGISTRY, check_grad, make_rng, param, tanh, value_and_grad

rng = make_rng(0)
params = {"w": param(rng.normal(size=(3, 4))), "x": param(rng.normal(size=4))}


def loss(p):
    h = tanh(p["w"] @ p["x"])
    return (h * h).sum()


value, grads = value_and_grad(loss, params)
print(f"loss = {value:.6f}")
print("dL/dx =", np.round(grads["x"], 5))

print("\nfinite-difference check of every registered composite:")
for name, build in REGISTRY.items():
    f, p, names = build()
    res = check_grad(f, p, names)
    print(f"  {name:16s} max rel. error {res.max_error:.2e}  ({res.n_checked} entries)  {'ok' if res.ok else 'FAIL'}")
