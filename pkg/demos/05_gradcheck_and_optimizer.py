"""Finite-difference gradient verification and the sparse Adam optimizer.

Every backward pass in the package is hand-derived; this demo runs the
finite-difference suites on a few seeds and shows the sparse-row Adam
behavior that keeps hash-table updates cheap.

Run: python demos/05_gradcheck_and_optimizer.py
"""

import numpy as np

from trislam.gradcheck import SUITES
from trislam.nnopt import AdamOptimizer, ParamGroup


def main():
    print("=== finite-difference suites (5 seeds each) ===")
    for name, fn in SUITES.items():
        worst = max(fn(seed) for seed in range(5))
        print(f"  {name:22s} max rel error {worst:.2e}")

    print("\n=== sparse-row Adam ===")
    table = np.zeros((8, 2))
    grad = np.zeros_like(table)
    group = ParamGroup("table", table, grad, lr=0.1, sparse_rows=True)
    opt = AdamOptimizer([group])
    for step in range(3):
        grad[:] = 0.0
        grad[step % 2] = 1.0  # alternate touching rows 0 and 1
        opt.step()
        touched = np.nonzero(np.any(table != 0.0, axis=1))[0]
        print(f"  step {step}: rows with updates so far {touched.tolist()}")
    print("rows without gradient are never touched; their Adam moments stay")
    print("frozen, which is what makes hash-table optimization affordable.")


if __name__ == "__main__":
    main()
