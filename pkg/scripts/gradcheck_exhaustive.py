"""Finite-difference check of every coordinate of the tiny model (slow, about 1.5-2 min).

    python scripts/gradcheck_exhaustive.py
"""

import time

from lapa.train import gradcheck_model, tiny_gradcheck_setup


def main():
    start = time.perf_counter()
    model, samples = tiny_gradcheck_setup()
    groups, _ = gradcheck_model(model, samples, h=1e-5, tol=1e-5, max_entries=None)
    for g in groups:
        print(f"{g.group:<12}{g.checked:>7}  {g.max_rel_error:.3e}  {'pass' if g.passed else 'FAIL'}")
    print(f"{sum(g.checked for g in groups)} coordinates in {time.perf_counter() - start:.1f}s")


if __name__ == "__main__":
    main()
