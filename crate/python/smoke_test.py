"""Smoke test for the tgcca_py extension.

Build and install with `pip install --no-build-isolation crates/py`, then run
`python python/smoke_test.py`.
"""

import json

import numpy as np

import tgcca_py as tg


def tensor(a):
    return tg.Tensor(list(a.shape), a.ravel(order="F").tolist())


def check_roundtrip():
    a = np.arange(24, dtype=float).reshape(2, 3, 4)
    t = tensor(a)
    assert t.dims == [2, 3, 4]
    assert t.get([1, 2, 3]) == a[1, 2, 3]
    assert abs(t.frobenius_norm() - np.linalg.norm(a)) < 1e-12


def check_fit():
    rng = np.random.default_rng(0)
    n = 200
    z = rng.standard_normal(n)
    u, v = rng.standard_normal(5), rng.standard_normal(4)
    x1 = np.einsum("i,j,k->ijk", z, u, v) + 0.5 * rng.standard_normal((n, 5, 4))
    x2 = np.outer(z, rng.standard_normal(6)) + 0.5 * rng.standard_normal((n, 6))
    res = tg.fit([tensor(x1), tensor(x2)], ranks=[1], n_starts=3, seed=1)
    assert res.converged, res
    assert all(b - a >= -1e-10 for a, b in zip(res.trace, res.trace[1:]))
    w = res.vectors[0]
    assert w.dims == [5, 4] and w.rank == 1
    cos = tg.cosine(w.reconstruct(), np.outer(u, v).ravel(order="F").tolist())
    assert cos > 0.9, cos
    print(f"fit: criterion {res.criterion:.4f}, iterations {res.iterations}, cosine {cos:.4f}")

    stages = tg.extract([tensor(x1), tensor(x2)], 2, ranks=[1], seed=1)
    assert len(stages) == 2 and stages[0] is not None


def check_simulate():
    spec = {
        "seed": 3,
        "n": 100,
        "folds": 2,
        "eta": 1.0,
        "blocks": [
            {"shape": {"kind": "cross", "dims": [8, 8], "thickness": 2, "margin": 1}, "rho": 0.9},
            {"shape": {"kind": "rect", "dims": [6, 5], "ranges": [[1, 4], [2, 5]]}, "rho": 0.9},
        ],
    }
    sim = tg.simulate(json.dumps(spec))
    assert len(sim.folds) == 2
    assert [b.dims for b in sim.folds[0]] == [[100, 8, 8], [100, 6, 5]]
    assert sim.truths[0].rank == 2
    again = tg.simulate(json.dumps(spec))
    assert again.folds[1][0].data == sim.folds[1][0].data


if __name__ == "__main__":
    check_roundtrip()
    check_fit()
    check_simulate()
    print("smoke test ok")
