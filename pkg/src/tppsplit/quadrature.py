"""Per-interval quadrature rules for integrating the ground intensity."""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

METHODS = ("gauss_legendre", "trapezoid", "monte_carlo")


@dataclass(frozen=True)
class QuadratureConfig:
    method: str = "gauss_legendre"
    nodes: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown quadrature method {self.method!r}")
        if self.nodes < 2:
            raise ValueError("need at least 2 nodes")

    def to_dict(self):
        return {"method": self.method, "nodes": self.nodes, "seed": self.seed}


@lru_cache(maxsize=None)
def _gauss_legendre_unit(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return (x + 1.0) / 2.0, w / 2.0


def unit_rule(quad, n_rows):
    """Fractions u in [0, 1] and weights so that  int_0^tau f ~ tau * sum_q w_q f(tau u_q).

    Returns arrays of shape (n_rows, nodes).  Monte Carlo draws fresh uniform
    fractions per row from ``quad.seed``.
    """
    n = quad.nodes
    if quad.method == "gauss_legendre":
        u, w = _gauss_legendre_unit(n)
    elif quad.method == "trapezoid":
        u = np.linspace(0.0, 1.0, n)
        w = np.full(n, 1.0 / (n - 1))
        w[[0, -1]] *= 0.5
    else:
        rng = np.random.default_rng(quad.seed)
        u = rng.uniform(size=(n_rows, n))
        return u, np.full((n_rows, n), 1.0 / n)
    return np.broadcast_to(u, (n_rows, n)), np.broadcast_to(w, (n_rows, n))


def integrate(fn, a, b, quad=QuadratureConfig()):
    """Integrate a vectorised callable on [a, b]; returns (value, stderr).

    stderr is 0 for the deterministic rules.
    """
    if b < a:
        raise ValueError("need b >= a")
    span = b - a
    u, w = unit_rule(quad, 1)
    vals = np.asarray(fn(a + span * u[0]), dtype=np.float64)
    value = float(span * np.sum(w[0] * vals))
    if quad.method != "monte_carlo":
        return value, 0.0
    return value, float(span * np.std(vals, ddof=1) / np.sqrt(quad.nodes))
