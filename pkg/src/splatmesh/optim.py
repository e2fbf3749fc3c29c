"""Adam over named parameter groups, the finite-difference gradient harness,
and the stage schedule.

The FD harness is the contract for every hand-derived gradient in the
package: central differences per coordinate, relative error against the
analytic value with an absolute floor for near-zero entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Per-group learning rates.
DEFAULT_RATES = {
    "gaussians": 5e-3,
    "scale": 1e-3,
    "blend": 2e-2,
    "camera": 1e-2,
    "lighting": 5e-4,
    "texture_pca": 1e-2,
}


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8) over a dict of arrays.

    Each parameter name maps to a group rate; updates are in-place on the
    provided arrays and deterministic given the same gradient stream."""

    def __init__(self, params: dict[str, np.ndarray], rates: dict[str, float],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.rates = dict(rates)
        for name in params:
            if name not in self.rates:
                raise ValueError(f"parameter {name!r} has no learning-rate group")
            if self.rates[name] <= 0:
                raise ValueError(f"learning rate for {name!r} must be positive")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if g is None:
                continue
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            self.params[k] -= self.rates[k] * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class FdReport:
    passed: bool
    max_rel_err: float
    worst_param: str
    worst_index: tuple
    n_checked: int
    details: dict = field(default_factory=dict)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"fd_check {status}: max rel err {self.max_rel_err:.3e} "
                f"at {self.worst_param}{list(self.worst_index)} ({self.n_checked} coords)")


def fd_check(loss_fn, params: dict[str, np.ndarray], h: float = 1e-4,
             tol: float = 1e-3, floor: float = 1e-6) -> FdReport:
    """Central-difference check of analytic gradients.

    loss_fn(params) must return (value, grads-dict). The relative error uses
    denominator max(|analytic|, |fd|, floor/tol), so coordinates where both
    sides are below the floor pass automatically."""
    _, grads = loss_fn(params)
    max_rel = 0.0
    worst = ("", ())
    n_checked = 0
    details = {}
    denom_floor = floor / tol
    for name, p in params.items():
        if name not in grads or grads[name] is None:
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        p_err = 0.0
        it = np.ndindex(p.shape) if p.shape else [()]
        for idx in it:
            orig = p[idx]
            p[idx] = orig + h
            lp, _ = loss_fn(params)
            p[idx] = orig - h
            lm, _ = loss_fn(params)
            p[idx] = orig
            fd = (lp - lm) / (2.0 * h)
            a = g[idx] if g.shape else float(g)
            rel = abs(a - fd) / max(abs(a), abs(fd), denom_floor)
            n_checked += 1
            if rel > p_err:
                p_err = rel
            if rel > max_rel:
                max_rel = rel
                worst = (name, idx)
        details[name] = p_err
    return FdReport(max_rel <= tol, max_rel, worst[0], worst[1], n_checked, details)


@dataclass
class Stage:
    name: str
    iterations: int
    weights: str = ""        # "camera" or "geometry" loss-weight variant
    optimize_cameras: bool = False
    mode: str = ""           # refine mode: "pca" or "vertex"


def schedule(scale: float = 1.0) -> list[Stage]:
    """Full training plan; scale shrinks every iteration count for dry runs.

    Camera and geometry Gaussian passes run 5000 iterations, mesh
    perturbation rounds 2000, the densified refinement 1000, and texture
    reconstruction 2000, with Gaussians re-optimized before each of the two
    geometry-refinement rounds."""
    def n(count):
        return max(1, int(round(count * scale)))

    return [
        Stage("camera_pass", n(5000), weights="camera", optimize_cameras=True),
        Stage("geometry_pass_1", n(5000), weights="geometry"),
        Stage("refine_pca", n(2000), mode="pca"),
        Stage("geometry_pass_2", n(5000), weights="geometry"),
        Stage("refine_vertex", n(2000), mode="vertex"),
        Stage("densify_refine", n(1000), weights="geometry"),
        Stage("texture", n(2000)),
    ]
