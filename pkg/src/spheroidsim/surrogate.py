"""Gaussian-process emulator with a squared-exponential (ARD) kernel.

Inputs are min-max scaled to the unit cube using the parameter bounds and
outputs are standardised, so the hyperparameters live on comparable scales.
Hyperparameters (signal variance, one lengthscale per input, noise variance)
maximise the log marginal likelihood, optimised in log space with L-BFGS-B
from several Latin-hypercube starting points.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.stats import qmc

from .core import ConditioningError

# log-space search box: signal variance, lengthscales (unit-cube units), noise
_LOG_SF2 = (np.log(1e-2), np.log(1e2))
_LOG_ELL = (np.log(1e-2), np.log(1e2))
_LOG_NOISE = (np.log(1e-10), np.log(1.0))
_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


def rbf_kernel(a, b, variance: float, lengthscales) -> np.ndarray:
    """σ² exp(-Σ_d (a_d - b_d)² / (2 l_d²)) for every row pair of ``a`` and ``b``."""
    ls = np.atleast_1d(np.asarray(lengthscales, dtype=float))
    if np.any(ls <= 0):
        raise ValueError("lengthscales must be positive")
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1] or a.shape[1] != ls.size and ls.size != 1:
        raise ValueError("input dimensions do not match")
    a = a / ls
    b = b / ls
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return variance * np.exp(-0.5 * np.maximum(d2, 0.0))


@dataclass
class TrainingSet:
    inputs: np.ndarray
    outputs: np.ndarray
    bounds: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.outputs = np.asarray(self.outputs, dtype=float).ravel()
        self.bounds = np.asarray(self.bounds, dtype=float).reshape(-1, 2)
        n, j = self.inputs.shape
        if n < 2:
            raise ValueError("a training set needs at least two points")
        if len(self.outputs) != n:
            raise ValueError("inputs and outputs differ in length")
        if self.bounds.shape[0] != j:
            raise ValueError("bounds must give one [low, high] row per input")
        if np.any(self.bounds[:, 1] <= self.bounds[:, 0]):
            raise ValueError("every bound needs low < high")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.outputs))):
            raise ValueError("training data must be finite")
        if not self.names:
            self.names = tuple(f"x{i}" for i in range(j))

    def normalise(self, x) -> np.ndarray:
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return (np.atleast_2d(np.asarray(x, dtype=float)) - lo) / (hi - lo)

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.inputs, self.outputs, self.bounds):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def _factor(k):
    """Cholesky factor with escalating diagonal jitter (relative to the mean diagonal)."""
    scale = float(np.mean(np.diag(k)))
    eye = np.eye(len(k))
    for j in _JITTERS:
        try:
            return np.linalg.cholesky(k + j * scale * eye), j
        except np.linalg.LinAlgError:
            continue
    raise ConditioningError("covariance is not positive definite even with 1e-4 relative jitter")


def _nll_and_grad(theta, x, y, fixed_noise):
    """Negative log marginal likelihood of standardised data and its log-space gradient."""
    n, j = x.shape
    sf2 = np.exp(theta[0])
    ell = np.exp(theta[1:1 + j])
    noise = fixed_noise if fixed_noise is not None else np.exp(theta[1 + j])
    kf = rbf_kernel(x, x, sf2, ell)
    try:
        lower, _ = _factor(kf + noise * np.eye(n))
    except ConditioningError:
        return 1e25, np.zeros_like(theta)
    alpha = cho_solve((lower, True), y)
    nll = 0.5 * y @ alpha + np.log(np.diag(lower)).sum() + 0.5 * n * np.log(2 * np.pi)
    inner = np.outer(alpha, alpha) - cho_solve((lower, True), np.eye(n))
    grad = np.empty_like(theta)
    grad[0] = -0.5 * np.sum(inner * kf)
    for d in range(j):
        diff = (x[:, d:d + 1] - x[:, d:d + 1].T) ** 2 / ell[d] ** 2
        grad[1 + d] = -0.5 * np.sum(inner * kf * diff)
    if fixed_noise is None:
        grad[1 + j] = -0.5 * noise * np.trace(inner)
    return float(nll), grad


@dataclass
class GPModel:
    variance: float
    lengthscales: np.ndarray
    noise: float
    data: TrainingSet
    y_mean: float = 0.0
    y_scale: float = 1.0
    log_likelihood: float = float("nan")
    fit_log: list = field(default_factory=list)

    def __post_init__(self):
        self.lengthscales = np.asarray(self.lengthscales, dtype=float)
        if np.any(self.lengthscales <= 0):
            raise ValueError("lengthscales must be positive")
        self.x = self.data.normalise(self.data.inputs)
        y = (self.data.outputs - self.y_mean) / self.y_scale
        k = rbf_kernel(self.x, self.x, self.variance, self.lengthscales)
        self.chol, self.jitter = _factor(k + self.noise * np.eye(len(self.x)))
        self.alpha = cho_solve((self.chol, True), y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def extrapolated(self, x) -> np.ndarray:
        u = self.data.normalise(x)
        return np.any((u < 0) | (u > 1), axis=1)

    def predict(self, x, return_var: bool = True):
        """Posterior mean and (latent) variance in output units."""
        u = self.data.normalise(x)
        ks = rbf_kernel(u, self.x, self.variance, self.lengthscales)
        mean = self.y_mean + self.y_scale * (ks @ self.alpha)
        if not return_var:
            return mean
        v = solve_triangular(self.chol, ks.T, lower=True)
        var = self.variance - (v * v).sum(0)
        var = np.where(var < 1e-12 * self.variance, np.maximum(var, 0.0), var)
        return mean, np.maximum(var, 0.0) * self.y_scale**2

    def __call__(self, x):
        return self.predict(x, return_var=False)

    # ------------------------------------------------------------ persistence
    def to_dict(self) -> dict:
        return {
            "kind": "rbf-gp",
            "variance": self.variance,
            "lengthscales": self.lengthscales.tolist(),
            "noise": self.noise,
            "y_mean": self.y_mean,
            "y_scale": self.y_scale,
            "log_likelihood": self.log_likelihood,
            "names": list(self.data.names),
            "bounds": self.data.bounds.tolist(),
            "inputs": self.data.inputs.tolist(),
            "outputs": self.data.outputs.tolist(),
            "training_digest": self.data.digest(),
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def from_dict(cls, d) -> GPModel:
        if d.get("kind") != "rbf-gp":
            raise ValueError("not a serialised GP model")
        data = TrainingSet(d["inputs"], d["outputs"], d["bounds"], tuple(d["names"]))
        if data.digest() != d["training_digest"]:
            raise ValueError("training data digest mismatch")
        return cls(d["variance"], d["lengthscales"], d["noise"], data,
                   d["y_mean"], d["y_scale"], d["log_likelihood"])

    @classmethod
    def load(cls, path) -> GPModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit(data: TrainingSet, restarts: int = 5, seed: int = 0, noise: float | None = None,
        maxiter: int = 300) -> GPModel:
    """Maximum-likelihood GP. ``noise`` fixes the standardised noise variance."""
    y_mean = float(data.outputs.mean())
    y_scale = float(data.outputs.std())
    if not y_scale > 0:
        y_scale = 1.0
    y = (data.outputs - y_mean) / y_scale
    x = data.normalise(data.inputs)
    j = x.shape[1]
    box = [_LOG_SF2] + [_LOG_ELL] * j + ([] if noise is not None else [_LOG_NOISE])
    box_arr = np.array(box)
    # first start at a neutral guess, the rest spread by Latin hypercube
    neutral = np.concatenate([[0.0], np.full(j, np.log(0.3)), [] if noise is not None else [np.log(1e-4)]])
    starts = [neutral]
    if restarts > 1:
        u = qmc.LatinHypercube(d=len(box), seed=seed).random(restarts - 1)
        starts += list(box_arr[:, 0] + u * (box_arr[:, 1] - box_arr[:, 0]))
    best = None
    log = []
    for s in starts:
        f0, _ = _nll_and_grad(s, x, y, noise)
        res = minimize(_nll_and_grad, s, args=(x, y, noise), jac=True, method="L-BFGS-B",
                       bounds=box, options={"maxiter": maxiter})
        theta, f1 = res.x, float(res.fun)
        if f1 > f0:  # keep the start if the optimiser wandered off
            theta, f1 = s, f0
        log.append({"start_nll": f0, "end_nll": f1})
        if best is None or f1 < best[1]:
            best = (theta, f1)
    theta = best[0]
    nz = noise if noise is not None else float(np.exp(theta[1 + j]))
    return GPModel(float(np.exp(theta[0])), np.exp(theta[1:1 + j]), nz, data,
                   y_mean, y_scale, -best[1], log)


def q2(model, test_inputs, test_outputs) -> float:
    """Nash-Sutcliffe efficiency of the predictive mean on held-out data."""
    f = np.asarray(test_outputs, dtype=float).ravel()
    if len(f) < 2:
        raise ValueError("need at least two test points")
    ss_tot = float(((f - f.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise ValueError("test outputs have zero variance; Q2 is undefined")
    m = model(test_inputs) if callable(model) else model.predict(test_inputs, return_var=False)
    return 1.0 - float(((np.asarray(m) - f) ** 2).sum()) / ss_tot


def latin_hypercube(n: int, bounds, seed: int = 0) -> np.ndarray:
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    u = qmc.LatinHypercube(d=len(bounds), seed=seed).random(n)
    return qmc.scale(u, bounds[:, 0], bounds[:, 1])


# ---------------------------------------------------------------- CSV I/O

def write_training_csv(path, names, inputs, days, outputs, flags=None):
    """Rows of (parameters..., day, area_um2[, failed])."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*names, "day", "area_um2", "failed"])
        for k in range(len(outputs)):
            w.writerow([*(repr(float(v)) for v in inputs[k]), int(days[k]),
                        repr(float(outputs[k])), int(flags[k]) if flags is not None else 0])


def read_training_csv(path, day: int | None = None, bounds=None):
    """Load a sweep CSV as a TrainingSet for one day (failed rows dropped)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty training file")
    head = rows[0]
    if "day" not in head or "area_um2" not in head:
        raise ValueError(f"{path}: expected 'day' and 'area_um2' columns")
    di, ai = head.index("day"), head.index("area_um2")
    fi = head.index("failed") if "failed" in head else None
    names = tuple(head[:di])
    xs, ys, ds = [], [], []
    for r in rows[1:]:
        if fi is not None and int(r[fi]):
            continue
        d = int(r[di])
        if day is not None and d != day:
            continue
        xs.append([float(v) for v in r[:di]])
        ys.append(float(r[ai]))
        ds.append(d)
    if not xs:
        raise ValueError(f"{path}: no usable rows for day {day}")
    xs = np.array(xs)
    if bounds is None:
        from .core import exploration_bounds
        bounds = exploration_bounds(names)
    return TrainingSet(xs, ys, bounds, names), np.array(ds)
