"""Uncertainty quantification on top of an emulator.

* marginal response curves (average prediction over the other inputs),
* Sobol indices by Saltelli cross-sampling on a scrambled Sobol sequence,
* Gaussian likelihood of observed areas and adaptive random-walk Metropolis.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.stats import gaussian_kde, qmc

TARGET_ACCEPT = 0.234
SCREEN_PER_CHAIN = 64
STRAND_GAP = 20.0  # nats


def _evaluate(model, x, batch: int = 8192) -> np.ndarray:
    f = model.predict if hasattr(model, "predict") else None
    out = np.empty(len(x))
    for s in range(0, len(x), batch):
        xb = x[s:s + batch]
        out[s:s + batch] = f(xb, return_var=False) if f is not None else model(xb)
    return out


def _model_bounds(model, bounds):
    if bounds is not None:
        return np.asarray(bounds, dtype=float).reshape(-1, 2)
    try:
        return model.data.bounds
    except AttributeError:
        raise ValueError("bounds are required for a plain callable model") from None


# ------------------------------------------------------------ marginal curves

@dataclass(frozen=True)
class MarginalCurve:
    dim: int
    grid: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def marginal_response(model, dim: int, grid, M: int = 1000, rng=None, bounds=None) -> MarginalCurve:
    """Average prediction as a function of one input, others drawn uniformly."""
    if M < 100:
        raise ValueError("M must be at least 100")
    b = _model_bounds(model, bounds)
    grid = np.asarray(grid, dtype=float).ravel()
    if np.any(grid < b[dim, 0]) or np.any(grid > b[dim, 1]):
        raise ValueError("grid values must lie within the bounds")
    rng = np.random.default_rng(rng)
    base = b[:, 0] + rng.random((M, len(b))) * (b[:, 1] - b[:, 0])
    mean, lo, hi = [], [], []
    for g in grid:
        x = base.copy()
        x[:, dim] = g
        y = _evaluate(model, x)
        mean.append(y.mean())
        lo.append(np.percentile(y, 2.5))
        hi.append(np.percentile(y, 97.5))
    return MarginalCurve(dim, grid, np.array(mean), np.array(lo), np.array(hi))


# ----------------------------------------------------------------- Sobol

@dataclass
class SobolResult:
    names: tuple
    first_order: np.ndarray
    total_order: np.ndarray
    second_order: np.ndarray  # upper triangle filled, NaN elsewhere
    n: int
    evaluations: int

    def as_rows(self) -> list[dict]:
        rows = []
        for i, name in enumerate(self.names):
            row = {"parameter": name, "S1": self.first_order[i], "ST": self.total_order[i]}
            for j, other in enumerate(self.names):
                row[f"S2_{other}"] = self.second_order[i, j]
            rows.append(row)
        return rows

    def write_csv(self, path):
        rows = self.as_rows()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(rows[0]))
            for r in rows:
                w.writerow([v if isinstance(v, str) else repr(float(v)) for v in r.values()])


def sobol_indices(model, bounds=None, N: int = 2**12, rng=0, second_order: bool = True,
                  names=None) -> SobolResult:
    """First, second and total-order indices (Saltelli 2010 / Jansen estimators).

    Uses N(2J+2) model evaluations with second order, N(J+2) without.
    """
    if N < 2**10 or N & (N - 1):
        raise ValueError("N must be a power of two no smaller than 1024")
    b = _model_bounds(model, bounds)
    j = len(b)
    if names is None:
        names = tuple(getattr(getattr(model, "data", None), "names", ())) or tuple(f"x{i}" for i in range(j))
    seed = rng if isinstance(rng, (int, np.integer)) or rng is None else int(rng.integers(2**31))
    u = qmc.Sobol(d=2 * j, scramble=True, seed=seed).random(N)
    lo, width = b[:, 0], b[:, 1] - b[:, 0]
    A = lo + u[:, :j] * width
    B = lo + u[:, j:] * width
    blocks = [A, B]
    for i in range(j):
        ab = A.copy()
        ab[:, i] = B[:, i]
        blocks.append(ab)
    if second_order:
        for i in range(j):
            ba = B.copy()
            ba[:, i] = A[:, i]
            blocks.append(ba)
    y = _evaluate(model, np.concatenate(blocks))
    fA, fB = y[:N], y[N:2 * N]
    fAB = y[2 * N:(2 + j) * N].reshape(j, N)
    var = np.var(np.concatenate([fA, fB]))
    if not var > 0:
        raise ValueError("model output has zero variance; Sobol indices are undefined")
    s1 = np.mean(fB * (fAB - fA), axis=1) / var
    st = 0.5 * np.mean((fA - fAB) ** 2, axis=1) / var
    s2 = np.full((j, j), np.nan)
    if second_order:
        fBA = y[(2 + j) * N:].reshape(j, N)
        for i in range(j):
            for k in range(i + 1, j):
                vik = np.mean(fBA[i] * fAB[k] - fA * fB) / var
                s2[i, k] = vik - s1[i] - s1[k]
    return SobolResult(tuple(names), s1, st, s2, N, len(y))


def ishigami(x, a: float = 7.0, b: float = 0.1) -> np.ndarray:
    x = np.atleast_2d(x)
    return np.sin(x[:, 0]) + a * np.sin(x[:, 1]) ** 2 + b * x[:, 2] ** 4 * np.sin(x[:, 0])


def ishigami_indices(a: float = 7.0, b: float = 0.1):
    """Analytic (S1, ST) of the Ishigami function on [-π, π]^3."""
    pi = np.pi
    v1 = 0.5 * (1 + b * pi**4 / 5) ** 2
    v2 = a**2 / 8
    v13 = b**2 * pi**8 * (1 / 18 - 1 / 50)
    v = v1 + v2 + v13
    return np.array([v1, v2, 0.0]) / v, np.array([v1 + v13, v2, v13]) / v


# ------------------------------------------------------------ likelihood

@dataclass
class ObservationSet:
    group: str
    days: np.ndarray
    values: list  # one array of observed areas per day
    sigma: np.ndarray = None

    def __post_init__(self):
        self.days = np.asarray(self.days, dtype=int)
        self.values = [np.asarray(v, dtype=float).ravel() for v in self.values]
        if len(self.values) != len(self.days):
            raise ValueError("one value list per day is required")
        if np.any(np.diff(self.days) <= 0):
            raise ValueError("observation days must be strictly increasing")
        if self.sigma is None:
            sig = []
            for d, v in zip(self.days, self.values):
                if len(v) < 2:
                    raise ValueError(f"day {d}: need two observations to estimate sigma")
                sig.append(np.std(v, ddof=1))
            self.sigma = np.array(sig)
        self.sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), self.days.shape).copy()
        if np.any(~(self.sigma > 0)):
            raise ValueError("observation noise sigma must be positive")


def read_observations(path) -> dict[str, ObservationSet]:
    """Observation CSV with columns group, day, area_um2 (``area`` also accepted)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no observations")
    area_key = "area_um2" if "area_um2" in rows[0] else "area"
    for key in ("group", "day", area_key):
        if key not in rows[0]:
            raise ValueError(f"{path}: missing column {key!r}")
    by: dict = {}
    for r in rows:
        by.setdefault(r["group"], {}).setdefault(int(r["day"]), []).append(float(r[area_key]))
    out = {}
    for g in sorted(by):
        days = sorted(by[g])
        out[g] = ObservationSet(g, days, [by[g][d] for d in days])
    return out


def _in_support(theta, bounds):
    return np.all((theta >= bounds[:, 0]) & (theta <= bounds[:, 1]), axis=-1)


def log_likelihood_batch(thetas, obs: ObservationSet, models: dict, bounds) -> np.ndarray:
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    bounds = np.asarray(bounds, dtype=float)
    out = np.full(len(thetas), -np.inf)
    ok = _in_support(thetas, bounds)
    if not ok.any():
        return out
    tot = np.zeros(int(ok.sum()))
    for d, vals, sig in zip(obs.days, obs.values, obs.sigma):
        mu = _evaluate(models[int(d)], thetas[ok])
        r = (vals[None, :] - mu[:, None]) / sig
        tot += -0.5 * (r**2).sum(1) - len(vals) * 0.5 * np.log(2 * np.pi * sig**2)
    out[ok] = tot
    return out


def log_likelihood(theta, obs: ObservationSet, models: dict, bounds) -> float:
    """Σ log N(y | GP_day(θ), σ_day²); -inf outside the prior support."""
    return float(log_likelihood_batch(theta, obs, models, bounds)[0])


# ---------------------------------------------------------------- MCMC

@dataclass
class Posterior:
    names: tuple
    samples: np.ndarray          # (chains, draws, J)
    log_density: np.ndarray      # (chains, draws)
    joint_map: np.ndarray
    joint_map_log_density: float
    marginal_map: np.ndarray
    acceptance: np.ndarray
    rhat: np.ndarray
    warnings: list = field(default_factory=list)

    @property
    def flat(self) -> np.ndarray:
        return self.samples.reshape(-1, self.samples.shape[-1])

    def write_csv(self, path):
        c, d, j = self.samples.shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["chain", "draw", *self.names, "log_density"])
            for ci in range(c):
                for di in range(d):
                    w.writerow([ci, di, *(repr(float(v)) for v in self.samples[ci, di]),
                                repr(float(self.log_density[ci, di]))])

    def report(self) -> dict:
        return {
            "parameters": list(self.names),
            "joint_map": dict(zip(self.names, self.joint_map.tolist())),
            "joint_map_log_density": self.joint_map_log_density,
            "marginal_map": dict(zip(self.names, self.marginal_map.tolist())),
            "acceptance_rate": self.acceptance.tolist(),
            "rhat": dict(zip(self.names, self.rhat.tolist())),
            "warnings": list(self.warnings),
        }

    def write_report(self, path):
        with open(path, "w") as fh:
            json.dump(self.report(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def split_rhat(chains) -> np.ndarray:
    """Split-R̂ per parameter for an array of shape (chains, draws, J)."""
    x = np.asarray(chains, dtype=float)
    if x.ndim == 2:
        x = x[..., None]
    half = x.shape[1] // 2
    parts = np.concatenate([x[:, :half], x[:, half:2 * half]], axis=0)
    n = parts.shape[1]
    means = parts.mean(1)
    w = parts.var(1, ddof=1).mean(0)
    b = n * means.var(0, ddof=1)
    var_plus = (n - 1) / n * w + b / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_plus / w)
    return np.where(w > 0, r, 1.0)


def _fold(u):
    """Reflect into [0, 1]; keeps a symmetric proposal symmetric."""
    u = np.mod(u, 2.0)
    return np.where(u > 1.0, 2.0 - u, u)


def mcmc_sample(obs, models, priors, chains: int = 4, draws: int = 2000, seed: int = 0,
                burn_in: int = 1000, log_like=None, names=None) -> Posterior:
    """Adaptive random-walk Metropolis under a uniform prior on ``priors`` bounds.

    The proposal covariance adapts during burn-in from the pooled chain
    history, with a global step scale steered toward an acceptance rate of
    0.234; both are frozen afterwards. Each chain starts from the best of
    its own batch of prior draws, and during the first half of burn-in a
    chain trailing the best one by more than ``STRAND_GAP`` nats is moved
    onto it; the second half lets the chains disperse again before any draw
    is kept. ``log_like`` (a vectorised callable on
    an (n, J) array) replaces the GP likelihood when given.
    """
    if chains < 2:
        raise ValueError("at least two chains are required")
    bounds = np.asarray(priors, dtype=float).reshape(-1, 2)
    j = len(bounds)
    lo, width = bounds[:, 0], bounds[:, 1] - bounds[:, 0]
    if names is None:
        names = tuple(getattr(obs, "names", ())) or tuple(f"x{i}" for i in range(j))
    if log_like is None:
        def log_like(t):
            return log_likelihood_batch(t, obs, models, bounds)

    def target(u):
        return np.asarray(log_like(lo + u * width), dtype=float)

    rng = np.random.default_rng(seed)
    # start each chain at the best of its own batch of prior draws, so no
    # chain begins stranded on a flat, low-density stretch of the emulator
    pool = rng.random((chains, SCREEN_PER_CHAIN, j))
    pool_lp = target(pool.reshape(-1, j)).reshape(chains, SCREEN_PER_CHAIN)
    best = np.argmax(pool_lp, axis=1)
    u = pool[np.arange(chains), best]
    lp = pool_lp[np.arange(chains), best]
    scale = 2.38**2 / j
    cov = np.eye(j) * 0.01
    total = burn_in + draws
    keep_u = np.empty((chains, draws, j))
    keep_lp = np.empty((chains, draws))
    accepted = np.zeros(chains)
    hist = []
    log_gain = 0.0
    for t in range(total):
        if t < burn_in and t >= 100 and t % 50 == 0:
            h = np.concatenate(hist[-max(len(hist) // 2, 50):])
            cov = scale * np.cov(h.T).reshape(j, j) + 1e-8 * np.eye(j)
            if t < burn_in // 2:
                # chains stranded in a negligible local mode rejoin the leader
                lead = int(np.argmax(lp))
                lost = lp < lp[lead] - STRAND_GAP
                u[lost], lp[lost] = u[lead], lp[lead]
        step = rng.multivariate_normal(np.zeros(j), cov, size=chains, method="cholesky")
        prop = _fold(u + np.exp(log_gain) * step)
        lp_prop = target(prop)
        acc = np.log(rng.random(chains)) < lp_prop - lp
        u = np.where(acc[:, None], prop, u)
        lp = np.where(acc, lp_prop, lp)
        if t < burn_in:
            hist.append(u.copy())
            # Robbins-Monro step size toward the optimal acceptance rate
            log_gain += (acc.mean() - TARGET_ACCEPT) / np.sqrt(t + 1.0)
        else:
            keep_u[:, t - burn_in] = u
            keep_lp[:, t - burn_in] = lp
            accepted += acc
    samples = lo + keep_u * width
    rhat = split_rhat(samples)

    # joint MAP: best retained draw, polished by a bounded local search
    flat_u = keep_u.reshape(-1, j)
    flat_lp = keep_lp.ravel()
    k = int(np.argmax(flat_lp))
    best_u, best_lp = flat_u[k], float(flat_lp[k])
    res = minimize(lambda v: -float(target(np.clip(v, 0, 1)[None])[0]), best_u,
                   method="Nelder-Mead",
                   options={"xatol": 1e-6, "fatol": 1e-9, "maxiter": 400 * j})
    cand = np.clip(res.x, 0, 1)
    cand_lp = float(target(cand[None])[0])
    if cand_lp > best_lp:
        best_u, best_lp = cand, cand_lp

    marg = np.empty(j)
    flat = samples.reshape(-1, j)
    for i in range(j):
        grid = np.linspace(bounds[i, 0], bounds[i, 1], 512)
        col = flat[:, i]
        if np.ptp(col) == 0:
            marg[i] = col[0]
            continue
        marg[i] = grid[np.argmax(gaussian_kde(col)(grid))]

    warn = []
    if np.any(rhat > 1.1):
        bad = [n for n, r in zip(names, rhat) if r > 1.1]
        warn.append(f"split-Rhat above 1.1 for {', '.join(bad)}")
        warnings.warn(warn[-1], RuntimeWarning, stacklevel=2)
    return Posterior(tuple(names), samples, keep_lp, lo + best_u * width, best_lp, marg,
                     accepted / draws, rhat, warn)
