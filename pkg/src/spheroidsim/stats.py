"""Group-comparison battery with assumption-based routing.

Each group is checked for normality (Shapiro-Wilk) and the groups for equal
variances (mean-centred Levene). If every check passes at α the comparison
is a one-way ANOVA with Tukey-Kramer post-hoc tests, otherwise Kruskal-Wallis
with Dunn's z-tests (Bonferroni-adjusted).
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as _st
from scipy.special import gammaln, ndtr

ALPHA = 0.05
ROUTE_PARAMETRIC = "anova+tukey"
ROUTE_RANK = "kruskal+dunn"


def _sample(x) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    return x


def _groups(groups) -> tuple[list[str], list[np.ndarray]]:
    if isinstance(groups, dict):
        names = [str(k) for k in groups]
        vals = [_sample(v) for v in groups.values()]
    else:
        vals = [_sample(v) for v in groups]
        names = [f"g{i}" for i in range(len(vals))]
    if len(vals) < 2:
        raise ValueError("at least two groups are required")
    return names, vals


# ------------------------------------------------------------ Shapiro-Wilk

def _poly(c, x):
    return np.polyval(c[::-1], x)


def shapiro_wilk(sample) -> tuple[float, float]:
    """W statistic and p-value by Royston's (1992, 1995) approximations."""
    x = np.sort(_sample(sample))
    n = len(x)
    if n < 3 or n > 5000:
        raise ValueError("Shapiro-Wilk needs 3 <= n <= 5000")
    ss = float(((x - x.mean()) ** 2).sum())
    if ss == 0.0 or np.ptp(x) == 0.0:
        raise ValueError("Shapiro-Wilk is undefined for a constant sample")
    m = _st.norm.ppf((np.arange(1, n + 1) - 0.375) / (n + 0.25))
    mm = float(m @ m)
    a = np.zeros(n)
    if n == 3:
        a[-1] = np.sqrt(0.5)
    else:
        u = 1.0 / np.sqrt(n)
        c = m / np.sqrt(mm)
        an = c[-1] + _poly([0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056], u)
        if n > 5:
            an1 = c[-2] + _poly([0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633], u)
            phi = (mm - 2 * m[-1] ** 2 - 2 * m[-2] ** 2) / (1 - 2 * an**2 - 2 * an1**2)
            a = m / np.sqrt(phi)
            a[-2] = an1
        else:
            phi = (mm - 2 * m[-1] ** 2) / (1 - 2 * an**2)
            a = m / np.sqrt(phi)
        a[-1] = an
    half = n // 2
    a[:half] = -a[::-1][:half]
    if n % 2:
        a[half] = 0.0
    w = float((a @ x) ** 2 / ss)
    w = min(w, 1.0)
    if n == 3:
        p = 6.0 / np.pi * (np.arcsin(np.sqrt(w)) - np.arcsin(np.sqrt(0.75)))
        return w, float(np.clip(p, 0.0, 1.0))
    if n <= 11:
        gamma = 0.459 * n - 2.273
        mu = _poly([0.5440, -0.39978, 0.025054, -0.0006714], n)
        sigma = np.exp(_poly([1.3822, -0.77857, 0.062767, -0.0020322], n))
        arg = gamma - np.log1p(-w)
        if arg <= 0:  # W so small the transform leaves its domain
            return w, 0.0
        z = (-np.log(arg) - mu) / sigma
    else:
        ln = np.log(n)
        mu = _poly([-1.5861, -0.31082, -0.083751, 0.0038915], ln)
        sigma = np.exp(_poly([-0.4803, -0.082676, 0.0030302], ln))
        z = (np.log1p(-w) - mu) / sigma
    return w, float(_st.norm.sf(z))


# ------------------------------------------------------ studentized range

_GL_X, _GL_W = np.polynomial.legendre.leggauss(160)
_Z_MAX = 9.0


def studentized_range_sf(q, k: int, df: float) -> np.ndarray:
    """Upper tail of the studentized range for k means and df error degrees of freedom.

    Double Gauss-Legendre quadrature of the range distribution of k standard
    normals against the density of s = sqrt(chi2_df / df); all q share one
    set of nodes, which keeps repeated post-hoc testing cheap.
    """
    q = np.atleast_1d(np.asarray(q, dtype=float))
    z = _Z_MAX * _GL_X
    zw = _Z_MAX * _GL_W * np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    lo = np.sqrt(_st.chi2.ppf(1e-14, df) / df)
    hi = np.sqrt(_st.chi2.isf(1e-14, df) / df)
    s = 0.5 * (hi + lo) + 0.5 * (hi - lo) * _GL_X
    log_g = (0.5 * df * np.log(df) - gammaln(0.5 * df) - (0.5 * df - 1.0) * np.log(2.0)
             + (df - 1.0) * np.log(s) - 0.5 * df * s * s)
    sw = 0.5 * (hi - lo) * _GL_W * np.exp(log_g)
    out = np.empty(len(q))
    for i, qi in enumerate(q):
        inner = (ndtr(z[:, None]) - ndtr(z[:, None] - qi * s[None, :])) ** (k - 1)
        out[i] = 1.0 - sw @ (k * (zw @ inner))
    return np.clip(out, 0.0, 1.0)


# ------------------------------------------------------------------ Levene

def levene(groups) -> tuple[float, float]:
    """Levene's test on absolute deviations from the group means."""
    _, vals = _groups(groups)
    if any(len(v) < 2 for v in vals):
        raise ValueError("Levene's test needs at least two values per group")
    allv = np.concatenate(vals)
    if np.ptp(allv) == 0:
        raise ValueError("Levene's test is undefined when every value is identical")
    z = [np.abs(v - v.mean()) for v in vals]
    k, n = len(z), len(allv)
    zbar = np.concatenate(z).mean()
    between = sum(len(zi) * (zi.mean() - zbar) ** 2 for zi in z)
    within = sum(((zi - zi.mean()) ** 2).sum() for zi in z)
    if between == 0:
        return 0.0, 1.0
    if within == 0:
        return float("inf"), 0.0
    w = (n - k) / (k - 1) * between / within
    return float(w), float(_st.f.sf(w, k - 1, n - k))


# ----------------------------------------------------------- report types

@dataclass(frozen=True)
class PairResult:
    a: str
    b: str
    statistic: float
    p_adj: float
    significant: bool
    diff: float  # mean(a) - mean(b) for Tukey, mean rank(a) - mean rank(b) for Dunn


@dataclass
class TestReport:
    names: list
    normality: dict = field(default_factory=dict)
    variance: tuple = (float("nan"), float("nan"))
    route: str = ""
    omnibus: tuple = (float("nan"), float("nan"))
    pairs: list = field(default_factory=list)
    means: dict = field(default_factory=dict)
    alpha: float = ALPHA
    warnings: list = field(default_factory=list)

    @property
    def significant(self) -> bool:
        return self.omnibus[1] < self.alpha

    def pair(self, a, b) -> PairResult:
        for p in self.pairs:
            if (p.a, p.b) == (a, b):
                return p
            if (p.a, p.b) == (b, a):
                return PairResult(a, b, p.statistic, p.p_adj, p.significant, -p.diff)
        raise KeyError((a, b))

    def greater(self, a, b) -> bool:
        """True when ``a`` exceeds ``b`` with a significant omnibus and pairwise test."""
        if len(self.names) == 2:
            return self.significant and self.means[a] > self.means[b]
        pr = self.pair(a, b)
        return self.significant and pr.significant and pr.diff > 0

    def rows(self, metric: str = "") -> list[dict]:
        base = {"metric": metric, "route": self.route, "alpha": self.alpha,
                "omnibus_stat": self.omnibus[0], "omnibus_p": self.omnibus[1],
                "levene_stat": self.variance[0], "levene_p": self.variance[1]}
        out = []
        for name in self.names:
            w, p = self.normality.get(name, (float("nan"), float("nan")))
            out.append({**base, "kind": "group", "group": name, "other": "",
                        "mean": self.means.get(name, float("nan")),
                        "statistic": w, "p": p, "significant": int(p <= self.alpha)})
        for pr in self.pairs:
            out.append({**base, "kind": "pair", "group": pr.a, "other": pr.b,
                        "mean": pr.diff, "statistic": pr.statistic, "p": pr.p_adj,
                        "significant": int(pr.significant)})
        return out


REPORT_COLUMNS = ["metric", "kind", "group", "other", "mean", "statistic", "p", "significant",
                  "route", "alpha", "omnibus_stat", "omnibus_p", "levene_stat", "levene_p"]


def write_reports(path, reports: dict):
    """CSV of several reports keyed by metric name."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for metric, rep in reports.items():
            for r in rep.rows(metric):
                w.writerow([repr(float(r[c])) if isinstance(r[c], (float, np.floating)) else r[c]
                            for c in REPORT_COLUMNS])


# ------------------------------------------------------------ ANOVA + Tukey

def anova_tukey(groups, alpha: float = ALPHA) -> TestReport:
    names, vals = _groups(groups)
    if any(len(v) < 2 for v in vals):
        raise ValueError("ANOVA needs at least two values per group")
    k = len(vals)
    n = sum(len(v) for v in vals)
    grand = np.concatenate(vals).mean()
    ssb = sum(len(v) * (v.mean() - grand) ** 2 for v in vals)
    ssw = sum(((v - v.mean()) ** 2).sum() for v in vals)
    dfb, dfw = k - 1, n - k
    if ssb == 0:
        f, p = 0.0, 1.0
    elif ssw == 0:
        f, p = float("inf"), 0.0
    else:
        f = (ssb / dfb) / (ssw / dfw)
        p = float(_st.f.sf(f, dfb, dfw))
    rep = TestReport(names, route=ROUTE_PARAMETRIC, omnibus=(float(f), p), alpha=alpha,
                     means={nm: float(v.mean()) for nm, v in zip(names, vals)})
    msw = ssw / dfw
    combos = list(itertools.combinations(range(k), 2))
    diffs = np.array([vals[i].mean() - vals[j].mean() for i, j in combos])
    ses = np.array([np.sqrt(msw / 2.0 * (1.0 / len(vals[i]) + 1.0 / len(vals[j]))) for i, j in combos])
    with np.errstate(divide="ignore", invalid="ignore"):
        qs = np.where(ses > 0, np.abs(diffs) / ses, np.where(diffs == 0, 0.0, np.inf))
    ps = np.ones(len(qs))
    finite = np.isfinite(qs) & (qs > 0)
    if finite.any():
        ps[finite] = studentized_range_sf(qs[finite], k, dfw)
    ps[np.isinf(qs)] = 0.0
    for (i, j), d, q, pq in zip(combos, diffs, qs, ps):
        rep.pairs.append(PairResult(names[i], names[j], float(q), float(pq), pq < alpha, float(d)))
    return rep


# ------------------------------------------------------- Kruskal-Wallis + Dunn

def kruskal_dunn(groups, alpha: float = ALPHA) -> TestReport:
    names, vals = _groups(groups)
    sizes = np.array([len(v) for v in vals])
    if np.any(sizes < 1):
        raise ValueError("every group needs at least one value")
    n = int(sizes.sum())
    k = len(vals)
    ranks = _st.rankdata(np.concatenate(vals))
    split = np.split(ranks, np.cumsum(sizes)[:-1])
    rbar = np.array([r.mean() for r in split])
    _, counts = np.unique(np.concatenate(vals), return_counts=True)
    ties = float((counts**3 - counts).sum())
    corr = 1.0 - ties / (n**3 - n)
    h_raw = 12.0 / (n * (n + 1)) * float((sizes * rbar**2).sum()) - 3.0 * (n + 1)
    if corr <= 0:
        h, p = 0.0, 1.0
    else:
        h = max(h_raw / corr, 0.0)
        p = float(_st.chi2.sf(h, k - 1))
    rep = TestReport(names, route=ROUTE_RANK, omnibus=(h, p), alpha=alpha,
                     means={nm: float(v.mean()) for nm, v in zip(names, vals)})
    if n < 5:
        rep.warnings.append("fewer than five observations in total; the test is underpowered")
    m = k * (k - 1) // 2
    s2 = n * (n + 1) / 12.0 - ties / (12.0 * (n - 1))
    for (i, a), (j, b) in itertools.combinations(enumerate(names), 2):
        diff = rbar[i] - rbar[j]
        se = np.sqrt(s2 * (1.0 / sizes[i] + 1.0 / sizes[j]))
        if se == 0:
            z, pz = 0.0, 1.0
        else:
            z = diff / se
            pz = float(min(1.0, m * 2.0 * _st.norm.sf(abs(z))))
        rep.pairs.append(PairResult(a, b, float(z), pz, pz < alpha, float(diff)))
    return rep


def select_and_run(groups, alpha: float = ALPHA) -> TestReport:
    """Route to ANOVA+Tukey or Kruskal-Wallis+Dunn from the assumption checks."""
    names, vals = _groups(groups)
    normality = {nm: shapiro_wilk(v) for nm, v in zip(names, vals)}
    var = levene(dict(zip(names, vals)))
    parametric = all(p > alpha for _, p in normality.values()) and var[1] > alpha
    data = dict(zip(names, vals))
    rep = anova_tukey(data, alpha) if parametric else kruskal_dunn(data, alpha)
    rep.normality = normality
    rep.variance = var
    return rep
