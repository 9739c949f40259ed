"""Monte Carlo consistency metrics: NEES, RMSE, and chi-square bounds.

Errors are expressed in each estimator's own perturbation coordinates
(``state.eta``) so the normalized estimation error squared (NEES) is
judged against the covariance the filter actually reports. The "yaw"
scalar is the gravity-axis component of the rotational error — the
direction a visual-inertial estimator cannot observe, and therefore the
one where spurious information shows up first.

Chi-square quantiles are computed from a self-contained implementation
of the regularized incomplete gamma function (power series below the
``a + 1`` knee, Lentz continued fraction above) plus bisection, so the
bounds carry no dependency beyond the standard library.
"""

import math
from dataclasses import dataclass

import numpy as np

from .state import eta

DEFAULT_GRAVITY = np.array([0.0, 0.0, -9.81])

#: CSV column layout shared by the writer and its readers.
CSV_COLUMNS = ("t", "nees_total", "nees_yaw", "nees_pos",
               "rmse_total", "rmse_yaw_deg", "rmse_pos_m")


# ---------------------------------------------------------------------------
# chi-square machinery


def _lower_gamma_regularized(a, x):
    """P(a, x) = gamma(a, x) / Gamma(a) for a > 0, x >= 0."""
    if a <= 0.0:
        raise ValueError("shape parameter must be positive")
    if x < 0.0:
        raise ValueError("argument must be non-negative")
    if x == 0.0:
        return 0.0
    log_prefactor = -x + a * math.log(x) - math.lgamma(a)
    if x < a + 1.0:
        # power series: P = e^{-x} x^a / Gamma(a) * sum x^n / (a)_{n+1}
        term = 1.0 / a
        total = term
        n = a
        for _ in range(1000):
            n += 1.0
            term *= x / n
            total += term
            if abs(term) < abs(total) * 1e-16:
                break
        return min(1.0, total * math.exp(log_prefactor))
    # modified Lentz continued fraction for Q = 1 - P
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 1000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return max(0.0, 1.0 - math.exp(log_prefactor) * h)


def chi2_cdf(x, dof):
    """CDF of the chi-square distribution with ``dof`` degrees of freedom."""
    if dof <= 0:
        raise ValueError("dof must be positive")
    return _lower_gamma_regularized(dof / 2.0, x / 2.0)


def chi2_ppf(p, dof):
    """Quantile of the chi-square distribution, by bisection on the CDF."""
    if not 0.0 < p < 1.0:
        raise ValueError("probability must lie strictly in (0, 1)")
    lo, hi = 0.0, max(4.0 * dof, 16.0)
    while chi2_cdf(hi, dof) < p:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if chi2_cdf(mid, dof) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def chi_square_bounds(dof, confidence=0.997, trials=1):
    """Two-sided bounds on the average of ``trials`` i.i.d. chi2(dof) draws.

    Returns ``(lower, upper, expected)`` where ``expected == dof``. The
    average of n chi-square(k) variables is chi-square(n k)/n exactly.
    """
    if dof < 1:
        raise ValueError("dof must be at least 1")
    if trials < 1:
        raise ValueError("trials must be at least 1")
    alpha = 1.0 - confidence
    n = trials * dof
    lower = chi2_ppf(alpha / 2.0, n) / trials
    upper = chi2_ppf(1.0 - alpha / 2.0, n) / trials
    return lower, upper, float(dof)


# ---------------------------------------------------------------------------
# per-state metrics


def _gravity_axis(gravity):
    g = np.asarray(gravity, dtype=float)
    norm = np.linalg.norm(g)
    if norm == 0.0:
        raise ValueError("gravity vector must be nonzero")
    return g / norm


def nees(estimate, cov, truth, gravity=DEFAULT_GRAVITY):
    """(total, yaw, position) NEES of one estimate against the truth.

    ``total`` uses all 15 DoF, ``yaw`` the gravity-axis projection of the
    rotational error (1 DoF), ``position`` the translation block (3 DoF).
    """
    cov = np.asarray(cov, dtype=float)
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance is not positive definite") from exc
    e = eta(estimate, truth)
    g = _gravity_axis(gravity)
    total = float(e @ np.linalg.solve(cov, e))
    yaw = float((g @ e[0:3]) ** 2 / (g @ cov[0:3, 0:3] @ g))
    pos = float(e[6:9] @ np.linalg.solve(cov[6:9, 6:9], e[6:9]))
    return total, yaw, pos


def _error_components(estimate, truth, gravity):
    """(full 15-vector, yaw scalar rad, position norm m) of one estimate."""
    e = eta(estimate, truth)
    g = _gravity_axis(gravity)
    return e, float(g @ e[0:3]), float(np.linalg.norm(e[6:9]))


# ---------------------------------------------------------------------------
# aggregation over trials


@dataclass
class MetricSeries:
    """Per-stamp Monte Carlo averages for one estimator configuration."""

    stamps: np.ndarray
    nees_total: np.ndarray
    nees_yaw: np.ndarray
    nees_pos: np.ndarray
    rmse_total: np.ndarray
    rmse_yaw_deg: np.ndarray
    rmse_pos_m: np.ndarray
    trial_count: int

    def averages(self):
        """Time-averaged scalars, one per column (excluding stamps)."""
        return {
            "nees_total": float(self.nees_total.mean()),
            "nees_yaw": float(self.nees_yaw.mean()),
            "nees_pos": float(self.nees_pos.mean()),
            "rmse_total": float(self.rmse_total.mean()),
            "rmse_yaw_deg": float(self.rmse_yaw_deg.mean()),
            "rmse_pos_m": float(self.rmse_pos_m.mean()),
        }


def aggregate(trials, gravity=DEFAULT_GRAVITY):
    """Average NEES and root-mean-square errors across aligned trials.

    ``trials`` is a non-empty list of trial results with identical stamp
    grids (``stamps``, ``estimates``, ``covariances``, ``truths``).
    """
    if not trials:
        raise ValueError("need at least one trial")
    stamps = np.asarray(trials[0].stamps, dtype=float)
    for tr in trials[1:]:
        if not np.array_equal(np.asarray(tr.stamps), stamps):
            raise ValueError("trial stamp grids differ")
    n_stamps = len(stamps)
    n_trials = len(trials)
    tot = np.zeros(n_stamps)
    yaw = np.zeros(n_stamps)
    pos = np.zeros(n_stamps)
    sq_tot = np.zeros(n_stamps)
    sq_yaw = np.zeros(n_stamps)
    sq_pos = np.zeros(n_stamps)
    for tr in trials:
        for k in range(n_stamps):
            t, y, p = nees(tr.estimates[k], tr.covariances[k],
                           tr.truths[k], gravity)
            tot[k] += t
            yaw[k] += y
            pos[k] += p
            e, e_yaw, e_pos = _error_components(
                tr.estimates[k], tr.truths[k], gravity)
            sq_tot[k] += e @ e
            sq_yaw[k] += e_yaw ** 2
            sq_pos[k] += e_pos ** 2
    return MetricSeries(
        stamps=stamps,
        nees_total=tot / n_trials,
        nees_yaw=yaw / n_trials,
        nees_pos=pos / n_trials,
        rmse_total=np.sqrt(sq_tot / n_trials),
        rmse_yaw_deg=np.degrees(np.sqrt(sq_yaw / n_trials)),
        rmse_pos_m=np.sqrt(sq_pos / n_trials),
        trial_count=n_trials,
    )


# ---------------------------------------------------------------------------
# reporting


def is_consistent(series, confidence=0.997):
    """True iff every averaged NEES falls inside its chi-square bounds."""
    avg = series.averages()
    for key, dof in (("nees_total", 15), ("nees_yaw", 1), ("nees_pos", 3)):
        lo, hi, _ = chi_square_bounds(dof, confidence, series.trial_count)
        if not lo <= avg[key] <= hi:
            return False
    return True


SUMMARY_HEADER = (
    "config", "rmse_yaw_deg", "rmse_pos_m", "rmse_total",
    "nees_total", "nees_yaw", "nees_pos", "consistent",
)


def summary_rows(named_series, confidence=0.997):
    """One row of strings per (name, MetricSeries), in input order."""
    rows = []
    for name, series in named_series:
        avg = series.averages()
        rows.append((
            name,
            f"{avg['rmse_yaw_deg']:.4f}",
            f"{avg['rmse_pos_m']:.4f}",
            f"{avg['rmse_total']:.4f}",
            f"{avg['nees_total']:.2f}",
            f"{avg['nees_yaw']:.2f}",
            f"{avg['nees_pos']:.2f}",
            "Yes" if is_consistent(series, confidence) else "No",
        ))
    return rows


def summarize(named_series, confidence=0.997):
    """Aligned plain-text summary table over configurations.

    ``named_series`` is an ordered iterable of (name, MetricSeries); row
    order matches input order. The verdict column reads "Yes" when every
    averaged NEES lies within the two-sided chi-square bounds at the
    given confidence for the series' trial count.
    """
    rows = [SUMMARY_HEADER] + summary_rows(named_series, confidence)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for k, row in enumerate(rows):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths))
                     .rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_series_csv(path, series):
    """Write one MetricSeries as CSV with the documented column layout.

    Floats are rendered with ``repr``-grade precision so identical runs
    produce byte-identical files.
    """
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for k in range(len(series.stamps)):
            row = (series.stamps[k], series.nees_total[k],
                   series.nees_yaw[k], series.nees_pos[k],
                   series.rmse_total[k], series.rmse_yaw_deg[k],
                   series.rmse_pos_m[k])
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
