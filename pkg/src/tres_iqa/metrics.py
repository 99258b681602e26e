"""Evaluation metrics: SROCC, logistic-mapped PLCC and size-weighted averages."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata


class UndefinedCorrelation(ValueError):
    pass


@dataclass(frozen=True)
class LogisticParams:
    beta1: float
    beta2: float
    beta3: float
    beta4: float

    def __call__(self, x):
        return logistic(np.asarray(x, dtype=np.float64), self.as_array())

    def as_array(self) -> np.ndarray:
        return np.array([self.beta1, self.beta2, self.beta3, self.beta4])

    @property
    def increasing(self) -> bool:
        return self.beta1 >= self.beta2


@dataclass
class MetricReport:
    srocc: float
    plcc: float
    logistic: LogisticParams
    n: int
    dataset: str = ""

    CSV_HEADER = ("dataset", "n", "srocc", "plcc", "beta1", "beta2", "beta3", "beta4")

    def csv_row(self) -> list:
        b = self.logistic
        return [self.dataset, self.n, f"{self.srocc:.6f}", f"{self.plcc:.6f}",
                repr(b.beta1), repr(b.beta2), repr(b.beta3), repr(b.beta4)]

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(self.CSV_HEADER)
        w.writerow(self.csv_row())
        return buf.getvalue()

    def to_text(self) -> str:
        return "\n".join(f"{k} = {v}" for k, v in zip(self.CSV_HEADER, self.csv_row())) + "\n"


def _pair(preds, gts, minimum: int) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).ravel()
    g = np.asarray(gts, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise ValueError(f"preds and gts differ in length: {p.size} vs {g.size}")
    if p.size < minimum:
        raise ValueError(f"need at least {minimum} pairs, got {p.size}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(g))):
        raise ValueError("scores must be finite")
    return p, g


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    y = np.asarray(y, dtype=np.float64) - np.mean(y)
    denom = np.sqrt(np.dot(x, x) * np.dot(y, y))
    if denom == 0:
        raise UndefinedCorrelation("undefined correlation: constant input")
    return float(np.clip(np.dot(x, y) / denom, -1.0, 1.0))


def srocc(preds, gts) -> float:
    """Spearman rank correlation; tied values receive their average rank."""
    p, g = _pair(preds, gts, 3)
    return pearson(rankdata(p), rankdata(g))


def logistic(x: np.ndarray, beta: np.ndarray) -> np.ndarray:
    b1, b2, b3, b4 = beta
    return (b1 - b2) * expit((x - b3) / abs(b4)) + b2


def _jacobian(x, beta):
    b1, b2, b3, b4 = beta
    s = abs(b4)
    e = expit((x - b3) / s)
    de = e * (1.0 - e)
    return np.column_stack((
        e,
        1.0 - e,
        -(b1 - b2) * de / s,
        -(b1 - b2) * de * (x - b3) / (s * s) * np.sign(b4),
    ))


def _damped_gauss_newton(x, y, beta, max_iter, tol):
    r = y - logistic(x, beta)
    sse = float(r @ r)
    damping = 1e-3
    for _ in range(max_iter):
        J = _jacobian(x, beta)
        JtJ = J.T @ J
        g = J.T @ r
        improved = False
        while damping < 1e12:
            A = JtJ + damping * np.diag(np.diag(JtJ) + 1e-12)
            try:
                delta = np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            cand = beta + delta
            if cand[3] == 0:
                damping *= 10.0
                continue
            rc = y - logistic(x, cand)
            sse_c = float(rc @ rc)
            if np.isfinite(sse_c) and sse_c <= sse:
                improved = True
                break
            damping *= 10.0
        if not improved:
            break
        change = (sse - sse_c) / max(sse, 1e-300)
        beta, r, sse = cand, rc, sse_c
        damping = max(damping / 10.0, 1e-12)
        if change < tol or sse == 0.0:
            break
    return beta, sse


def fit_logistic(preds, gts, max_iter: int = 200, tol: float = 1e-10) -> LogisticParams:
    """Least-squares fit of the 4-parameter logistic mapping predictions to scores.

    Two deterministic starts are refined with a damped Gauss-Newton
    (Levenberg-Marquardt) iteration and the lower residual wins:

    * ``beta1 = max(gt)``, ``beta2 = min(gt)``, ``beta3 = median(pred)``,
      ``beta4 = std(pred) / 4`` (the plateaus swapped when the data are
      anti-correlated);
    * a near-linear start with a wide slope region matching the least-squares
      line, which lets the fit reach data that are almost affine in ``pred``.
    """
    x, y = _pair(preds, gts, 5)
    sd = float(np.std(x))
    if sd == 0.0:
        raise ValueError("fit_logistic: predictions are constant")
    if np.ptp(y) == 0.0:
        raise ValueError("fit_logistic: subjective scores are constant")

    hi, lo = float(np.max(y)), float(np.min(y))
    if pearson(x, y) < 0:
        hi, lo = lo, hi
    starts = [np.array([hi, lo, float(np.median(x)), sd / 4.0])]

    slope, intercept = np.polyfit(x, y, 1)
    if slope != 0.0:
        width = 1e3 * sd
        amp = 4.0 * width * slope
        centre = float(np.mean(x))
        mid = slope * centre + intercept
        starts.append(np.array([mid + amp / 2, mid - amp / 2, centre, width]))

    best, best_sse = None, np.inf
    for beta0 in starts:
        beta, sse = _damped_gauss_newton(x, y, beta0, max_iter, tol)
        if sse < best_sse:
            best, best_sse = beta, sse
    return LogisticParams(*(float(b) for b in best))


def plcc(preds, gts, params: LogisticParams | None = None) -> float:
    """Pearson correlation between logistic-mapped predictions and scores.

    The coefficient keeps the orientation of the fitted map: a decreasing fit
    (``beta1 < beta2``) reports a non-positive value.
    """
    x, y = _pair(preds, gts, 5)
    params = params or fit_logistic(x, y)
    mapped = params(x)
    r = pearson(mapped, y)
    return r if params.increasing else -r


def evaluate(preds, gts, dataset: str = "") -> MetricReport:
    p, g = _pair(preds, gts, 5)
    params = fit_logistic(p, g)
    return MetricReport(srocc(p, g), plcc(p, g, params), params, int(p.size), dataset)


def weighted_average(values, sizes) -> float:
    """Size-weighted mean; weights are normalized first so a single value comes back unchanged."""
    v = np.asarray(values, dtype=np.float64).ravel()
    w = np.asarray(sizes, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("weighted_average: empty input")
    if v.shape != w.shape:
        raise ValueError("weighted_average: values and sizes differ in length")
    if np.any(w <= 0):
        raise ValueError("weighted_average: sizes must be positive")
    return float(np.dot(w / w.sum(), v))
