"""Correlation metrics, the PLCC-induced training loss and VQEG logistic fitting."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractError, DegenerateBatchError
from .tensor import Tensor, as_tensor, sqrt, sum as tsum

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricPair:
    srcc: float
    plcc: float
    logistic_fallback: bool = False


def _pair(pred, label) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    label = np.asarray(label, dtype=np.float64).reshape(-1)
    if pred.shape != label.shape:
        raise ContractError(f"length mismatch: {pred.size} predictions vs {label.size} labels")
    if pred.size < 2:
        raise ContractError("correlation needs at least 2 samples")
    return pred, label


def plcc_loss(pred: Tensor, label) -> Tensor:
    """(1 - Pearson(pred, label)) / 2, differentiable in ``pred``."""
    pred = as_tensor(pred)
    y = np.asarray(label.data if isinstance(label, Tensor) else label, dtype=np.float64).reshape(-1)
    if pred.size != y.size:
        raise ContractError(f"length mismatch: {pred.size} predictions vs {y.size} labels")
    if y.size < 2:
        raise ContractError("plcc_loss needs at least 2 samples")
    yc = y - y.mean()
    if not np.any(yc) or np.ptp(pred.data) == 0:
        raise DegenerateBatchError("plcc_loss on a constant score vector")
    p = pred.reshape(y.size)
    pc = p - p.mean()
    num = tsum(pc * Tensor(yc))
    den = sqrt(tsum(pc * pc) * float(np.sum(yc * yc)))
    return (1.0 - num / den) * 0.5


def plcc(pred, label) -> float:
    pred, label = _pair(pred, label)
    pc = pred - pred.mean()
    lc = label - label.mean()
    if not np.any(pc) or not np.any(lc):
        raise DegenerateBatchError("PLCC undefined for a constant vector")
    return float(np.sum(pc * lc) / np.sqrt(np.sum(pc * pc) * np.sum(lc * lc)))


def rankdata(x: np.ndarray) -> np.ndarray:
    """1-based ranks, ties receive the average of the positions they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(x.size)
    start = 0
    n = x.size
    while start < n:
        stop = start + 1
        while stop < n and sx[stop] == sx[start]:
            stop += 1
        ranks[order[start:stop]] = 0.5 * (start + stop - 1) + 1.0
        start = stop
    return ranks


def srcc(pred, label) -> float:
    """Spearman correlation as Pearson correlation of fractional ranks.

    A constant vector has all-equal ranks and yields 0.
    """
    pred, label = _pair(pred, label)
    rp, rl = rankdata(pred), rankdata(label)
    rpc, rlc = rp - rp.mean(), rl - rl.mean()
    den = np.sqrt(np.sum(rpc * rpc) * np.sum(rlc * rlc))
    if den == 0.0:
        return 0.0
    return float(np.sum(rpc * rlc) / den)


# logistic correction ----------------------------------------------------------


def logistic4(x, b1, b2, b3, b4):
    """b1 + (b2 - b1) / (1 + exp(-(x - b3) / b4))."""
    with np.errstate(over="ignore"):
        z = np.clip(-(np.asarray(x, dtype=np.float64) - b3) / b4, -700.0, 700.0)
        return b1 + (b2 - b1) / (1.0 + np.exp(z))


@dataclass
class LogisticFit:
    beta: tuple[float, float, float, float]
    fallback: bool
    iterations: int
    reason: str = ""

    def __call__(self, x) -> np.ndarray:
        if self.fallback:
            return np.asarray(x, dtype=np.float64).copy()
        return logistic4(x, *self.beta)


def _unpack(theta):
    # b2 = b1 + exp(t1) and b4 = exp(t3) keep the curve strictly increasing
    b1, t1, b3, t3 = theta
    return b1, b1 + np.exp(t1), b3, np.exp(t3)


def _residual_and_jacobian(theta, x, y):
    b1, b2, b3, b4 = _unpack(theta)
    z = np.clip(-(x - b3) / b4, -700.0, 700.0)
    e = np.exp(z)
    s = 1.0 / (1.0 + e)
    ds = s * (1.0 - s)  # derivative of the sigmoid w.r.t. its argument
    amp = b2 - b1
    r = b1 + amp * s - y
    jac = np.empty((x.size, 4))
    jac[:, 0] = 1.0
    jac[:, 1] = s * amp  # d/dt1 of b1 + exp(t1) * s
    jac[:, 2] = amp * ds * (-1.0 / b4)
    jac[:, 3] = amp * ds * (-(x - b3) / b4)  # d/dt3 via b4 = exp(t3)
    return r, jac


def _levenberg_marquardt(theta, x, y, max_iter, tol):
    r, jac = _residual_and_jacobian(theta, x, y)
    cost = float(r @ r)
    damping = 1e-3
    it = 0
    for it in range(1, max_iter + 1):
        jtj = jac.T @ jac
        grad = jac.T @ r
        improved = False
        while damping < 1e12:
            try:
                step = np.linalg.solve(jtj + damping * np.diag(np.diag(jtj) + 1e-12), -grad)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            cand = theta + step
            r_new, jac_new = _residual_and_jacobian(cand, x, y)
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and np.all(np.isfinite(jac_new)) and cost_new < cost:
                improved = True
                break
            damping *= 10.0
        if not improved:
            break
        rel = (cost - cost_new) / max(cost, 1e-300)
        theta, r, jac, cost = cand, r_new, jac_new, cost_new
        damping = max(damping / 10.0, 1e-12)
        if rel < tol or cost < 1e-300:
            break
    return theta, cost, it


def fit_logistic(pred, label, max_iter: int = 500, tol: float = 1e-14) -> LogisticFit:
    """Least-squares fit of the 4-parameter monotone logistic mapping pred -> label.

    Damped Gauss-Newton (Levenberg-Marquardt) started at b1=min(label),
    b2=max(label), b3=median(pred), b4=std(pred).  When pred and label are
    positively correlated a second start near the affine limit of the family
    (very wide curve matching the least-squares line) is also run, and the
    lower-cost solution kept.  On failure the identity mapping is returned
    with ``fallback=True``.
    """
    x, y = _pair(pred, label)
    sx = float(np.std(x))
    if sx == 0.0 or not np.isfinite(sx):
        return LogisticFit((0.0, 1.0, 0.0, 1.0), True, 0, "constant predictions")
    lo, hi = float(np.min(y)), float(np.max(y))
    if hi <= lo:
        return LogisticFit((0.0, 1.0, 0.0, 1.0), True, 0, "constant labels")
    starts = [np.array([lo, np.log(hi - lo), float(np.median(x)), np.log(sx)])]
    xm = float(np.mean(x))
    slope = float(np.sum((x - xm) * (y - y.mean())) / np.sum((x - xm) ** 2))
    if slope > 0:
        width = 1e4 * sx
        amp = 4.0 * slope * width  # slope of the logistic at its midpoint is amp / (4 * width)
        starts.append(np.array([y.mean() - amp / 2.0, np.log(amp), xm, np.log(width)]))
    candidates = []
    reason = "fit diverged"
    with np.errstate(all="ignore"):
        for theta0 in starts:
            theta, cost, it = _levenberg_marquardt(theta0, x, y, max_iter, tol)
            beta = tuple(float(b) for b in _unpack(theta))
            if not (np.isfinite(cost) and all(np.isfinite(beta)) and beta[3] > 0.0):
                continue
            fit = LogisticFit(beta, False, it)
            fitted = fit(x)
            # saturation can merge distinct predictions into ties, which would alter ranks
            if not np.all(np.isfinite(fitted)) or not np.array_equal(rankdata(fitted), rankdata(x)):
                reason = "fitted curve collapses distinct predictions"
                continue
            candidates.append((cost, fit))
    if not candidates:
        return LogisticFit((0.0, 1.0, 0.0, 1.0), True, 0, reason)
    return min(candidates, key=lambda c: c[0])[1]


def logistic_correct(pred, label) -> tuple[np.ndarray, LogisticFit]:
    fit = fit_logistic(pred, label)
    if fit.fallback:
        logger.warning("logistic correction fell back to identity: %s", fit.reason)
    return fit(np.asarray(pred, dtype=np.float64).reshape(-1)), fit


def evaluate_scores(pred, label) -> MetricPair:
    """SRCC on raw predictions, PLCC after logistic correction."""
    pred, label = _pair(pred, label)
    s = srcc(pred, label)
    corrected, fit = logistic_correct(pred, label)
    try:
        p = plcc(corrected, label)
    except DegenerateBatchError:
        p = 0.0
    return MetricPair(s, p, fit.fallback)
