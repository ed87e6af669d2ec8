"""Plain L-BFGS with a strong Wolfe line search and training-history capture."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .materials import InadmissibleStateError


class StopReason(str, Enum):
    FTOL = "FTOL"
    GTOL = "GTOL"
    ITERATION_CAP = "ITERATION_CAP"
    EVAL_CAP = "EVAL_CAP"
    LINE_SEARCH_FAILED = "LINE_SEARCH_FAILED"

    @property
    def converged(self) -> bool:
        return self in (StopReason.FTOL, StopReason.GTOL)


class NonFiniteObjectiveError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LBFGSOptions:
    memory: int = 100
    max_iterations: int = 50000
    max_function_evals: int = 50000
    max_linesearch_steps: int = 100
    ftol: float = 1e-14
    gtol: float = 1e-14
    c1: float = 1e-4
    c2: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.c1 < self.c2 < 1.0:
            raise ValueError("Wolfe constants must satisfy 0 < c1 < c2 < 1")
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if self.max_iterations < 0 or self.max_function_evals < 1 or self.max_linesearch_steps < 1:
            raise ValueError("iteration and evaluation caps must be positive")


HISTORY_COLUMNS = ["iter", "loss", "residual_loss", "data_loss", "e_l2_u", "e_l2_E", "seconds"]


@dataclass
class IterationRecord:
    iteration: int
    loss: float
    residual_loss: float = float("nan")
    data_loss: float = 0.0
    e_l2_u: float = float("nan")
    e_l2_E: float = float("nan")
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)


@dataclass
class TrainingHistory:
    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, rec: IterationRecord) -> None:
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("iteration index must increase")
        if not np.isfinite(rec.loss):
            raise ValueError("loss must be finite")
        self.records.append(rec)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def write_csv(self, path, extra_columns: tuple[str, ...] = ()) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS + list(extra_columns))
            for r in self.records:
                row = [str(r.iteration)] + [repr(float(v)) for v in (
                    r.loss, r.residual_loss, r.data_loss, r.e_l2_u, r.e_l2_E, r.seconds)]
                row += [repr(float(r.extra.get(c, float("nan")))) for c in extra_columns]
                w.writerow(row)


def relative_l2(u_hat, u_ref):
    """Relative L2 error over all stacked components.

    Returns ``(error, is_relative)``; when the reference has zero norm the
    absolute norm is returned with ``is_relative`` False.
    """
    u_hat = np.asarray(u_hat, dtype=float)
    u_ref = np.asarray(u_ref, dtype=float)
    if u_hat.shape != u_ref.shape:
        raise ValueError(f"shape mismatch {u_hat.shape} vs {u_ref.shape}")
    num = np.linalg.norm((u_hat - u_ref).ravel())
    den = np.linalg.norm(u_ref.ravel())
    if den == 0.0:
        return float(num), False
    return float(num / den), True


class _Counter:
    """Wraps the objective: counts calls and maps inadmissible states to +inf."""

    def __init__(self, fun, cap):
        self.fun = fun
        self.cap = cap
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        try:
            f, g = self.fun(x)
        except InadmissibleStateError:
            return np.inf, None
        f = float(f)
        g = np.asarray(g, dtype=float)
        if np.isnan(f) or (np.isfinite(f) and not np.all(np.isfinite(g))):
            raise NonFiniteObjectiveError(f"objective returned non-finite values (f = {f})")
        return f, g

    @property
    def exhausted(self) -> bool:
        return self.calls >= self.cap


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolating (a, fa, ga), (b, fb, gb); None if ill-posed."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    denom = gb - ga + 2.0 * d2
    if denom == 0:
        return None
    t = b - (b - a) * (gb + d2 - d1) / denom
    return t if np.isfinite(t) else None


def _roundoff(f0):
    # Armijo slack at the level of rounding in f, so steps that are exact in
    # the gradient but invisible in f can still be accepted near a minimum
    return 8.0 * np.finfo(float).eps * abs(f0)


def _line_search(obj, x, f0, g0, p, step, opts):
    """Strong Wolfe search (bracketing + zoom). Returns (alpha, f, g) or None."""
    dg0 = float(g0 @ p)
    c1, c2 = opts.c1, opts.c2
    slack = _roundoff(f0)
    a_prev, f_prev, dg_prev = 0.0, f0, dg0
    a = step
    g_prev = g0
    for i in range(opts.max_linesearch_steps):
        if obj.exhausted:
            return None
        f, g = obj(x + a * p)
        if not np.isfinite(f):
            # inadmissible trial point: shrink toward the last good step
            a = a_prev + 0.5 * (a - a_prev)
            continue
        dg = float(g @ p)
        if f > f0 + c1 * a * dg0 + slack or (i > 0 and f > f_prev):
            return _zoom(obj, x, f0, dg0, p, a_prev, f_prev, dg_prev, g_prev, a, f, dg,
                         opts, opts.max_linesearch_steps - i - 1)
        if abs(dg) <= -c2 * dg0:
            return a, f, g
        if dg >= 0:
            return _zoom(obj, x, f0, dg0, p, a, f, dg, g, a_prev, f_prev, dg_prev,
                         opts, opts.max_linesearch_steps - i - 1)
        a_prev, f_prev, dg_prev, g_prev = a, f, dg, g
        a = 2.0 * a
    return None


def _zoom(obj, x, f0, dg0, p, alo, flo, dglo, glo, ahi, fhi, dghi, opts, budget):
    c1, c2 = opts.c1, opts.c2
    slack = _roundoff(f0)
    for _ in range(max(budget, 1)):
        if obj.exhausted:
            break
        width = ahi - alo
        t = None
        if np.isfinite(fhi):
            t = _cubic_min(alo, flo, dglo, ahi, fhi, dghi)
        lo_b, hi_b = sorted((alo + 0.1 * width, ahi - 0.1 * width))
        if t is None or not lo_b <= t <= hi_b:
            t = alo + 0.5 * width
        f, g = obj(x + t * p)
        if not np.isfinite(f):
            ahi, fhi, dghi = t, np.inf, np.nan
            continue
        dg = float(g @ p)
        if f > f0 + c1 * t * dg0 + slack or f > flo:
            ahi, fhi, dghi = t, f, dg
        else:
            if abs(dg) <= -c2 * dg0:
                return t, f, g
            if dg * (ahi - alo) >= 0:
                ahi, fhi, dghi = alo, flo, dglo
            alo, flo, dglo, glo = t, f, dg, g
        if abs(ahi - alo) <= 1e-16 * max(1.0, abs(alo)):
            break
    # accept a sufficient-decrease point if the curvature test never passed
    if alo > 0 and flo <= f0:
        return alo, flo, glo
    return None


def _direction(g, S, Y, rho):
    q = g.copy()
    alphas = []
    for s, y, r in zip(reversed(S), reversed(Y), reversed(rho)):
        a = r * float(s @ q)
        alphas.append(a)
        q -= a * y
    if S:
        q *= float(S[-1] @ Y[-1]) / float(Y[-1] @ Y[-1])
    for (s, y, r), a in zip(zip(S, Y, rho), reversed(alphas)):
        b = r * float(y @ q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(objective: Callable, theta0, opts: LBFGSOptions | None = None,
                   callback: Callable | None = None):
    """Minimize ``objective(theta) -> (L, grad)``.

    ``callback(k, theta, f)`` runs after every accepted iteration and may
    return an :class:`IterationRecord` (or dict of extra fields) to store;
    otherwise a plain record is stored. Returns ``(theta, history, reason)``.
    """
    opts = opts or LBFGSOptions()
    x = np.array(theta0, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("initial parameters must be finite")
    obj = _Counter(objective, opts.max_function_evals)
    t0 = time.perf_counter()
    f, g = obj(x)
    if not np.isfinite(f):
        raise InadmissibleStateError("initial parameters give an inadmissible state")
    history = TrainingHistory()
    S, Y, rho = [], [], []
    reason = StopReason.ITERATION_CAP
    k = 0
    reset_once = False
    while True:
        if np.max(np.abs(g)) <= opts.gtol:
            reason = StopReason.GTOL
            break
        if k >= opts.max_iterations:
            reason = StopReason.ITERATION_CAP
            break
        if obj.exhausted:
            reason = StopReason.EVAL_CAP
            break
        p = _direction(g, S, Y, rho)
        if float(g @ p) >= 0:
            S, Y, rho = [], [], []
            p = -g
        step = 1.0 if S else min(1.0, 1.0 / max(np.sum(np.abs(g)), 1e-300))
        res = _line_search(obj, x, f, g, p, step, opts)
        if res is None:
            if obj.exhausted:
                reason = StopReason.EVAL_CAP
                break
            if S and not reset_once:
                S, Y, rho = [], [], []
                reset_once = True
                continue
            reason = StopReason.LINE_SEARCH_FAILED
            break
        reset_once = False
        a, f_new, g_new = res
        s = a * p
        y = g_new - g
        sy = float(s @ y)
        x = x + s
        f_old = f
        f, g = f_new, g_new
        k += 1
        if sy > 1e-10 * float(y @ y):
            S.append(s)
            Y.append(y)
            rho.append(1.0 / sy)
            if len(S) > opts.memory:
                S.pop(0)
                Y.pop(0)
                rho.pop(0)
        rec = IterationRecord(k, f, seconds=time.perf_counter() - t0)
        if callback is not None:
            out = callback(k, x, f)
            if isinstance(out, IterationRecord):
                out.seconds = rec.seconds
                rec = out
            elif isinstance(out, dict):
                rec.extra.update(out)
        history.append(rec)
        # ftol = 0 disables the test: progress is then judged by the gradient alone
        if opts.ftol > 0 and (f_old - f) / max(abs(f_old), abs(f), 1.0) <= opts.ftol:
            reason = StopReason.FTOL
            break
    return x, history, reason
