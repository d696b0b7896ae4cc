"""Temporal preference shift vectors, lambda sweeps and recency-based lambda prediction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .merge import MergeError, TaskVector, apply, task_vector
from .tensor_store import Checkpoint

DEFAULT_MAX_LAMBDA = 2.0


class SweepError(RuntimeError):
    def __init__(self, lam: float, cause: BaseException):
        super().__init__(f"evaluation failed at lambda={lam!r}: {cause}")
        self.lam = lam


@dataclass(frozen=True, eq=False)
class TemporalShift:
    """``tv = theta_t2 - theta_t1``; ``end`` keeps theta_t2 for the exact endpoint."""

    domain: str | None
    t_from: str | None
    t_to: str | None
    tv: TaskVector
    end: Checkpoint


def temporal_shift(theta_t1: Checkpoint, theta_t2: Checkpoint, phases: Sequence[str] | None = None) -> TemporalShift:
    if phases is not None and theta_t1.phase in phases and theta_t2.phase in phases:
        if phases.index(theta_t1.phase) >= phases.index(theta_t2.phase):
            raise MergeError(f"phase {theta_t1.phase!r} does not precede {theta_t2.phase!r}")
    tv = task_vector(theta_t1, theta_t2)
    if tv.excluded:
        raise MergeError(f"temporal shift needs aligned tensors, unaligned: {sorted(tv.excluded)}")
    return TemporalShift(theta_t2.domain or theta_t1.domain, theta_t1.phase, theta_t2.phase, tv, theta_t2)


def interpolate(theta_t1: Checkpoint, shift: TemporalShift, lam: float, output_id: str | None = None) -> Checkpoint:
    """``theta_t1 + lam * shift``; exactly theta_t1 at 0 and exactly theta_t2 at 1."""
    if not math.isfinite(lam):
        raise MergeError(f"lambda must be finite, got {lam}")
    if lam == 0:
        return theta_t1
    if lam == 1:
        return shift.end
    return apply(theta_t1, shift.tv, lam, output_id=output_id or f"{theta_t1.id}+{lam:g}shift")


def parse_lambdas(text: str) -> list[float]:
    """``"0:1.5:0.05"`` (inclusive range) or ``"0,0.5,1"``."""
    if ":" in text:
        start, stop, step = (float(x) for x in text.split(":"))
        if step <= 0 or stop < start:
            raise ValueError(f"bad lambda range {text!r}")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 10) for i in range(n)]
    return [float(x) for x in text.split(",") if x.strip()]


@dataclass
class LambdaSweepResult:
    lambdas: list[float]
    metric: str
    metrics: dict[str, dict[float, dict[str, float]]] = field(default_factory=dict)
    argmax: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "lambdas": self.lambdas,
            "metric": self.metric,
            "groups": {
                g: {
                    "argmax": self.argmax[g],
                    "curve": [{"lambda": lam, **self.metrics[g][lam]} for lam in self.lambdas],
                }
                for g in self.metrics
            },
        }


def best_lambda(curve: Mapping[float, float]) -> float:
    """Argmax with ties going to the smallest lambda."""
    best = None
    for lam in sorted(curve):
        if best is None or curve[lam] > curve[best]:
            best = lam
    return best


def sweep_lambda(
    theta_t1: Checkpoint,
    shift: TemporalShift,
    lambdas: Sequence[float],
    evaluator: Callable[[Checkpoint, str], Mapping[str, float]],
    groups: Sequence[str] = ("all",),
    metric: str = "ndcg@10",
    max_lambda: float = DEFAULT_MAX_LAMBDA,
) -> LambdaSweepResult:
    """Evaluate the interpolated checkpoint at every lambda for every group.

    ``evaluator(ckpt, group)`` returns a flat metric mapping such as
    ``{"recall@10": ..., "ndcg@10": ...}``.
    """
    lambdas = [float(x) for x in lambdas]
    if not lambdas:
        raise ValueError("lambda grid is empty")
    if any(b <= a for a, b in zip(lambdas, lambdas[1:])):
        raise ValueError("lambda grid must be strictly increasing")
    if max(abs(x) for x in lambdas) > max_lambda:
        raise ValueError(f"lambda beyond +/-{max_lambda} needs an explicit extrapolation limit")
    result = LambdaSweepResult(lambdas, metric, {g: {} for g in groups})
    for lam in lambdas:
        ckpt = interpolate(theta_t1, shift, lam)
        for g in groups:
            try:
                record = dict(evaluator(ckpt, g))
                record[metric]
            except Exception as exc:
                raise SweepError(lam, exc) from exc
            result.metrics[g][lam] = record
    for g in groups:
        result.argmax[g] = best_lambda({lam: rec[metric] for lam, rec in result.metrics[g].items()})
    return result


class LineFit(NamedTuple):
    slope: float
    intercept: float
    residuals: tuple[float, ...]

    def predict(self, x: float) -> float:
        return self.intercept + self.slope * x


def fit_lambda_regressor(points: Iterable[tuple[float, float]]) -> LineFit:
    """Ordinary least squares of lambda* on average gap (days), closed form."""
    pts = [(float(x), float(y)) for x, y in points]
    if len(pts) < 2:
        raise ValueError("need at least two points to fit a line")
    xs = np.array([p[0] for p in pts])
    ys = np.array([p[1] for p in pts])
    x_mean, y_mean = math.fsum(xs) / len(xs), math.fsum(ys) / len(ys)
    sxx = math.fsum((xs - x_mean) ** 2)
    if sxx == 0:
        raise ValueError("degenerate fit: all gaps are equal")
    sxy = math.fsum((xs - x_mean) * (ys - y_mean))
    slope = sxy / sxx
    intercept = y_mean - slope * x_mean
    residuals = tuple(float(y - (intercept + slope * x)) for x, y in pts)
    return LineFit(slope, intercept, residuals)


@dataclass
class DomainStats:
    domain: str
    n_users: int
    n_active: int
    n_nonactive: int
    avg_gap_days: float
    lambda_star_nonactive: float | None = None
    p_active: float | None = None

    def __post_init__(self):
        if self.n_active + self.n_nonactive != self.n_users:
            raise ValueError(f"{self.domain}: active + non-active != users")
        if self.p_active is None:
            self.p_active = self.n_active / self.n_users if self.n_users else 0.0
        if not 0 <= self.p_active <= 1:
            raise ValueError(f"{self.domain}: p_active {self.p_active} outside [0, 1]")

    @classmethod
    def from_row(cls, domain: str, avg_gap_days: float, lambda_star: float | None, p_active: float) -> DomainStats:
        """Stats known only as ratios (as in a published table); counts are left at zero."""
        return cls(domain, 0, 0, 0, float(avg_gap_days), lambda_star, float(p_active))


def loo_predict(stats: Sequence[DomainStats]) -> dict[str, float]:
    """Leave-one-domain-out prediction of lambda* from average gap."""
    rows = [s for s in stats if s.lambda_star_nonactive is not None]
    if len(rows) != len(stats):
        missing = [s.domain for s in stats if s.lambda_star_nonactive is None]
        raise ValueError(f"lambda* missing for {missing}")
    if len(rows) < 3:
        raise ValueError("leave-one-out needs at least three domains")
    out = {}
    for held in rows:
        train = [(s.avg_gap_days, s.lambda_star_nonactive) for s in rows if s is not held]
        out[held.domain] = fit_lambda_regressor(train).predict(held.avg_gap_days)
    return out


def blend_lambda(lambda_star_pred: float, p_active: float) -> float:
    """Pull the non-active prediction toward 1 in proportion to the active-user share."""
    if not 0 <= p_active <= 1:
        raise ValueError(f"p_active must be in [0, 1], got {p_active}")
    return (1 - p_active) * lambda_star_pred + p_active * 1.0
