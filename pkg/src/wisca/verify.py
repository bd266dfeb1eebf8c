"""Functional-equivalence checks and sharpness probes.

``verify_equivalence`` compares two forward functions over a battery of
inputs. Per input the deviation is ``max|a - b| / max(max|a|, max|b|)``, so
the relative figure is scale-aware without blowing up on near-zero entries.

The sharpness side estimates the Hessian trace by central second differences
and compares a Monte Carlo estimate of the loss under Gaussian parameter
noise with its second-order closed form ``L0 + sigma^2/2 * Tr(H)``.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, NumericError, PreconditionError, StructuralInequivalenceError
from .tensor import Matrix, gaussian_fill, make_rng

Forward = Callable[[Matrix], Matrix]
ScalarField = Callable[[np.ndarray], float]

DEFAULT_BATTERY = 32
DEFAULT_TOKENS = 8
MC_CHUNK = 4096


@dataclass(frozen=True)
class EquivalenceReport:
    battery_size: int
    max_abs_dev: float
    max_rel_dev: float
    tolerance: float
    passed: bool
    worst_index: int

    def as_dict(self) -> dict:
        return {
            "battery": self.battery_size,
            "max_abs_dev": self.max_abs_dev,
            "max_rel_dev": self.max_rel_dev,
            "tol": self.tolerance,
            "passed": self.passed,
            "worst_index": self.worst_index,
        }


def make_battery(size: int, n_tokens: int, d_model: int, seed: int = 0) -> list[Matrix]:
    """Gaussian (sigma=1) inputs drawn from one seeded stream."""
    rng = make_rng(seed)
    return [gaussian_fill(n_tokens, d_model, 1.0, rng) for _ in range(size)]


def _deviation(a: Matrix, b: Matrix) -> tuple[float, float]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise StructuralInequivalenceError(f"output shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0, 0.0
    abs_dev = float(np.max(np.abs(a - b)))
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    rel_dev = abs_dev / scale if scale > 0 else 0.0
    return abs_dev, rel_dev


def verify_equivalence(
    f_a: Forward, f_b: Forward, battery: Sequence[Matrix], tol: float, workers: int = 1
) -> EquivalenceReport:
    if not tol > 0:
        raise DomainError(f"tolerance must be > 0, got {tol}")
    if not battery:
        raise DomainError("empty input battery")

    def one(x):
        return _deviation(f_a(x), f_b(x))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            devs = list(pool.map(one, battery))
    else:
        devs = [one(x) for x in battery]
    rel = np.array([d[1] for d in devs])
    worst = int(np.argmax(rel))
    max_rel = float(rel[worst])
    max_abs = max(d[0] for d in devs)
    if not (math.isfinite(max_rel) and math.isfinite(max_abs)):
        max_rel = max_abs = math.inf
    return EquivalenceReport(len(battery), max_abs, max_rel, tol, max_rel <= tol, worst)


def _eval(f: ScalarField, theta: np.ndarray) -> float:
    v = float(f(theta))
    if not math.isfinite(v):
        raise NumericError(f"non-finite function value at {theta}")
    return v


def hessian_trace(f: ScalarField, theta, h: float = 1e-4) -> float:
    """Sum of central second differences along each coordinate axis."""
    if not h > 0:
        raise DomainError(f"step must be > 0, got {h}")
    theta = np.array(theta, dtype=np.float64).reshape(-1)
    f0 = _eval(f, theta)
    total = 0.0
    for i in range(theta.size):
        up = theta.copy()
        down = theta.copy()
        up[i] += h
        down[i] -= h
        total += (_eval(f, up) - 2.0 * f0 + _eval(f, down)) / (h * h)
    return total


@dataclass(frozen=True)
class SharpnessProbe:
    base_loss: float
    hessian_trace: float
    sigma: float
    samples: int
    mc_expected_val_loss: float
    mc_std_error: float
    analytic_expected_val_loss: float


def _mc_chunk(f: ScalarField, theta: np.ndarray, sigma: float, n: int, rng: np.random.Generator):
    deltas = rng.standard_normal((n, theta.size)) * sigma
    vals = np.array([_eval(f, theta + d) for d in deltas])
    return vals.sum(), np.square(vals).sum()


def expected_val_loss(
    f: ScalarField,
    theta,
    sigma: float,
    samples: int,
    rng: np.random.Generator,
    h: float = 1e-4,
    workers: int = 1,
) -> SharpnessProbe:
    """Monte Carlo ``E[f(theta + delta)]``, ``delta ~ N(0, sigma^2 I)``, next to its quadratic model.

    Samples are drawn in fixed-size chunks, each from its own child stream of
    ``rng``, so the estimate does not depend on ``workers``.
    """
    if not sigma > 0:
        raise DomainError(f"sigma must be > 0, got {sigma}")
    if samples < 1:
        raise DomainError(f"samples must be >= 1, got {samples}")
    theta = np.array(theta, dtype=np.float64).reshape(-1)
    sizes = [MC_CHUNK] * (samples // MC_CHUNK)
    if samples % MC_CHUNK:
        sizes.append(samples % MC_CHUNK)
    streams = rng.spawn(len(sizes))
    jobs = list(zip(sizes, streams))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda job: _mc_chunk(f, theta, sigma, *job), jobs))
    else:
        parts = [_mc_chunk(f, theta, sigma, *job) for job in jobs]
    s1 = sum(p[0] for p in parts)
    s2 = sum(p[1] for p in parts)
    mean = s1 / samples
    var = max(s2 / samples - mean * mean, 0.0) * samples / max(samples - 1, 1)
    base = _eval(f, theta)
    trace = hessian_trace(f, theta, h)
    return SharpnessProbe(
        base_loss=base,
        hessian_trace=trace,
        sigma=sigma,
        samples=samples,
        mc_expected_val_loss=mean,
        mc_std_error=math.sqrt(var / samples),
        analytic_expected_val_loss=base + 0.5 * sigma * sigma * trace,
    )


class Sharper(enum.Enum):
    FIRST = "first"
    SECOND = "second"
    TIE = "tie"


def sharpness_compare(
    f: ScalarField, theta1, theta2, sigma: float, loss_tol: float = 1e-8, h: float = 1e-4, rel_tie: float = 1e-9
) -> Sharper:
    """Which of two equal-loss points sits in the sharper region (larger Hessian trace)."""
    if not sigma > 0:
        raise DomainError(f"sigma must be > 0, got {sigma}")
    l1 = _eval(f, np.asarray(theta1, dtype=np.float64))
    l2 = _eval(f, np.asarray(theta2, dtype=np.float64))
    if abs(l1 - l2) > loss_tol:
        raise PreconditionError(f"training losses differ: {l1} vs {l2}")
    e1 = l1 + 0.5 * sigma**2 * hessian_trace(f, theta1, h)
    e2 = l2 + 0.5 * sigma**2 * hessian_trace(f, theta2, h)
    if abs(e1 - e2) <= rel_tie * max(abs(e1), abs(e2), 1e-300):
        return Sharper.TIE
    return Sharper.FIRST if e1 > e2 else Sharper.SECOND
