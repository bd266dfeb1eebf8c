"""Two-parameter toy landscape ``L(Q, K) = (QK - C)^2``.

SGD with heavy-ball momentum from a raw start versus the same start projected
onto ``|Q| == |K|`` with the product kept, plus the one-step gradient-direction
drift and the Hessian-trace profile along a level set.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class SimConfig:
    c: float = 1.0
    eta: float = 0.01
    beta: float = 0.9
    eps: float = 1e-2
    max_iters: int = 10_000

    def __post_init__(self):
        if not self.eta > 0:
            raise DomainError(f"eta must be > 0, got {self.eta}")
        if not 0 <= self.beta < 1:
            raise DomainError(f"beta must be in [0, 1), got {self.beta}")
        if not self.eps > 0:
            raise DomainError(f"eps must be > 0, got {self.eps}")
        if self.max_iters < 1:
            raise DomainError(f"max_iters must be >= 1, got {self.max_iters}")


class Step(NamedTuple):
    iter: int
    q: float
    k: float
    loss: float
    g_q: float
    g_k: float


@dataclass
class Trajectory:
    steps: list[Step] = field(default_factory=list)
    converged: bool = False
    diverged: bool = False

    @property
    def iters_to_converge(self) -> int | None:
        return self.steps[-1].iter if self.converged else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "Q", "K", "loss", "gQ", "gK"])
        for s in self.steps:
            w.writerow([s.iter] + [f"{v:.17g}" for v in s[1:]])
        return buf.getvalue()


def toy_loss(q: float, k: float, c: float = 1.0) -> float:
    r = q * k - c
    return r * r


def toy_grad(q: float, k: float, c: float = 1.0) -> tuple[float, float]:
    r = 2.0 * (q * k - c)
    return r * k, r * q


def wisca_project(q: float, k: float) -> tuple[float, float]:
    """Move to ``|Q'| == |K'|`` on the same product; the sign of Q is kept."""
    p = q * k
    if p == 0.0:
        return 0.0, 0.0
    q_new = math.copysign(math.sqrt(abs(p)), q)
    return q_new, p / q_new


def sgd_momentum_run(q0: float, k0: float, cfg: SimConfig = SimConfig(), wisca_init: bool = False) -> Trajectory:
    """Heavy-ball SGD: ``v <- beta*v - eta*grad``, ``theta <- theta + v``.

    Stops at the first iterate with loss below ``cfg.eps``; iteration 0 is the
    starting point. Overflow is recorded as a diverged trajectory.
    """
    q, k = wisca_project(q0, k0) if wisca_init else (float(q0), float(k0))
    vq = vk = 0.0
    traj = Trajectory()
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(cfg.max_iters + 1):
            loss = toy_loss(q, k, cfg.c)
            gq, gk = toy_grad(q, k, cfg.c)
            traj.steps.append(Step(it, q, k, loss, gq, gk))
            if not all(math.isfinite(v) for v in (q, k, loss, gq, gk)):
                traj.diverged = True
                break
            if loss < cfg.eps:
                traj.converged = True
                break
            if it == cfg.max_iters:
                break
            vq = cfg.beta * vq - cfg.eta * gq
            vk = cfg.beta * vk - cfg.eta * gk
            q += vq
            k += vk
    return traj


def gradient_direction_drift(q: float, k: float, eps: float) -> float:
    """``|Q/K - (Q - eps*K)/(K - eps*Q)|``: how far the gradient direction turns after one step.

    The step is the one that moves ``(Q, K)`` to ``(Q - eps*K, K - eps*Q)``;
    the drift vanishes exactly when ``Q**2 == K**2``.
    """
    denom = k - eps * q
    if k == 0.0 or denom == 0.0:
        raise DomainError(f"drift undefined at Q={q}, K={k}, eps={eps}")
    return abs(q / k - (q - eps * k) / denom)


@dataclass(frozen=True)
class FlatnessProfile:
    c: float
    q: np.ndarray
    k: np.ndarray
    trace: np.ndarray

    @property
    def argmin(self) -> int:
        return int(np.argmin(self.trace))

    def rows(self):
        return list(zip(self.q.tolist(), self.k.tolist(), self.trace.tolist()))


def contour_flatness_profile(c: float, grid: int, span: float = 10.0) -> FlatnessProfile:
    """Analytic ``Tr(H) = 2(Q^2 + K^2)`` along ``QK = C``, ``Q`` from ``sqrt(C)/span`` to ``sqrt(C)*span``.

    Points are log-spaced and symmetric about ``Q = sqrt(C)``; an odd ``grid``
    places one point exactly on the balanced point.
    """
    if not c > 0:
        raise DomainError(f"C must be > 0, got {c}")
    if grid < 3:
        raise DomainError(f"grid must be >= 3, got {grid}")
    if not span > 1:
        raise DomainError(f"span must be > 1, got {span}")
    t = np.linspace(-math.log(span), math.log(span), grid)
    if grid % 2:
        t[grid // 2] = 0.0
    root = math.sqrt(c)
    q = root * np.exp(t)
    k = root * np.exp(-t)
    return FlatnessProfile(c, q, k, 2.0 * (q * q + k * k))


def sample_inits(n: int, rng: np.random.Generator, low: float = 0.3, high: float = 3.0, box: float = 3.0, c: float = 1.0):
    """Random starts with ``|Q0*K0 - C|`` in ``[low, high]``.

    Both coordinates are drawn from U(0, box) with rejection, then the pair is
    negated with probability 1/2 (the loss is symmetric under that flip).
    """
    out = []
    while len(out) < n:
        q, k = rng.uniform(0.0, box, size=2)
        if not low <= abs(q * k - c) <= high:
            continue
        if rng.random() < 0.5:
            q, k = -q, -k
        out.append((float(q), float(k)))
    return out


@dataclass(frozen=True)
class SweepResult:
    inits: list[tuple[float, float]]
    raw_iters: np.ndarray
    wisca_iters: np.ndarray

    @property
    def frac_strictly_fewer(self) -> float:
        return float(np.mean(self.wisca_iters < self.raw_iters))

    @property
    def frac_fewer_or_equal(self) -> float:
        return float(np.mean(self.wisca_iters <= self.raw_iters))

    @property
    def median_raw(self) -> float:
        return float(np.median(self.raw_iters))

    @property
    def median_wisca(self) -> float:
        return float(np.median(self.wisca_iters))


NEVER = np.iinfo(np.int64).max


def sweep(n: int, cfg: SimConfig, rng: np.random.Generator) -> SweepResult:
    """Paired raw/projected runs; non-converged runs count as ``NEVER`` iterations."""
    inits = sample_inits(n, rng, c=cfg.c)
    raw, wis = [], []
    for q, k in inits:
        for flag, sink in ((False, raw), (True, wis)):
            it = sgd_momentum_run(q, k, cfg, wisca_init=flag).iters_to_converge
            sink.append(NEVER if it is None else it)
    return SweepResult(inits, np.array(raw, dtype=np.int64), np.array(wis, dtype=np.int64))


def trajectory_svg(trajs: dict[str, Trajectory], c: float = 1.0, size: int = 480) -> str:
    """Trajectories over level curves of the toy loss, as a standalone SVG document."""
    pts = [(s.q, s.k) for t in trajs.values() for s in t.steps if math.isfinite(s.q) and math.isfinite(s.k)]
    lim = max([abs(v) for p in pts for v in p] + [2.0 * math.sqrt(abs(c)) or 2.0]) * 1.1

    def xy(q, k):
        return (q + lim) / (2 * lim) * size, size - (k + lim) / (2 * lim) * size

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for level in (0.01, 0.1, 0.5, 1.0, 2.0, 4.0):
        for prod in (c + math.sqrt(level), c - math.sqrt(level)):
            if prod == 0:
                continue
            for sign in (1.0, -1.0):
                qs = sign * np.geomspace(abs(prod) / lim, lim, 200)
                ks = prod / qs
                keep = np.abs(ks) <= lim
                if keep.sum() < 2:
                    continue
                line = " ".join(f"{x:.2f},{y:.2f}" for x, y in (xy(a, b) for a, b in zip(qs[keep], ks[keep])))
                parts.append(f'<polyline points="{line}" fill="none" stroke="#cccccc" stroke-width="1"/>')
    colors = ["#d62728", "#2ca02c", "#1f77b4", "#ff7f0e"]
    for i, (name, t) in enumerate(trajs.items()):
        line = " ".join(f"{x:.2f},{y:.2f}" for x, y in (xy(s.q, s.k) for s in t.steps if math.isfinite(s.q)))
        color = colors[i % len(colors)]
        parts.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"><title>{name}</title></polyline>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
