"""Monte Carlo check that norms of i.i.d. Gaussian matrices concentrate.

For ``W`` with ``m*n`` entries ~ N(0, sigma^2):

* ``E||W||_1 = mn*sigma*sqrt(2/pi)``, ``Var||W||_1 = mn*sigma^2*(1 - 2/pi)``
* ``E||W||_2^2 = mn*sigma^2``, ``Var||W||_2^2 = 2*mn*sigma^4``

so the L1 norm normalized by its mean has relative std ``sqrt((pi/2 - 1)/mn)``
and the ratio of two independent such norms has std about ``sqrt(2)`` times
that. The envelope used for assertions is four ratio standard deviations.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DomainError
from .tensor import gaussian_fill

MIN_ASSERT_TRIALS = 100
MIN_ASSERT_ENTRIES = 256


def ratio_std_l1(mn: int) -> float:
    return math.sqrt(2.0 * (math.pi / 2.0 - 1.0) / mn)


def envelope_l1(mn: int, n_sigma: float = 4.0) -> float:
    return n_sigma * ratio_std_l1(mn)


def chebyshev_l1(eps: float, mn: int) -> float:
    """Chebyshev bound on ``P(| ||W||_1 / E||W||_1 - 1 | > eps)``."""
    return min(1.0, (math.pi / 2.0 - 1.0) / (eps * eps * mn))


def _norms(w: np.ndarray) -> tuple[float, float]:
    flat = w.ravel()
    return float(np.abs(flat).sum()), float(flat @ flat)


def _trial(m: int, n: int, sigma: float, rng: np.random.Generator) -> tuple[float, float, float, float]:
    l1_q, sq_q = _norms(gaussian_fill(m, n, sigma, rng))
    l1_k, sq_k = _norms(gaussian_fill(m, n, sigma, rng))
    return l1_q, sq_q, l1_k, sq_k


def norm_ratio_trial(m: int, n: int, sigma: float, rng: np.random.Generator) -> tuple[float, float]:
    """``(||W_q||_1/||W_k||_1, ||W_q||_2/||W_k||_2)`` for two fresh Gaussian matrices."""
    if m < 1 or n < 1:
        raise DomainError(f"dimensions must be >= 1, got {m}x{n}")
    if not sigma > 0:
        raise DomainError(f"sigma must be > 0, got {sigma}")
    l1_q, sq_q, l1_k, sq_k = _trial(m, n, sigma, rng)
    return l1_q / l1_k, math.sqrt(sq_q / sq_k)


@dataclass(frozen=True)
class ConvergenceRow:
    m: int
    n: int
    trials: int
    mean_ratio_l1: float
    std_ratio_l1: float
    mean_ratio_l2: float
    std_ratio_l2: float
    chebyshev_bound: float
    envelope: float
    within_envelope_l1: float
    exceed_single_l1: float
    mean_norm_l1: float
    var_sq_l2: float

    @property
    def mn(self) -> int:
        return self.m * self.n


@dataclass
class ConvergenceTable:
    rows: list[ConvergenceRow]
    sigma: float
    seed: int

    COLUMNS = tuple(ConvergenceRow.__dataclass_fields__)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([v if isinstance(v, int) else f"{v:.17g}" for v in asdict(r).values()])
        return buf.getvalue()

    def check(self) -> list[str]:
        """Concentration assertions; returns failure messages (empty when all hold).

        Rows with fewer than ``MIN_ASSERT_TRIALS`` trials or fewer than
        ``MIN_ASSERT_ENTRIES`` entries are skipped.
        """
        failures = []
        ok = [r for r in self.rows if r.trials >= MIN_ASSERT_TRIALS and r.mn >= MIN_ASSERT_ENTRIES]
        for r in ok:
            tag = f"{r.m}x{r.n}"
            if r.within_envelope_l1 < 0.99:
                failures.append(f"{tag}: only {r.within_envelope_l1:.4f} of L1 ratios within {r.envelope:.4g}")
            slack = 3.0 * math.sqrt(r.chebyshev_bound * (1 - r.chebyshev_bound) / r.trials)
            if r.exceed_single_l1 > r.chebyshev_bound + slack:
                failures.append(f"{tag}: exceedance {r.exceed_single_l1:.4f} above Chebyshev bound {r.chebyshev_bound:.4f}")
            if r.mn >= 4096 and r.trials >= 1000:
                if not 0.99 <= r.mean_norm_l1 <= 1.01:
                    failures.append(f"{tag}: normalized mean L1 norm {r.mean_norm_l1:.5f} outside [0.99, 1.01]")
                if not 1.8 <= r.var_sq_l2 <= 2.2:
                    failures.append(f"{tag}: Var(||W||_2^2)/(mn sigma^4) = {r.var_sq_l2:.4f} outside [1.8, 2.2]")
        ladder = sorted(ok, key=lambda r: r.mn)
        for a, b in zip(ladder, ladder[1:]):
            if a.mn < b.mn and not b.std_ratio_l1 < a.std_ratio_l1:
                failures.append(f"std of L1 ratio did not shrink from {a.m}x{a.n} to {b.m}x{b.n}")
        return failures

    def insufficient(self) -> bool:
        return any(r.trials < MIN_ASSERT_TRIALS for r in self.rows)


def _size_streams(seed: int, size_index: int, trials: int) -> list[np.random.Generator]:
    ss = np.random.SeedSequence(seed, spawn_key=(size_index,))
    return [np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(trials)]


def convergence_experiment(
    sizes: list[tuple[int, int]], trials: int, sigma: float = 1.0, seed: int = 0, workers: int = 1
) -> ConvergenceTable:
    """Per-size statistics of the L1/L2 norm ratios over independent trials.

    Trial ``t`` of size ``i`` always draws from the stream with spawn key
    ``(i, t)``, so results are identical for any ``workers``.
    """
    if trials < 1:
        raise DomainError(f"trials must be >= 1, got {trials}")
    if not sigma > 0:
        raise DomainError(f"sigma must be > 0, got {sigma}")
    rows = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for i, (m, n) in enumerate(sizes):
            if m < 1 or n < 1:
                raise DomainError(f"dimensions must be >= 1, got {m}x{n}")
            streams = _size_streams(seed, i, trials)
            job = lambda rng: _trial(m, n, sigma, rng)  # noqa: E731
            raw = np.array(list(pool.map(job, streams)) if pool else [job(r) for r in streams])
            rows.append(_summarize(m, n, sigma, raw))
    finally:
        if pool:
            pool.shutdown()
    return ConvergenceTable(rows, sigma, seed)


def _std(x: np.ndarray) -> float:
    return float(x.std(ddof=1)) if x.size > 1 else 0.0


def _summarize(m: int, n: int, sigma: float, raw: np.ndarray) -> ConvergenceRow:
    mn = m * n
    l1_q, sq_q, l1_k, sq_k = raw.T
    r1 = l1_q / l1_k
    r2 = np.sqrt(sq_q / sq_k)
    env = envelope_l1(mn)
    expected_l1 = mn * sigma * math.sqrt(2.0 / math.pi)
    normalized = np.concatenate([l1_q, l1_k]) / expected_l1
    sq = np.concatenate([sq_q, sq_k])
    return ConvergenceRow(
        m=m,
        n=n,
        trials=len(r1),
        mean_ratio_l1=float(r1.mean()),
        std_ratio_l1=_std(r1),
        mean_ratio_l2=float(r2.mean()),
        std_ratio_l2=_std(r2),
        chebyshev_bound=chebyshev_l1(env, mn),
        envelope=env,
        within_envelope_l1=float(np.mean(np.abs(r1 - 1.0) <= env)),
        exceed_single_l1=float(np.mean(np.abs(normalized - 1.0) > env)),
        mean_norm_l1=float(normalized.mean()),
        var_sq_l2=float(sq.var(ddof=1) / (mn * sigma**4)),
    )
