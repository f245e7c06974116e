"""Closed-form reliability and cost calculators with Monte-Carlo oracles.

The analytic failure probabilities are union bounds computed in exact
rational arithmetic (big integers), with a log-space path for very large
inputs.  The Monte-Carlo estimators sample the underlying placement events
directly and serve as independent oracles for the bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class ProbabilityBound:
    """Clamped probability plus the raw (possibly > 1) union bound."""

    probability: float
    raw_bound: float

    def __float__(self) -> float:
        return self.probability


def _clamped(raw: Fraction) -> ProbabilityBound:
    raw_f = float(raw)
    return ProbabilityBound(min(max(raw_f, 0.0), 1.0), raw_f)


def basil_failure_prob(N: int, b: int, S: int) -> ProbabilityBound:
    """Union bound on ``S`` Byzantine nodes landing consecutively on the ring.

    Exact zero when ``S > b`` (a run that long is impossible).
    """
    if N < 1 or not 0 <= b <= N or S < 1:
        raise ConfigError("need N >= 1, 0 <= b <= N, S >= 1")
    if S > b:
        return ProbabilityBound(0.0, 0.0)
    raw = Fraction(
        math.factorial(b) * math.factorial(N - S),
        math.factorial(b - S) * math.factorial(N - 1),
    )
    return _clamped(raw)


def basil_failure_prob_log(N: int, b: int, S: int) -> float:
    """Log-space evaluation of :func:`basil_failure_prob` for huge inputs."""
    if S > b:
        return 0.0
    log_val = (
        math.lgamma(b + 1) + math.lgamma(N - S + 1)
        - math.lgamma(b - S + 1) - math.lgamma(N)
    )
    return min(math.exp(log_val), 1.0)


def basil_plus_failure_case1(N: int, b: int, n: int, G: int) -> ProbabilityBound:
    """Failure bound for fully connected groups (``S = n - 1``).

    A group fails only when it contains ``n`` or ``n - 1`` Byzantine members;
    group composition is hypergeometric, and the ``G`` groups are
    union-bounded.
    """
    _check_group_args(N, b, n, G)
    raw = Fraction(G) * Fraction(
        math.comb(b, n) + math.comb(b, n - 1) * math.comb(N - b, 1),
        math.comb(N, n),
    )
    return _clamped(raw)


def basil_plus_failure_prob(N: int, b: int, n: int, G: int, S: int) -> ProbabilityBound:
    """Failure bound for grouped rings with relaxed connectivity ``S < n - 1``.

    Conditions on the hypergeometric number ``i`` of Byzantine members in a
    group; given ``i``, the chance that ``S`` specific consecutive ring slots
    are all Byzantine is ``prod_s (i - s) / (n - s)``, union-bounded over the
    ``n`` start positions and the ``G`` groups.
    """
    _check_group_args(N, b, n, G)
    if not 1 <= S <= n - 1:
        raise ConfigError("need 1 <= S <= n-1")
    total = Fraction(0)
    denom = math.comb(N, n)
    for i in range(0, min(b, n) + 1):
        run = Fraction(n)
        for s in range(S):
            run *= Fraction(max(i - s, 0), n - s)
        if run == 0:
            continue
        total += run * Fraction(math.comb(b, i) * math.comb(N - b, n - i), denom)
    return _clamped(Fraction(G) * total)


def _check_group_args(N: int, b: int, n: int, G: int) -> None:
    if N < 1 or not 0 <= b <= N:
        raise ConfigError("need N >= 1 and 0 <= b <= N")
    if n < 1 or G < 1 or n * G != N:
        raise ConfigError("need n * G == N with positive n, G")


def _circular_run_hits(placements: np.ndarray, S: int) -> np.ndarray:
    """Row mask: does a circular run of >= S consecutive True appear?"""
    if S == 1:
        return placements.any(axis=1)
    ext = np.concatenate([placements, placements[:, : S - 1]], axis=1).astype(np.uint8)
    csum = np.cumsum(ext, axis=1)
    windows = csum[:, S - 1:].copy()
    windows[:, 1:] -= csum[:, :-S]
    return (windows == S).any(axis=1)


def monte_carlo_ring_failure(
    N: int, b: int, S: int, trials: int, seed: int, chunk: int = 50_000
) -> tuple[float, float]:
    """Frequency of >= S consecutive Byzantine positions on a ring of N.

    Samples uniform placements of ``b`` Byzantine nodes; the run check wraps
    around the ring.  Returns (estimate, binomial standard error).
    """
    if trials < 1:
        raise ConfigError("trials must be positive")
    if not 0 <= b <= N:
        raise ConfigError("need 0 <= b <= N")
    rng = np.random.default_rng([int(seed), 0xE0])
    base = np.zeros(N, dtype=bool)
    base[:b] = True
    hits = 0
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        block = np.tile(base, (m, 1))
        block = rng.permuted(block, axis=1)
        hits += int(_circular_run_hits(block, S).sum())
        done += m
    est = hits / trials
    return est, math.sqrt(est * (1.0 - est) / trials)


def monte_carlo_basil_plus_failure(
    N: int, b: int, n: int, G: int, S: int, trials: int, seed: int, chunk: int = 20_000
) -> tuple[float, float]:
    """Frequency of any group containing a circular run of >= S Byzantine nodes.

    Group compositions arise from a uniform permutation split (hypergeometric
    per group); the within-group ring order is the random split order.
    """
    _check_group_args(N, b, n, G)
    rng = np.random.default_rng([int(seed), 0xE1])
    base = np.zeros(N, dtype=bool)
    base[:b] = True
    hits = 0
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        block = np.tile(base, (m, 1))
        block = rng.permuted(block, axis=1)
        fail = np.zeros(m, dtype=bool)
        for g in range(G):
            fail |= _circular_run_hits(block[:, g * n:(g + 1) * n], S)
        hits += int(fail.sum())
        done += m
    est = hits / trials
    return est, math.sqrt(est * (1.0 - est) / trials)


def basil_training_time(
    tau: int, n: int, G: int, t_perf: float, t_comm: float, t_sgd: float
) -> float:
    """Upper bound on one global round of sequential ring training."""
    _check_times(t_perf, t_comm, t_sgd)
    return tau * n * G * (t_perf + t_comm + t_sgd)


def basil_training_time_recursion(
    tau: int, N: int, S: int, t_perf: float, t_comm: float, t_sgd: float
) -> float:
    """Exact completion-time recursion for sequential ring training.

    Replays the per-node finish times: the first ring pass ramps up (node i
    evaluates only i-1 received models until the queue is full), later passes
    evaluate ``S`` models each.  Returns the finish time of the last node in
    round ``tau``.
    """
    _check_times(t_perf, t_comm, t_sgd)
    if tau < 1 or N < 1 or not 1 <= S <= max(N - 1, 1):
        raise ConfigError("need tau >= 1, N >= 1, 1 <= S <= N-1")
    t_comp = t_perf + t_sgd
    finish = t_sgd  # first node updates the shared start model directly
    for i in range(2, N + 1):
        if i <= S:
            finish += t_comm + (i - 1) * t_perf + t_sgd
        else:
            finish += t_comm + t_comp
    for _ in range(2, tau + 1):
        for _ in range(N):
            finish += t_comm + t_comp
    return finish


def basil_plus_training_time(
    tau: int, n: int, G: int, S: int, t_perf: float, t_comm: float, t_sgd: float
) -> float:
    """One global round of grouped training: parallel rings, circular
    aggregation, and the final multicast."""
    _check_times(t_perf, t_comm, t_sgd)
    return (
        (tau * n + G + 1) * t_perf
        + (S * G + tau * n - 1) * t_comm
        + (tau * n) * t_sgd
    )


def ubar_training_time(
    K: int, S: int, d: int, R: float,
    t_dist: float, t_perf: float, t_agg: float, t_sgd: float,
) -> float:
    """Total graph-baseline training time over ``K`` parallel rounds."""
    _check_times(t_dist, t_perf, t_agg, t_sgd)
    if R <= 0:
        raise ConfigError("bandwidth R must be positive")
    return K * (t_dist + t_perf + t_agg + t_sgd + S * 32.0 * d / R)


def _check_times(*times: float) -> None:
    if any(t < 0 for t in times):
        raise ConfigError("times must be nonnegative")
