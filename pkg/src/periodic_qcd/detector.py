"""Periodic-CUSUM, the multi-hypothesis CUSUM bank and the SR-type statistic.

All updates are pure: they take a frozen state and return a new one. The
scalar step functions :func:`cusum_step` and :func:`sr_step` are shared with
the Monte Carlo kernels in :mod:`periodic_qcd.evaluation`, which keeps every
stopping time produced there identical to folding the state updates here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import IncompatibleLawsError, InvalidConfigError, InvalidInputError
from .law import DEFAULT_CLAMP, PeriodicLaw, check_compatible, llr_series, log_likelihood_ratio

# Absolute slack on the log scale for the SR crossing. The log-domain
# recursion drifts by a few ulps (R_n = n evaluates to log(n) - 4e-16 at n=10).
SR_LOG_TOL = 1e-9


def cusum_step(w: float, z: float) -> float:
    return (w if w > 0.0 else 0.0) + z


def _log1p_exp(a: float) -> float:
    if a > 0.0:
        return a + math.log1p(math.exp(-a))
    return math.log1p(math.exp(a))


def sr_step(log_r: float, z: float) -> float:
    """One step of ``R <- (R + 1) * exp(z)`` carried out on ``log R``."""
    if log_r == -math.inf:
        return z
    return _log1p_exp(log_r) + z


def log_sum_exp(values: Iterable[float]) -> float:
    vals = list(values)
    if not vals:
        return -math.inf
    m = max(vals)
    if m == -math.inf:
        return -math.inf
    return m + math.log(math.fsum(math.exp(v - m) for v in vals))


def calibrate_threshold(beta: float) -> float:
    """CUSUM threshold ``A = log(beta)`` for a target mean time to false alarm."""
    if not beta > 1.0:
        raise InvalidConfigError(f"beta must be > 1, got {beta}")
    return math.log1p(beta - 1.0) if beta < 2.0 else math.log(beta)


def bank_threshold(beta: float, m: int) -> float:
    if not beta > 1.0:
        raise InvalidConfigError(f"beta must be > 1, got {beta}")
    if m < 1:
        raise InvalidConfigError("at least one post-change hypothesis is required")
    return math.log(beta * m)


@dataclass(frozen=True)
class DetectorConfig:
    threshold_a: float
    beta: float | None = None
    clamp: float = DEFAULT_CLAMP

    def __post_init__(self) -> None:
        if self.beta is not None and not self.beta > 1.0:
            raise InvalidConfigError(f"beta must be > 1, got {self.beta}")
        if not self.clamp > 0.0:
            raise InvalidConfigError(f"clamp must be > 0, got {self.clamp}")

    @classmethod
    def from_beta(cls, beta: float, clamp: float = DEFAULT_CLAMP) -> DetectorConfig:
        return cls(calibrate_threshold(beta), beta, clamp)

    @classmethod
    def from_threshold(cls, a: float, clamp: float = DEFAULT_CLAMP) -> DetectorConfig:
        """Manual threshold; ``beta`` is set to ``exp(a)`` when that exceeds 1."""
        if a <= 0.0:
            beta = None
        else:
            beta = math.exp(a) if a < 709.0 else math.inf
        return cls(float(a), beta, clamp)

    def require_beta(self) -> float:
        if self.beta is None:
            raise InvalidConfigError("this rule needs beta > 1 (threshold_a <= 0 gives none)")
        return self.beta

    def to_dict(self) -> dict[str, Any]:
        return {"threshold_a": self.threshold_a, "beta": self.beta, "clamp": self.clamp}


@dataclass(frozen=True)
class CusumState:
    w: float = 0.0
    n: int = 0
    phase: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {"w": self.w, "n": self.n, "phase": self.phase}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> CusumState:
        return cls(float(d["w"]), int(d["n"]), int(d.get("phase", 0)))


def cusum_init(phase: int = 0) -> CusumState:
    return CusumState(0.0, 0, phase)


def cusum_update(
    state: CusumState,
    x: Any,
    pre: PeriodicLaw,
    post: PeriodicLaw,
    clamp: float = DEFAULT_CLAMP,
) -> CusumState:
    check_compatible(pre, post)
    n = state.n + 1
    z = log_likelihood_ratio(post.slot(n, state.phase), pre.slot(n, state.phase), x, clamp)
    return CusumState(cusum_step(state.w, z), n, state.phase)


def cusum_direct(
    observations: Sequence[Any],
    pre: PeriodicLaw,
    post: PeriodicLaw,
    phase: int = 0,
    clamp: float = DEFAULT_CLAMP,
) -> float:
    """``max_k sum_{i=k}^{n} Z_i`` computed literally from suffix sums."""
    if len(observations) == 0:
        raise InvalidInputError("cusum_direct needs at least one observation")
    z = np.array(
        [
            log_likelihood_ratio(post.slot(i, phase), pre.slot(i, phase), x, clamp)
            for i, x in enumerate(observations, start=1)
        ]
    )
    suffix = np.cumsum(z[::-1])
    return float(suffix.max())


def cusum_direct_path(
    observations: Sequence[Any],
    pre: PeriodicLaw,
    post: PeriodicLaw,
    phase: int = 0,
    clamp: float = DEFAULT_CLAMP,
) -> np.ndarray:
    """Direct-form statistic at every prefix, ``W_1 .. W_n``.

    Builds the full table of window sums ``sum_{i=k}^{n} Z_i`` for ``k <= n``
    and takes the column maxima; quadratic in length, meant for checking.
    """
    if len(observations) == 0:
        raise InvalidInputError("cusum_direct_path needs at least one observation")
    z = llr_series(pre, post, np.asarray(observations), 1, phase, clamp)
    s = np.concatenate(([0.0], np.cumsum(z)))
    windows = s[None, 1:] - s[:-1, None]  # [k-1, n-1] -> sum_{i=k}^{n} Z_i
    windows[np.tril_indices(len(z), -1)] = -np.inf
    return windows.max(axis=0)


def cusum_stopped(state: CusumState, a: float) -> bool:
    return state.w > a


@dataclass(frozen=True)
class BankState:
    """Per-hypothesis CUSUMs and log SR components after ``n`` samples.

    ``sr_log_components[l]`` is ``log R_n^(l)``; an empty sum is ``-inf``.
    The total SR statistic is the sum of the exponentiated components.
    """

    per_hyp: tuple[float, ...]
    sr_log_components: tuple[float, ...]
    n: int = 0
    phase: int = 0

    def __post_init__(self) -> None:
        if len(self.per_hyp) < 1:
            raise InvalidConfigError("a bank needs at least one hypothesis")
        if len(self.per_hyp) != len(self.sr_log_components):
            raise InvalidConfigError("per_hyp and sr_log_components lengths differ")

    @property
    def m(self) -> int:
        return len(self.per_hyp)

    @property
    def log_r(self) -> float:
        return log_sum_exp(self.sr_log_components)

    def to_dict(self) -> dict[str, Any]:
        # JSON has no -inf; an empty SR sum is written as null
        return {
            "per_hyp": list(self.per_hyp),
            "sr_log_components": [None if c == -math.inf else c for c in self.sr_log_components],
            "n": self.n,
            "phase": self.phase,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> BankState:
        comps = tuple(-math.inf if c is None else float(c) for c in d["sr_log_components"])
        return cls(tuple(float(w) for w in d["per_hyp"]), comps, int(d["n"]), int(d.get("phase", 0)))


def bank_init(m: int, phase: int = 0) -> BankState:
    return BankState((0.0,) * m, (-math.inf,) * m, 0, phase)


def bank_update(
    state: BankState,
    x: Any,
    pre: PeriodicLaw,
    posts: Sequence[PeriodicLaw],
    clamp: float = DEFAULT_CLAMP,
) -> BankState:
    if len(posts) != state.m:
        raise IncompatibleLawsError(f"bank holds {state.m} hypotheses, got {len(posts)} laws")
    n = state.n + 1
    f = pre.slot(n, state.phase)
    per_hyp = []
    comps = []
    for post, w, c in zip(posts, state.per_hyp, state.sr_log_components):
        check_compatible(pre, post)
        z = log_likelihood_ratio(post.slot(n, state.phase), f, x, clamp)
        per_hyp.append(cusum_step(w, z))
        comps.append(sr_step(c, z))
    return BankState(tuple(per_hyp), tuple(comps), n, state.phase)


def _check_m(state: BankState, m: int) -> None:
    if m != state.m:
        raise InvalidConfigError(f"m={m} does not match the bank size {state.m}")


def bank_cusum_stopped(state: BankState, beta: float, m: int) -> bool:
    _check_m(state, m)
    return max(state.per_hyp) >= bank_threshold(beta, m)


def sr_stopped(state: BankState, beta: float, m: int) -> bool:
    _check_m(state, m)
    if state.n == 0:
        return False
    return state.log_r >= bank_threshold(beta, m) - SR_LOG_TOL
