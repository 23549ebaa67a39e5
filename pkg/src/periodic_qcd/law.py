"""Periodic density laws, log-likelihood ratios and information numbers.

A law is a tuple of ``T`` per-slot densities ``(f_1, ..., f_T)``; observation
``n`` (1-based) is drawn from slot ``((n - 1 + phase) mod T) + 1``. Three
families are supported: Gaussian, Poisson and Categorical.

Scalar and array evaluators use the same sequence of floating point
operations, so ``log_likelihood_ratio`` and ``llr_series`` agree bit for bit.
"""

from __future__ import annotations

import math
import numbers
from dataclasses import dataclass, field
from typing import Any, ClassVar, Sequence, Union

import numpy as np
from scipy import stats
from scipy.special import gammaln

from .errors import IncompatibleLawsError, InvalidObservationError, InvalidPairError

LOG_MASS_FLOOR = -745.0
DEFAULT_CLAMP = 50.0
_LOG_2PI = math.log(2.0 * math.pi)


def _as_real(x: Any) -> float:
    if isinstance(x, (bool, np.bool_)) or not isinstance(x, numbers.Real):
        raise InvalidObservationError(f"expected a real observation, got {x!r}")
    x = float(x)
    if not math.isfinite(x):
        raise InvalidObservationError(f"observation must be finite, got {x!r}")
    return x


def _as_count(x: Any) -> int:
    if isinstance(x, (bool, np.bool_)):
        raise InvalidObservationError(f"expected a nonnegative integer, got {x!r}")
    if isinstance(x, numbers.Integral):
        k = int(x)
    elif isinstance(x, numbers.Real) and float(x).is_integer():
        k = int(x)
    else:
        raise InvalidObservationError(f"expected a nonnegative integer, got {x!r}")
    if k < 0:
        raise InvalidObservationError(f"expected a nonnegative integer, got {x!r}")
    return k


@dataclass(frozen=True)
class Gaussian:
    mean: float
    variance: float
    family: ClassVar[str] = "gaussian"
    support: ClassVar[str] = "real"
    _log_norm: float = field(init=False, repr=False, compare=False)
    _two_var: float = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", float(self.mean))
        object.__setattr__(self, "variance", float(self.variance))
        if not math.isfinite(self.mean):
            raise ValueError("Gaussian mean must be finite")
        if not (self.variance > 0.0 and math.isfinite(self.variance)):
            raise ValueError(f"Gaussian variance must be > 0, got {self.variance}")
        object.__setattr__(self, "_log_norm", -0.5 * (_LOG_2PI + math.log(self.variance)))
        object.__setattr__(self, "_two_var", 2.0 * self.variance)

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    def log_pdf(self, x: Any) -> float:
        d = _as_real(x) - self.mean
        return self._log_norm - (d * d) / self._two_var

    def log_pdf_array(self, xs: np.ndarray) -> np.ndarray:
        d = np.asarray(xs, dtype=np.float64) - self.mean
        return self._log_norm - (d * d) / self._two_var

    def to_dict(self) -> dict[str, Any]:
        return {"family": self.family, "mean": self.mean, "variance": self.variance}


@dataclass(frozen=True)
class Poisson:
    rate: float
    family: ClassVar[str] = "poisson"
    support: ClassVar[str] = "count"
    _log_rate: float = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "rate", float(self.rate))
        if not (self.rate > 0.0 and math.isfinite(self.rate)):
            raise ValueError(f"Poisson rate must be > 0, got {self.rate}")
        object.__setattr__(self, "_log_rate", math.log(self.rate))

    def log_pdf(self, x: Any) -> float:
        k = float(_as_count(x))
        return k * self._log_rate - self.rate - float(gammaln(k + 1.0))

    def log_pdf_array(self, xs: np.ndarray) -> np.ndarray:
        k = np.asarray(xs, dtype=np.float64)
        return k * self._log_rate - self.rate - gammaln(k + 1.0)

    def to_dict(self) -> dict[str, Any]:
        return {"family": self.family, "rate": self.rate}


@dataclass(frozen=True)
class Categorical:
    """Finite-alphabet mass function over symbols ``0, 1, ..., K-1``.

    Symbols at or beyond ``K`` carry zero mass; zero-mass outcomes evaluate
    to ``LOG_MASS_FLOOR`` instead of ``-inf``.
    """

    probs: tuple[float, ...]
    family: ClassVar[str] = "categorical"
    support: ClassVar[str] = "symbol"
    _log_table: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        probs = tuple(float(p) for p in self.probs)
        object.__setattr__(self, "probs", probs)
        if not probs:
            raise ValueError("Categorical needs at least one symbol")
        if any(p < 0.0 or not math.isfinite(p) for p in probs):
            raise ValueError("Categorical probabilities must be nonnegative")
        if abs(math.fsum(probs) - 1.0) > 1e-9:
            raise ValueError(f"Categorical probabilities must sum to 1, got {math.fsum(probs)}")
        table = np.array([math.log(p) if p > 0.0 else LOG_MASS_FLOOR for p in probs])
        table.setflags(write=False)
        object.__setattr__(self, "_log_table", table)

    @property
    def size(self) -> int:
        return len(self.probs)

    def log_pdf(self, x: Any) -> float:
        k = _as_count(x)
        if k >= len(self.probs):
            return LOG_MASS_FLOOR
        return float(self._log_table[k])

    def log_pdf_array(self, xs: np.ndarray) -> np.ndarray:
        k = np.asarray(xs, dtype=np.int64)
        if k.size and k.min() < 0:
            raise InvalidObservationError("categorical symbols must be nonnegative")
        out = np.full(k.shape, LOG_MASS_FLOOR)
        inside = k < len(self.probs)
        out[inside] = self._log_table[k[inside]]
        return out

    def to_dict(self) -> dict[str, Any]:
        return {"family": self.family, "probs": list(self.probs)}


DensitySpec = Union[Gaussian, Poisson, Categorical]

_FAMILIES = {"gaussian": Gaussian, "poisson": Poisson, "categorical": Categorical}


def density_from_dict(d: dict[str, Any]) -> DensitySpec:
    try:
        family = d["family"]
    except KeyError:
        raise ValueError("density entry is missing 'family'") from None
    if family == "gaussian":
        return Gaussian(d["mean"], d["variance"])
    if family == "poisson":
        return Poisson(d["rate"])
    if family == "categorical":
        return Categorical(tuple(d["probs"]))
    raise ValueError(f"unknown density family {family!r}; expected one of {sorted(_FAMILIES)}")


def log_pdf(spec: DensitySpec, x: Any) -> float:
    """Natural-log density (or mass) of ``x`` under ``spec``; never ``-inf``."""
    return spec.log_pdf(x)


def _check_pair(g: DensitySpec, f: DensitySpec) -> None:
    if g.support != f.support:
        raise InvalidPairError(f"cannot compare {g.family} with {f.family}")


def log_likelihood_ratio(g: DensitySpec, f: DensitySpec, x: Any, clamp: float = DEFAULT_CLAMP) -> float:
    """``log g(x) - log f(x)`` truncated to ``[-clamp, clamp]``."""
    _check_pair(g, f)
    z = g.log_pdf(x) - f.log_pdf(x)
    return min(max(z, -clamp), clamp)


def kl_divergence(g: DensitySpec, f: DensitySpec) -> float:
    """Closed-form ``D(g || f)``; ``math.inf`` when g is not dominated by f."""
    _check_pair(g, f)
    if isinstance(g, Gaussian):
        ratio = g.variance / f.variance
        d = g.mean - f.mean
        return 0.5 * (ratio - 1.0 - math.log(ratio)) + d * d / (2.0 * f.variance)
    if isinstance(g, Poisson):
        return g.rate * math.log(g.rate / f.rate) + f.rate - g.rate
    total = 0.0
    q = f.probs
    for k, p in enumerate(g.probs):
        if p == 0.0:
            continue
        qk = q[k] if k < len(q) else 0.0
        if qk == 0.0:
            return math.inf
        total += p * math.log(p / qk)
    return max(total, 0.0)


def kl_divergence_numeric(g: DensitySpec, f: DensitySpec, nodes: int = 201, tail: float = 1e-12) -> float:
    """Numerical KL used as an independent check of :func:`kl_divergence`.

    Gaussian pairs use Gauss-Legendre quadrature over ``mean +/- 12 sd`` of g;
    Poisson pairs sum the mass function until the remaining tail of g is below
    ``tail``; Categorical pairs are summed directly.
    """
    _check_pair(g, f)
    if isinstance(g, Gaussian):
        sd = math.sqrt(g.variance)
        lo, hi = g.mean - 12.0 * sd, g.mean + 12.0 * sd
        t, w = np.polynomial.legendre.leggauss(nodes)
        x = 0.5 * (hi - lo) * t + 0.5 * (hi + lo)
        lg = stats.norm.logpdf(x, g.mean, sd)
        lf = stats.norm.logpdf(x, f.mean, math.sqrt(f.variance))
        return float(0.5 * (hi - lo) * np.sum(w * np.exp(lg) * (lg - lf)))
    if isinstance(g, Poisson):
        total, mass, k = 0.0, 0.0, 0
        while True:
            lg = stats.poisson.logpmf(k, g.rate)
            p = math.exp(lg)
            total += p * (lg - stats.poisson.logpmf(k, f.rate))
            mass += p
            k += 1
            if k > g.rate and 1.0 - mass < tail:
                return total
    total = 0.0
    for k, p in enumerate(g.probs):
        if p > 0.0:
            qk = f.probs[k] if k < len(f.probs) else 0.0
            if qk == 0.0:
                return math.inf
            total += p * (math.log(p) - math.log(qk))
    return total


def slot_index(n: int, period: int, phase: int = 0) -> int:
    """1-based density slot of the ``n``-th observation."""
    return ((n - 1 + phase) % period) + 1


@dataclass(frozen=True)
class PeriodicLaw:
    period: int
    slots: tuple[DensitySpec, ...]

    def __post_init__(self) -> None:
        slots = tuple(self.slots)
        object.__setattr__(self, "slots", slots)
        if int(self.period) != self.period or self.period < 1:
            raise ValueError(f"period must be a positive integer, got {self.period}")
        if len(slots) != self.period:
            raise ValueError(f"law of period {self.period} has {len(slots)} slots")
        if len({s.support for s in slots}) != 1:
            raise ValueError("all slots of a law must share one support type")

    @classmethod
    def of(cls, slots: Sequence[DensitySpec]) -> PeriodicLaw:
        return cls(len(slots), tuple(slots))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> PeriodicLaw:
        slots = tuple(density_from_dict(s) for s in d["slots"])
        return cls(int(d.get("period", len(slots))), slots)

    def to_dict(self) -> dict[str, Any]:
        return {"period": self.period, "slots": [s.to_dict() for s in self.slots]}

    @property
    def support(self) -> str:
        return self.slots[0].support

    @property
    def family(self) -> str:
        return self.slots[0].family

    def slot(self, n: int, phase: int = 0) -> DensitySpec:
        return self.slots[slot_index(n, self.period, phase) - 1]

    def rotated(self, offset: int) -> PeriodicLaw:
        k = offset % self.period
        return PeriodicLaw(self.period, self.slots[k:] + self.slots[:k])

    def check_observation(self, x: Any) -> Any:
        """Coerce ``x`` to the law's observation type or raise."""
        return _as_real(x) if self.support == "real" else _as_count(x)


def check_compatible(pre: PeriodicLaw, post: PeriodicLaw) -> None:
    if pre.period != post.period:
        raise IncompatibleLawsError(f"period mismatch: {pre.period} vs {post.period}")
    if pre.support != post.support:
        raise IncompatibleLawsError(f"support mismatch: {pre.family} vs {post.family}")


def llr_series(
    pre: PeriodicLaw,
    post: PeriodicLaw,
    xs: np.ndarray,
    start: int = 1,
    phase: int = 0,
    clamp: float = DEFAULT_CLAMP,
) -> np.ndarray:
    """Clamped LLRs of ``xs`` taken as observations ``start, start+1, ...``."""
    check_compatible(pre, post)
    xs = np.asarray(xs)
    idx = (np.arange(start - 1, start - 1 + len(xs)) + phase) % pre.period
    z = np.empty(len(xs), dtype=np.float64)
    for s in range(pre.period):
        mask = idx == s
        if not mask.any():
            continue
        sub = xs[mask]
        z[mask] = post.slots[s].log_pdf_array(sub) - pre.slots[s].log_pdf_array(sub)
    return np.clip(z, -clamp, clamp)


def information_number(post: PeriodicLaw, pre: PeriodicLaw) -> float:
    """Mean over slots of ``D(post_i || pre_i)``."""
    check_compatible(pre, post)
    kls = [kl_divergence(g, f) for g, f in zip(post.slots, pre.slots)]
    if any(math.isinf(k) for k in kls):
        return math.inf
    return math.fsum(kls) / pre.period


@dataclass(frozen=True)
class ChangeValidation:
    per_slot_kl: tuple[float, ...]
    information_number: float
    is_valid_change: bool


def validate_change(pre: PeriodicLaw, post: PeriodicLaw, tol: float = 1e-12) -> ChangeValidation:
    check_compatible(pre, post)
    kls = tuple(kl_divergence(g, f) for g, f in zip(post.slots, pre.slots))
    finite = all(math.isfinite(k) for k in kls)
    i_number = math.fsum(kls) / pre.period if finite else math.inf
    valid = finite and any(k > tol for k in kls)
    return ChangeValidation(kls, i_number, valid)
