"""Seeded i.p.i.d. stream generation with an injected change point.

Observation ``n`` is drawn from the pre-change slot density when ``n < nu``
and from the post-change slot density when ``n >= nu``; ``X_nu`` is the first
post-change sample. Streams are produced in blocks whose concatenation does
not depend on the block sizes, so a Monte Carlo trial that stops early sees
exactly the prefix that :func:`sample_stream` would return for its seed.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterator, TextIO

import numpy as np

from .errors import InvalidCurveError
from .law import Gaussian, PeriodicLaw, Poisson, check_compatible

_FIRST_BLOCK = 256
_MAX_BLOCK = 65536


@dataclass(frozen=True)
class ChangeModel:
    pre: PeriodicLaw
    post: PeriodicLaw
    nu: float = math.inf
    phase: int = 0

    def __post_init__(self) -> None:
        check_compatible(self.pre, self.post)
        nu = math.inf if self.nu is None else self.nu
        if nu != math.inf:
            if int(nu) != nu or nu < 1:
                raise ValueError(f"change point must be a positive integer or inf, got {nu}")
            nu = int(nu)
        object.__setattr__(self, "nu", nu)
        if not 0 <= self.phase < self.pre.period:
            raise ValueError(f"phase must lie in [0, {self.pre.period}), got {self.phase}")

    @property
    def period(self) -> int:
        return self.pre.period

    def with_nu(self, nu: float) -> ChangeModel:
        return ChangeModel(self.pre, self.post, nu, self.phase)


def derive_seed(master: int, *keys: int) -> int:
    """Independent 64-bit seed for ``keys`` (e.g. a trial index) under ``master``."""
    ss = np.random.SeedSequence(entropy=int(master) & (2**64 - 1), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0])


def _params(law: PeriodicLaw, name: str) -> np.ndarray:
    return np.array([getattr(d, name) for d in law.slots], dtype=np.float64)


def stream_blocks(model: ChangeModel, seed: int) -> Iterator[np.ndarray]:
    """Endless generator of consecutive observation blocks for ``seed``."""
    rng = np.random.default_rng(seed)
    pre, post = model.pre, model.post
    support = pre.support
    if support == "real":
        tables = (_params(pre, "mean"), _params(pre, "std"), _params(post, "mean"), _params(post, "std"))
    elif support == "count":
        tables = (_params(pre, "rate"), _params(post, "rate"))
    else:
        tables = (
            [np.cumsum(d.probs) for d in pre.slots],
            [np.cumsum(d.probs) for d in post.slots],
        )
    start = 1
    size = _FIRST_BLOCK
    while True:
        n = np.arange(start, start + size)
        slot = (n - 1 + model.phase) % model.period
        after = n >= model.nu
        if support == "real":
            mean = np.where(after, tables[2][slot], tables[0][slot])
            sd = np.where(after, tables[3][slot], tables[1][slot])
            block = mean + sd * rng.standard_normal(size)
        elif support == "count":
            block = rng.poisson(np.where(after, tables[1][slot], tables[0][slot])).astype(np.int64)
        else:
            u = rng.random(size)
            block = np.empty(size, dtype=np.int64)
            for regime, cdfs in ((False, tables[0]), (True, tables[1])):
                for s, cdf in enumerate(cdfs):
                    pos = (slot == s) & (after == regime)
                    if pos.any():
                        idx = np.searchsorted(cdf, u[pos], side="right")
                        block[pos] = np.minimum(idx, len(cdf) - 1)
        yield block
        start += size
        size = min(2 * size, _MAX_BLOCK)


def sample_stream(model: ChangeModel, n_max: int, seed: int) -> np.ndarray:
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    parts = []
    total = 0
    for block in stream_blocks(model, seed):
        parts.append(block)
        total += len(block)
        if total >= n_max:
            break
    return np.concatenate(parts)[:n_max]


@dataclass(frozen=True)
class ParamCurve:
    """Scalar parameter curve sampled on a uniform grid of ``[0, 1]``."""

    values: tuple[float, ...]
    family: str = "gaussian"
    _grid: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if not vals:
            raise InvalidCurveError("curve needs at least one value")
        if self.family not in ("gaussian", "poisson"):
            raise InvalidCurveError(f"unsupported curve family {self.family!r}")
        if self.family == "poisson" and min(vals) <= 0.0:
            raise InvalidCurveError("Poisson rates must be strictly positive")
        object.__setattr__(self, "_grid", np.linspace(0.0, 1.0, len(vals)))

    def __call__(self, t: float) -> float:
        if len(self.values) == 1:
            return self.values[0]
        return float(np.interp(t, self._grid, self.values))


def law_from_curve(curve: ParamCurve, t_period: int, fixed: float = 1.0) -> PeriodicLaw:
    """Slot ``i`` gets ``theta(i / T)``; ``fixed`` is the Gaussian variance."""
    if t_period < 1:
        raise ValueError("t_period must be >= 1")
    thetas = [curve(i / t_period) for i in range(1, t_period + 1)]
    if curve.family == "gaussian":
        return PeriodicLaw.of([Gaussian(th, fixed) for th in thetas])
    if min(thetas) <= 0.0:
        raise InvalidCurveError("interpolated Poisson rate is not positive")
    return PeriodicLaw.of([Poisson(th) for th in thetas])


def _fmt(x: Any) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(int(x))


def stream_metadata(model: ChangeModel, seed: int) -> dict[str, Any]:
    return {
        "seed": int(seed),
        "nu": None if model.nu == math.inf else int(model.nu),
        "T": model.period,
        "phase": model.phase,
    }


def write_stream_csv(out: TextIO, xs: np.ndarray, model: ChangeModel, seed: int) -> None:
    """CSV with a ``#`` metadata line and columns ``n, slot, value, regime``."""
    meta = stream_metadata(model, seed)
    out.write("# " + ",".join(f"{k}={'inf' if v is None else v}" for k, v in meta.items()) + "\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["n", "slot", "value", "regime"])
    for n, x in enumerate(xs.tolist(), start=1):
        slot = ((n - 1 + model.phase) % model.period) + 1
        w.writerow([n, slot, _fmt(x), "post" if n >= model.nu else "pre"])


def write_stream_ndjson(out: TextIO, xs: np.ndarray, model: ChangeModel, seed: int) -> None:
    out.write(json.dumps({"meta": stream_metadata(model, seed)}) + "\n")
    for n, x in enumerate(xs.tolist(), start=1):
        out.write(json.dumps({"n": n, "x": x}) + "\n")


def stream_to_string(xs: np.ndarray, model: ChangeModel, seed: int, fmt: str = "csv") -> str:
    buf = io.StringIO()
    (write_stream_csv if fmt == "csv" else write_stream_ndjson)(buf, xs, model, seed)
    return buf.getvalue()
