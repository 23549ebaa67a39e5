"""Monte Carlo estimation of false-alarm and delay performance.

Each trial ``i`` of an estimator runs on its own stream seeded by
``derive_seed(seed, i)``, so estimators are deterministic in their inputs,
independent of how trials are scheduled, and share paths across rules and
thresholds whenever they share a master seed.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Any, Iterable, Literal, Sequence

import numpy as np

from .detector import SR_LOG_TOL, DetectorConfig, bank_threshold, cusum_step, log_sum_exp, sr_step
from .errors import IncompatibleLawsError, InvalidConfigError
from .law import PeriodicLaw, check_compatible, information_number, llr_series
from .simulator import ChangeModel, derive_seed, sample_stream, stream_blocks

Rule = Literal["cusum", "bank_cusum", "sr"]
RULES = ("cusum", "bank_cusum", "sr")


@dataclass(frozen=True)
class TrialOutcome:
    stopping_time: int | None
    censored_at: int | None
    nu: float
    seed: int

    @property
    def censored(self) -> bool:
        return self.stopping_time is None


@dataclass(frozen=True)
class Estimate:
    """Sample mean with its standard error.

    ``stderr`` is NaN when fewer than two samples exist. ``lower_bound`` is
    set when censored trials were counted at the horizon.
    """

    value: float
    stderr: float
    count: int
    censored: int = 0

    @property
    def lower_bound(self) -> bool:
        return self.censored > 0

    @property
    def stderr_defined(self) -> bool:
        return not math.isnan(self.stderr)

    @classmethod
    def from_samples(cls, samples: Sequence[float], censored: int = 0) -> Estimate:
        a = np.asarray(samples, dtype=np.float64)
        if a.size == 0:
            return cls(math.nan, math.nan, 0, censored)
        se = float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else math.nan
        return cls(float(a.mean()), se, int(a.size), censored)

    def to_dict(self) -> dict[str, Any]:
        return {
            "value": self.value,
            "stderr": None if math.isnan(self.stderr) else self.stderr,
            "count": self.count,
            "censored": self.censored,
            "lower_bound": self.lower_bound,
        }


def _resolve_posts(model: ChangeModel, rule: str, posts: Sequence[PeriodicLaw] | None) -> tuple[PeriodicLaw, ...]:
    if rule not in RULES:
        raise InvalidConfigError(f"unknown rule {rule!r}; expected one of {RULES}")
    hyps = (model.post,) if posts is None else tuple(posts)
    if not hyps:
        raise InvalidConfigError(f"rule {rule!r} needs at least one post-change law")
    if rule == "cusum" and len(hyps) != 1:
        raise InvalidConfigError(f"rule 'cusum' needs exactly one post-change law, got {len(hyps)}")
    for h in hyps:
        try:
            check_compatible(model.pre, h)
        except IncompatibleLawsError as exc:
            raise InvalidConfigError(str(exc)) from exc
    return hyps


def _first_stop(
    model: ChangeModel,
    config: DetectorConfig,
    rule: str,
    hyps: tuple[PeriodicLaw, ...],
    horizon: int,
    seed: int,
) -> int | None:
    pre, phase, clamp = model.pre, model.phase, config.clamp
    m = len(hyps)
    if rule == "cusum":
        a = config.threshold_a
        post = hyps[0]
    else:
        thr = bank_threshold(config.require_beta(), m)
        if rule == "sr":
            thr -= SR_LOG_TOL
    w = [0.0] * m
    c = [-math.inf] * m
    n = 0
    for block in stream_blocks(model, seed):
        block = block[: horizon - n]
        start = n + 1
        if rule == "cusum":
            wc = w[0]
            for z in llr_series(pre, post, block, start, phase, clamp).tolist():
                n += 1
                wc = cusum_step(wc, z)
                if wc > a:
                    return n
            w[0] = wc
        else:
            zs = [llr_series(pre, h, block, start, phase, clamp).tolist() for h in hyps]
            for j in range(len(block)):
                n += 1
                if rule == "bank_cusum":
                    for ell in range(m):
                        w[ell] = cusum_step(w[ell], zs[ell][j])
                    if max(w) >= thr:
                        return n
                else:
                    for ell in range(m):
                        c[ell] = sr_step(c[ell], zs[ell][j])
                    if log_sum_exp(c) >= thr:
                        return n
        if n >= horizon:
            return None
    raise AssertionError("unreachable")


def run_until_stop(
    model: ChangeModel,
    config: DetectorConfig,
    rule: Rule = "cusum",
    posts: Sequence[PeriodicLaw] | None = None,
    horizon: int = 100_000,
    seed: int = 0,
) -> TrialOutcome:
    """Run one detector on a simulated path until it alarms or hits ``horizon``."""
    if horizon < 1:
        raise InvalidConfigError("horizon must be >= 1")
    hyps = _resolve_posts(model, rule, posts)
    if rule != "cusum":
        config.require_beta()
    tau = _first_stop(model, config, rule, hyps, horizon, seed)
    if tau is None:
        return TrialOutcome(None, horizon, model.nu, seed)
    return TrialOutcome(tau, None, model.nu, seed)


def _trial(model, config, rule, hyps, horizon, seed, index) -> TrialOutcome:
    return run_until_stop(model, config, rule, hyps, horizon, derive_seed(seed, index))


def run_trials(
    model: ChangeModel,
    config: DetectorConfig,
    rule: Rule,
    posts: Sequence[PeriodicLaw] | None,
    trials: int,
    horizon: int,
    seed: int,
    workers: int = 1,
) -> list[TrialOutcome]:
    """Independent trials ``0..trials-1``; results are in trial order."""
    if trials < 1:
        raise InvalidConfigError("trials must be >= 1")
    hyps = _resolve_posts(model, rule, posts)
    job = partial(_trial, model, config, rule, hyps, horizon, seed)
    if workers <= 1:
        return [job(i) for i in range(trials)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, range(trials), chunksize=max(1, trials // (8 * workers))))


def estimate_arl(
    pre: PeriodicLaw,
    config: DetectorConfig,
    rule: Rule = "cusum",
    posts: Sequence[PeriodicLaw] | None = None,
    trials: int = 10_000,
    horizon: int = 100_000,
    seed: int = 0,
    workers: int = 1,
) -> Estimate:
    """Mean stopping time with no change; censored trials count as ``horizon``."""
    hyps = tuple(posts) if posts is not None else None
    if not hyps:
        raise InvalidConfigError("estimate_arl needs the detector's post-change law(s)")
    model = ChangeModel(pre, hyps[0], math.inf)
    outcomes = run_trials(model, config, rule, hyps, trials, horizon, seed, workers)
    times = [o.censored_at if o.censored else o.stopping_time for o in outcomes]
    return Estimate.from_samples(times, sum(o.censored for o in outcomes))


@dataclass(frozen=True)
class NuCell:
    nu: int
    estimate: Estimate | None
    false_alarms: int
    trials: int

    @property
    def available(self) -> bool:
        return self.estimate is not None


@dataclass(frozen=True)
class CaddResult:
    cadd: Estimate | None
    worst_nu: int | None
    per_nu: tuple[NuCell, ...] = field(default_factory=tuple)


def conditional_delays(outcomes: Iterable[TrialOutcome], nu: int) -> NuCell:
    """Conditional mean of ``tau - nu`` over trials with ``tau >= nu``."""
    outcomes = list(outcomes)
    delays = []
    false_alarms = 0
    censored = 0
    for o in outcomes:
        if o.censored:
            delays.append(o.censored_at + 1 - nu)
            censored += 1
        elif o.stopping_time < nu:
            false_alarms += 1
        else:
            delays.append(o.stopping_time - nu)
    est = Estimate.from_samples(delays, censored) if delays else None
    return NuCell(nu, est, false_alarms, len(outcomes))


def estimate_cadd(
    model: ChangeModel,
    config: DetectorConfig,
    rule: Rule = "cusum",
    posts: Sequence[PeriodicLaw] | None = None,
    trials: int = 10_000,
    horizon: int = 100_000,
    seed: int = 0,
    nus: Sequence[int] | None = None,
    workers: int = 1,
) -> CaddResult:
    """Worst conditional average detection delay over change points.

    By periodicity only ``nu = 1..T`` need be examined. Every ``nu`` reuses
    the same trial seeds, which couples the paths across change points.
    """
    if nus is None:
        nus = range(1, model.period + 1)
    cells = []
    for nu in nus:
        out = run_trials(model.with_nu(nu), config, rule, posts, trials, horizon, seed, workers)
        cells.append(conditional_delays(out, nu))
    usable = [c for c in cells if c.available]
    if not usable:
        return CaddResult(None, None, tuple(cells))
    worst = max(usable, key=lambda c: c.estimate.value)
    return CaddResult(worst.estimate, worst.nu, tuple(cells))


def delay_bound(beta: float, i_number: float) -> float:
    """First-order delay ``log(beta) / I`` shared by the lower and upper bounds."""
    if not beta > 1.0:
        raise InvalidConfigError(f"beta must be > 1, got {beta}")
    if not (i_number > 0.0 and math.isfinite(i_number)):
        raise InvalidConfigError(f"information number must satisfy 0 < I < inf, got {i_number}")
    return math.log(beta) / i_number


@dataclass(frozen=True)
class TradeoffRow:
    threshold_a: float
    beta: float
    arl: Estimate
    cadd: Estimate | None
    worst_nu: int | None
    bound_lower: float
    bound_upper: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "a": self.threshold_a,
            "beta": self.beta,
            "arl": self.arl.to_dict(),
            "cadd": None if self.cadd is None else self.cadd.to_dict(),
            "worst_nu": self.worst_nu,
            "bound_lower": self.bound_lower,
            "bound_upper": self.bound_upper,
        }


def tradeoff_curve(
    model: ChangeModel,
    rule: Rule,
    posts: Sequence[PeriodicLaw] | None,
    a_values: Sequence[float],
    trials: int,
    horizon: int,
    seed: int,
    clamp: float = 50.0,
    cadd_horizon: int | None = None,
    workers: int = 1,
) -> list[TradeoffRow]:
    """ARL and worst-case CADD for each threshold, with the first-order bound.

    The threshold ``A`` maps to ``beta = exp(A)``; bank rules then compare
    against ``log(beta * M)``. ``model.post`` is the true post-change law and
    fixes the information number.
    """
    a_values = [float(a) for a in a_values]
    if not a_values:
        raise InvalidConfigError("a_values must be nonempty")
    if any(b <= a for a, b in zip(a_values, a_values[1:])):
        raise InvalidConfigError("a_values must be strictly increasing")
    if any(a <= 0.0 for a in a_values):
        raise InvalidConfigError("thresholds must be > 0 so that beta = exp(A) > 1")
    hyps = _resolve_posts(model, rule, posts)
    i_number = information_number(model.post, model.pre)
    rows = []
    for k, a in enumerate(a_values):
        config = DetectorConfig.from_threshold(a, clamp)
        row_seed = derive_seed(seed, k)
        arl = estimate_arl(model.pre, config, rule, hyps, trials, horizon, row_seed, workers)
        cadd = estimate_cadd(
            model, config, rule, hyps, trials, cadd_horizon or horizon, derive_seed(row_seed, 1), workers=workers
        )
        log_beta = math.log(config.beta)
        rows.append(
            TradeoffRow(
                threshold_a=a,
                beta=config.beta,
                arl=arl,
                cadd=cadd.cadd,
                worst_nu=cadd.worst_nu,
                bound_lower=log_beta / i_number if i_number > 0 else math.inf,
                bound_upper=a / i_number if i_number > 0 else math.inf,
            )
        )
    return rows


TRADEOFF_COLUMNS = ("a", "beta", "arl", "arl_se", "cadd", "cadd_se", "worst_nu", "bound")


def tradeoff_table(rows: Sequence[TradeoffRow]) -> list[dict[str, Any]]:
    """Flat records for CSV export; undefined cells are ``None``."""

    def _num(x: float | None) -> float | None:
        return None if x is None or math.isnan(x) else x

    table = []
    for r in rows:
        table.append(
            {
                "a": r.threshold_a,
                "beta": r.beta,
                "arl": r.arl.value,
                "arl_se": _num(r.arl.stderr),
                "cadd": None if r.cadd is None else r.cadd.value,
                "cadd_se": None if r.cadd is None else _num(r.cadd.stderr),
                "worst_nu": r.worst_nu,
                "bound": r.bound_lower,
            }
        )
    return table


@dataclass(frozen=True)
class PathStops:
    """First crossing times on one path; ``None`` means no crossing."""

    sr: int | None
    cm: int | None
    per_hyp: tuple[int | None, ...]

    def ordered(self) -> bool:
        def key(t: int | None) -> float:
            return math.inf if t is None else t

        return key(self.sr) <= key(self.cm) and all(key(self.cm) <= key(t) for t in self.per_hyp)


def path_stopping_times(
    xs: np.ndarray,
    pre: PeriodicLaw,
    posts: Sequence[PeriodicLaw],
    beta: float,
    phase: int = 0,
    clamp: float = 50.0,
) -> PathStops:
    """SR, max-CUSUM and per-hypothesis CUSUM stopping times on a fixed path.

    All rules use the common threshold ``log(beta * M)``.
    """
    m = len(posts)
    thr = bank_threshold(beta, m)
    zs = [llr_series(pre, h, xs, 1, phase, clamp).tolist() for h in posts]
    w = [0.0] * m
    c = [-math.inf] * m
    t_sr = t_cm = None
    t_hyp: list[int | None] = [None] * m
    for j in range(len(xs)):
        n = j + 1
        for ell in range(m):
            z = zs[ell][j]
            w[ell] = cusum_step(w[ell], z)
            c[ell] = sr_step(c[ell], z)
            if t_hyp[ell] is None and w[ell] >= thr:
                t_hyp[ell] = n
        if t_cm is None and max(w) >= thr:
            t_cm = n
        if t_sr is None and log_sum_exp(c) >= thr - SR_LOG_TOL:
            t_sr = n
        if t_sr is not None and t_cm is not None and all(t is not None for t in t_hyp):
            break
    return PathStops(t_sr, t_cm, tuple(t_hyp))


def ordering_check(
    model: ChangeModel,
    posts: Sequence[PeriodicLaw],
    beta: float,
    trials: int,
    horizon: int,
    seed: int,
    clamp: float = 50.0,
) -> tuple[int, list[PathStops]]:
    """Count paths violating ``tau_sr <= tau_cm <= tau_c(l)`` for every l."""
    stops = []
    for i in range(trials):
        xs = sample_stream(model, horizon, derive_seed(seed, i))
        stops.append(path_stopping_times(xs, model.pre, posts, beta, model.phase, clamp))
    return sum(not s.ordered() for s in stops), stops


@dataclass(frozen=True)
class MartingaleResult:
    mean_dev: float
    stderr: float
    trials: int

    def within(self, k: float = 3.0) -> bool:
        if self.stderr == 0.0:
            return self.mean_dev == 0.0
        return abs(self.mean_dev) <= k * self.stderr


def martingale_check(
    pre: PeriodicLaw,
    posts: Sequence[PeriodicLaw],
    n_fixed: int,
    trials: int,
    seed: int,
    clamp: float = 50.0,
    phase: int = 0,
) -> MartingaleResult:
    """Sample mean and standard error of ``R_n - n M`` with no change.

    ``R_n`` is accumulated in the linear domain, ``R <- (R + 1) * exp(Z)``, a
    route independent of the detector's log-domain bookkeeping. Identical
    pre- and post-change laws therefore give exactly zero.
    """
    if trials < 2:
        raise InvalidConfigError("martingale_check needs at least two trials")
    posts = tuple(posts)
    m = len(posts)
    if n_fixed == 0:
        return MartingaleResult(0.0, 0.0, trials)
    model = ChangeModel(pre, posts[0], math.inf, phase)
    r_total = np.zeros(trials)
    for i in range(trials):
        xs = sample_stream(model, n_fixed, derive_seed(seed, i))
        for h in posts:
            lam = np.exp(llr_series(pre, h, xs, 1, phase, clamp))
            r = 0.0
            for v in lam.tolist():
                r = (r + 1.0) * v
            r_total[i] += r
    dev = r_total - n_fixed * m
    return MartingaleResult(float(dev.mean()), float(dev.std(ddof=1) / math.sqrt(trials)), trials)
