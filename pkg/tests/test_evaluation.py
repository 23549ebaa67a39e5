from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats

from periodic_qcd.detector import (
    DetectorConfig,
    bank_cusum_stopped,
    bank_init,
    bank_update,
    cusum_init,
    cusum_stopped,
    cusum_update,
    sr_stopped,
)
from periodic_qcd.errors import InvalidConfigError
from periodic_qcd.evaluation import (
    Estimate,
    TrialOutcome,
    conditional_delays,
    delay_bound,
    estimate_arl,
    estimate_cadd,
    martingale_check,
    ordering_check,
    path_stopping_times,
    run_trials,
    run_until_stop,
    tradeoff_curve,
    tradeoff_table,
)
from periodic_qcd.law import Gaussian, PeriodicLaw, information_number, log_likelihood_ratio
from periodic_qcd.simulator import ChangeModel, derive_seed, sample_stream

from .conftest import shifted_law

PRE = shifted_law(0.0)
POST = shifted_law(1.0)
POSTS3 = [POST, shifted_law(-1.0), shifted_law(0.0, variance=2.0)]


def fold_reference(model, config, rule, posts, horizon, seed):
    """Stopping time from folding the pure state updates over a full path."""
    xs = sample_stream(model, horizon, seed).tolist()
    if rule == "cusum":
        s = cusum_init(model.phase)
        for x in xs:
            s = cusum_update(s, x, model.pre, posts[0], config.clamp)
            if cusum_stopped(s, config.threshold_a):
                return s.n
        return None
    b = bank_init(len(posts), model.phase)
    stop = bank_cusum_stopped if rule == "bank_cusum" else sr_stopped
    for x in xs:
        b = bank_update(b, x, model.pre, posts, config.clamp)
        if stop(b, config.beta, len(posts)):
            return b.n
    return None


def test_sr_identical_laws_stops_at_beta() -> None:
    model = ChangeModel(PRE, PRE)
    out = run_until_stop(model, DetectorConfig.from_beta(10.0), "sr", [PRE], horizon=100, seed=1)
    assert out == TrialOutcome(10, None, math.inf, 1)


def test_negative_threshold_stops_at_first_positive_enough_llr() -> None:
    model = ChangeModel(PRE, POST)
    config = DetectorConfig.from_threshold(-1.0)
    for seed in range(30):
        out = run_until_stop(model, config, "cusum", [POST], horizon=50, seed=seed)
        x1 = sample_stream(model, 1, seed)[0]
        z1 = log_likelihood_ratio(POST.slot(1), PRE.slot(1), x1)
        assert (out.stopping_time == 1) == (z1 > -1.0)
        if z1 >= 0.0:
            assert out.stopping_time == 1


def test_run_until_stop_deterministic() -> None:
    model = ChangeModel(PRE, POST, nu=20)
    cfg = DetectorConfig.from_threshold(4.0)
    assert run_until_stop(model, cfg, "cusum", None, 10_000, 77) == run_until_stop(model, cfg, "cusum", None, 10_000, 77)


@pytest.mark.parametrize("rule", ["cusum", "bank_cusum", "sr"])
@pytest.mark.parametrize("nu", [1, 3, 40, math.inf])
def test_fast_kernel_matches_state_fold(rule, nu) -> None:
    posts = [POST] if rule == "cusum" else POSTS3
    model = ChangeModel(PRE, POST, nu=nu, phase=2)
    cfg = DetectorConfig.from_threshold(3.5)
    for i in range(15):
        seed = derive_seed(123, i)
        out = run_until_stop(model, cfg, rule, posts, horizon=3000, seed=seed)
        assert out.stopping_time == fold_reference(model, cfg, rule, posts, 3000, seed)


def test_config_errors_surface_before_sampling() -> None:
    model = ChangeModel(PRE, POST)
    cfg = DetectorConfig.from_threshold(4.0)
    with pytest.raises(InvalidConfigError):
        run_until_stop(model, cfg, "cusum", POSTS3, 10, 0)
    with pytest.raises(InvalidConfigError):
        run_until_stop(model, cfg, "sr", [PeriodicLaw.of([Gaussian(0, 1)])], 10, 0)
    with pytest.raises(InvalidConfigError):
        run_until_stop(model, cfg, "sr", [], 10, 0)
    with pytest.raises(InvalidConfigError):
        run_until_stop(model, DetectorConfig.from_threshold(-1.0), "sr", [POST], 10, 0)
    with pytest.raises(InvalidConfigError):
        run_until_stop(model, cfg, "glr", [POST], 10, 0)
    with pytest.raises(InvalidConfigError):
        run_until_stop(model, cfg, "cusum", [POST], 0, 0)


def test_censoring() -> None:
    out = run_until_stop(ChangeModel(PRE, POST), DetectorConfig.from_threshold(1e6), "cusum", None, 1000, 0)
    assert out.censored and out.censored_at == 1000 and out.stopping_time is None


def test_arl_deterministic_identical_laws() -> None:
    est = estimate_arl(PRE, DetectorConfig.from_beta(10.0), "sr", [PRE], trials=50, horizon=100, seed=3)
    assert est.value == 10.0 and est.stderr == 0.0 and not est.lower_bound


def test_arl_unreachable_threshold_is_flagged_lower_bound() -> None:
    est = estimate_arl(PRE, DetectorConfig.from_threshold(1e6), "cusum", [POST], trials=20, horizon=1000, seed=3)
    assert est.value == 1000.0 and est.lower_bound and est.censored == 20


def test_arl_exceeds_beta_small_run() -> None:
    est = estimate_arl(PRE, DetectorConfig.from_threshold(4.0), "cusum", [POST], trials=2000, horizon=100_000, seed=4)
    assert est.value - 2 * est.stderr > math.exp(4)


def test_arl_monotone_in_threshold_on_shared_seeds() -> None:
    prev = None
    for a in (1.0, 2.0, 3.0, 3.5):
        times = [
            o.stopping_time
            for o in run_trials(ChangeModel(PRE, POST), DetectorConfig.from_threshold(a), "cusum", [POST], 200, 10**5, 9)
        ]
        if prev is not None:
            assert all(t >= p for t, p in zip(times, prev))
        prev = times


def test_parallel_trials_match_serial() -> None:
    model = ChangeModel(PRE, POST, nu=4)
    cfg = DetectorConfig.from_beta(math.exp(3))
    serial = run_trials(model, cfg, "bank_cusum", POSTS3, 40, 5000, 11)
    parallel = run_trials(model, cfg, "bank_cusum", POSTS3, 40, 5000, 11, workers=2)
    assert serial == parallel


def test_conditional_delays_excludes_false_alarms() -> None:
    outs = [TrialOutcome(2, None, 5, 0), TrialOutcome(9, None, 5, 1), TrialOutcome(None, 20, 5, 2), TrialOutcome(5, None, 5, 3)]
    cell = conditional_delays(outs, 5)
    assert cell.false_alarms == 1
    assert cell.estimate.value == pytest.approx((4 + 16 + 0) / 3)
    assert cell.estimate.lower_bound


def test_cadd_nu_one_has_no_false_alarms() -> None:
    res = estimate_cadd(ChangeModel(PRE, POST), DetectorConfig.from_threshold(3.0), trials=300, seed=5, nus=[1])
    (cell,) = res.per_nu
    assert cell.false_alarms == 0 and cell.estimate.count == 300
    out = run_trials(ChangeModel(PRE, POST, nu=1), DetectorConfig.from_threshold(3.0), "cusum", None, 300, 10**5, 5)
    assert cell.estimate.value == pytest.approx(np.mean([o.stopping_time - 1 for o in out]))


def test_cadd_unavailable_cell() -> None:
    res = estimate_cadd(ChangeModel(PRE, POST), DetectorConfig.from_threshold(-100.0), trials=10, seed=5, nus=[1, 2])
    assert res.per_nu[1].estimate is None and res.per_nu[1].false_alarms == 10
    assert res.worst_nu == 1


def test_cadd_t1_matches_classical_cusum_reference() -> None:
    pre = PeriodicLaw.of([Gaussian(0.0, 1.0)])
    post = PeriodicLaw.of([Gaussian(1.0, 1.0)])
    model = ChangeModel(pre, post)
    a = 3.0
    res = estimate_cadd(model, DetectorConfig.from_threshold(a), trials=200, horizon=10_000, seed=21)
    assert len(res.per_nu) == 1
    delays = []
    for i in range(200):
        xs = sample_stream(model.with_nu(1), 10_000, derive_seed(21, i))
        # Page's CUSUM: S_n = max(0, S_{n-1} + Z_n), alarm when S_n > A
        s, tau = 0.0, None
        for n, x in enumerate(xs, start=1):
            s = max(0.0, s + (stats.norm.logpdf(x, 1.0, 1.0) - stats.norm.logpdf(x, 0.0, 1.0)))
            if s > a:
                tau = n
                break
        delays.append(tau - 1)
    assert res.cadd.value == np.mean(delays)


def test_delay_bound() -> None:
    assert delay_bound(math.exp(4), 0.5) == pytest.approx(8.0)
    assert delay_bound(math.exp(8), 0.5) == pytest.approx(16.0)
    # log(1000) / (4 log 2 - 2)
    assert delay_bound(1000, 0.7725887222397811) == pytest.approx(8.94105114420534, abs=1e-9)
    for beta, i in [(10.0, 0.0), (10.0, -1.0), (1.0, 0.5), (10.0, math.inf)]:
        with pytest.raises(InvalidConfigError):
            delay_bound(beta, i)


def test_tradeoff_rows_and_bounds() -> None:
    rows = tradeoff_curve(ChangeModel(PRE, POST), "cusum", [POST], [2.0, 4.0], trials=300, horizon=10**5, seed=1)
    assert [r.threshold_a for r in rows] == [2.0, 4.0]
    for r in rows:
        assert r.bound_lower == pytest.approx(r.bound_upper)
        assert r.bound_lower == pytest.approx(delay_bound(r.beta, 0.5))
        assert 1 <= r.worst_nu <= 4
    assert rows[1].arl.value > rows[0].arl.value
    assert rows[1].cadd.value > rows[0].cadd.value
    table = tradeoff_table(rows)
    assert list(table[0]) == ["a", "beta", "arl", "arl_se", "cadd", "cadd_se", "worst_nu", "bound"]


def test_tradeoff_cadd_doubles_with_threshold() -> None:
    # short ARL horizon: only the delay columns matter here
    rows = tradeoff_curve(
        ChangeModel(PRE, POST), "cusum", [POST], [6.0, 12.0], trials=1000, horizon=500, seed=2, cadd_horizon=10**4
    )
    assert rows[1].arl.lower_bound
    slope = (rows[1].cadd.value - rows[0].cadd.value) / 6.0
    assert abs(slope - 2.0) <= 0.2 * 2.0


def test_tradeoff_larger_shift_detects_faster() -> None:
    cfg = DetectorConfig.from_threshold(5.0)
    small = estimate_cadd(ChangeModel(PRE, POST), cfg, "cusum", None, 1000, 10**4, 3)
    big_post = shifted_law(2.0)
    big = estimate_cadd(ChangeModel(PRE, big_post), cfg, "cusum", None, 1000, 10**4, 3)
    assert information_number(big_post, PRE) > information_number(POST, PRE)
    assert big.cadd.value < small.cadd.value


def test_tradeoff_single_trial_row_flags_undefined_stderr() -> None:
    (row,) = tradeoff_curve(ChangeModel(PRE, POST), "cusum", [POST], [3.0], trials=1, horizon=10**5, seed=4)
    assert not row.arl.stderr_defined and not row.cadd.stderr_defined
    assert tradeoff_table([row])[0]["arl_se"] is None


def test_tradeoff_validates_thresholds() -> None:
    for bad in ([], [4.0, 2.0], [-1.0, 2.0]):
        with pytest.raises(InvalidConfigError):
            tradeoff_curve(ChangeModel(PRE, POST), "cusum", [POST], bad, 1, 10, 0)


@pytest.mark.xfail(
    strict=True,
    reason="CADD = E[tau - nu | tau >= nu] sits slightly below A/I at desk scale (ratio ~0.945 at A=6)",
)
def test_cadd_ratio_example_a6() -> None:
    res = estimate_cadd(ChangeModel(PRE, POST), DetectorConfig.from_threshold(6.0), trials=2000, horizon=10**4, seed=6)
    assert 1.0 <= res.cadd.value / (6.0 / 0.5) <= 1.6


def test_pathwise_ordering_small() -> None:
    violations, stops = ordering_check(ChangeModel(PRE, POST, nu=10), POSTS3, math.exp(3), 100, 2000, 8)
    assert violations == 0
    assert all(s.sr is not None for s in stops)


def test_path_stopping_times_brute_force() -> None:
    xs = sample_stream(ChangeModel(PRE, POST, nu=5), 200, 3)
    beta = math.exp(2)
    stops = path_stopping_times(xs, PRE, POSTS3, beta)
    thr = math.log(beta * 3)
    zs = np.array([[log_likelihood_ratio(p.slot(n), PRE.slot(n), x) for n, x in enumerate(xs, 1)] for p in POSTS3])
    for ell, t in enumerate(stops.per_hyp):
        w = [max(zs[ell, k:n].sum() for k in range(n)) for n in range(1, 201)]
        first = next((n for n, v in enumerate(w, 1) if v >= thr), None)
        assert t == first


def test_martingale_identical_laws_exact_zero() -> None:
    res = martingale_check(PRE, [PRE, PRE], 50, 20, seed=1)
    assert res.mean_dev == 0.0 and res.stderr == 0.0 and res.within()


def test_martingale_n_zero() -> None:
    res = martingale_check(PRE, [POST], 0, 10, seed=1)
    assert res.mean_dev == 0.0 and res.stderr == 0.0


def test_martingale_shift_one_short_horizon() -> None:
    res = martingale_check(PRE, [POST], 5, 10_000, seed=2)
    assert res.within(3.0), res


@pytest.mark.slow
@pytest.mark.xfail(
    strict=False,
    reason="variance of R_50 under a unit mean shift is of order e^50; the sample mean is dominated by "
    "unobserved tail mass, so a 3-standard-error check is not meaningful at 10^4 trials",
)
def test_martingale_shift_one_n50() -> None:
    res = martingale_check(PRE, [POST], 50, 10_000, seed=2)
    assert res.within(3.0), res


def test_martingale_requires_two_trials() -> None:
    with pytest.raises(InvalidConfigError):
        martingale_check(PRE, [POST], 5, 1, seed=0)


def test_estimate_from_samples() -> None:
    e = Estimate.from_samples([1.0, 2.0, 3.0])
    assert e.value == 2.0 and e.stderr == pytest.approx(1 / math.sqrt(3))
    assert math.isnan(Estimate.from_samples([4.0]).stderr)
