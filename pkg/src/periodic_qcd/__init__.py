"""Quickest detection of changes in periodically distributed streams."""

__version__ = "0.1.0"

from .detector import (
    BankState,
    CusumState,
    DetectorConfig,
    bank_cusum_stopped,
    bank_init,
    bank_update,
    calibrate_threshold,
    cusum_direct,
    cusum_init,
    cusum_stopped,
    cusum_update,
    sr_stopped,
)
from .evaluation import (
    TrialOutcome,
    TradeoffRow,
    delay_bound,
    estimate_arl,
    estimate_cadd,
    martingale_check,
    run_until_stop,
    tradeoff_curve,
)
from .law import (
    Categorical,
    ChangeValidation,
    Gaussian,
    PeriodicLaw,
    Poisson,
    information_number,
    kl_divergence,
    log_likelihood_ratio,
    log_pdf,
    slot_index,
    validate_change,
)
from .simulator import ChangeModel, ParamCurve, law_from_curve, sample_stream
