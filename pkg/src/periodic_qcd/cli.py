"""Command-line front end: ``periodic-qcd {detect,simulate,evaluate,calibrate}``.

Exit codes: 0 when a command ran to completion (an alarm is a result, not a
failure), 2 for configuration errors, 3 for data errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence, TextIO

from . import __version__
from .detector import (
    BankState,
    CusumState,
    DetectorConfig,
    bank_cusum_stopped,
    bank_init,
    bank_threshold,
    bank_update,
    calibrate_threshold,
    cusum_init,
    cusum_stopped,
    cusum_update,
    sr_stopped,
)
from .errors import InvalidConfigError, InvalidInputError, InvalidObservationError, PeriodicQCDError
from .evaluation import TRADEOFF_COLUMNS, martingale_check, tradeoff_curve, tradeoff_table
from .law import DEFAULT_CLAMP, PeriodicLaw, information_number, log_likelihood_ratio, slot_index, validate_change
from .simulator import ChangeModel, derive_seed, sample_stream, write_stream_csv, write_stream_ndjson

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3


class ConfigError(InvalidConfigError):
    pass


class DataError(InvalidInputError):
    pass


@dataclass
class RunConfig:
    mode: str
    pre: PeriodicLaw | None = None
    posts: list[PeriodicLaw] = field(default_factory=list)
    post: PeriodicLaw | None = None
    rule: str = "cusum"
    beta: float | None = None
    threshold_a: float | None = None
    clamp: float = DEFAULT_CLAMP
    phase: int = 0
    seed: int = 0
    trials: int = 10_000
    horizon: int = 100_000
    nu: int | None = None
    n_max: int = 1000
    a_values: list[float] = field(default_factory=list)
    martingale_n: int | None = None
    martingale_trials: int | None = None
    workers: int = 1
    input: str | None = None
    output: str | None = None
    trajectory: str | None = None
    summary: str | None = None
    resume: str | None = None
    format: str | None = None

    @property
    def true_post(self) -> PeriodicLaw:
        if self.post is not None:
            return self.post
        if not self.posts:
            raise ConfigError("a post-change law is required ('post' or 'posts')")
        return self.posts[0]

    def echo(self) -> dict[str, Any]:
        d = asdict(self)
        d["pre"] = None if self.pre is None else self.pre.to_dict()
        d["posts"] = [p.to_dict() for p in self.posts]
        d["post"] = None if self.post is None else self.post.to_dict()
        for key in ("input", "output", "trajectory", "summary", "resume"):
            d.pop(key)
        return d


def _load_law(value: Any, base: Path, name: str) -> PeriodicLaw:
    try:
        if isinstance(value, str):
            path = Path(value)
            if not path.is_absolute():
                path = base / path
            value = json.loads(path.read_text(encoding="utf-8"))
        return PeriodicLaw.from_dict(value)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid law in field {name!r}: {exc}") from exc


_OVERRIDES = ("beta", "threshold_a", "seed", "trials", "horizon", "rule", "phase", "clamp", "nu", "n_max")


def build_config(mode: str, args: argparse.Namespace) -> RunConfig:
    raw: dict[str, Any] = {}
    base = Path.cwd()
    if args.config:
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        base = path.parent
    for key in _OVERRIDES + ("input", "output", "trajectory", "summary", "resume", "format"):
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    known = set(RunConfig.__dataclass_fields__) - {"mode"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    cfg = RunConfig(mode=mode)
    for key, val in raw.items():
        if key == "pre":
            cfg.pre = _load_law(val, base, "pre")
        elif key == "post":
            cfg.post = _load_law(val, base, "post")
        elif key == "posts":
            if not isinstance(val, list):
                raise ConfigError("field 'posts' must be a list of laws")
            cfg.posts = [_load_law(v, base, f"posts[{i}]") for i, v in enumerate(val)]
        else:
            setattr(cfg, key, val)
    try:
        for key in ("beta", "threshold_a", "clamp"):
            if getattr(cfg, key) is not None:
                setattr(cfg, key, float(getattr(cfg, key)))
        for key in ("phase", "seed", "trials", "horizon", "n_max", "workers"):
            setattr(cfg, key, int(getattr(cfg, key)))
        if cfg.nu is not None:
            cfg.nu = int(cfg.nu)
        cfg.a_values = [float(a) for a in cfg.a_values]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid numeric field: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    if cfg.pre is None:
        raise ConfigError("field 'pre' (pre-change law) is required")
    if cfg.rule not in ("cusum", "bank_cusum", "sr"):
        raise ConfigError(f"field 'rule' must be cusum, bank_cusum or sr, got {cfg.rule!r}")
    for name, law in [("post", cfg.post)] + [(f"posts[{i}]", p) for i, p in enumerate(cfg.posts)]:
        if law is not None and (law.period != cfg.pre.period or law.support != cfg.pre.support):
            raise ConfigError(f"field {name!r} is incompatible with 'pre' (period or family)")
    if not 0 <= cfg.phase < cfg.pre.period:
        raise ConfigError(f"field 'phase' must lie in [0, {cfg.pre.period})")
    if not cfg.clamp > 0:
        raise ConfigError("field 'clamp' must be > 0")
    if cfg.beta is not None and not cfg.beta > 1.0:
        raise ConfigError(f"field 'beta' must be > 1, got {cfg.beta}")
    if cfg.mode in ("detect", "evaluate", "calibrate"):
        if cfg.rule == "cusum" and len(cfg.posts) != 1:
            raise ConfigError(f"rule 'cusum' needs exactly one law in 'posts', got {len(cfg.posts)}")
        if cfg.rule != "cusum" and len(cfg.posts) < 1:
            raise ConfigError(f"rule {cfg.rule!r} needs at least one law in 'posts'")
    if cfg.mode == "detect":
        if (cfg.beta is None) == (cfg.threshold_a is None):
            raise ConfigError("detect needs exactly one of 'beta' or 'threshold_a'")
        if cfg.rule != "cusum" and cfg.beta is None and not cfg.threshold_a > 0:
            raise ConfigError("bank rules need beta > 1 (threshold_a must be > 0)")
    if cfg.mode == "simulate":
        if cfg.n_max < 1:
            raise ConfigError("field 'n_max' must be >= 1")
        if cfg.nu is not None and cfg.nu < 1:
            raise ConfigError("field 'nu' must be >= 1")
        cfg.true_post  # noqa: B018 - raises when missing
    if cfg.mode == "evaluate":
        if cfg.trials < 1:
            raise ConfigError("field 'trials' must be >= 1")
        if cfg.horizon < 1:
            raise ConfigError("field 'horizon' must be >= 1")
        if not cfg.a_values:
            raise ConfigError("field 'a_values' must be a nonempty list")
        if any(b <= a for a, b in zip(cfg.a_values, cfg.a_values[1:])) or min(cfg.a_values) <= 0:
            raise ConfigError("field 'a_values' must be positive and strictly increasing")
        if cfg.martingale_n is not None and cfg.martingale_n < 0:
            raise ConfigError("field 'martingale_n' must be >= 0")
    if cfg.mode == "calibrate" and cfg.beta is None:
        raise ConfigError("calibrate needs field 'beta'")


def _json_safe(obj: Any) -> Any:
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _dump_json(obj: Any, out: TextIO) -> None:
    out.write(json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n")


def _open_out(path: str | None) -> TextIO:
    if path is None or path == "-":
        return _Unclosable(sys.stdout)
    return open(path, "w", encoding="utf-8", newline="")


class _Unclosable(io.TextIOBase):
    def __init__(self, inner: TextIO) -> None:
        self._inner = inner

    def write(self, s: str) -> int:
        return self._inner.write(s)

    def close(self) -> None:
        self._inner.flush()


def _fmt(x: Any) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


# -- stream ingestion ---------------------------------------------------------


def _detect_format(path: str | None, explicit: str | None) -> str:
    if explicit:
        if explicit not in ("csv", "ndjson"):
            raise ConfigError(f"field 'format' must be csv or ndjson, got {explicit!r}")
        return explicit
    if path and Path(path).suffix.lower() in (".ndjson", ".jsonl"):
        return "ndjson"
    return "csv"


def read_stream(path: str | None, fmt: str | None, law: PeriodicLaw) -> tuple[list[Any], int | None]:
    """Observations and the first ``n`` index (``None`` when absent)."""
    fmt = _detect_format(path, fmt)
    try:
        text = sys.stdin.read() if path in (None, "-") else Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read input: {exc}") from exc
    rows = _ndjson_rows(text) if fmt == "ndjson" else _csv_rows(text)
    xs: list[Any] = []
    ns: list[int] = []
    for line_no, x_raw, n_raw in rows:
        try:
            xs.append(_parse_value(x_raw, law))
        except InvalidObservationError as exc:
            raise DataError(f"line {line_no}: {exc}") from exc
        if n_raw is not None:
            try:
                ns.append(int(n_raw))
            except (TypeError, ValueError):
                raise DataError(f"line {line_no}: invalid n {n_raw!r}") from None
    if ns and len(ns) != len(xs):
        raise DataError("column 'n' must be present on every row or on none")
    if ns and any(b != a + 1 for a, b in zip(ns, ns[1:])):
        raise DataError("column 'n' must be consecutive (missing samples are not supported)")
    return xs, (ns[0] if ns else None)


def _parse_value(raw: Any, law: PeriodicLaw) -> Any:
    if isinstance(raw, str):
        try:
            raw = float(raw) if law.support == "real" else float(raw.strip())
        except ValueError:
            raise InvalidObservationError(f"not a number: {raw!r}") from None
    return law.check_observation(raw)


def _csv_rows(text: str) -> Iterator[tuple[int, Any, Any]]:
    lines = text.splitlines()
    body = [(i, line) for i, line in enumerate(lines, start=1) if line.strip() and not line.startswith("#")]
    if not body:
        raise DataError("input has no header row")
    header_no, header = body[0]
    cols = next(csv.reader([header]))
    col = "x" if "x" in cols else "value" if "value" in cols else None
    if col is None:
        raise DataError(f"line {header_no}: header needs a column named 'x'")
    xi = cols.index(col)
    ni = cols.index("n") if "n" in cols else None
    for line_no, line in body[1:]:
        row = next(csv.reader([line]))
        if len(row) != len(cols):
            raise DataError(f"line {line_no}: expected {len(cols)} fields, got {len(row)}")
        yield line_no, row[xi], (row[ni] if ni is not None else None)


def _ndjson_rows(text: str) -> Iterator[tuple[int, Any, Any]]:
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {line_no}: invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise DataError(f"line {line_no}: expected a JSON object")
        if "meta" in obj and "x" not in obj:
            continue
        if "x" not in obj:
            raise DataError(f"line {line_no}: missing field 'x'")
        yield line_no, obj["x"], obj.get("n")


# -- commands -----------------------------------------------------------------


def cmd_detect(cfg: RunConfig) -> dict[str, Any]:
    pre = cfg.pre
    xs, n0 = read_stream(cfg.input, cfg.format, pre)
    period = pre.period
    if cfg.resume:
        try:
            snap = json.loads(Path(cfg.resume).read_text(encoding="utf-8"))
            # a full report carries the snapshot under final_statistics
            if isinstance(snap, dict) and isinstance(snap.get("final_statistics"), dict):
                snap = snap["final_statistics"]
            state: CusumState | BankState = (
                CusumState.from_dict(snap) if cfg.rule == "cusum" else BankState.from_dict(snap)
            )
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"cannot load state snapshot {cfg.resume}: {exc}") from exc
    else:
        phase = cfg.phase if n0 is None else (cfg.phase + n0 - 1) % period
        state = cusum_init(phase) if cfg.rule == "cusum" else bank_init(len(cfg.posts), phase)

    m = len(cfg.posts)
    if cfg.rule == "cusum":
        a = cfg.threshold_a if cfg.threshold_a is not None else calibrate_threshold(cfg.beta)
        config = DetectorConfig(a, cfg.beta, cfg.clamp)

        def stopped(s: Any) -> bool:
            return cusum_stopped(s, a)

        header = ["n", "slot", "z", "w"]
    else:
        beta = cfg.beta if cfg.beta is not None else math.exp(cfg.threshold_a)
        config = DetectorConfig(bank_threshold(beta, m), beta, cfg.clamp)
        check = bank_cusum_stopped if cfg.rule == "bank_cusum" else sr_stopped

        def stopped(s: Any) -> bool:
            return check(s, beta, m)

        header = ["n", "slot"] + [f"z_{i}" for i in range(1, m + 1)]
        header += [f"w_{i}" for i in range(1, m + 1)] + ["log_r"]
    if state.n > 0 and stopped(state):
        raise ConfigError("resumed state has already alarmed; start a fresh detector")

    traj: list[list[str]] = []
    alarm_time = None
    for x in xs:
        n = state.n + 1
        slot = slot_index(n, period, state.phase)
        if cfg.rule == "cusum":
            post = cfg.posts[0]
            z = log_likelihood_ratio(post.slots[slot - 1], pre.slots[slot - 1], x, cfg.clamp)
            state = cusum_update(state, x, pre, post, cfg.clamp)
            traj.append([str(n), str(slot), _fmt(z), _fmt(state.w)])
        else:
            zs = [log_likelihood_ratio(p.slots[slot - 1], pre.slots[slot - 1], x, cfg.clamp) for p in cfg.posts]
            state = bank_update(state, x, pre, cfg.posts, cfg.clamp)
            lr = state.log_r
            traj.append(
                [str(n), str(slot)] + [_fmt(z) for z in zs] + [_fmt(w) for w in state.per_hyp] + [_fmt(lr)]
            )
        if stopped(state):
            alarm_time = state.n
            break

    if cfg.trajectory:
        with open(cfg.trajectory, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(traj)
    report = {
        "alarm": alarm_time is not None,
        "alarm_time": alarm_time,
        "samples_processed": len(traj),
        "threshold": config.threshold_a,
        "final_statistics": state.to_dict(),
        "config_echo": cfg.echo(),
        "tool_version": __version__,
        "seed": cfg.seed,
    }
    with _open_out(cfg.output) as out:
        _dump_json(report, out)
    return report


def cmd_simulate(cfg: RunConfig) -> dict[str, Any]:
    model = ChangeModel(cfg.pre, cfg.true_post, math.inf if cfg.nu is None else cfg.nu, cfg.phase)
    xs = sample_stream(model, cfg.n_max, cfg.seed)
    fmt = _detect_format(cfg.output, cfg.format)
    with _open_out(cfg.output) as out:
        (write_stream_ndjson if fmt == "ndjson" else write_stream_csv)(out, xs, model, cfg.seed)
    post_rows = 0 if cfg.nu is None else max(0, cfg.n_max - cfg.nu + 1)
    return {"rows": cfg.n_max, "pre_rows": cfg.n_max - post_rows, "post_rows": post_rows}


def cmd_evaluate(cfg: RunConfig) -> dict[str, Any]:
    model = ChangeModel(cfg.pre, cfg.true_post, math.inf, cfg.phase)
    rows = tradeoff_curve(
        model, cfg.rule, cfg.posts, cfg.a_values, cfg.trials, cfg.horizon, cfg.seed, cfg.clamp, workers=cfg.workers
    )
    table = tradeoff_table(rows)
    summary: dict[str, Any] = {
        "information_number": information_number(cfg.true_post, cfg.pre),
        "rows": [r.to_dict() for r in rows],
        "config_echo": cfg.echo(),
        "tool_version": __version__,
    }
    if cfg.martingale_n is not None:
        mg = martingale_check(
            cfg.pre,
            cfg.posts,
            cfg.martingale_n,
            cfg.martingale_trials or cfg.trials,
            derive_seed(cfg.seed, 2**32),
            cfg.clamp,
            cfg.phase,
        )
        summary["martingale"] = {
            "n": cfg.martingale_n,
            "mean_dev": mg.mean_dev,
            "stderr": mg.stderr,
            "trials": mg.trials,
            "within_3se": mg.within(3.0),
        }
    with _open_out(cfg.output) as out:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(TRADEOFF_COLUMNS)
        for rec in table:
            w.writerow(["" if rec[c] is None else _fmt(rec[c]) for c in TRADEOFF_COLUMNS])
    if cfg.summary:
        with open(cfg.summary, "w", encoding="utf-8", newline="") as fh:
            _dump_json(summary, fh)
    return summary


def cmd_calibrate(cfg: RunConfig) -> dict[str, Any]:
    a = calibrate_threshold(cfg.beta)
    m = len(cfg.posts)
    hyps = []
    for i, post in enumerate(cfg.posts, start=1):
        v = validate_change(cfg.pre, post)
        hyps.append(
            {
                "index": i,
                "information_number": v.information_number,
                "valid": v.is_valid_change,
                "predicted_delay": math.log(cfg.beta) / v.information_number if v.is_valid_change else None,
                "predicted_delay_bank": bank_threshold(cfg.beta, m) / v.information_number
                if v.is_valid_change
                else None,
            }
        )
    report: dict[str, Any] = {
        "beta": cfg.beta,
        "threshold_a": a,
        "m": m,
        "hypotheses": hyps,
        "tool_version": __version__,
    }
    if cfg.rule != "cusum" or m > 1:
        report["bank_threshold"] = bank_threshold(cfg.beta, m)
    with _open_out(cfg.output) as out:
        _dump_json(report, out)
    return report


COMMANDS = {"detect": cmd_detect, "simulate": cmd_simulate, "evaluate": cmd_evaluate, "calibrate": cmd_calibrate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="periodic-qcd", description="Quickest change detection for periodic streams")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="mode", required=True)
    for name, helptext in [
        ("detect", "run a detector over a CSV/NDJSON stream"),
        ("simulate", "write a simulated stream with a change point"),
        ("evaluate", "Monte Carlo ARL/CADD tradeoff table"),
        ("calibrate", "thresholds and first-order delay predictions for beta"),
    ]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--beta", type=float)
        p.add_argument("--threshold", dest="threshold_a", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--trials", type=int)
        p.add_argument("--horizon", type=int)
        p.add_argument("--rule", choices=("cusum", "bank_cusum", "sr"))
        p.add_argument("--phase", type=int)
        p.add_argument("--clamp", type=float)
        p.add_argument("--nu", type=int)
        p.add_argument("--n-max", dest="n_max", type=int)
        p.add_argument("--input")
        p.add_argument("--output")
        p.add_argument("--trajectory")
        p.add_argument("--summary")
        p.add_argument("--resume")
        p.add_argument("--format", choices=("csv", "ndjson"))
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = build_config(args.mode, args)
        COMMANDS[args.mode](cfg)
    except (DataError, InvalidObservationError, InvalidInputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (PeriodicQCDError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
