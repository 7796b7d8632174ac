"""Experiment plumbing shared by the CLI and the HTTP service.

Configuration is a flat ``key = value`` text file whose keys mirror the CLI
flags (dashes become underscores).  Every value goes through one coercion
table, so a key set in a file and the same key given as a flag behave
identically.  Precedence: defaults < config file < OSTTA_SEED < flags.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .engine import IdentifierKind, Method, MethodConfig, RunResult, StepRecord, run
from .errors import ConfigError
from .losses import ContrastiveConfig, LossBreakdown
from .metrics import MetricSummary
from .stream import (
    ClassPrototypeSet,
    ScenarioConfig,
    ScenarioKind,
    StreamSample,
    generate_prototypes,
    load_embedding_dump,
    synth_stream,
)

SEED_ENV = "OSTTA_SEED"
HISTOGRAM_WINDOW = 500
ABLATABLE = ("l_re", "l_d", "l_u")
SWEEP_AXES = ("lr", "tau", "k", "ratio", "samples_per_domain")
SUMMARY_KEYS = ("auroc", "fpr95", "acc_d", "acc_u", "hm", "n_steps", "method", "seed", "config_echo")
METRIC_COLUMNS = (
    "auroc", "fpr95", "acc_d", "acc_u", "hm", "n_desired", "n_undesired", "n_correct_d", "n_rejected_u",
)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(options: Sequence[str]) -> Callable[[str], str]:
    def parse(text: str) -> str:
        t = text.strip().lower()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return t

    return parse


def _triple(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError("expected three comma-separated numbers")
    return tuple(parts)


def _ablate(text: str) -> tuple[str, ...]:
    names = [p.strip().lower() for p in text.split(",") if p.strip()]
    bad = [n for n in names if n not in ABLATABLE]
    if bad:
        raise ValueError(f"cannot ablate {bad}; choose from {', '.join(ABLATABLE)}")
    return tuple(sorted(set(names), key=ABLATABLE.index))


def _optional_path(text: str) -> str | None:
    return text.strip() or None


# key -> (parser, default, help)
KEYS: dict[str, tuple[Callable[[str], Any], Any, str]] = {
    "method": (_choice([m.value for m in Method]), "rosita", "adaptation method"),
    "identifier": (_choice([i.value for i in IdentifierKind]), "lda", "desired/undesired identifier"),
    "scenario": (_choice([k.value for k in ScenarioKind]), "single", "stream scenario"),
    "seed": (int, 0, "seed for stream synthesis"),
    "dim": (int, 64, "embedding dimension F"),
    "num_classes": (int, 10, "number of desired classes"),
    "num_undesired_clusters": (int, 2, "number of undesired clusters"),
    "ratio": (float, 0.5, "desired fraction of the stream"),
    "samples_per_domain": (int, 1000, "desired samples per domain"),
    "num_domains": (int, 1, "number of domains"),
    "shift_strength": (float, 0.0, "domain shift magnitude"),
    "noise_sigma": (float, 0.1, "per-sample isotropic noise"),
    "aug_sigma": (float, 0.05, "noise of the augmented view"),
    "min_cosine_gap": (float, 0.3, "minimum 1 - cosine between generated centres"),
    "lr": (float, 1e-3, "adapter SGD learning rate"),
    "tau": (float, 0.07, "contrastive temperature"),
    "ce_temperature": (float, 0.01, "temperature of the pseudo-label cross entropy"),
    "k": (int, 5, "neighbours per bank; 0 disables L_D and L_U"),
    "positive_in_denominator": (_bool, False, "include each positive in its contrastive partition"),
    "warmup": (int, 32, "scores collected before identification starts"),
    "score_bank_size": (int, 512, "score bank capacity"),
    "undesired_bank_size": (int, 64, "undesired feature bank capacity"),
    "msp_thresholds": (_triple, (0.4, 0.6, 0.8), "tau_u,tau_t,tau_d for the msp identifier"),
    "ablate": (_ablate, (), "comma list of loss terms to disable (l_re,l_d,l_u)"),
    "hist_window": (int, HISTOGRAM_WINDOW, "steps per histogram window"),
    "input": (_optional_path, None, "EMB1 dump to stream instead of synthesising"),
}


def parse_kv_text(text: str, origin: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in KEYS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def read_config_file(path: str | Path) -> dict[str, str]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise OSError(f"cannot read config file {p}: {exc.strerror or exc}") from exc
    return parse_kv_text(text, str(p))


def _as_text(v: Any) -> str:
    # JSON or Python values take the same parsing route as file text
    if isinstance(v, str):
        return v
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_as_text(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def resolve(
    file_values: Mapping[str, str] | None = None,
    overrides: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
) -> dict[str, Any]:
    """Merge defaults, file values, OSTTA_SEED and overrides into typed values."""
    env = os.environ if env is None else env
    raw: dict[str, Any] = {}
    raw.update(file_values or {})
    if env.get(SEED_ENV, "").strip():
        raw["seed"] = env[SEED_ENV]
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    values: dict[str, Any] = {}
    for key, (parse, default, _) in KEYS.items():
        if key not in raw:
            values[key] = default
            continue
        v = _as_text(raw[key])
        try:
            values[key] = parse(v)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    unknown = set(raw) - set(KEYS)
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(sorted(unknown))}")
    return values


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig
    method: MethodConfig
    values: dict[str, Any] = field(default_factory=dict)
    input: Path | None = None
    histogram_window: int = HISTOGRAM_WINDOW

    def __post_init__(self):
        if self.histogram_window < 1:
            raise ConfigError("hist_window must be >= 1")

    @property
    def contrastive(self) -> ContrastiveConfig:
        return self.method.contrastive

    @property
    def seed(self) -> int:
        return self.scenario.seed

    def echo(self) -> dict[str, Any]:
        """Flat, JSON-ready view of every resolved setting."""
        out = {}
        for key in KEYS:
            v = self.values.get(key)
            out[key] = list(v) if isinstance(v, tuple) else v
        m = self.method
        out["use_l_re"], out["use_l_d"], out["use_l_u"] = m.use_l_re, m.use_l_d, m.use_l_u
        return out

    def with_value(self, key: str, value: Any) -> "ExperimentConfig":
        return build_config({**self.values, key: value})


def build_config(values: Mapping[str, Any]) -> ExperimentConfig:
    """Typed values (as from :func:`resolve`) to an ExperimentConfig."""
    v = dict(values)
    for key, (_, default, _) in KEYS.items():
        v.setdefault(key, default)
    try:
        scenario = ScenarioConfig(
            kind=v["scenario"],
            dim=v["dim"],
            num_desired_classes=v["num_classes"],
            num_undesired_clusters=v["num_undesired_clusters"],
            desired_ratio=v["ratio"],
            samples_per_domain=v["samples_per_domain"],
            num_domains=v["num_domains"],
            shift_strength=v["shift_strength"],
            noise_sigma=v["noise_sigma"],
            aug_sigma=v["aug_sigma"],
            min_cosine_gap=v["min_cosine_gap"],
            seed=v["seed"],
        )
        contrastive = ContrastiveConfig(
            temperature=v["tau"],
            ce_temperature=v["ce_temperature"],
            k=v["k"],
            positive_in_denominator=v["positive_in_denominator"],
        )
        ablated = set(v["ablate"])
        no_neighbours = v["k"] == 0
        method = MethodConfig(
            method=v["method"],
            identifier=v["identifier"],
            msp_thresholds=tuple(v["msp_thresholds"]),
            contrastive=contrastive,
            lr=v["lr"],
            warmup=v["warmup"],
            score_bank_size=v["score_bank_size"],
            undesired_bank_size=v["undesired_bank_size"],
            use_l_re="l_re" not in ablated,
            use_l_d="l_d" not in ablated and not no_neighbours,
            use_l_u="l_u" not in ablated and not no_neighbours,
            seed=v["seed"],
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if v["undesired_bank_size"] < 0:
        raise ConfigError("undesired_bank_size must be >= 0")
    path = Path(v["input"]) if v["input"] else None
    return ExperimentConfig(scenario, method, v, path, v["hist_window"])


def load_config(
    config_file: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
) -> ExperimentConfig:
    file_values = read_config_file(config_file) if config_file else {}
    return build_config(resolve(file_values, overrides, env))


# --- streams and runs ---------------------------------------------------------


def scenario_prototypes(scenario: ScenarioConfig) -> ClassPrototypeSet:
    return generate_prototypes(scenario.num_desired_classes, scenario.dim, scenario.min_cosine_gap, scenario.seed)


def materialize(config: ExperimentConfig) -> tuple[ClassPrototypeSet, list[StreamSample]]:
    if config.input is not None:
        return load_embedding_dump(config.input)
    prototypes = scenario_prototypes(config.scenario)
    return prototypes, synth_stream(config.scenario, prototypes)


def run_experiment(config: ExperimentConfig) -> RunResult:
    prototypes, samples = materialize(config)
    return run(samples, prototypes, config.method, config.histogram_window)


# --- deterministic serialisation ---------------------------------------------


def fmt(x: Any) -> str:
    """One CSV cell: floats at 9 significant digits, None as empty."""
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, int):
        return str(x)
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        return f"{x:.9g}"
    if hasattr(x, "value"):
        return str(x.value)
    return str(x)


LOSS_COLUMNS = ("loss_total", "active_case", "l_re", "l_d", "l_u", "k_plus")


def step_columns() -> list[str]:
    cols = []
    for f in dataclasses.fields(StepRecord):
        cols.extend(LOSS_COLUMNS if f.name == "loss" else [f.name])
    return cols


def step_row(r: StepRecord) -> list[str]:
    row = []
    for f in dataclasses.fields(StepRecord):
        v = getattr(r, f.name)
        if isinstance(v, LossBreakdown):
            row.extend(fmt(x) for x in (float(v.total), v.active_case, v.l_re, v.l_d, v.l_u, v.k_plus))
        elif f.name in ("s_t", "tau_star", "mu_d", "mu_u"):
            row.append(fmt(float(v)))
        else:
            row.append(fmt(v))
    return row


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def steps_csv(records: Sequence[StepRecord]) -> str:
    return _csv_text(step_columns(), (step_row(r) for r in records))


def hist_csv(rows: Sequence[tuple[int, float, int, int]]) -> str:
    return _csv_text(
        ("window_start", "bin_left", "count_desired", "count_undesired"),
        ([fmt(a), fmt(b), fmt(c), fmt(d)] for a, b, c, d in rows),
    )


def _json_number(x):
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return None
    return x


def summary_dict(config: ExperimentConfig, result: RunResult) -> dict[str, Any]:
    s = result.summary
    metrics = {k: _json_number(getattr(s, k)) if s else None for k in ("auroc", "fpr95", "acc_d", "acc_u", "hm")}
    out = {
        **metrics,
        "n_steps": len(result.records),
        "method": config.method.method.value,
        "seed": config.seed,
        "config_echo": config.echo(),
    }
    assert tuple(out) == SUMMARY_KEYS
    return out


def summary_json(config: ExperimentConfig, result: RunResult) -> str:
    return json.dumps(summary_dict(config, result), indent=2, sort_keys=True, allow_nan=False) + "\n"


def summary_line(config: ExperimentConfig, result: RunResult) -> str:
    d = summary_dict(config, result)
    parts = [f"method={d['method']}", f"seed={d['seed']}", f"n_steps={d['n_steps']}"]
    for k in ("auroc", "fpr95", "acc_d", "acc_u", "hm"):
        v = d[k]
        parts.append(f"{k}={'NA' if v is None else format(v, '.4f')}")
    parts.append(f"failed_steps={result.failed_steps}")
    return " ".join(parts)


def check_output_dir(out_dir: str | Path) -> Path:
    p = Path(out_dir)
    if not p.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {p}")
    if not os.access(p, os.W_OK):
        raise PermissionError(f"output directory is not writable: {p}")
    return p


def write_run_outputs(out_dir: str | Path, config: ExperimentConfig, result: RunResult) -> dict[str, Path]:
    p = check_output_dir(out_dir)
    files = {
        "steps": (p / "steps.csv", steps_csv(result.records)),
        "summary": (p / "summary.json", summary_json(config, result)),
        "hist": (p / "hist.csv", hist_csv(result.histograms)),
    }
    for path, text in files.values():
        path.write_text(text)
    return {k: path for k, (path, _) in files.items()}


# --- sweeps -------------------------------------------------------------------


def parse_sweep_values(axis: str, text: str) -> list[Any]:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    parse = KEYS[axis][0]
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise ConfigError("sweep needs at least one value")
    try:
        return [parse(t) for t in items]
    except ValueError as exc:
        raise ConfigError(f"{axis}: {exc}") from None


def _sweep_one(job: tuple[ExperimentConfig, Any]) -> tuple[Any, MetricSummary | None, int]:
    config, value = job
    result = run_experiment(config)
    return value, result.summary, len(result.records)


def sweep(config: ExperimentConfig, axis: str, values: Sequence[Any], jobs: int = 1) -> list[tuple[Any, MetricSummary | None, int]]:
    """One independent run per value; rows come back in input order."""
    work = [(config.with_value(axis, v), v) for v in values]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_one, work))
    return [_sweep_one(w) for w in work]


def sweep_csv(axis: str, rows: Sequence[tuple[Any, MetricSummary | None, int]]) -> str:
    out = []
    for value, summary, n in rows:
        metrics = [fmt(getattr(summary, c) if summary else None) for c in METRIC_COLUMNS]
        out.append([axis, fmt(value), fmt(n), *metrics])
    return _csv_text(("axis", "value", "n_steps", *METRIC_COLUMNS), out)
