"""Ablation sweep harness.

One full train+eval per value along a single axis (momentum, lr,
optimizer, or head_config), every run from the same seed and dataset.
Invalid values are recorded and skipped; the caller decides how to
surface the partial failure.
"""

from __future__ import annotations

from dataclasses import replace
from typing import List, Optional, Sequence, Tuple

from . import tensor as T
from .config import RunConfig, format_value
from .data import load_split_arrays
from .errors import ConfigError
from .model import HEAD_KINDS, build_model, count_parameters
from .train import fit

__all__ = ["SWEEP_AXES", "DEFAULT_GRIDS", "parse_axis_values", "run_sweep",
           "format_sweep_table"]

SWEEP_AXES = ("momentum", "lr", "optimizer", "head_config")

DEFAULT_GRIDS = {
    "momentum": [0.8, 0.85, 0.9, 0.95, 0.99, 1.0],
    "lr": [1e-7, 1e-6, 1e-5, 1e-4, 1e-3],
    "optimizer": ["sgd", "adam", "adamw"],
    "head_config": list(HEAD_KINDS),
}


def parse_axis_values(axis: str, raw: Optional[str]) -> list:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; options: {SWEEP_AXES}")
    if raw is None:
        return list(DEFAULT_GRIDS[axis])
    values = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        if axis in ("momentum", "lr"):
            try:
                values.append(float(part))
            except ValueError:
                raise ConfigError(f"{axis} value {part!r} is not numeric") from None
        else:
            values.append(part)
    if not values:
        raise ConfigError("empty sweep value list")
    return values


def _apply_value(cfg: RunConfig, axis: str, value) -> RunConfig:
    if axis == "momentum":
        if not 0.0 <= value <= 1.0:
            raise ConfigError(f"momentum {value} outside [0, 1]")
        return replace(cfg, momentum=float(value))
    if axis == "lr":
        if value <= 0.0:
            raise ConfigError(f"lr {value} must be positive")
        return replace(cfg, max_lr=float(value))
    if axis == "optimizer":
        if value not in ("sgd", "adam", "adamw"):
            raise ConfigError(f"unknown optimizer {value!r}")
        return replace(cfg, optimizer=str(value))
    if value not in HEAD_KINDS:
        raise ConfigError(f"unknown head config {value!r}")
    return replace(cfg, head_kind=str(value))


def run_sweep(axis: str, values: Sequence, base: RunConfig,
              manifest_path) -> Tuple[List[dict], List[dict]]:
    """Returns (rows, skipped): one row per completed value with test
    metrics and the run's trainable parameter count."""
    splits = {s: load_split_arrays(manifest_path, s, dtype=base.dtype())
              for s in ("train", "val", "test")}
    rows: List[dict] = []
    skipped: List[dict] = []
    for value in values:
        try:
            cfg = _apply_value(base, axis, value)
            model = build_model(cfg.model_config(), T.RngStream(cfg.seed),
                                dtype=cfg.dtype())
        except ConfigError as exc:
            skipped.append({"value": value, "reason": str(exc)})
            continue
        params = count_parameters(model).total_trainable
        result = fit(model, splits, cfg.train_config(), seed=cfg.seed,
                     nc_trace=False)
        report = result["test_metrics"]
        rows.append({
            "value": value,
            "accuracy": report.accuracy,
            "f1": report.f1,
            "precision": report.precision,
            "recall": report.recall,
            "param_count": params,
        })
    return rows, skipped


def format_sweep_table(rows: List[dict]) -> str:
    header = "value\taccuracy\tf1\tprecision\trecall\tparam_count"
    lines = [header]
    for r in rows:
        lines.append("\t".join([
            format_value(r["value"]),
            repr(r["accuracy"]), repr(r["f1"]),
            repr(r["precision"]), repr(r["recall"]),
            str(r["param_count"]),
        ]))
    return "\n".join(lines) + "\n"
