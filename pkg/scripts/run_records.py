"""
Run artifacts: versioned JSON-lines metrics, run manifests, the per-episode
summary series and the Markdown reports.
"""

import os
import json
import math
import hashlib
import logging
import platform
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

import numpy as np
import pandas as pd

from jppo_env import VIOLATION_TAGS
from jppo_errors import MetricsSchemaError

logger = logging.getLogger(__name__)

TOOL_VERSION = "1.0.0"
MANIFEST_NAME = "manifest.json"
ROLLING_WINDOW = 100

_EPISODE_FIELDS = (["episode", "total_reward", "mean_reward", "epsilon", "mean_loss", "buffer_size",
                    "mean_fidelity", "mean_ber", "mean_power_w", "mean_latency_s", "mean_energy_j"]
                   + [f"violations_{t}" for t in VIOLATION_TAGS])
_STEP_FIELDS = (["episode", "step", "user", "compression_level", "power_level", "prompt", "kappa", "power_w",
                 "fading_gain", "snr", "ber", "f1", "f2", "f3", "f", "energy_j", "latency_s", "reward"]
                + [f"violated_{t}" for t in VIOLATION_TAGS])
_EVAL_FIELDS = (["policy", "seed", "episodes", "steps", "mean_reward", "mean_fidelity", "mean_ber",
                 "mean_power_w", "mean_latency_s", "mean_energy_j", "violation_rate",
                 "baseline_mean_latency_s", "latency_improvement", "oracle_mean_reward", "regret_gap",
                 "regret_relative", "agreement", "oracle_expected_optimum", "oracle_mean_power_w",
                 "power_gap_w", "oracle_mean_fidelity"]
                + [f"violations_{t}" for t in VIOLATION_TAGS])

SCHEMAS = {
    "jppo.train.episode/1": frozenset(_EPISODE_FIELDS),
    "jppo.train.step/1": frozenset(_STEP_FIELDS),
    "jppo.eval/1": frozenset(_EVAL_FIELDS),
}
EPISODE_SCHEMA = "jppo.train.episode/1"
STEP_SCHEMA = "jppo.train.step/1"
EVAL_SCHEMA = "jppo.eval/1"


def json_safe(value):
    """Numpy scalars to Python; NaN and infinities to None."""
    if isinstance(value, dict):
        return {k: json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _check_fields(record, schema, where):
    if schema not in SCHEMAS:
        raise MetricsSchemaError(f"{where}: unknown metrics schema {schema!r}")
    keys = set(record) - {"schema"}
    unknown = keys - SCHEMAS[schema]
    missing = SCHEMAS[schema] - keys
    if unknown:
        raise MetricsSchemaError(f"{where}: unknown fields for {schema}: {', '.join(sorted(unknown))}")
    if missing:
        raise MetricsSchemaError(f"{where}: missing fields for {schema}: {', '.join(sorted(missing))}")


class MetricsWriter:
    """Appends schema-tagged records to a JSON-lines file."""

    def __init__(self, path, schema):
        if schema not in SCHEMAS:
            raise MetricsSchemaError(f"Unknown metrics schema {schema!r}")
        self.path = path
        self.schema = schema
        self.count = 0
        self._f = open(path, "w", encoding="utf-8")

    def write(self, record):
        _check_fields(record, self.schema, f"record {self.count + 1}")
        line = json.dumps(json_safe(dict(record, schema=self.schema)), sort_keys=True, allow_nan=False)
        self._f.write(line + "\n")
        self.count += 1

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()


def write_metrics(path, schema, records):
    with MetricsWriter(path, schema) as writer:
        for record in records:
            writer.write(record)
    return path


def read_metrics(path, schema=None):
    """Load and validate a metrics file; every record must match its declared schema."""
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise MetricsSchemaError(f"{path}:{lineno}: not valid JSON ({e.msg})") from e
            tag = record.get("schema")
            if schema is not None and tag != schema:
                raise MetricsSchemaError(f"{path}:{lineno}: expected schema {schema!r}, found {tag!r}")
            _check_fields(record, tag, f"{path}:{lineno}")
            records.append(record)
    return records


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Everything needed to re-run a command and check its artifacts."""

    command: str
    config: dict
    seeds: list
    arguments: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    tool_version: str = TOOL_VERSION
    started_at: str = field(default_factory=_now)
    finished_at: str = None
    platform: str = field(default_factory=platform.platform)

    def add_artifact(self, name, path, out_dir):
        self.artifacts[name] = {"path": os.path.relpath(path, out_dir), "sha256": file_sha256(path)}

    def finish(self):
        self.finished_at = _now()

    def write(self, out_dir):
        path = os.path.join(out_dir, MANIFEST_NAME)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(json_safe(asdict(self)), f, indent=2, sort_keys=True)
            f.write("\n")
        return path

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise MetricsSchemaError(f"{path}: unknown manifest fields {', '.join(sorted(unknown))}")
        return cls(**data)


def training_summary(metrics, window=ROLLING_WINDOW):
    """Per-episode series with rolling means of reward, fidelity, BER and power."""
    df = pd.DataFrame(metrics)
    columns = [c for c in ("total_reward", "mean_fidelity", "mean_ber", "mean_power_w") if c in df]
    for col in columns:
        df[f"{col}_rolling"] = df[col].rolling(window, min_periods=1).mean()
    violation_cols = [c for c in df.columns if c.startswith("violations_")]
    if violation_cols:
        df["violations_total"] = df[violation_cols].sum(axis=1)
    return df


def write_training_summary(metrics, path, window=ROLLING_WINDOW):
    df = training_summary(metrics, window)
    df.to_csv(path, index=False, float_format="%.10g")
    return df


def _fmt(value, spec=".4f"):
    if value is None:
        return "n/a"
    if isinstance(value, float) and not math.isfinite(value):
        return "inf"
    return format(value, spec)


def write_training_report(path, summary, config, checkpoint_path, rows=10):
    """Markdown report: run settings, convergence table and final rolling values."""
    n = len(summary)
    picks = sorted(set(np.linspace(0, n - 1, min(rows, n)).astype(int)))
    with open(path, "w", encoding="utf-8") as f:
        f.write("# Training Report\n\n")
        f.write(f"- Episodes: {n}\n")
        f.write(f"- Seed: {config.env.seed}\n")
        f.write(f"- Users: {config.env.num_users}, horizon {config.env.horizon} steps\n")
        f.write(f"- Checkpoint: `{os.path.basename(checkpoint_path)}`\n\n")
        f.write("## Convergence\n\n")
        f.write("| Episode | Total reward (rolling) | Fidelity (rolling) | BER (rolling) | Power W (rolling) "
                "| Violations | Epsilon |\n")
        f.write("|---|---|---|---|---|---|---|\n")
        for i in picks:
            row = summary.iloc[i]
            f.write(f"| {int(row['episode'])} | {_fmt(row.get('total_reward_rolling'), '.2f')} "
                    f"| {_fmt(row.get('mean_fidelity_rolling'))} | {_fmt(row.get('mean_ber_rolling'))} "
                    f"| {_fmt(row.get('mean_power_w_rolling'), '.2f')} "
                    f"| {int(row.get('violations_total', 0))} | {_fmt(row['epsilon'], '.3f')} |\n")
        last = summary.iloc[-1]
        f.write("\n## Final rolling means\n\n")
        f.write(f"- Total reward per episode: {_fmt(last.get('total_reward_rolling'), '.2f')}\n")
        f.write(f"- Fidelity: {_fmt(last.get('mean_fidelity_rolling'))}\n")
        f.write(f"- BER: {_fmt(last.get('mean_ber_rolling'))}\n")
        f.write(f"- Transmit power: {_fmt(last.get('mean_power_w_rolling'), '.2f')} W\n")
    return path


def write_eval_report(path, summary, warnings=(), note=None):
    """Markdown report for one evaluation run."""
    labels = [
        ("Mean reward", "mean_reward", ".4f"),
        ("Mean fidelity", "mean_fidelity", ".4f"),
        ("Mean BER", "mean_ber", ".4f"),
        ("Mean transmit power (W)", "mean_power_w", ".3f"),
        ("Mean latency (s)", "mean_latency_s", ".3f"),
        ("Constraint-violation rate", "violation_rate", ".4f"),
        ("Baseline mean latency (s)", "baseline_mean_latency_s", ".3f"),
        ("Latency improvement vs baseline", "latency_improvement", ".2%"),
        ("Oracle mean reward", "oracle_mean_reward", ".4f"),
        ("Regret (oracle - policy)", "regret_gap", ".4f"),
        ("Relative regret", "regret_relative", ".2%"),
        ("Action agreement with oracle", "agreement", ".2%"),
        ("Oracle mean power (W)", "oracle_mean_power_w", ".3f"),
        ("Power gap to oracle (W)", "power_gap_w", ".3f"),
    ]
    with open(path, "w", encoding="utf-8") as f:
        f.write("# Evaluation Report\n\n")
        f.write(f"Policy: **{summary['policy']}**, seed {summary['seed']}, "
                f"{summary['episodes']} episodes ({summary['steps']} requests)\n\n")
        f.write("| Metric | Value |\n|---|---|\n")
        for label, key, spec in labels:
            f.write(f"| {label} | {_fmt(summary.get(key), spec)} |\n")
        f.write("\n## Constraint violations\n\n| Constraint | Steps |\n|---|---|\n")
        for tag in VIOLATION_TAGS:
            f.write(f"| {tag} | {summary[f'violations_{tag}']} |\n")
        if warnings:
            f.write("\n## Warnings\n\n")
            for w in warnings:
                f.write(f"- {w}\n")
        if note:
            f.write(f"\n> {note}\n")
    return path
