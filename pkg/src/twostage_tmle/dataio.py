"""File formats: individual-level trial CSV and the analysis JSON config.

The CSV carries one row per participant with fixed identity columns
(cluster_id, pair_id, arm, delta, y) plus prefixed covariate columns:
``ec_`` cluster-level (constant within cluster), ``w_`` baseline
individual-level, ``m_`` post-baseline individual-level. Additional
outcome columns for ratio-type endpoints are prefixed ``y_`` and follow
the same empty-iff-unmeasured rule as ``y``. Prefixes are serialization
only; in memory the bare names are used everywhere.

The analysis config is strict JSON: unknown keys are rejected up front so
a typo cannot silently change a pre-specified analysis.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from .stage1 import ClusterData, Stage1Config
from .superlearner import library_from_names

IDENTITY_COLUMNS = ("cluster_id", "pair_id", "arm", "delta", "y")
PREFIXES = ("ec_", "w_", "m_", "y_")


class SchemaError(ValueError):
    """A file violated the documented schema; the message names the spot."""


def _parse_float(text, row, column):
    try:
        value = float(text)
    except ValueError:
        raise SchemaError(f"row {row}: column {column!r} is not a number: {text!r}") from None
    if not math.isfinite(value):
        raise SchemaError(f"row {row}: column {column!r} must be finite")
    return value


def read_individual_csv(path) -> list[ClusterData]:
    """Parse and validate a trial CSV into per-cluster columnar data."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError("missing header row")
        header = list(reader.fieldnames)
        for col in header:
            if col in IDENTITY_COLUMNS or col.startswith(PREFIXES):
                continue
            raise SchemaError(f"unknown column {col!r}")
        for col in ("cluster_id", "pair_id", "arm", "delta"):
            if col not in header:
                raise SchemaError(f"missing required column {col!r}")
        outcome_cols = [c for c in header if c == "y" or c.startswith("y_")]
        if not outcome_cols:
            raise SchemaError("no outcome column (need 'y' or 'y_<name>')")
        w_cols = [c for c in header if c.startswith("w_")]
        m_cols = [c for c in header if c.startswith("m_")]
        ec_cols = [c for c in header if c.startswith("ec_")]
        stripped = [c[2:] for c in w_cols] + [c[2:] for c in m_cols]
        if len(set(stripped)) != len(stripped):
            raise SchemaError("w_/m_ covariate names collide after prefix stripping")

        order: list[str] = []
        rows_by_cluster: dict[str, list[dict]] = {}
        for lineno, row in enumerate(reader, start=2):
            cid = row["cluster_id"]
            if cid == "":
                raise SchemaError(f"row {lineno}: empty cluster_id")
            if row["arm"] not in ("0", "1"):
                raise SchemaError(f"row {lineno}: column 'arm' must be 0 or 1")
            if row["delta"] not in ("0", "1"):
                raise SchemaError(f"row {lineno}: column 'delta' must be 0 or 1")
            measured = row["delta"] == "1"
            for oc in outcome_cols:
                if measured and row[oc] == "":
                    raise SchemaError(f"row {lineno}: column {oc!r} empty but delta=1")
                if not measured and row[oc] != "":
                    raise SchemaError(f"row {lineno}: column {oc!r} present but delta=0")
            parsed = {"__line__": lineno, "pair_id": row["pair_id"], "arm": row["arm"]}
            for col in w_cols + m_cols + ec_cols:
                parsed[col] = _parse_float(row[col], lineno, col)
            for oc in outcome_cols:
                parsed[oc] = _parse_float(row[oc], lineno, oc) if measured else float("nan")
            parsed["delta"] = int(row["delta"])
            if cid not in rows_by_cluster:
                order.append(cid)
                rows_by_cluster[cid] = []
            rows_by_cluster[cid].append(parsed)

    if not order:
        raise SchemaError("no data rows")

    clusters = []
    for cid in order:
        rows = rows_by_cluster[cid]
        arms = {r["arm"] for r in rows}
        if len(arms) != 1:
            raise SchemaError(f"cluster {cid!r}: column 'arm' is not constant")
        pids = {r["pair_id"] for r in rows}
        if len(pids) != 1:
            raise SchemaError(f"cluster {cid!r}: column 'pair_id' is not constant")
        for col in ec_cols:
            if len({r[col] for r in rows}) != 1:
                raise SchemaError(f"cluster {cid!r}: column {col!r} is not constant")
        pair_id = rows[0]["pair_id"] or None
        y = np.array([r["y"] for r in rows]) if "y" in outcome_cols else np.full(len(rows), np.nan)
        clusters.append(
            ClusterData(
                w={c[2:]: np.array([r[c] for r in rows]) for c in w_cols},
                m={c[2:]: np.array([r[c] for r in rows]) for c in m_cols},
                delta=np.array([r["delta"] for r in rows], dtype=np.int8),
                y=y,
                id=cid,
                pair_id=pair_id,
                a_c=int(rows[0]["arm"]),
                e_c={c[3:]: rows[0][c] for c in ec_cols},
                outcomes={
                    c[2:]: np.array([r[c] for r in rows])
                    for c in outcome_cols
                    if c != "y"
                },
            )
        )
    return clusters


def write_individual_csv(clusters, path) -> None:
    """Inverse of read_individual_csv (lossless round trip)."""
    clusters = list(clusters)
    first = clusters[0]
    w_cols = [f"w_{k}" for k in first.w]
    m_cols = [f"m_{k}" for k in first.m]
    ec_cols = [f"ec_{k}" for k in first.e_c]
    extra_y = [f"y_{k}" for k in first.outcomes]
    header = list(IDENTITY_COLUMNS) + ec_cols + w_cols + m_cols + extra_y
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for c in clusters:
            for j in range(c.n):
                measured = int(c.delta[j]) == 1
                row = [
                    c.id,
                    c.pair_id or "",
                    c.a_c,
                    int(c.delta[j]),
                    repr(float(c.y[j])) if measured and not math.isnan(c.y[j]) else "",
                ]
                row += [repr(float(c.e_c[k])) for k in first.e_c]
                row += [repr(float(c.w[k][j])) for k in first.w]
                row += [repr(float(c.m[k][j])) for k in first.m]
                row += [
                    repr(float(c.outcomes[k][j])) if measured else ""
                    for k in first.outcomes
                ]
                writer.writerow(row)


ANALYSIS_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "endpoint": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "type": {"enum": ["mean", "ratio"]},
                "outcome": {"type": "string"},
                "num": {"type": "string"},
                "den": {"type": "string"},
            },
        },
        "stage1": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "estimator": {"enum": ["complete_case", "tmle"]},
                "adjustment": {
                    "anyOf": [
                        {"type": "null"},
                        {"type": "array", "items": {"type": "string"}},
                    ]
                },
                "g_bounds": {
                    "type": "array",
                    "items": {"type": "number"},
                    "minItems": 2,
                    "maxItems": 2,
                },
                "sl_library": {
                    "type": "array",
                    "items": {"enum": ["mean", "glm", "glm_sq"]},
                    "minItems": 1,
                },
                "sl_folds": {"type": "integer", "minimum": 2},
                "outcome_range": {
                    "type": "array",
                    "items": {"type": "number"},
                    "minItems": 2,
                    "maxItems": 2,
                },
            },
        },
        "stage2": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "candidates": {
                    "type": "array",
                    "items": {
                        "anyOf": [
                            {"type": "string"},
                            {"type": "array", "items": {"type": "string"}, "minItems": 1},
                        ]
                    },
                },
                "matched": {"type": "boolean"},
                "weights": {"enum": ["equal_cluster", "equal_individual"]},
                "known_ps": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "scale": {"enum": ["rd", "rr", "both"]},
        "seed": {"type": "integer"},
    },
}


@dataclass(frozen=True)
class AnalysisConfig:
    endpoint_type: str = "mean"
    outcome: str = "y"
    num: str | None = None
    den: str | None = None
    stage1: Stage1Config = field(default_factory=Stage1Config)
    candidates: tuple = ()
    matched: bool = False
    weights: str = "equal_cluster"
    known_ps: float = 0.5
    scale: str = "both"
    seed: int = 0


def parse_analysis_config(doc: dict) -> AnalysisConfig:
    """Validate a config document and fill defaults."""
    try:
        jsonschema.validate(doc, ANALYSIS_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "(top level)"
        raise SchemaError(f"config key {path}: {exc.message}") from None

    endpoint = doc.get("endpoint", {})
    endpoint_type = endpoint.get("type", "mean")
    num = endpoint.get("num")
    den = endpoint.get("den")
    if endpoint_type == "ratio" and (num is None or den is None):
        raise SchemaError("ratio endpoint requires 'num' and 'den' outcome names")

    s1 = doc.get("stage1", {})
    stage1 = Stage1Config(
        estimator=s1.get("estimator", "tmle"),
        adjustment=None if s1.get("adjustment") is None else tuple(s1["adjustment"]),
        g_bounds=tuple(s1.get("g_bounds", (0.025, 1.0))),
        sl_library=library_from_names(s1.get("sl_library", ["mean", "glm", "glm_sq"])),
        sl_folds=s1.get("sl_folds", 10),
        outcome_range=tuple(s1.get("outcome_range", (0.0, 1.0))),
    )
    s2 = doc.get("stage2", {})
    return AnalysisConfig(
        endpoint_type=endpoint_type,
        outcome=endpoint.get("outcome", "y"),
        num=num,
        den=den,
        stage1=stage1,
        candidates=tuple(
            tuple(c) if isinstance(c, list) else c for c in s2.get("candidates", [])
        ),
        matched=s2.get("matched", False),
        weights=s2.get("weights", "equal_cluster"),
        known_ps=s2.get("known_ps", 0.5),
        scale=doc.get("scale", "both"),
        seed=doc.get("seed", 0),
    )


def load_analysis_config(path) -> AnalysisConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError("config must be a JSON object")
    return parse_analysis_config(doc)


def write_json_atomic(obj, path) -> None:
    """Serialize to a temp file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(obj, fh, indent=2, allow_nan=False)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def json_safe(value):
    """Recursively convert to JSON-clean types; non-finite floats to None."""
    if isinstance(value, dict):
        return {str(k): json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return [json_safe(float(v)) for v in value]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, (np.integer, int)):
        return int(value)
    return value
