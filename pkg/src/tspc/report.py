"""Run reports (JSON) and convergence traces (CSV)."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import jsonschema

from .optimizer import SolveTrace

REPORT_VERSION = 1

REPORT_SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "tspc run report",
    "type": "object",
    "required": ["version", "problem", "config", "route", "legs", "total_cost", "penalties", "status", "seed"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": REPORT_VERSION},
        "problem": {
            "type": "object",
            "required": ["kind"],
            "properties": {"kind": {"enum": ["static", "debris"]}},
        },
        "config": {"type": "object"},
        "route": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "legs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["origin", "target", "cost"],
                "additionalProperties": False,
                "properties": {
                    "origin": {"type": "integer"},
                    "target": {"type": "integer"},
                    "cost": {"type": "number"},
                    "tof": {"type": ["number", "null"]},
                },
            },
        },
        "total_cost": {"type": "number"},
        "cost_unit": {"type": "string"},
        "objective": {"type": ["number", "null"]},
        "penalties": {"type": "array", "items": {"type": "number"}},
        "status": {"type": "string"},
        "iterations": {"type": ["integer", "null"]},
        "trace_csv": {"type": ["string", "null"]},
        "wall_time": {"type": ["number", "null"]},
        "seed": {"type": "integer"},
        "extra": {"type": "object"},
    },
}

TRACE_COLUMNS = ("iteration", "objective", "max_penalty", "grad_norm", "step_norm", "route_flip")


class ReportError(ValueError):
    pass


@dataclass
class RunReport:
    problem: dict
    config: dict
    route: list[int]
    legs: list[dict]
    total_cost: float
    penalties: list[float]
    status: str
    seed: int
    cost_unit: str = ""
    objective: float | None = None
    iterations: int | None = None
    trace_csv: str | None = None
    wall_time: float | None = None
    extra: dict = field(default_factory=dict)
    version: int = REPORT_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        validate_report(data)
        return cls(**data)


def validate_report(data: dict) -> None:
    try:
        jsonschema.validate(data, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ReportError(f"report invalid at {where}: {exc.message}") from exc


def dumps_report(report: RunReport) -> str:
    data = report.to_dict()
    validate_report(data)
    return json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_report(report: RunReport, path: str | Path) -> None:
    Path(path).write_text(dumps_report(report))


def read_report(path: str | Path) -> RunReport:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ReportError(f"{path}: not valid JSON ({exc})") from exc
    return RunReport.from_dict(data)


def write_trace_csv(trace: SolveTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for r in trace.records:
            writer.writerow([r.iteration, repr(r.objective), repr(r.max_penalty), repr(r.grad_norm),
                             repr(r.step_norm), int(r.flipped)])
