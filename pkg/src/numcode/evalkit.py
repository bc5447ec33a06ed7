"""Trajectory and control-signal error metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

THRESHOLDS = (0.1, 0.5, 1.0, 5.0)


class UndefinedHeading(ValueError):
    pass


def _pairs(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.shape[-1] != 2:
        raise ValueError(f"expected (..., 2) points, got {arr.shape}")
    return arr


def point_error(pred, gt) -> float:
    """L2 distance between points; mean over waypoints for ``[T, 2]`` input."""
    p, g = _pairs(pred), _pairs(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    return float(np.mean(np.linalg.norm(p - g, axis=-1)))


def heading(p) -> float:
    """Heading of a 2-D vector in degrees, ``-deg(atan2(-py, px))``."""
    px, py = (float(v) for v in _pairs(p))
    if px == 0.0 and py == 0.0:
        raise UndefinedHeading("heading of the zero vector is undefined")
    return -math.degrees(math.atan2(-py, px))


def headings(points) -> np.ndarray:
    pts = _pairs(points).reshape(-1, 2)
    if np.any((pts[:, 0] == 0.0) & (pts[:, 1] == 0.0)):
        raise UndefinedHeading("heading of the zero vector is undefined")
    return -np.degrees(np.arctan2(-pts[:, 1], pts[:, 0]))


def wrap_degrees(delta):
    return (np.asarray(delta, dtype=np.float64) + 180.0) % 360.0 - 180.0


def heading_error(preds, gts, wrap: bool = False) -> float:
    """Mean absolute heading difference in degrees.

    The raw difference is used unless ``wrap`` is set, in which case it is
    folded into [-180, 180) first.
    """
    diff = np.asarray(preds, dtype=np.float64) - np.asarray(gts, dtype=np.float64)
    if wrap:
        diff = wrap_degrees(diff)
    return float(np.mean(np.abs(diff))) if diff.size else 0.0


def speed_error(preds, gts) -> float:
    diff = np.asarray(preds, dtype=np.float64) - np.asarray(gts, dtype=np.float64)
    return float(np.mean(np.abs(diff))) if diff.size else 0.0


mae = speed_error


def normalized_l2(errors) -> float:
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    return float(np.linalg.norm(e) / e.size) if e.size else 0.0


def rmse(preds, gts) -> float:
    diff = np.asarray(preds, dtype=np.float64) - np.asarray(gts, dtype=np.float64)
    return float(np.sqrt(np.mean(diff * diff))) if diff.size else 0.0


def threshold_accuracy(preds, gts, delta: float) -> float:
    """Percentage of samples with ``|pred - gt| <= delta``."""
    diff = np.abs(np.asarray(preds, dtype=np.float64) - np.asarray(gts, dtype=np.float64))
    return float(100.0 * np.count_nonzero(diff <= delta) / diff.size) if diff.size else 100.0


@dataclass
class FieldReport:
    field: str
    unit: str
    n: int
    rmse: float
    mae: float
    threshold_acc: dict[float, float]
    normalized_l2: float
    extra: dict[str, float] = field(default_factory=dict)

    def row(self) -> dict:
        out = {"field": self.field, "unit": self.unit, "n": self.n,
               "rmse": self.rmse, "mae": self.mae}
        out.update({f"A_{d:g}": v for d, v in self.threshold_acc.items()})
        out["normalized_l2"] = self.normalized_l2
        out.update(self.extra)
        return out


def scalar_report(name: str, unit: str, preds, gts,
                  thresholds: Sequence[float] = THRESHOLDS) -> FieldReport:
    p = np.asarray(preds, dtype=np.float64)
    g = np.asarray(gts, dtype=np.float64)
    return FieldReport(
        field=name, unit=unit, n=int(p.size),
        rmse=rmse(p, g), mae=mae(p, g),
        threshold_acc={d: threshold_accuracy(p, g, d) for d in thresholds},
        normalized_l2=normalized_l2(p - g),
    )


def error_report(name: str, unit: str, errors,
                 thresholds: Sequence[float] = THRESHOLDS) -> FieldReport:
    """Report for per-sample non-negative errors (e.g. point distances)."""
    e = np.asarray(errors, dtype=np.float64)
    return scalar_report(name, unit, e, np.zeros_like(e), thresholds)


@dataclass
class MetricReport:
    fields: list[FieldReport]
    notes: dict[str, float] = field(default_factory=dict)

    def by_field(self) -> dict[str, FieldReport]:
        return {f.field: f for f in self.fields}

    def rows(self) -> list[dict]:
        return [f.row() for f in self.fields]

    def to_json(self) -> dict:
        return {"fields": self.rows(), "notes": self.notes}

    def write(self, out_dir: str | Path, stem: str = "report") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(json.dumps(self.to_json(), indent=2) + "\n")
        write_csv(out_dir / f"{stem}.csv", self.rows())


def write_csv(path: str | Path, rows: list[dict]) -> None:
    cols: list[str] = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)


def speed_report(preds, gts) -> MetricReport:
    rep = scalar_report("speed", "m/s", preds, gts)
    rep.extra["speed_error"] = speed_error(preds, gts)
    return MetricReport([rep])


def trajectory_report(preds, gts, wrap: bool = False) -> MetricReport:
    """Point and heading metrics for ``[N, T, 2]`` waypoint arrays.

    Heading is taken from the final waypoint (ego frame, origin at the
    vehicle). Samples whose predicted final waypoint is the zero vector are
    skipped for heading and counted in ``notes``.
    """
    p = np.asarray(preds, dtype=np.float64).reshape(len(preds), -1, 2)
    g = np.asarray(gts, dtype=np.float64).reshape(len(gts), -1, 2)
    per_sample = np.linalg.norm(p - g, axis=-1).mean(axis=1)
    point = error_report("point", "m", per_sample)
    point.extra["point_error"] = float(per_sample.mean()) if per_sample.size else 0.0

    last_p, last_g = p[:, -1], g[:, -1]
    ok = ~((last_p == 0).all(axis=1) | (last_g == 0).all(axis=1))
    th_p = headings(last_p[ok]) if ok.any() else np.zeros(0)
    th_g = headings(last_g[ok]) if ok.any() else np.zeros(0)
    diff = th_p - th_g
    if wrap:
        diff = wrap_degrees(diff)
    head = scalar_report("heading", "deg", th_g + diff, th_g)
    head.extra["heading_error"] = heading_error(th_p, th_g, wrap=wrap)
    return MetricReport([point, head], notes={"undefined_heading": int((~ok).sum())})

