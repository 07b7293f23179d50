"""Serializable verification reports and fitted scaling trends."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import fit_loglog_slope


def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


@dataclass
class TrendResult:
    x: list
    y: list
    slope: float
    ci: tuple

    @classmethod
    def fit(cls, x, y, level=0.95):
        slope, ci = fit_loglog_slope(x, y, level)
        return cls([float(v) for v in x], [float(v) for v in y], slope, ci)

    def within(self, target, tol):
        return abs(self.slope - target) <= tol


@dataclass
class LemmaReport:
    lemma_id: str
    statistic: dict
    envelope: str
    passed: bool
    trials: int = 1
    config: dict = field(default_factory=dict)
    trend: TrendResult | None = None
    constant: float | None = None

    def to_dict(self):
        d = asdict(self)
        return _clean(d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def line(self):
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.lemma_id}: {self.envelope}"
