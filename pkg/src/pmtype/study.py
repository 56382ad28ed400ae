"""Refinement-ladder records: errors and observed rates, CSV emission.

A study holds one row per grid level h (halving between rows) with errors
in the max and the scaled-l1 norm; observed orders are
gamma = log2(E_{j-1} / E_j), defined from the second row on and left
blank when either error vanishes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


def rate(e_prev, e) -> float | None:
    """log2(E_prev / E); None (emitted blank) unless both errors are positive."""
    if e_prev is None or e is None or e_prev <= 0.0 or e <= 0.0:
        return None
    return math.log2(e_prev / e)


@dataclass
class LadderRow:
    h: float
    dt: float
    err_linf: float
    err_l1: float
    rate_linf: float | None = None
    rate_l1: float | None = None


@dataclass
class ConvergenceStudy:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, h, dt, err_linf, err_l1):
        prev = self.rows[-1] if self.rows else None
        row = LadderRow(
            h=h, dt=dt, err_linf=err_linf, err_l1=err_l1,
            rate_linf=rate(prev.err_linf, err_linf) if prev else None,
            rate_l1=rate(prev.err_l1, err_l1) if prev else None,
        )
        self.rows.append(row)
        return row

    def column(self, name):
        return [getattr(r, name) for r in self.rows]

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(self.csv_text())

    def csv_text(self) -> str:
        def fmt(v):
            return "" if v is None else f"{v:.17g}"

        lines = ["h,dt,err_linf,rate_linf,err_l1,rate_l1"]
        for r in self.rows:
            lines.append(",".join([fmt(r.h), fmt(r.dt), fmt(r.err_linf),
                                   fmt(r.rate_linf), fmt(r.err_l1), fmt(r.rate_l1)]))
        return "\n".join(lines) + "\n"
