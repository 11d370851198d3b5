"""Published benchmark numbers (before/after fine-tuning, and ablations).

``†`` marks methods evaluated with dense-CRF post-processing; lookups
accept the name with or without it.
"""

import csv
from dataclasses import dataclass
from importlib import resources
from typing import Dict, List, Tuple

FIELDS = ("mae", "f_w_beta", "f_beta", "s_m")
PHASES = ("before", "after")


@dataclass(frozen=True)
class BenchmarkRow:
    method: str
    phase: str
    source: str
    mae: float
    f_w_beta: float
    f_beta: float
    s_m: float
    raw: Tuple[str, ...] = ()

    def values(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in FIELDS}


def _key(method: str) -> str:
    return method.replace("†", "").strip().lower()


class BenchmarkRegistry:
    def __init__(self, rows: List[BenchmarkRow]):
        self.rows = list(rows)
        self._index = {}
        for row in self.rows:
            if row.phase not in PHASES:
                raise ValueError(f"unknown phase {row.phase!r} for {row.method}")
            k = (_key(row.method), row.phase)
            if k in self._index:
                raise ValueError(f"duplicate registry row {row.method}/{row.phase}")
            self._index[k] = row

    @classmethod
    def from_csv(cls, path) -> "BenchmarkRegistry":
        with open(path, newline="", encoding="utf-8") as fh:
            return cls([_parse(r) for r in csv.DictReader(fh)])

    @classmethod
    def default(cls) -> "BenchmarkRegistry":
        text = resources.files("drivesod").joinpath("data/benchmark.csv").read_text(encoding="utf-8")
        return cls([_parse(r) for r in csv.DictReader(text.splitlines())])

    def get(self, method: str, phase: str = "after") -> BenchmarkRow:
        try:
            return self._index[(_key(method), phase)]
        except KeyError:
            raise KeyError(f"no registry row for {method}/{phase}") from None

    def __contains__(self, key) -> bool:
        method, phase = key
        return (_key(method), phase) in self._index

    def __len__(self):
        return len(self.rows)


def _parse(r) -> BenchmarkRow:
    return BenchmarkRow(
        method=r["method"],
        phase=r["phase"],
        source=r["source"],
        raw=tuple(r[k] for k in FIELDS),
        **{k: float(r[k]) for k in FIELDS},
    )


def registry_compare(report, registry: BenchmarkRegistry, method: str, phase: str = "after") -> Dict[str, float]:
    """Signed differences ``report - registry`` for each metric; no judgment."""
    row = registry.get(method, phase)
    measured = report.as_row() if hasattr(report, "as_row") else dict(report)
    return {k: measured[k] - getattr(row, k) for k in FIELDS}
