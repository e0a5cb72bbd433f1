"""Structured pass/fail records for identity and inequality checks.

Exact identities carry a fixed tolerance.  Asymptotic checks are run at two
resolutions; the fine-level gap must fall below ``ratio`` times the coarse
gap (or below an absolute floor once a check has converged to noise level),
which gives order-agnostic convergence evidence without hardcoded constants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field


@dataclass
class VerdictReport:
    name: str
    paper_anchor: str
    lhs: float
    rhs: float
    gap: float
    tol: float
    passed: bool
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_gap(cls, name, anchor, gap, tol, lhs=0.0, rhs=0.0, meta=None):
        gap, tol = float(gap), float(tol)
        return cls(name=name, paper_anchor=anchor, lhs=float(lhs),
                   rhs=float(rhs), gap=gap, tol=tol, passed=bool(gap <= tol),
                   meta=dict(meta or {}))

    def to_dict(self):
        doc = {"name": self.name, "paper_anchor": self.paper_anchor,
               "lhs": self.lhs, "rhs": self.rhs, "gap": self.gap,
               "tol": self.tol, "pass": self.passed,
               "resolution": {k: self.meta.get(k) for k in ("h", "dt", "seed")
                              if k in self.meta}}
        extra = {k: v for k, v in self.meta.items()
                 if k not in ("h", "dt", "seed")}
        if extra:
            doc["meta"] = extra
        return doc

    @classmethod
    def from_dict(cls, doc):
        meta = dict(doc.get("resolution") or {})
        meta.update(doc.get("meta") or {})
        return cls(name=doc["name"], paper_anchor=doc["paper_anchor"],
                   lhs=doc["lhs"], rhs=doc["rhs"], gap=doc["gap"],
                   tol=doc["tol"], passed=doc["pass"], meta=meta)

    def __str__(self):
        flag = "PASS" if self.passed else "FAIL"
        return (f"[{flag}] {self.name}: gap={self.gap:.3e} tol={self.tol:.3e}"
                f" ({self.paper_anchor})")


def exact_verdict(name, anchor, gap, tol=1e-10, lhs=0.0, rhs=0.0, meta=None):
    return VerdictReport.from_gap(name, anchor, gap, tol, lhs, rhs, meta)


def refinement_verdict(name, anchor, gap_fn, coarse, fine, ratio=0.75,
                       floor=1e-9, meta=None):
    """Two-resolution convergence check.

    ``gap_fn(level) -> (gap, info)`` evaluates the (nonnegative) defect on
    one level.  The verdict passes when the fine gap is at most ``ratio``
    times the coarse gap, or already below ``floor``.
    """
    g0, info0 = gap_fn(coarse)
    g1, info1 = gap_fn(fine)
    g0, g1 = float(max(g0, 0.0)), float(max(g1, 0.0))
    tol = max(ratio * g0, floor)
    m = dict(meta or {})
    m.update({"gap_coarse": g0, "ratio": (g1 / g0 if g0 > 0 else 0.0),
              "floor": floor})
    for k, v in (info1 or {}).items():
        m.setdefault(k, v)
    return VerdictReport.from_gap(name, anchor, g1, tol,
                                  lhs=(info1 or {}).get("lhs", 0.0),
                                  rhs=(info1 or {}).get("rhs", 0.0), meta=m)


def emit_report(reports, path=None):
    """Deterministic JSON document for a list of verdicts."""
    doc = {"verdicts": [r.to_dict() for r in reports]}
    text = json.dumps(doc, sort_keys=True, indent=1)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def parse_report(text):
    doc = json.loads(text)
    return [VerdictReport.from_dict(d) for d in doc["verdicts"]]
