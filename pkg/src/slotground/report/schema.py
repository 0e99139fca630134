"""Four-field report record, location grammar, parser and validator."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from typing import NamedTuple

from ..vocab import COLS, QUALIFIERS, ROWS, cell_qualifier

FIELDS = ("DefectType", "DefectLocation", "Reasoning", "Confidence")


class Violation(NamedTuple):
    kind: str   # json | missing | type | empty | grammar | range
    field: str

    def __str__(self):
        return f"{self.kind}: {self.field}"


@dataclass(frozen=True)
class LocationSpec:
    row: str
    col: str
    qualifier: str | None = None

    @property
    def cell(self) -> int:
        return ROWS.index(self.row) * 3 + COLS.index(self.col)

    @classmethod
    def from_cell(cls, cell: int, qualifier: str | None = "auto") -> "LocationSpec":
        r, c = divmod(int(cell), 3)
        if qualifier == "auto":
            qualifier = cell_qualifier(r, c)
        return cls(ROWS[r], COLS[c], qualifier)

    def __str__(self):
        base = "center" if self.row == self.col == "center" else f"{self.row}-{self.col}"
        return f"{base} {self.qualifier}" if self.qualifier else base


def parse_location(text) -> LocationSpec | None:
    """Grammar: ``(center | ROW-COL) [QUALIFIER]``, case-insensitive.

    ``center surface`` -> (center, center, surface); ``upper-left edge`` -> (upper, left, edge).
    """
    if not isinstance(text, str):
        return None
    toks = text.strip().lower().split()
    if not 1 <= len(toks) <= 2:
        return None
    qual = None
    if len(toks) == 2:
        if toks[1] not in QUALIFIERS:
            return None
        qual = toks[1]
    head = toks[0]
    if head == "center":
        return LocationSpec("center", "center", qual)
    parts = head.split("-")
    if len(parts) != 2 or parts[0] not in ROWS or parts[1] not in COLS:
        return None
    return LocationSpec(parts[0], parts[1], qual)


@dataclass(frozen=True)
class Report:
    defect_type: str
    defect_location: str
    reasoning: str
    confidence: float

    @property
    def location(self) -> LocationSpec | None:
        return parse_location(self.defect_location)

    def to_dict(self) -> dict:
        return {"DefectType": self.defect_type, "DefectLocation": self.defect_location,
                "Reasoning": self.reasoning, "Confidence": self.confidence}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def text(self) -> str:
        """Four fields concatenated, used for text-overlap metrics."""
        return f"{self.defect_type} {self.defect_location} {self.reasoning} {self.confidence:g}"


@dataclass
class ParseResult:
    report: Report | None
    violations: list

    @property
    def ok(self) -> bool:
        return self.report is not None and not self.violations


def validate_report(r: Report) -> tuple[int, list]:
    """1 iff every field satisfies its constraint, plus the list of violations."""
    v = []
    if not isinstance(r.defect_type, str) or not r.defect_type.strip():
        v.append(Violation("empty", "DefectType"))
    if parse_location(r.defect_location) is None:
        v.append(Violation("grammar", "DefectLocation"))
    if not isinstance(r.reasoning, str) or not r.reasoning.strip():
        v.append(Violation("empty", "Reasoning"))
    c = r.confidence
    if isinstance(c, bool) or not isinstance(c, (int, float)) or not math.isfinite(c) or not 0.0 <= c <= 1.0:
        v.append(Violation("range", "Confidence"))
    return (0 if v else 1), v


def parse_report(text) -> ParseResult:
    """Parse a JSON document into a :class:`Report`. Never raises on bad input."""
    if isinstance(text, dict):
        doc = text
    else:
        try:
            doc = json.loads(text)
        except (TypeError, ValueError):
            return ParseResult(None, [Violation("json", "document")])
    if not isinstance(doc, dict):
        return ParseResult(None, [Violation("type", "document")])
    v = [Violation("missing", f) for f in FIELDS if f not in doc]
    for f in FIELDS[:3]:
        if f in doc and not isinstance(doc[f], str):
            v.append(Violation("type", f))
    conf = doc.get("Confidence")
    if "Confidence" in doc and (isinstance(conf, bool) or not isinstance(conf, (int, float))):
        v.append(Violation("type", "Confidence"))
    if v:
        return ParseResult(None, v)
    r = Report(doc["DefectType"], doc["DefectLocation"], doc["Reasoning"], float(conf))
    return ParseResult(r, validate_report(r)[1])


def render_report(r: Report) -> str:
    """Canonical JSON: fixed key order, canonical location spelling when it parses."""
    loc = r.location
    d = asdict(r)
    return json.dumps({"DefectType": d["defect_type"],
                       "DefectLocation": str(loc) if loc is not None else d["defect_location"],
                       "Reasoning": d["reasoning"], "Confidence": d["confidence"]})
