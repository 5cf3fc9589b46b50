"""Line-oriented structured lesion reports.

Grammar (one directive per line, ``#`` starts a comment line)::

    case <case_id>
    organ <organ_id> <name> background_hu=<float>
    lesion <lesion_id> organ=<organ_id|name> loc=<token> volume_mm3=<float> hu=<float> :: <free text>

``diameter_mm=<float>`` may replace ``volume_mm3``; it is converted to the
volume of a sphere of that diameter.  Directives must appear in the order
case, organs, lesions.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

from .errors import DuplicateLesionError, ReportError, ReportSyntaxError, UnknownOrganError

HU_MIN, HU_MAX = -1024.0, 3071.0

_NUMBER = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?\Z")
_INT = re.compile(r"\d{1,9}\Z")
_NAME = re.compile(r"[A-Za-z][A-Za-z0-9_.\-]*\Z")
_TOKEN = re.compile(r"[A-Za-z0-9_.+\-]+\Z")


@dataclass(frozen=True)
class LesionRecord:
    lesion_id: int
    organ_id: int
    sub_location: str
    reported_volume_mm3: float
    reported_mean_hu: float
    raw_text: str = ""
    diameter_mm: float | None = None


@dataclass(frozen=True)
class Organ:
    organ_id: int
    name: str
    background_mean_hu: float


@dataclass(frozen=True)
class ReportDoc:
    case_id: str
    organ_table: dict = field(default_factory=dict)
    lesions: tuple = ()

    @property
    def n_lesions(self):
        return len(self.lesions)

    def organ(self, organ_id) -> Organ:
        return self.organ_table[organ_id]


def sphere_volume(diameter_mm):
    return math.pi * diameter_mm ** 3 / 6.0


def _number(text, line, col, what):
    if not _NUMBER.match(text):
        raise ReportSyntaxError(f"{what} must be a number, got {text!r}", line, col)
    value = float(text)
    if not math.isfinite(value):
        raise ReportSyntaxError(f"{what} is not finite: {text!r}", line, col)
    return value


def _split(body, offset):
    """Whitespace tokens with their 1-based columns."""
    return [(m.group(), m.start() + 1 + offset) for m in re.finditer(r"\S+", body)]


def parse_report(text) -> ReportDoc:
    """Parse a report document; raises a :class:`ReportError` subclass on bad input."""
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ReportSyntaxError(f"input is not valid UTF-8 (byte {exc.start})") from None

    case_id = None
    organs = {}
    names = {}
    lesions = []
    seen_ids = set()
    stage = 0  # 0: expect case, 1: organs, 2: lesions

    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        body, free = line, None
        if "::" in line:
            cut = line.index("::")
            body, free = line[:cut], line[cut + 2 :].strip()
        tokens = _split(body, 0)
        if not tokens:
            raise ReportSyntaxError("missing directive", lineno, 1)
        keyword, col = tokens[0]

        if keyword == "case":
            if stage != 0:
                raise ReportSyntaxError("duplicate or misplaced 'case' directive", lineno, col)
            if len(tokens) != 2 or free is not None:
                raise ReportSyntaxError("expected 'case <case_id>'", lineno, col)
            if not _TOKEN.match(tokens[1][0]):
                raise ReportSyntaxError(f"bad case id {tokens[1][0]!r}", lineno, tokens[1][1])
            case_id = tokens[1][0]
            stage = 1

        elif keyword == "organ":
            if stage != 1:
                raise ReportSyntaxError("'organ' must follow 'case' and precede lesions", lineno, col)
            if len(tokens) != 4 or free is not None:
                raise ReportSyntaxError("expected 'organ <id> <name> background_hu=<float>'", lineno, col)
            (oid_text, oid_col), (name, name_col), (kv, kv_col) = tokens[1:]
            if not _INT.match(oid_text):
                raise ReportSyntaxError(f"organ id must be a non-negative integer, got {oid_text!r}", lineno, oid_col)
            oid = int(oid_text)
            if not _NAME.match(name):
                raise ReportSyntaxError(f"bad organ name {name!r}", lineno, name_col)
            if oid in organs or name in names:
                raise ReportSyntaxError(f"duplicate organ {oid_text} {name}", lineno, oid_col)
            key, sep, value = kv.partition("=")
            if key != "background_hu" or not sep:
                raise ReportSyntaxError("expected background_hu=<float>", lineno, kv_col)
            hu = _number(value, lineno, kv_col + len(key) + 1, "background_hu")
            organs[oid] = Organ(oid, name, hu)
            names[name] = oid

        elif keyword == "lesion":
            if stage == 0:
                raise ReportSyntaxError("'lesion' before 'case'", lineno, col)
            stage = 2
            lesions.append(_parse_lesion(tokens, free, lineno, organs, names, seen_ids, len(lesions)))

        else:
            raise ReportSyntaxError(f"unknown directive {keyword!r}", lineno, col)

    if case_id is None:
        raise ReportSyntaxError("missing 'case' directive")
    return ReportDoc(case_id, dict(organs), tuple(lesions))


def _parse_lesion(tokens, free, lineno, organs, names, seen_ids, expected_id):
    if len(tokens) < 2:
        raise ReportSyntaxError("expected 'lesion <id> key=value ...'", lineno, tokens[0][1])
    lid_text, lid_col = tokens[1]
    if not _INT.match(lid_text):
        raise ReportSyntaxError(f"lesion id must be a non-negative integer, got {lid_text!r}", lineno, lid_col)
    lid = int(lid_text)
    if lid in seen_ids:
        raise DuplicateLesionError(f"duplicate lesion id {lid}", lineno, lid_col)
    if lid != expected_id:
        raise ReportSyntaxError(f"lesion ids must be dense from 0; expected {expected_id}, got {lid}", lineno, lid_col)

    fields = {}
    for tok, col in tokens[2:]:
        key, sep, value = tok.partition("=")
        if not sep or not value:
            raise ReportSyntaxError(f"expected key=value, got {tok!r}", lineno, col)
        if key not in ("organ", "loc", "volume_mm3", "diameter_mm", "hu"):
            raise ReportSyntaxError(f"unknown lesion field {key!r}", lineno, col)
        if key in fields:
            raise ReportSyntaxError(f"repeated lesion field {key!r}", lineno, col)
        fields[key] = (value, col + len(key) + 1)

    for key in ("organ", "loc", "hu"):
        if key not in fields:
            raise ReportSyntaxError(f"lesion {lid} is missing '{key}='", lineno, tokens[0][1])
    if ("volume_mm3" in fields) == ("diameter_mm" in fields):
        raise ReportSyntaxError("give exactly one of volume_mm3= or diameter_mm=", lineno, tokens[0][1])

    ref, ref_col = fields["organ"]
    if _INT.match(ref):
        organ_id = int(ref)
        if organ_id not in organs:
            raise UnknownOrganError(f"unknown organ id {ref}", lineno, ref_col)
    elif ref in names:
        organ_id = names[ref]
    else:
        raise UnknownOrganError(f"unknown organ {ref!r}", lineno, ref_col)

    loc, loc_col = fields["loc"]
    if not _TOKEN.match(loc):
        raise ReportSyntaxError(f"bad sub-location token {loc!r}", lineno, loc_col)

    diameter = None
    if "diameter_mm" in fields:
        diameter = _number(fields["diameter_mm"][0], lineno, fields["diameter_mm"][1], "diameter_mm")
        if diameter <= 0:
            raise ReportSyntaxError("diameter_mm must be positive", lineno, fields["diameter_mm"][1])
        volume = sphere_volume(diameter)
    else:
        volume = _number(fields["volume_mm3"][0], lineno, fields["volume_mm3"][1], "volume_mm3")
    if not (volume > 0 and math.isfinite(volume)):
        raise ReportSyntaxError("lesion volume must be positive and finite", lineno, tokens[0][1])

    hu = _number(fields["hu"][0], lineno, fields["hu"][1], "hu")
    if not HU_MIN <= hu <= HU_MAX:
        raise ReportSyntaxError(f"hu {hu} outside [{HU_MIN:g}, {HU_MAX:g}]", lineno, fields["hu"][1])

    seen_ids.add(lid)
    return LesionRecord(lid, organ_id, loc, volume, hu, free or "", diameter)


def serialize_report(doc: ReportDoc) -> str:
    """Canonical text form; ``parse_report(serialize_report(d)) == d``."""
    lines = [f"case {doc.case_id}"]
    for oid in sorted(doc.organ_table):
        o = doc.organ_table[oid]
        lines.append(f"organ {oid} {o.name} background_hu={o.background_mean_hu!r}")
    for r in doc.lesions:
        size = f"diameter_mm={r.diameter_mm!r}" if r.diameter_mm is not None else f"volume_mm3={r.reported_volume_mm3!r}"
        line = f"lesion {r.lesion_id} organ={r.organ_id} loc={r.sub_location} {size} hu={r.reported_mean_hu!r}"
        if r.raw_text:
            line += f" :: {r.raw_text}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def contrast_features(doc: ReportDoc, i: int) -> float:
    """Lesion-minus-background HU contrast of lesion ``i``."""
    if not 0 <= i < doc.n_lesions:
        raise IndexError(f"lesion index {i} out of range for {doc.n_lesions} lesions")
    rec = doc.lesions[i]
    return rec.reported_mean_hu - doc.organ_table[rec.organ_id].background_mean_hu


__all__ = [
    "LesionRecord",
    "Organ",
    "ReportDoc",
    "ReportError",
    "parse_report",
    "serialize_report",
    "contrast_features",
    "sphere_volume",
]
