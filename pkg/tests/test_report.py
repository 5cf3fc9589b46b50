import math

import pytest
from hypothesis import given, settings, strategies as st

from lesionground.errors import DuplicateLesionError, ReportError, ReportSyntaxError, UnknownOrganError
from lesionground.report import contrast_features, parse_report, serialize_report

MINIMAL = """\
case c1
organ 0 liver background_hu=55
lesion 0 organ=liver loc=segment-IV volume_mm3=4200 hu=35 :: hypodense focus
"""


def test_minimal_document():
    doc = parse_report(MINIMAL)
    assert doc.case_id == "c1" and doc.n_lesions == 1
    rec = doc.lesions[0]
    assert rec.reported_volume_mm3 == 4200.0 and rec.reported_mean_hu == 35.0
    assert rec.organ_id == 0 and rec.sub_location == "segment-IV" and rec.raw_text == "hypodense focus"


def test_no_lesions():
    assert parse_report("case c\norgan 0 liver background_hu=60\n").n_lesions == 0


def test_unknown_organ_name_and_id():
    with pytest.raises(UnknownOrganError):
        parse_report("case c\norgan 0 liver background_hu=60\nlesion 0 organ=spleen loc=x volume_mm3=1 hu=1\n")
    with pytest.raises(UnknownOrganError):
        parse_report("case c\norgan 0 liver background_hu=60\nlesion 0 organ=3 loc=x volume_mm3=1 hu=1\n")


def test_duplicate_lesion_id():
    text = MINIMAL + "lesion 0 organ=0 loc=x volume_mm3=1 hu=1\n"
    with pytest.raises(DuplicateLesionError):
        parse_report(text)


def test_non_numeric_size_reports_line_and_column():
    with pytest.raises(ReportSyntaxError) as err:
        parse_report("case c\norgan 0 liver background_hu=60\nlesion 0 organ=0 loc=x volume_mm3=big hu=1\n")
    assert err.value.line == 3 and err.value.column is not None


def test_diameter_is_converted_to_sphere_volume():
    doc = parse_report("case c\norgan 0 liver background_hu=60\nlesion 0 organ=0 loc=x diameter_mm=10 hu=20\n")
    assert doc.lesions[0].reported_volume_mm3 == pytest.approx(math.pi * 1000 / 6)


def test_comments_and_order_rules():
    doc = parse_report("# header\ncase c\n\n# organs\norgan 0 liver background_hu=60\n")
    assert doc.case_id == "c"
    with pytest.raises(ReportSyntaxError):
        parse_report("organ 0 liver background_hu=60\ncase c\n")
    with pytest.raises(ReportSyntaxError):
        parse_report(MINIMAL + "organ 1 spleen background_hu=45\n")


def test_contrast_features():
    doc = parse_report(MINIMAL)
    assert contrast_features(doc, 0) == -20.0
    same = parse_report("case c\norgan 0 liver background_hu=60\nlesion 0 organ=0 loc=a volume_mm3=1 hu=60\nlesion 1 organ=0 loc=b volume_mm3=1 hu=90\n")
    assert contrast_features(same, 0) == 0.0
    assert contrast_features(same, 1) - same.lesions[1].reported_mean_hu == contrast_features(same, 0) - same.lesions[0].reported_mean_hu
    with pytest.raises(IndexError):
        contrast_features(doc, 1)


tokens = st.from_regex(r"[A-Za-z][A-Za-z0-9_\-]{0,8}", fullmatch=True)
numbers = st.floats(-1000, 3000, allow_nan=False).map(lambda x: round(x, 3))


@st.composite
def documents(draw):
    n_organs = draw(st.integers(1, 3))
    names = draw(st.lists(tokens, min_size=n_organs, max_size=n_organs, unique=True))
    lines = [f"case {draw(tokens)}"]
    for oid, name in enumerate(names):
        lines.append(f"organ {oid} {name} background_hu={draw(numbers)}")
    for lid in range(draw(st.integers(0, 4))):
        organ = draw(st.sampled_from([str(k) for k in range(n_organs)] + names))
        size = draw(st.sampled_from(["volume_mm3", "diameter_mm"]))
        value = draw(st.floats(0.5, 5000))
        lines.append(f"lesion {lid} organ={organ} loc={draw(tokens)} {size}={value} hu={draw(numbers)} :: note {lid}")
    return "\n".join(lines) + "\n"


@settings(max_examples=80, deadline=None)
@given(documents())
def test_parse_serialize_round_trip_is_a_fixed_point(text):
    doc = parse_report(text)
    again = parse_report(serialize_report(doc))
    assert again == doc
    assert serialize_report(again) == serialize_report(doc)


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=200))
def test_arbitrary_bytes_give_a_document_or_a_structured_error(raw):
    try:
        parse_report(raw)
    except ReportError:
        pass
