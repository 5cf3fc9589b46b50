import math
from dataclasses import replace

import numpy as np
import pytest

from lesionground.errors import ParameterError, SpecError
from lesionground.phantom import (
    BACKGROUND_HU,
    LesionSpec,
    OrganSpec,
    PhantomSpec,
    generate,
    read_case,
    suite,
    validate_spec,
    write_case,
    write_suite,
)
from lesionground.report import parse_report, serialize_report
from lesionground.volume import connected_components, mask_stats, Volume3

LIVER = OrganSpec(0, (16.0, 16.0, 16.0), (12.0, 10.0, 11.0), 60.0)


def spec(lesions=(), **kw):
    return PhantomSpec("t", (32, 32, 32), (1.0, 1.0, 1.0), (LIVER,), tuple(lesions), 0, **kw)


def test_organ_without_lesions_matches_inside_test():
    case = generate(spec())
    assert case.report.n_lesions == 0
    idx = np.indices((32, 32, 32)) + 0.5
    q = sum(((idx[k] - 16.0) / r) ** 2 for k, r in enumerate((12.0, 10.0, 11.0)))
    assert np.array_equal(case.organ_masks[0].data, q <= 1.0)


def test_ct_composition():
    les = LesionSpec(0, 0, (16.0, 16.0, 16.0), (3.0, 3.0, 3.0), 120.0)
    case = generate(spec([les]))
    ct = case.ct.scalar()
    organ = case.organ_masks[0].data & ~case.lesion_masks[0].data
    assert abs(ct[~case.organ_masks[0].data].mean() - BACKGROUND_HU) < 1.0
    assert abs(ct[organ].mean() - 60.0) < 1.0
    assert abs(ct[case.lesion_masks[0].data].mean() - 120.0) < 3.0


def test_sphere_volume_within_voxelisation_error():
    les = LesionSpec(0, 0, (16.0, 16.0, 16.0), (5.0, 5.0, 5.0), 20.0)
    case = generate(spec([les]))
    expected = 4.0 / 3.0 * math.pi * 125
    assert abs(case.report.lesions[0].reported_volume_mm3 - expected) / expected < 0.15


def test_same_seed_is_bit_identical():
    les = LesionSpec(0, 0, (16.0, 16.0, 16.0), (3.0, 3.0, 3.0), 20.0)
    a, b = generate(spec([les])), generate(spec([les]))
    assert a.ct.data.tobytes() == b.ct.data.tobytes()
    assert serialize_report(a.report) == serialize_report(b.report)


def test_spec_violations():
    outside = LesionSpec(0, 0, (27.0, 16.0, 16.0), (3.0, 3.0, 3.0), 20.0)
    with pytest.raises(SpecError):
        validate_spec(spec([outside]))
    faint = LesionSpec(0, 0, (16.0, 16.0, 16.0), (3.0, 3.0, 3.0), 65.0)
    with pytest.raises(SpecError):
        generate(spec([faint]))
    a = LesionSpec(0, 0, (14.0, 16.0, 16.0), (2.0, 2.0, 2.0), 20.0)
    b = LesionSpec(1, 0, (19.0, 16.0, 16.0), (2.0, 2.0, 2.0), 20.0)
    with pytest.raises(SpecError):
        validate_spec(spec([a, b]))
    with pytest.raises(SpecError):
        validate_spec(spec([replace(a, organ_id=3)]))


def test_suite_definitions():
    easy = suite("easy")
    assert len(easy) == 10 and all(len(s.lesions) == 1 for s in easy)
    multi = suite("multi")
    assert all(2 <= len(s.lesions) <= 4 and len(s.organs) == 2 for s in multi)
    for s in multi:
        assert len({l.radii_mm for l in s.lesions}) == len(s.lesions)
        hosts = {o.organ_id: o.hu for o in s.organs}
        assert len({l.hu - hosts[l.organ_id] for l in s.lesions}) == len(s.lesions)
    with pytest.raises(ParameterError):
        suite("nope")


@pytest.mark.parametrize("ratio", [0.1, 0.25, 1.0])
def test_weak_suite_mask_counts(ratio):
    specs = suite("weak", mask_ratio=ratio)
    assert sum(s.has_mask for s in specs) == math.ceil(ratio * len(specs))


def test_small_suite_sizes_and_contrast():
    for s in suite("small"):
        case = generate(s)
        n = int(case.lesion_masks[0].data.sum())
        assert 8 <= n <= 27
        assert abs(s.lesions[0].hu - s.organs[0].hu) == 15.0


@pytest.mark.parametrize("name", ["easy", "multi", "small"])
def test_generated_cases_keep_their_invariants(name):
    for s in suite(name):
        case = generate(s)
        union = case.gt_union()
        assert len(connected_components(union, 26)) == len(s.lesions)
        # noiseless organs give a noiseless lesion channel for the HU check
        quiet = generate(replace(s, organs=tuple(replace(o, noise_sigma=0.0) for o in s.organs)))
        for m, rec in zip(case.lesion_masks, case.report.lesions):
            organ = case.organ_masks[rec.organ_id].data
            assert not np.any(m.data & ~organ)
            vol, mean, _ = mask_stats(m, quiet.ct)
            assert abs(vol - rec.reported_volume_mm3) <= 0.15 * rec.reported_volume_mm3
            assert abs(mean - rec.reported_mean_hu) <= 2.0


def test_report_round_trips_through_text():
    case = generate(suite("multi")[0])
    assert parse_report(serialize_report(case.report)) == case.report


def test_case_and_suite_files(tmp_path):
    s = suite("easy", size=2)
    case = generate(s[0])
    write_case(case, tmp_path / "one")
    back = read_case(tmp_path / "one")
    assert back.spec == case.spec and back.report == case.report
    assert np.array_equal(back.ct.data, case.ct.data)
    assert np.array_equal(back.lesion_masks[0].data, case.lesion_masks[0].data)
    manifest = write_suite(s, tmp_path / "suite")
    assert [c["case_id"] for c in manifest["cases"]] == [x.case_id for x in s]
    assert (tmp_path / "suite" / "manifest.json").exists()
    assert isinstance(back.ct, Volume3)
