import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pairseq.errors import DataError, InsufficientAtlasError, StructureError
from pairseq.preprocess import (
    AtlasEntry,
    AtlasTable,
    Clip,
    RunTimeseries,
    assemble_run,
    build_roi_mask,
    detrend_standardize_columns,
    format_atlas,
    linear_detrend,
    load_run,
    parse_atlas,
    save_run,
    standardize,
)
from pairseq.vxts import decode_vxts, encode_vxts, read_vxts, write_vxts


def _atlas(probs_a, probs_p=()):
    entries = [AtlasEntry(i, 0, 0, "A", p) for i, p in enumerate(probs_a)]
    entries += [AtlasEntry(i, 0, 0, "P", p) for i, p in probs_p]
    return AtlasTable(tuple(entries))


# ROI mask ---------------------------------------------------------------------------


def test_mask_union_keeps_max_and_pads():
    atlas = _atlas([0.5, 0.1, 0.3, 0.2, 0.05], probs_p=[(1, 0.6), (4, 0.22)])
    mask = build_roi_mask(atlas, threshold=0.23, target_voxels=4)
    assert mask.n_union == 5
    assert mask.n_above_threshold == 3  # 0.5, 0.6 (max of 0.1/0.6), 0.3
    assert mask.coords == [(1, 0, 0), (0, 0, 0), (2, 0, 0), (4, 0, 0)]
    assert (mask.n_added, mask.n_removed) == (1, 0)


def test_mask_trims_surplus_lowest_first():
    atlas = _atlas([0.9, 0.8, 0.7, 0.6])
    mask = build_roi_mask(atlas, threshold=0.5, target_voxels=2)
    assert mask.coords == [(0, 0, 0), (1, 0, 0)]
    assert mask.n_removed == 2


def test_mask_ties_break_on_coordinate():
    atlas = _atlas([0.4, 0.4, 0.4])
    assert build_roi_mask(atlas, 0.3, 2).coords == [(0, 0, 0), (1, 0, 0)]


def test_mask_insufficient_atlas():
    with pytest.raises(InsufficientAtlasError):
        build_roi_mask(_atlas([0.5, 0.6]), 0.23, 417)


def test_synthetic_atlas_reproduces_417(synth_one):
    mask = build_roi_mask(synth_one.atlas)
    report = mask.report()
    assert report["n_active"] == 417 and report["image_dims"] == 420
    assert report["n_above_threshold"] == 413 and report["n_added_below_threshold"] == 4


def test_atlas_text_round_trip(synth_one):
    again = parse_atlas(format_atlas(synth_one.atlas))
    assert again == synth_one.atlas
    with pytest.raises(DataError):
        parse_atlas("1 2 3 A\n")
    with pytest.raises(DataError):
        parse_atlas("1 2 3 X 0.5\n")
    with pytest.raises(DataError):
        parse_atlas("1 2 3 A 0.5\n1 2 3 A 0.4\n")
    with pytest.raises(DataError):
        parse_atlas("100 2 3 A 0.5\n")


# detrend / standardize ----------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.floats(-100, 100), st.floats(-5, 5), st.integers(2, 300))
def test_detrend_of_exact_line_is_zero(a, b, n):
    y = a + b * np.arange(n)
    np.testing.assert_allclose(linear_detrend(y), 0.0, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(3, 200), st.floats(0.01, 100))
def test_standardize_moments(seed, n, scale):
    y = np.random.default_rng(seed).standard_normal(n) * scale + 7
    z = standardize(y)
    assert abs(z.mean()) < 1e-9
    assert abs(np.sqrt(np.mean(z * z)) - 1) < 1e-9


def test_standardize_constant_maps_to_zero():
    np.testing.assert_array_equal(standardize(np.full(10, 3.0)), 0.0)


def test_columns_pipeline_matches_scalar_helpers(rng):
    raw = rng.standard_normal((60, 4)) * 5 + np.arange(60)[:, None] * 0.3 + 100
    cols = detrend_standardize_columns(raw)
    for j in range(4):
        np.testing.assert_allclose(cols[:, j], standardize(linear_detrend(raw[:, j])), atol=1e-10)
    raw[:, 1] = 2.0 + 0.5 * np.arange(60)  # pure trend: nothing left after detrend
    assert not detrend_standardize_columns(raw)[:, 1].any()


def test_assembled_runs_are_standardized(runs_one):
    for run in runs_one:
        assert run.images.shape[1] == 420 and run.images.dtype == np.float32
        assert not run.images[:, :3].any()
        v = run.images[:, 3:].astype(np.float64)
        assert np.abs(v.mean(axis=0)).max() < 1e-6
        assert np.abs(v.std(axis=0) - 1).max() < 1e-6


def test_assemble_rejects_wrong_widths(synth_one):
    mask = build_roi_mask(synth_one.atlas)
    meta = {"subject_id": "01", "run_id": 0, "run_kind": "training", "clip_table": [[0, 0, 0]]}
    with pytest.raises(DataError):
        assemble_run(np.zeros((10, 416)), mask, meta)
    with pytest.raises(StructureError):
        assemble_run(np.zeros((15, 417)), mask, meta)


def test_clip_table_validation():
    with pytest.raises(StructureError):
        RunTimeseries("01", 0, "training", np.zeros((20, 420), np.float32), [Clip(0, 0, 0)])
    with pytest.raises(StructureError):
        RunTimeseries("01", 0, "training", np.zeros((20, 420), np.float32), [Clip(0, 0, 0), Clip(1, 0, 5)])
    with pytest.raises(DataError):
        RunTimeseries("01", 0, "rest", np.zeros((10, 420), np.float32), [Clip(0, 0, 0)])


# VXTS ----------------------------------------------------------------------------


def test_vxts_round_trip(tmp_path, runs_one):
    run = runs_one[0]
    path = save_run(run, tmp_path)
    back = load_run(path)
    np.testing.assert_array_equal(back.images, run.images)
    assert back.meta() == run.meta()
    data = np.arange(6, dtype=np.float32).reshape(2, 3)
    np.testing.assert_array_equal(decode_vxts(encode_vxts(data)), data)
    write_vxts(tmp_path / "plain.vxts", data)
    arr, meta = read_vxts(tmp_path / "plain.vxts")
    assert meta == {} and arr.shape == (2, 3)


def test_vxts_rejects_corruption():
    blob = encode_vxts(np.zeros((2, 3), np.float32))
    with pytest.raises(DataError):
        decode_vxts(b"NOPE" + blob[4:])
    with pytest.raises(DataError):
        decode_vxts(blob[:-1])
