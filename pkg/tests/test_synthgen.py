import numpy as np
import pytest

from pairseq.errors import ConfigError
from pairseq.preprocess import read_atlas
from pairseq.synthgen import SynthSpec, generate, genre_order
from pairseq.vxts import read_vxts


def test_structure(synth_one):
    assert len(synth_one.raw) == 18
    kinds = [m["run_kind"] for _, m in synth_one.raw]
    assert kinds == ["training"] * 12 + ["test"] * 6
    raw, meta = synth_one.raw[0]
    assert raw.shape == (400, len(meta["coords"]))
    test_meta = synth_one.raw[12][1]
    clip_ids = [c for c, _, _ in test_meta["clip_table"]]
    assert sorted(set(clip_ids)) == list(range(10)) and len(clip_ids) == 40


def test_genre_order_balanced_no_repeats():
    order = genre_order(40, 10, np.random.default_rng(0))
    assert np.bincount(order).tolist() == [4] * 10
    assert all(a != b for a, b in zip(order, order[1:]))


def test_same_seed_same_bytes():
    spec = SynthSpec(n_training_runs=2, n_test_runs=1, clips_per_training_run=10, seed=9)
    a, b = generate(spec), generate(spec)
    for (ra, _), (rb, _) in zip(a.raw, b.raw):
        assert ra.tobytes() == rb.tobytes()
    c = generate(SynthSpec(n_training_runs=2, n_test_runs=1, clips_per_training_run=10, seed=10))
    assert a.raw[0][0].tobytes() != c.raw[0][0].tobytes()


def test_genre_signal_is_recoverable():
    # clip means of the same genre correlate; different genres do not
    spec = SynthSpec(n_training_runs=1, n_test_runs=0, clips_per_training_run=20,
                     noise_sd=0.5, genre_signal_strength=1.0, seed=4)
    run = generate(spec).preprocessed()[0]
    means = np.array([run.images[c.start:c.start + 10, 3:].mean(0) for c in run.clip_table])
    genres = np.array([c.genre_id for c in run.clip_table])
    corr = np.corrcoef(means)
    same = genres[:, None] == genres[None, :]
    off = ~np.eye(len(genres), dtype=bool)
    assert corr[same & off].mean() > 0.3
    assert abs(corr[~same].mean()) < 0.2


def test_write_round_trip(tmp_path):
    spec = SynthSpec(n_training_runs=1, n_test_runs=1, clips_per_training_run=10)
    data = generate(spec)
    out = data.write(tmp_path)
    assert read_atlas(out / "atlas.txt") == data.atlas
    files = sorted((out / "raw").glob("*.vxts"))
    assert len(files) == 2
    arr, meta = read_vxts(files[0])
    np.testing.assert_array_equal(arr, data.raw[0][0])
    assert meta["run_id"] == 0


@pytest.mark.parametrize("kwargs", [{"genres": 1}, {"clips_per_training_run": 5},
                                    {"temporal_corr": 1.0}, {"noise_sd": -1.0}, {"n_subjects": 0}])
def test_bad_specs(kwargs):
    with pytest.raises(ConfigError):
        SynthSpec(**kwargs)
