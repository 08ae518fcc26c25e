import numpy as np
import pytest

from pairseq.checkpoint import (
    MAGIC,
    load_checkpoint,
    model_from_checkpoint,
    model_to_checkpoint,
    save_checkpoint,
)
from pairseq.errors import CheckpointError, ConfigError, DimensionError
from pairseq.model import (
    CLS_DIM,
    MSK_DIM,
    SEP_DIM,
    ModelConfig,
    PairedSequenceTransformer,
    assemble_input,
    expected_parameter_count,
    positional_encoding,
    token_vectors,
)

SMALL = ModelConfig(d_model=24, n_layers=2, n_heads=2, forward_expansion=2)


def test_assemble_layout(rng):
    a = np.zeros((5, 420), np.float32)
    b = np.zeros((5, 420), np.float32)
    a[:, 3:] = rng.standard_normal((5, 417))
    b[:, 3:] = rng.standard_normal((5, 417))
    x = assemble_input(a, b)
    assert x.shape == (12, 420)
    np.testing.assert_array_equal(x[0], token_vectors()["CLS"])
    np.testing.assert_array_equal(x[6], token_vectors()["SEP"])
    np.testing.assert_array_equal(x[1:6], a)
    np.testing.assert_array_equal(x[7:], b)
    assert not x[[*range(1, 6), *range(7, 12)], :3].any()
    with pytest.raises(DimensionError):
        assemble_input(a[:4], b)


def test_token_vectors_are_orthogonal_one_hots():
    tv = token_vectors()
    for name, dim in (("CLS", CLS_DIM), ("SEP", SEP_DIM), ("MSK", MSK_DIM)):
        assert tv[name].sum() == 1 and tv[name][dim] == 1


def test_positional_encoding_values():
    pe = positional_encoding(12, 420)
    assert pe.shape == (12, 420)
    np.testing.assert_allclose(pe[0, 0::2], 0.0)
    np.testing.assert_allclose(pe[0, 1::2], 1.0)
    assert pe[1, 0] == pytest.approx(np.sin(1.0))
    assert pe[3, 5] == pytest.approx(np.cos(3 / 10000 ** (4 / 420)))
    assert len({r.tobytes() for r in pe}) == 12


def test_default_shapes_and_parameter_count():
    cfg = ModelConfig()
    model = PairedSequenceTransformer(cfg, seed=0)
    assert model.n_parameters() == expected_parameter_count(cfg)
    assert model.ntp_head.proj1.weight.shape == (420, 210)
    assert model.ntp_head.proj2.weight.shape == (210, 2)
    assert model.mbm_head.dense1.weight.shape == (420, 840)
    assert model.mbm_head.dense2.weight.shape == (840, 420)
    assert model.sg_head.proj.weight.shape == (420, 2)
    assert len(model.encoder) == 3


def test_forward_shapes_and_probabilities(rng):
    model = PairedSequenceTransformer(SMALL, seed=1)
    x = rng.standard_normal((3, 12, 24)).astype(np.float32)
    h = model.encode(x)
    assert h.shape == (3, 12, 24) and h.dtype == np.float32
    p = model.ntp_probs(h[:, 0])
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-6)
    assert model.mbm_reconstruct(h[:, 3]).shape == (3, 24)
    with pytest.raises(DimensionError):
        model.encode(x[:, :11])


def test_eval_mode_deterministic_train_mode_not(rng):
    model = PairedSequenceTransformer(SMALL, seed=1)
    x = rng.standard_normal((2, 12, 24)).astype(np.float32)
    np.testing.assert_array_equal(model.encode(x), model.encode(x))
    a = model.encode(x, train=True, rng=np.random.default_rng(0))
    b = model.encode(x, train=True, rng=np.random.default_rng(1))
    assert not np.array_equal(a, b)


def test_init_bounds():
    model = PairedSequenceTransformer(SMALL, seed=2)
    w = model.encoder[0].ff.lin1.weight.value
    assert np.abs(w).max() <= 1 / np.sqrt(24)
    assert (model.encoder[0].ln1.gamma.value == 1).all()
    assert not model.encoder[0].ln1.beta.value.any()


def test_bad_config():
    with pytest.raises(ConfigError):
        ModelConfig(n_heads=8)  # 420 % 8 != 0
    with pytest.raises(ConfigError):
        ModelConfig(dropout_p=1.0)


# checkpoint -------------------------------------------------------------------------


def test_checkpoint_round_trip_bytes_identical():
    model = PairedSequenceTransformer(SMALL, seed=3)
    blob = model_to_checkpoint(model, {"epoch": 4})
    assert blob[:4] == MAGIC
    params, cfg, meta = load_checkpoint(blob)
    assert cfg == SMALL and meta == {"epoch": 4}
    again, _ = model_from_checkpoint(blob)
    assert model_to_checkpoint(again, {"epoch": 4}) == blob
    for name, p in model.named_parameters():
        np.testing.assert_array_equal(params[name], p.value)


def test_checkpoint_corruption_detected():
    blob = model_to_checkpoint(PairedSequenceTransformer(SMALL, seed=3))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(blob[:-10])
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(blob + b"\0")
    with pytest.raises(CheckpointError, match="match"):
        model_from_checkpoint(blob, ModelConfig(d_model=24, n_layers=1, n_heads=2))
    bad = save_checkpoint({"w": np.zeros(2)}, SMALL)
    with pytest.raises(CheckpointError):
        model_from_checkpoint(bad)


def test_finetune_load_keeps_encoder_and_fresh_sg_head():
    source = PairedSequenceTransformer(SMALL, seed=3)
    blob = model_to_checkpoint(source)
    model, _ = model_from_checkpoint(blob, fresh_sg_head_seed=99)
    np.testing.assert_array_equal(model.encoder[1].attn.q.weight.value, source.encoder[1].attn.q.weight.value)
    np.testing.assert_array_equal(model.ntp_head.proj1.weight.value, source.ntp_head.proj1.weight.value)
    assert not np.array_equal(model.sg_head.proj.weight.value, source.sg_head.proj.weight.value)
    fresh = PairedSequenceTransformer(SMALL, seed=np.random.default_rng(99))
    assert not np.array_equal(fresh.encoder[0].attn.q.weight.value, source.encoder[0].attn.q.weight.value)
