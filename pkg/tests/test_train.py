import math
from types import SimpleNamespace

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from mrlf import functional as F
from mrlf.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from mrlf.data import EARTH_RADIUS_KM, Location, LocationTable
from mrlf.model import init_params, forward
from mrlf.tensor import backward
from mrlf.train import (ConfigError, TrainConfig, TrainingDiverged, ablate, encode_posts,
                        evaluate, evaluate_params, fit, format_metrics_csv, lr_on_plateau,
                        prepare_data, rmsprop_step, score_predictions, train, variant_config)


def tiny(**changes):
    base = dict(embed_dim=8, max_chars=24, max_words=8, char_kernel_sizes=(3, 4), char_filters=8,
                attn_dim=8, heads=2, ffn_hidden=8, char_out=4, word_kernel_sizes=(1, 2),
                word_filters=4, image_out=4, fusion_hidden=8, fusion_out=4, batch_size=16,
                epochs=2, hashtag_min_count=1, location_min_posts=1, learning_rate=0.005)
    base.update(changes)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def prepared(small_synth):
    return prepare_data(*small_synth, tiny())


# -- optimiser and schedule ------------------------------------------------

def test_rmsprop_examples():
    p, g = [np.array([1.0, -2.0])], [np.zeros(2)]
    rmsprop_step(p, g, None, 0.001)
    npt.assert_array_equal(p[0], [1.0, -2.0])

    p = [np.array([1.0])]
    state = rmsprop_step(p, [np.array([1.0])], None, 0.001, 0.9, 1e-8)
    npt.assert_allclose(state[0], [0.1])
    assert p[0][0] == pytest.approx(1 - 0.001 / math.sqrt(0.1 + 1e-8), abs=1e-15)
    assert p[0][0] == pytest.approx(0.99684, abs=5e-6)

    s1 = state[0].copy()
    rmsprop_step(p, [np.array([1.0])], state, 0.001)
    assert s1[0] < state[0][0] < 1.0


def test_rmsprop_shape_mismatch():
    with pytest.raises(ValueError):
        rmsprop_step([np.zeros(2)], [np.zeros(3)], None, 0.1)


def test_plateau_examples():
    assert lr_on_plateau([5, 4, 3, 2, 1], 0.001) == 0.001
    assert lr_on_plateau([1.0] + [1.0] * 10, 0.001) == pytest.approx(0.0008, abs=1e-15)
    assert lr_on_plateau([1.0] * 9, 0.001) == 0.001
    assert lr_on_plateau([1.0] * 21, 0.001) == pytest.approx(0.00064, abs=1e-15)
    assert lr_on_plateau([1.0] * 1000, 0.001) == 1e-6
    with pytest.raises(ValueError):
        lr_on_plateau([], 0.001)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=80))
@settings(max_examples=100, deadline=None)
def test_lr_sequence_non_increasing_with_floor(history):
    lrs = [lr_on_plateau(history[:k], 0.001, patience=3) for k in range(1, len(history) + 1)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert min(lrs) >= 1e-6


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr_factor=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_patience=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"nonsense": 1})
    cfg = TrainConfig.desk(seed=4)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# -- metrics ---------------------------------------------------------------

def two_locations(km=10.0):
    dlat = km / (EARTH_RADIUS_KM * math.pi / 180)
    return LocationTable([Location(0, "a", 0.0, 0.0), Location(1, "b", dlat, 0.0)])


def enc_at_centers(labels, table):
    c = table.centers()[labels]
    return SimpleNamespace(labels=np.array(labels), lat=c[:, 0], lon=c[:, 1])


def test_oracle_classifier_scores_perfectly():
    tbl = two_locations()
    enc = enc_at_centers([0, 1, 1, 0], tbl)
    m = score_predictions(enc.labels, enc, tbl)
    assert m.accuracy == 1.0 and m.mean_km == 0.0
    npt.assert_array_equal(m.confusion, [[2, 0], [0, 2]])


def test_constant_classifier_accuracy_is_support():
    tbl = two_locations()
    enc = enc_at_centers([0, 1, 1, 1, 0], tbl)
    m = score_predictions(np.zeros(5, int), enc, tbl)
    assert m.accuracy == pytest.approx(2 / 5)
    npt.assert_array_equal(m.confusion.sum(axis=1), [2, 3])


def test_always_wrong_at_10_km():
    tbl = two_locations(10.0)
    enc = enc_at_centers([0, 1, 0], tbl)
    m = score_predictions(1 - enc.labels, enc, tbl)
    assert m.accuracy == 0.0
    assert m.mean_km == pytest.approx(10.0, abs=1e-9)
    m = score_predictions(1 - enc.labels, enc, tbl, mean_mode="center_to_center")
    assert m.mean_km == pytest.approx(10.0, abs=1e-9)


# -- training --------------------------------------------------------------

def test_initial_loss_is_log_m(prepared):
    result = fit(tiny(epochs=0), prepared)
    assert result.initial_loss == pytest.approx(math.log(4), abs=1e-12)
    assert result.history == []


def test_zero_epochs_checkpoint_equals_init(tmp_path, small_dataset_dir):
    cfg = tiny(epochs=0)
    result = train(cfg, small_dataset_dir / "manifest.json", tmp_path)
    init = init_params(result.model_config,
                       np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[0]))
    ckpt = load_checkpoint(tmp_path / "checkpoint.bin")
    assert list(ckpt.params) == list(init)
    for k in init:
        npt.assert_array_equal(ckpt.params[k].data, init[k].data)
    m = evaluate(ckpt, result.data.test, result.data.locations)
    assert m.n == len(result.data.test)
    assert (tmp_path / "metrics.csv").read_text() == "epoch,train_loss,val_loss,val_acc,val_mean_km,lr\n"


def test_train_loss_decreases_on_separable_data(prepared):
    result = fit(tiny(epochs=5, dropout=0.0), prepared)
    losses = [r["train_loss"] for r in result.history]
    assert losses[0] < result.initial_loss
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_fit_is_deterministic(prepared):
    a, b = fit(tiny(), prepared), fit(tiny(), prepared)
    assert format_metrics_csv(a.history) == format_metrics_csv(b.history)
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    c = fit(tiny(seed=1), prepared)
    assert format_metrics_csv(c.history) != format_metrics_csv(a.history)


def test_divergence_is_reported(prepared):
    with pytest.raises(TrainingDiverged, match="batch"):
        with np.errstate(all="ignore"):
            fit(tiny(learning_rate=1e200, epochs=3), prepared)


# -- checkpoints -----------------------------------------------------------

def test_checkpoint_round_trip_bitwise_metrics(tmp_path, prepared):
    result = fit(tiny(), prepared)
    path = save_checkpoint(tmp_path / "c.bin", result.params, result.model_config,
                           prepared.vocab, prepared.locations)
    ckpt = load_checkpoint(path)
    direct = evaluate_params(result.params, result.model_config,
                             encode_posts(prepared.test, prepared.vocab, result.model_config),
                             prepared.locations)
    assert evaluate(ckpt, prepared.test, prepared.locations) == direct
    assert evaluate(path, prepared.test, prepared.locations) == direct
    assert ckpt.header["component_offsets"]["text_c"] == [0, 8]


def test_checkpoint_errors(tmp_path, prepared):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    result = fit(tiny(epochs=0), prepared)
    path = save_checkpoint(tmp_path / "c.bin", result.params, result.model_config,
                           prepared.vocab, prepared.locations)
    with pytest.raises(CheckpointError):
        evaluate(path, prepared.test, two_locations())
    raw = path.read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-16])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.bin")


# -- ablations -------------------------------------------------------------

@pytest.mark.parametrize("variant,prefixes", [
    ("drop-image", ("image.",)),
    ("drop-text", ("emb.char.text", "emb.word.text", "char.text.", "word.text.", "fusion.")),
    ("drop-tags", ("emb.char.tag", "emb.word.tag", "char.tag.", "word.tag.", "fusion.")),
])
def test_masked_components_get_exactly_zero_grad(prepared, variant, prefixes):
    cfg = variant_config(tiny(), variant)
    mcfg = cfg.model_config(prepared.vocab, len(prepared.locations),
                            image_feature_dim=prepared.image_shape[0])
    params = init_params(mcfg, np.random.default_rng(0))
    params["head.w"].data[:] = np.random.default_rng(1).normal(size=params["head.w"].shape)
    batch = encode_posts(prepared.train, prepared.vocab, mcfg).batch(np.arange(16))
    loss = F.cross_entropy(forward(params, mcfg, batch, True, np.random.default_rng(2)),
                           batch.labels)
    backward(loss, list(params.values()))
    masked = [k for k in params if k.startswith(prefixes)]
    assert masked
    for k in masked:
        assert not params[k].grad.any(), k
    assert params["head.w"].grad.any()
    lo, hi = mcfg.offsets["img" if variant == "drop-image" else
                          ("text_c" if variant == "drop-text" else "tag_c")]
    assert not params["head.w"].grad[lo:hi].any()


def test_variant_names():
    base = tiny()
    assert variant_config(base, "full") == base
    assert variant_config(base, "image-only+eta-1.0").modalities == ("image",)
    assert variant_config(base, "min-count-50").hashtag_min_count == 50
    assert variant_config(base, "fusion-late").fusion == "late"
    with pytest.raises(ConfigError):
        variant_config(base, "drop-everything")
    full, no_img = base.to_dict(), variant_config(base, "drop-image").to_dict()
    assert {k for k in full if full[k] != no_img[k]} == {"modalities"}


def test_ablate_table(tmp_path, small_synth):
    rows = ablate(tiny(epochs=1), ["full", "drop-image"], *small_synth, tmp_path)
    assert [r["variant"] for r in rows] == ["full", "drop-image"]
    assert rows[0]["config_hash"] != rows[1]["config_hash"]
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert lines[0] == "variant,acc,mean_km,config_hash" and len(lines) == 3
    with pytest.raises(ConfigError):
        ablate(tiny(), ["full", "bogus"], *small_synth)
