import json

import numpy as np
import pytest

from forestwsl.raster_core import ClassMap, Raster, read_classmap
from forestwsl.self_training import (
    RefineConfig,
    change_fraction,
    predict_map,
    refine_loop,
    tile_starts,
)
from forestwsl.synth_scene import SceneSpec, generate_truth, render_sar
from forestwsl.training import TrainConfig
from forestwsl.unet_model import UnetConfig, build, forward, load_checkpoint

STUB_UNET = UnetConfig(depth=1, base_filters=2, width_multipliers=(1,), bottleneck_multiplier=1)


def _trained_like(cfg, seed=0):
    """A built model with non-trivial running statistics so inference is not a no-op."""
    model = build(cfg, seed=seed)
    x = np.random.default_rng(seed).normal(-10, 3, size=(4, 16, 16, 2)).astype(np.float32)
    model.bn_states.update(model.forward_graph(x, training=True, seed=0).bn_states)
    return model


def _raster(side, seed=0):
    return Raster(np.random.default_rng(seed).normal(-10, 3, size=(2, side, side)).astype(np.float32))


def test_tile_starts():
    assert tile_starts(96, 64, 32) == [0, 32]
    assert tile_starts(100, 64, 32) == [0, 32, 36]
    assert tile_starts(64, 64, 32) == [0]
    with pytest.raises(ValueError):
        tile_starts(32, 64, 16)
    with pytest.raises(ValueError):
        tile_starts(128, 64, 64)


def test_single_tile_equals_forward():
    model = _trained_like(STUB_UNET)
    raster = _raster(64)
    probs, classes = predict_map(model, raster, tile=64, overlap=32)
    direct = forward(model, np.moveaxis(raster.data, 0, -1)[None])[0, ..., 0]
    assert np.array_equal(probs.data[0], direct)
    assert np.array_equal(classes.values, (direct >= 0.5).astype(np.uint8))


@pytest.mark.parametrize("side", [96, 100])
def test_stitch_matches_whole_image(side):
    model = _trained_like(STUB_UNET, seed=1)
    raster = _raster(side, seed=2)
    probs, _ = predict_map(model, raster, tile=64, overlap=32)
    whole = forward(model, np.moveaxis(raster.data, 0, -1)[None])[0, ..., 0]
    assert np.max(np.abs(probs.data[0] - whole)) < 1e-6
    assert (probs.data > 0).all() and (probs.data < 1).all()


def test_predict_map_errors():
    model = build(STUB_UNET, seed=0)
    with pytest.raises(ValueError):
        predict_map(model, _raster(32), tile=64, overlap=32)
    with pytest.raises(ValueError):
        predict_map(model, Raster(np.zeros((3, 64, 64))), tile=64, overlap=32)


def test_change_fraction_examples():
    a = ClassMap(np.zeros((2, 2), np.uint8))
    assert change_fraction(a, a) == 0.0
    assert change_fraction(a, ClassMap(np.array([[0, 1], [0, 0]]))) == 0.25
    assert change_fraction(a, ClassMap(np.ones((2, 2), np.uint8))) == 1.0
    with pytest.raises(ValueError):
        change_fraction(a, ClassMap(np.zeros((2, 3), np.uint8)))
    with pytest.raises(ValueError):
        change_fraction(a, ClassMap(np.array([[0, 255], [0, 0]])))


def _stub_setup(fractions, side=48, seed=0):
    """Initial labels plus a prediction sequence whose successive change fractions are ``fractions``."""
    rng = np.random.default_rng(seed)
    labels = ClassMap(rng.integers(0, 2, size=(side, side)))
    sequence, current = [], labels.values
    for f in fractions:
        nxt = current.copy()
        flip = rng.choice(current.size, int(round(f * current.size)), replace=False)
        nxt.reshape(-1)[flip] ^= 1
        sequence.append(ClassMap(nxt))
        current = nxt
    return _raster(side, seed), labels, sequence


def _stub_config(**kw):
    base = dict(unet=STUB_UNET, patch=8, train_patches=4, val_patches=2, tile=16, overlap=8, seed=3)
    base.update(kw)
    return RefineConfig(**base)


class Recorder:
    def __init__(self, sequence):
        self.sequence = sequence
        self.trained_on = []
        self.calls = 0

    def trainer(self, model, train_set, val_set, config):
        self.trained_on.append(train_set)
        return model

    def predictor(self, model, raster, tile, overlap):
        out = self.sequence[min(self.calls, len(self.sequence) - 1)]
        self.calls += 1
        return Raster(out.values[None].astype(np.float32)), out


def test_stop_rule_three_rounds(tmp_path):
    raster, labels, seq = _stub_setup([0.4, 0.2, 0.08])
    rec = Recorder(seq)
    result = refine_loop(raster, labels, _stub_config(), run_dir=tmp_path, trainer=rec.trainer, predictor=rec.predictor)
    assert len(result.rounds) == 3 and result.converged
    assert [round(r.change_fraction, 3) for r in result.rounds] == [0.4, 0.2, 0.08]
    assert np.array_equal(result.labels.values, seq[2].values)
    # round r trains on the labels adopted after round r - 1
    expected = [labels, seq[0], seq[1]]
    for ps, lab in zip(rec.trained_on, expected):
        r, c = ps.corners[0]
        assert np.array_equal(ps.labels[0, ..., 0], lab.values[r : r + 8, c : c + 8])
    for r in (1, 2, 3):
        assert (tmp_path / f"checkpoint_r{r}.wslm").is_file()
        assert np.array_equal(read_classmap(tmp_path / f"pseudo_labels_r{r}.wslr").values, expected[r - 1].values)
        assert np.array_equal(read_classmap(tmp_path / f"prediction_r{r}.wslr").values, seq[r - 1].values)
    log = json.loads((tmp_path / "rounds.json").read_text())
    assert log["converged"] and len(log["rounds"]) == 3
    assert log["rounds"][0]["class_counts"]["forest"] + log["rounds"][0]["class_counts"]["non-forest"] == 48 * 48


def test_constant_stub_stops_at_round_two():
    raster, labels, _ = _stub_setup([])
    constant = ClassMap(np.zeros_like(labels.values))
    rec = Recorder([constant])
    result = refine_loop(raster, labels, _stub_config(), trainer=rec.trainer, predictor=rec.predictor)
    assert len(result.rounds) == 2
    assert result.rounds[1].change_fraction == 0.0 and result.converged


def test_threshold_one_stops_after_first_round():
    raster, labels, seq = _stub_setup([0.9, 0.9])
    rec = Recorder(seq)
    result = refine_loop(raster, labels, _stub_config(stop_threshold=1.0), trainer=rec.trainer, predictor=rec.predictor)
    assert len(result.rounds) == 1 and result.converged


def test_max_rounds_not_converged():
    raster, labels, seq = _stub_setup([0.3, 0.3, 0.3, 0.3])
    rec = Recorder(seq)
    result = refine_loop(raster, labels, _stub_config(max_rounds=3), trainer=rec.trainer, predictor=rec.predictor)
    assert len(result.rounds) == 3 and not result.converged
    # three training runs, three predictions, two adopted updates
    assert len(rec.trained_on) == 3 and rec.calls == 3


def test_fresh_model_each_round():
    raster, labels, seq = _stub_setup([0.4, 0.2, 0.08])
    seen = []

    def trainer(model, train_set, val_set, config):
        seen.append((model.params["head.kernel"].copy(), config.seed))
        model.params["head.kernel"] += 1.0
        return model

    refine_loop(raster, labels, _stub_config(), trainer=trainer, predictor=Recorder(seq).predictor)
    kernels = [k for k, _ in seen]
    assert not any(np.array_equal(kernels[0], k) for k in kernels[1:])
    assert len({s for _, s in seen}) == 3


def test_config_and_label_errors():
    with pytest.raises(ValueError):
        RefineConfig(stop_threshold=0.0)
    with pytest.raises(ValueError):
        RefineConfig(max_rounds=0)
    raster, labels, _ = _stub_setup([])
    bad = labels.values.copy()
    bad[0, 0] = 255
    with pytest.raises(ValueError):
        refine_loop(raster, ClassMap(bad), _stub_config())
    with pytest.raises(ValueError):
        refine_loop(raster, ClassMap(labels.values[:, :40]), _stub_config())


def test_truth_initialisation_converges_quickly(tmp_path):
    spec = SceneSpec(seed=4, height=96, width=96, blob_scale=4)
    truth = generate_truth(spec)
    sar = render_sar(truth, spec)
    cfg = RefineConfig(
        unet=UnetConfig(depth=2, base_filters=4, width_multipliers=(1, 2), bottleneck_multiplier=4),
        patch=16,
        train_patches=400,
        val_patches=40,
        tile=32,
        overlap=16,
        seed=1,
        # ~300 steps, enough for the 0.99-momentum running statistics to settle
        train=TrainConfig(batch_size=8, max_epochs=6, patience=6),
    )
    result = refine_loop(sar, truth, cfg, truth=truth, run_dir=tmp_path)
    assert result.converged and len(result.rounds) <= 2
    assert result.rounds[-1].metrics["f1"] > 0.9
    again = refine_loop(sar, truth, cfg)
    assert [r.change_fraction for r in again.rounds] == [r.change_fraction for r in result.rounds]
    assert load_checkpoint(tmp_path / "checkpoint_r1.wslm").config == cfg.unet
