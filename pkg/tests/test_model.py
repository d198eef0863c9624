import numpy as np
import pytest

from mip.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from mip.clustering import ClusterSpec
from mip.encoding import NONE, EncodingConfig
from mip.numerics import finite_diff_check
from pipeline import loss_closure, small_model, small_sequence


@pytest.mark.parametrize("loss", ["nll", "triplet"])
@pytest.mark.parametrize("metadata", [False, True])
def test_pipeline_gradients_above_roundoff(loss, metadata):
    # entries below ~1e-7 sit under float64 central-difference noise at h=1e-5
    model = small_model(loss, metadata)
    fn = loss_closure(model, *small_sequence())
    assert finite_diff_check(fn, model.param_list(), floor=1e-6) < 1e-4


@pytest.mark.parametrize("loss", ["nll", "triplet"])
def test_pipeline_gradients_with_short_encodings(loss):
    two = EncodingConfig(kind="sinusoid", dim=2, max_scale=10.0)
    model = small_model(loss, metadata=True, temporal=two, positional=two)
    fn = loss_closure(model, *small_sequence(seed=3))
    assert finite_diff_check(fn, model.param_list()) < 1e-4


def test_tiny_gradient_entries_agree_with_wider_step():
    model = small_model("nll")
    fn = loss_closure(model, *small_sequence())
    fn()
    wk = model.params["attn.wk"]
    g = wk.grad.reshape(-1).copy()
    flat = wk.value.reshape(-1)
    idx = np.argsort(np.abs(g))[len(g) // 4 : len(g) // 4 + 5]
    for i in idx:
        o = flat[i]
        flat[i] = o + 1e-3
        fp = fn()
        flat[i] = o - 1e-3
        fm = fn()
        flat[i] = o
        num = (fp - fm) / 2e-3
        assert abs(num - g[i]) <= 1e-4 * max(abs(g[i]), 1e-12) + 1e-13


def test_dead_key_bias():
    model = small_model("nll")
    bk = model.params["attn.bk"]
    bk.trainable = True
    fn = loss_closure(model, *small_sequence())
    fn()
    assert np.max(np.abs(bk.grad)) < 1e-15
    flat = bk.value.reshape(-1)
    for i in range(flat.size):
        flat[i] += 1e-5
        fp = fn()
        flat[i] -= 2e-5
        fm = fn()
        flat[i] += 1e-5
        assert abs((fp - fm) / 2e-5) < 1e-8


def test_frozen_weights_bypass_the_weight_head():
    model = small_model("nll")
    items, times, cands, _ = small_sequence()
    model.set_weights_frozen(True)
    frozen = model.forward(items, times, cands)
    equal = model.forward(items, times, cands, weight_mode="equal")
    assert frozen.y.tobytes() == equal.y.tobytes()
    assert not any(p.trainable for n, p in model.params.items() if n.startswith("weight."))
    model.set_weights_frozen(False)
    assert model.weight_mode == "learned"


def test_forward_validation():
    model = small_model("nll")
    with pytest.raises(ValueError):
        model.forward([], [], [1])
    with pytest.raises(ValueError):
        model.forward(np.arange(13), np.arange(13.0), [1])


def test_metadata_requires_features():
    from mip.config import ModelConfig
    from mip.model import MIPModel

    cfg = ModelConfig(d=4, metadata_present=True)
    with pytest.raises(ValueError):
        MIPModel(cfg, 10)
    with pytest.raises(ValueError):
        MIPModel(cfg, 10, features=np.zeros((10, 3)))


def test_item_table_gradient_accumulates_repeats():
    model = small_model("nll")
    items = np.array([1, 2, 1, 3, 1, 2])
    times = np.arange(6.0)
    cands = np.array([1, 5, 5, 6])
    fw = model.forward(items, times, cands)
    model.zero_grad()
    model.backward(fw, np.ones(4))
    g = model.params["item.table"].grad
    assert g[1].any() and g[5].any() and not g[7].any()


@pytest.mark.parametrize("metadata", [False, True])
def test_checkpoint_round_trip(tmp_path, metadata):
    model = small_model("triplet", metadata)
    model.set_weights_frozen(True)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, {"note": "x"})
    loaded, extra = load_checkpoint(path)
    assert extra == {"note": "x"}
    assert loaded.cfg == model.cfg and loaded.frozen_weights
    for name, p in model.params.items():
        q = loaded.params[name]
        assert q.value.tobytes() == p.value.tobytes() and q.trainable == p.trainable
    items, times, cands, _ = small_sequence()
    assert loaded.forward(items, times, cands).y.tobytes() == model.forward(items, times, cands).y.tobytes()


def test_checkpoint_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    model = small_model("nll")
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    raw = path.read_bytes()
    path.write_bytes(raw.replace(b'"version": 1', b'"version": 9'))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    assert raw.startswith(MAGIC)


def test_reclustering_with_training_spec_reproduces_z():
    model = small_model("nll", metadata=True)
    items, times, cands, _ = small_sequence()
    a = model.forward(items, times, cands)
    b = model.forward(items, times, cands, clusterer=ClusterSpec(method="ward", k=3))
    assert a.Z.tobytes() == b.Z.tobytes()
    c = model.forward(items, times, cands, clusterer=ClusterSpec(method="kmeans", k=5))
    assert c.Z.shape[0] == 5


def test_item_embedding_only_arm():
    model = small_model("nll", temporal=NONE, positional=NONE)
    assert model.cfg.embed_len == model.cfg.d
    items, times, cands, _ = small_sequence()
    assert np.all(np.isfinite(model.forward(items, times, cands).y))
