import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from defocus.autodiff import Tensor
from defocus.errors import ConfigurationError, ContractError, DataError, FormatError
from defocus.network import DefocusBlockConfig, DefocusNetwork, DropPathSchedule, ModelConfig
from defocus.training import (
    AdamWState, TrainConfig, TrainingError, adamw_step, evaluate, load_dataset, load_run_config, lr_at,
    make_bar_blob_dataset, make_synthetic_dataset, train, write_dataset,
)


def test_single_sample_file_is_29_bytes(tmp_path):
    path = tmp_path / "one.dfa"
    write_dataset(path, np.array([[[[0, 255], [128, 7]]]], dtype=np.uint8), np.array([0]), 2)
    assert path.stat().st_size == 29
    images, labels, meta = load_dataset(path)
    np.testing.assert_array_equal(images[0, 0], np.array([[0, 255], [128, 7]]) / 255.0)
    assert labels.tolist() == [0]
    assert meta == {"count": 1, "height": 2, "width": 2, "channels": 1, "num_classes": 2}


def test_bad_magic(tmp_path):
    path = tmp_path / "x.dfa"
    write_dataset(path, np.zeros((1, 1, 2, 2), np.uint8), np.array([0]), 2)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="offset 0"):
        load_dataset(path)


def test_truncated_and_overflowing_files(tmp_path):
    path = tmp_path / "x.dfa"
    write_dataset(path, np.zeros((3, 1, 2, 2), np.uint8), np.array([0, 1, 1]), 2)
    raw = path.read_bytes()
    (tmp_path / "short.dfa").write_bytes(raw[:-1])
    with pytest.raises(FormatError, match="offset 38"):
        load_dataset(tmp_path / "short.dfa")
    (tmp_path / "head.dfa").write_bytes(raw[:10])
    with pytest.raises(FormatError, match="truncated header"):
        load_dataset(tmp_path / "head.dfa")
    bad = bytearray(raw)
    bad[-2] = 9
    (tmp_path / "over.dfa").write_bytes(bytes(bad))
    with pytest.raises(FormatError, match="offset 37"):
        load_dataset(tmp_path / "over.dfa")


def test_write_rejects_bad_inputs(tmp_path):
    with pytest.raises(DataError):
        write_dataset(tmp_path / "a", np.zeros((1, 1, 2, 2)), np.array([0]), 2)
    with pytest.raises(DataError):
        write_dataset(tmp_path / "a", np.zeros((1, 1, 2, 2), np.uint8), np.array([2]), 2)


def test_hundred_sample_round_trip(tmp_path, rng):
    images = rng.integers(0, 256, size=(100, 3, 5, 7), dtype=np.uint8)
    labels = rng.integers(0, 10, size=100)
    write_dataset(tmp_path / "r.dfa", images, labels, 10)
    back, lab, meta = load_dataset(tmp_path / "r.dfa")
    np.testing.assert_array_equal(np.round(back * 255).astype(np.uint8), images)
    np.testing.assert_array_equal(lab, labels)
    assert meta["count"] == 100 and back.min() >= 0 and back.max() <= 1


@pytest.mark.parametrize("maker", [make_synthetic_dataset, make_bar_blob_dataset])
def test_generators_are_seeded(maker):
    a, la = maker(20, seed=3)
    b, lb = maker(20, seed=3)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(la, lb)
    assert a.dtype == np.uint8 and a.shape == (20, 1, 16, 16) and set(la.tolist()) <= {0, 1, 2, 3}


def _param(v):
    return {"p": Tensor(np.array([v]), requires_grad=True)}


def test_adamw_examples():
    cfg = TrainConfig(weight_decay=0.0)
    p = _param(1.0)
    adamw_step(p, {"p": np.zeros(1)}, AdamWState(), 1, cfg, lr=0.1)
    assert p["p"].data[0] == 1.0

    p = _param(1.0)
    adamw_step(p, {"p": np.ones(1)}, AdamWState(), 1, cfg, lr=0.1)
    # bias-corrected first step: m_hat = v_hat = 1, so the move is lr / (1 + eps)
    assert abs(p["p"].data[0] - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-15

    p = _param(1.0)
    adamw_step(p, {"p": np.zeros(1)}, AdamWState(), 1, TrainConfig(weight_decay=0.05), lr=0.1)
    assert p["p"].data[0] == 0.995


def test_adamw_contract_errors():
    with pytest.raises(ContractError):
        adamw_step(_param(1.0), {"p": np.zeros(2)}, AdamWState(), 1, TrainConfig())
    with pytest.raises(ContractError):
        adamw_step(_param(1.0), {"p": np.zeros(1)}, AdamWState(m={"p": np.zeros(3)}), 1, TrainConfig())
    with pytest.raises(ContractError):
        adamw_step(_param(1.0), {"p": np.zeros(1)}, AdamWState(), 0, TrainConfig())


@given(st.floats(0.01, 100.0), st.integers(0, 2**31 - 1))
def test_adamw_direction_invariant_to_loss_scale(c, seed):
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(weight_decay=0.0, adam_eps=1e-12)
    start = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(3)]
    pa, pb = {"p": Tensor(start.copy())}, {"p": Tensor(start.copy())}
    sa, sb = AdamWState(), AdamWState()
    for step, g in enumerate(grads, 1):
        adamw_step(pa, {"p": g}, sa, step, cfg, lr=0.01)
        adamw_step(pb, {"p": c * g}, sb, step, cfg, lr=0.01)
    np.testing.assert_allclose(sb.m["p"], c * sa.m["p"], rtol=1e-12)
    np.testing.assert_allclose(pb["p"].data, pa["p"].data, rtol=1e-6, atol=1e-12)


def test_adamw_invariance_breaks_down_with_large_eps():
    cfg = TrainConfig(weight_decay=0.0, adam_eps=1e-6)
    g = np.full(1, 1e-6)
    pa, pb = _param(0.0), _param(0.0)
    adamw_step(pa, {"p": g}, AdamWState(), 1, cfg, lr=1.0)
    adamw_step(pb, {"p": 1e3 * g}, AdamWState(), 1, cfg, lr=1.0)
    assert abs(pa["p"].data[0] - pb["p"].data[0]) > 0.1


def test_lr_schedule_examples():
    cfg = TrainConfig(peak_lr=1e-3, total_steps=100, warmup_steps=10)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(10, cfg) == 1e-3
    assert abs(lr_at(100, cfg)) < 1e-12
    assert lr_at(5, cfg) == 5e-4
    assert abs(lr_at(55, cfg) - 5e-4) < 1e-15
    with pytest.raises(ConfigurationError):
        lr_at(-1, cfg)


@given(st.integers(1, 500), st.data())
def test_lr_bounded_and_decreasing_after_warmup(total, data):
    warm = data.draw(st.integers(0, total))
    cfg = TrainConfig(total_steps=total, warmup_steps=warm)
    lrs = np.array([lr_at(s, cfg) for s in range(total + 1)])
    assert np.all(lrs >= 0) and np.all(lrs <= cfg.peak_lr)
    assert np.all(np.diff(lrs[warm:]) <= 1e-18)


def test_train_config_validation_and_defaults():
    cfg = TrainConfig(total_steps=200)
    assert cfg.warmup_steps == 10 and cfg.drop_path == DropPathSchedule(0.1, 0.7, 200)
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(total_steps=5, warmup_steps=6)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"learning_rate": 1})
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_load_run_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"model": {"depth": 1, "block": {"variant": "retnet", "model_dim": 8,
                                                                  "num_heads": 2}},
                                "train": {"total_steps": 3, "drop_path": {"start_rate": 0.1, "end_rate": 0.2,
                                                                          "total_steps": 3}}}))
    mc, tc = load_run_config(path)
    assert mc.depth == 1 and mc.block.variant == "retnet" and tc.drop_path.end_rate == 0.2
    path.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_run_config(path)


def _tiny_model(variant="vit"):
    extra = {"state_dim": 4} if variant == "mamba" else {}
    return ModelConfig(image_size=8, patch_size=4, depth=1,
                       block=DefocusBlockConfig(variant=variant, model_dim=8, num_heads=2, **extra))


def _tiny_data(n=16):
    images, labels = make_bar_blob_dataset(n, seed=1, image_size=8)
    return images / 255.0, labels


def test_zero_steps_returns_initialisation(tmp_path):
    mc, tc = _tiny_model(), TrainConfig(total_steps=0, seed=4)
    res = train(mc, tc, data=_tiny_data(), checkpoint_path=tmp_path / "c.ckpt")
    init_seq, _ = np.random.SeedSequence(4).spawn(2)
    fresh = DefocusNetwork.init(mc, np.random.default_rng(init_seq))
    for k, t in fresh.params.items():
        np.testing.assert_array_equal(res.model.params[k].data, t.data)
    assert res.metrics.rows == [] and (tmp_path / "c.ckpt").exists()


@pytest.mark.parametrize("variant", ["vit", "retnet", "mamba"])
def test_same_seed_gives_identical_csv(variant, tmp_path):
    mc, tc = _tiny_model(variant), TrainConfig(total_steps=6, batch_size=4, seed=9)
    train(mc, tc, data=_tiny_data(), metrics_path=tmp_path / "a.csv")
    res = train(mc, tc, data=_tiny_data(), metrics_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "step,lr,drop_path_rate,loss,cls_loss,aux_loss" and len(lines) == 7
    assert np.all(np.isfinite(res.metrics.losses()))
    other = train(mc, TrainConfig(total_steps=6, batch_size=4, seed=10), data=_tiny_data())
    assert other.metrics.to_csv() != res.metrics.to_csv()


def test_training_reads_dataset_file(tmp_path):
    images, labels = make_bar_blob_dataset(8, seed=0, image_size=8)
    write_dataset(tmp_path / "d.dfa", images, labels, 4)
    res = train(_tiny_model(), TrainConfig(total_steps=2, batch_size=4, dataset_path=str(tmp_path / "d.dfa")))
    assert len(res.metrics.rows) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts_with_step():
    mc = _tiny_model()
    model = DefocusNetwork.init(mc, 0)
    model.params["head/weight"].data = np.full_like(model.params["head/weight"].data, 1e308)
    with pytest.raises(TrainingError, match="step 0"):
        train(mc, TrainConfig(total_steps=3, batch_size=4), data=_tiny_data(), model=model)


def test_evaluate_accuracy_in_unit_interval():
    model = DefocusNetwork.init(_tiny_model(), 0)
    acc = evaluate(model, *_tiny_data(10), batch_size=3)
    assert 0.0 <= acc <= 1.0 and acc * 10 == int(acc * 10)


def test_tiny_mamba_overfit():
    images, labels = make_bar_blob_dataset(64, seed=0)
    data = (images / 255.0, labels)
    mc = ModelConfig(image_size=16, patch_size=4, depth=2,
                     block=DefocusBlockConfig(variant="mamba", model_dim=32, num_heads=4, state_dim=8))
    tc = TrainConfig(total_steps=500, batch_size=32, seed=0, peak_lr=3e-3)
    res = train(mc, tc, data=data)
    losses = res.metrics.losses()
    assert np.median(losses[400:500]) < np.median(losses[0:100])
    assert evaluate(res.model, *data) >= 0.95
