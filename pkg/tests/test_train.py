import itertools
import json

import numpy as np
import pytest

from bimanual_saliency.autodiff import Tensor
from bimanual_saliency.geom import LEFT, NONE, RIGHT, GravityLine
from bimanual_saliency.losses import ITERATION, PRE_ITERATION, hard_balance_distance
from bimanual_saliency.nets import ModelWeights, NetConfig
from bimanual_saliency.train import (
    SGD,
    Adam,
    TrainConfig,
    TrainState,
    apply_saliency_update,
    check_stop,
    mean_labeled_saliency,
    optimizer_step,
    prepare_object,
    stop_rule,
    train_cm,
    train_joint,
    update_due,
    write_trace,
)

from conftest import toy_object

TINY = NetConfig(encoder_widths=(64, 8), decoder_widths=(8,), refine_widths=(8,))


def toy_dataset(count=2, n=48):
    out = []
    for k in range(count):
        cloud, labels = toy_object(n, seed=k)
        s_o = np.where(labels == RIGHT, 0.8, 0.1)
        out.append(prepare_object(f"toy-{k}", cloud, labels, s_o, n_cand=8, seed=k))
    return out


def scheduled_epochs(K, M, m_max, epochs):
    state = TrainState(s=[])
    hits = []
    for e in range(epochs):
        state.epoch = e
        if update_due(e, state, TrainConfig(K=K, M=M, m_max=m_max)):
            hits.append(e)
            state.t += 1
    return hits


# ---------------------------------------------------------------- config and schedule


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.sigma_s, cfg.sigma_p) == (0.8, 0.12)
    for bad in (dict(K=0), dict(M=0), dict(sigma_s=0), dict(sigma_p=0), dict(optimizer="rmsprop"), dict(m_max=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert TrainConfig(loss={"w3": 0.0}).loss.w3 == 0.0


def test_temperature_halves_with_floor():
    cfg = TrainConfig()
    assert cfg.temperature(0) == 0.1 and cfg.temperature(499) == 0.1
    assert cfg.temperature(500) == 0.05 and cfg.temperature(1000) == 0.025
    assert cfg.temperature(100_000) == 1e-3


@pytest.mark.parametrize("K, M, m_max", [(200, 50, 4), (1, 1, 3), (10, 7, 0), (5, 100, 2)])
def test_update_schedule_matches_loop_oracle(K, M, m_max):
    expected = [K + M * t for t in range(m_max) if K + M * t < 1000]
    assert scheduled_epochs(K, M, m_max, 1000) == expected


def test_apply_update_copies_and_rejects_off_schedule():
    cfg = TrainConfig(K=3, M=2, m_max=1)
    state = TrainState(s=[np.zeros(3)], epoch=2)
    with pytest.raises(RuntimeError):
        apply_saliency_update(state, [np.ones(3)], cfg)
    state.epoch = 3
    b = np.array([0.5, 1.5, -0.2])
    apply_saliency_update(state, [b], cfg)
    np.testing.assert_array_equal(state.s[0], [0.5, 1.0, 0.0])
    b[0] = 9.0
    assert state.s[0][0] == 0.5 and state.t == 1 and state.phase == ITERATION
    state.epoch = 5
    with pytest.raises(RuntimeError):
        apply_saliency_update(state, [b], cfg)


# ---------------------------------------------------------------- stop rule


def test_stop_rule_truth_table():
    for (hi_s, lo_d) in itertools.product([True, False], repeat=2):
        s = 0.85 if hi_s else 0.75
        d = 0.05 if lo_d else 0.2
        assert stop_rule(s, d) == (hi_s and lo_d)
    assert stop_rule(0.8, 0.1199) and not stop_rule(0.8, 0.12) and not stop_rule(0.7999, 0.0)


def test_check_stop_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for k in range(40):
        cloud, labels = toy_object(32, seed=k)
        g = GravityLine.through_center(cloud)
        b = rng.random(cloud.n) ** rng.uniform(0.1, 2)
        labeled = [i for i in range(cloud.n) if labels[i] != NONE]
        mean = sum(b[i] for i in labeled) / len(labeled)
        assert mean_labeled_saliency(b, labels) == pytest.approx(mean)
        expected = mean >= 0.8 and hard_balance_distance(cloud, b, labels, g) < 0.12
        assert check_stop(b, labels, cloud, g) == expected
    with pytest.raises(ValueError):
        mean_labeled_saliency(np.ones(3), np.zeros(3, dtype=int))


# ---------------------------------------------------------------- optimizers


def test_adam_first_step_is_lr_times_sign():
    p = Tensor(np.array([1.0, -2.0, 3.0]))
    Adam([p], lr=0.1).step([np.array([5.0, -0.01, 0.0])])
    np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-6)


def test_adam_minimizes_quadratic():
    p = Tensor(np.array([3.0, -4.0]))
    opt = Adam([p], lr=0.1)
    for _ in range(500):
        opt.step([2 * p.data])
    np.testing.assert_allclose(p.data, 0.0, atol=1e-3)


def test_sgd_step_and_nonfinite_guard():
    p = Tensor(np.array([1.0]))
    opt = SGD([p], lr=0.5)
    optimizer_step(opt, [np.array([2.0])])
    assert p.data[0] == 0.0
    with pytest.raises(FloatingPointError):
        optimizer_step(opt, [np.array([np.nan])])


# ---------------------------------------------------------------- data prep and loops


def test_prepare_object_subsamples_and_needs_both_hands():
    cloud, labels = toy_object(64)
    obj = prepare_object("x", cloud, labels, np.zeros(64), n_points=40, n_cand=5)
    assert obj.cloud.n == 40 and obj.labels.size == 40 and obj.s_o.size == 40
    assert all(v.shape[0] <= 5 for v in obj.vector_gt.values())
    with pytest.raises(ValueError):
        prepare_object("y", cloud, np.where(labels == LEFT, NONE, labels), np.zeros(64))


def test_train_cm_reduces_loss_and_sets_s():
    ds = toy_dataset(1)
    w = ModelWeights(TINY, seed=0)
    hist = train_cm(w, ds, TrainConfig(cm_epochs=60, lr=1e-2))
    assert hist[-1] < hist[0]
    assert ds[0].s.shape == (ds[0].cloud.n,) and np.all((ds[0].s >= 0) & (ds[0].s <= 1))
    with pytest.raises(ValueError):
        train_cm(w, [], TrainConfig())


def test_train_joint_schedule_and_trace(tmp_path):
    ds = toy_dataset(2)
    w = ModelWeights(TINY, seed=0)
    cfg = TrainConfig(epochs=40, K=10, M=5, m_max=3, lr=1e-3, sigma_s=1.0, sigma_p=1e-9,
                      checkpoint_every=20, checkpoint_dir=str(tmp_path / "ck"))
    state = train_joint(w, ds, cfg)
    updates = [r["epoch"] for r in state.history if r["updated"]]
    assert updates == [10, 15, 20] and state.t == 3 and not state.stopped
    phases = {r["epoch"]: r["phase"] for r in state.history}
    assert phases[9] == PRE_ITERATION and phases[10] == ITERATION
    assert w.meta["inference_passes"] == 4
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["epoch_000020.bgsw", "epoch_000040.bgsw"]
    write_trace(state.history, tmp_path / "trace.jsonl")
    lines = (tmp_path / "trace.jsonl").read_text().splitlines()
    assert len(lines) == 40 and json.loads(lines[0])["epoch"] == 0


def test_train_joint_stops_when_rule_holds():
    ds = toy_dataset(1)
    w = ModelWeights(TINY, seed=0)
    # thresholds any map satisfies
    state = train_joint(w, ds, TrainConfig(epochs=30, K=5, M=5, m_max=4, sigma_s=1e-9, sigma_p=10.0))
    assert state.stopped and state.t == 1 and state.history[-1]["epoch"] == 5
    assert w.meta["inference_passes"] == 1


def test_train_joint_is_deterministic():
    def run():
        ds = toy_dataset(2)
        w = ModelWeights(TINY, seed=3)
        train_cm(w, ds, TrainConfig(cm_epochs=5))
        state = train_joint(w, ds, TrainConfig(epochs=12, K=6, M=3, m_max=2))
        return [r.get("l_classify") for r in state.history], [p.data.copy() for p in w.parameters()]

    (h1, p1), (h2, p2) = run(), run()
    assert h1 == h2
    for a, b in zip(p1, p2):
        np.testing.assert_array_equal(a, b)


def test_train_joint_rejects_empty():
    with pytest.raises(ValueError):
        train_joint(ModelWeights(TINY), [], TrainConfig())
