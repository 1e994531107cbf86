import math

import numpy as np
import pytest

from twin_graph_ad import graph as gr
from twin_graph_ad import tensorcore as tc
from twin_graph_ad import training as tr
from twin_graph_ad.network import ModelConfig, TwinGraphModel
from twin_graph_ad.telemetry import TelemetrySeries

GUARD = 1e-6


# -- loss formulas on a 3-instance fixture ----------------------------------------------
def test_l1_hand_computed():
    RE = np.array([1.0, 2.0, 4.0])
    y = np.array([-1, 0, 1])
    expected = (0.01 * 1.0 + 2.0 + 1.0 / (4.0 + GUARD)) / 3
    assert float(tr.loss_l1(RE, y, 0.01, GUARD).data) == pytest.approx(expected, rel=1e-14)
    # all unlabeled: eta-weighted mean
    assert float(tr.loss_l1(RE, np.array([-1, -1, -1]), 0.5).data) == pytest.approx(3.5 / 3)
    # abnormal instance with zero error stays finite thanks to the guard
    assert float(tr.loss_l1(np.zeros(3), np.array([1, 1, 0]), guard_eps=GUARD).data) == pytest.approx(2e6 / 3)


def test_l2_hand_computed():
    p_ab = np.array([0.2, 0.9, 0.6])
    P = np.stack([1 - p_ab, p_ab], axis=-1)
    y = np.array([-1, 0, 1])
    expected = -(2.0 * math.log(0.6 + GUARD) + math.log(1 + GUARD - 0.9)) / 2
    loss, has = tr.loss_l2(P, y, positive_weight=2.0, guard_eps=GUARD)
    assert has and float(loss.data) == pytest.approx(expected, rel=1e-12)
    loss, has = tr.loss_l2(P, np.array([-1, -1, -1]))
    assert not has and float(loss.data) == 0.0


def test_loss_shape_errors():
    with pytest.raises(ValueError):
        tr.loss_l1(np.ones(3), np.ones(2, dtype=int))
    with pytest.raises(ValueError):
        tr.loss_l1(np.ones(0), np.ones(0, dtype=int))


def test_l1_gradient_pushes_abnormal_up():
    RE = tc.parameter(np.array([1.0, 2.0, 4.0]))
    tc.backward(tr.loss_l1(RE, np.array([-1, 0, 1]), 0.01))
    g = RE.grad
    assert g[0] == pytest.approx(0.01 / 3) and g[1] == pytest.approx(1 / 3)
    assert g[2] == pytest.approx(-1 / (3 * (4 + GUARD) ** 2))


def test_combined_schedule():
    assert [tr.combined_weights(e) for e in (1, 2, 4)] == [(1.0, 0.0), (0.5, 0.5), (0.25, 0.75)]
    with pytest.raises(ValueError):
        tr.combined_weights(0)
    assert float(tr.combined_loss(tc.Tensor(np.array(2.0)), tc.Tensor(np.array(6.0)), 2).data) == 4.0


def test_positive_weight_and_counts():
    assert tr.class_counts(np.array([[1, 0, -1], [0, 0, 1]])) == (2, 3)
    assert tr.LossConfig(n_a=2, n_n=3).positive_weight == 1.5
    assert tr.LossConfig().positive_weight == 1.0
    with pytest.raises(ValueError):
        tr.LossConfig(guard_eps=0.0)


def test_early_stopping_example():
    es = tr.EarlyStopping(patience=2)
    steps = [es.step(e, v) for e, v in enumerate([3.0, 2.0, 2.5, 1.9, 2.0, 2.0], start=1)]
    assert steps == [(True, False), (True, False), (False, False), (True, False), (False, False), (False, True)]
    assert es.best_epoch == 4 and es.best == 1.9


def test_adabelief_first_step():
    p = tc.parameter(np.array([1.0, -1.0]))
    p.grad = np.array([0.5, -2.0])
    opt = tr.AdaBelief([p], lr=0.1, eps=1e-16)
    opt.step()
    # m_1 = 0.1 g and s_1 = 0.001 (0.9 g)^2, so after bias correction the step is lr * sign(g) / 0.9
    np.testing.assert_allclose(p.data, [1 - 0.1 / 0.9, -1 + 0.1 / 0.9], rtol=1e-9)


def test_history_roundtrip(tmp_path):
    h = [tr.EpochRecord(1, 0.5, 0.25, 1e-3), tr.EpochRecord(2, 0.1 + 0.2, math.pi, 9e-4)]
    tr.write_history(tmp_path / "h.csv", h)
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,train_loss,val_loss,lr"
    assert tr.read_history(tmp_path / "h.csv") == h


# -- tiny end-to-end training -------------------------------------------------------------
def tiny_dataset(T=200, seed=0):
    rng = np.random.default_rng(seed)
    N = 3
    t = np.arange(T)
    base = 0.5 + 0.4 * np.sin(2 * np.pi * t / 20)[:, None, None]
    M = np.clip(base + 0.02 * rng.normal(size=(T, N, 2)), 0, 1)
    L = np.clip(base[..., :1] * 0.5 + 0.02 * rng.normal(size=(T, N, 2)), 0, 1)
    A = np.array([[1, 1, 0], [0, 1, 1], [0, 0, 1]])
    S = np.clip(base[..., None] * A[None, ..., None] + 0.01 * rng.normal(size=(T, N, N, 1)), 0, None)
    labels = -np.ones((T, N), dtype=int)
    labels[::3] = 0
    spike = rng.random((T, N)) < 0.05
    M[spike, 0] = 1.0
    labels[spike] = 1
    s = TelemetrySeries(t, ["a", "b", "c"], ["r"], M, L, S * A[None, ..., None])
    g = gr.build_graphs(s, A)
    k = 4
    tr_e, va_e, te_e = gr.split_ends(T, k)
    full = gr.WindowDataset(g, labels, k, np.arange(k - 1, T))
    return A, full.subset(tr_e), full.subset(va_e)


def tiny_model(A, **kw):
    cfg = ModelConfig(n_instances=3, n_metrics=2, n_log_features=2, n_request_types=1, window=4, d_model=8,
                      heads=2, encoder_layers=1, decoder_layers=1, dropout=0.1, seed=0, **kw)
    return TwinGraphModel(cfg, A)


def test_training_reduces_reconstruction_loss(tmp_path):
    A, train_ds, val_ds = tiny_dataset()
    n_a, n_n = tr.class_counts(train_ds.window_labels())
    cfg = tr.LossConfig(n_a=n_a, n_n=n_n, max_epochs=6, patience=10, lr=3e-3, batch_size=25)
    model = tiny_model(A)
    before = tr.evaluate_loss(model, train_ds, cfg, 1.0)
    res = tr.train(model, train_ds, val_ds, cfg, tmp_path / "history.csv")
    after = tr.evaluate_loss(model, train_ds, cfg, 1.0)
    assert after < before
    assert res.epochs_run == 6 and 1 <= res.best_epoch <= 6
    hist = tr.read_history(tmp_path / "history.csv")
    assert [h.epoch for h in hist] == list(range(1, 7))
    assert hist[1].lr == pytest.approx(3e-3 * 0.9)
    # the returned model carries the best-validation weights
    assert min(h.val_loss for h in hist) == pytest.approx(hist[res.best_epoch - 1].val_loss)
    assert tr.evaluate_loss(model, val_ds, cfg, cfg.val_blend) == pytest.approx(hist[res.best_epoch - 1].val_loss)


def test_training_is_deterministic():
    A, train_ds, val_ds = tiny_dataset(T=80)
    cfg = tr.LossConfig(n_a=1, n_n=10, max_epochs=2, batch_size=16)
    runs = []
    for _ in range(2):
        m = tiny_model(A)
        tr.train(m, train_ds, val_ds, cfg)
        runs.append(m.state_dict())
    assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])


def test_detached_classifier_leaves_reconstruction_untouched_by_l2():
    A, train_ds, _ = tiny_dataset(T=60)
    M, L, S, y = train_ds.batch(np.arange(8))
    y = y.copy()
    y[:, 0] = 1
    model = tiny_model(A, dtype="float64").eval()
    cfg = tr.LossConfig(detach_classifier=True, n_a=1, n_n=1)
    _, _, _, l2, has = tr.forward_losses(model, M, L, S, y, cfg)
    assert has
    tc.backward(l2)
    grads = {n: p.grad for n, p in model.named_parameters()}
    assert all(g is None or not np.any(g) for n, g in grads.items()
               if not n.startswith(("head.hidden", "head.out")))
    assert np.any(grads["head.hidden.weight"])


def test_training_empty_set_rejected():
    A, train_ds, val_ds = tiny_dataset(T=40)
    with pytest.raises(ValueError):
        tr.train(tiny_model(A), train_ds.subset([]), val_ds, tr.LossConfig())
