import filecmp
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import composite_instance, composite_terms, gradcheck, relu_margin
from stylecl import data as D
from stylecl.continual import (NEW_INTO_U, PAST_INTO_U, TrainConfig, ce_loss, exemplar_violations,
                               fuse_pseudo_labels, group_logits, group_new_into_u,
                               group_past_into_u, kd_loss, lws_loss, pseudo_label, run_protocol,
                               train_step)
from stylecl.errors import ConfigError, LabelError, ProtocolError
from stylecl.model import backward, expand_head, forward, freeze, init_model, softmax
from stylecl.style import StyleBank, bank_add, extract_style

WIDE = D.ClassSchedule(((1, 2), (3, 4, 5, 6)))
LAYOUT7 = [0, 1, 2, 3, 4, 5, 6]


def uniform(c, shape=(2, 2)):
    return np.full(shape + (c,), 1.0 / c)


def random_probs(rng, shape, c):
    z = rng.standard_normal(shape + (c,)) * 3
    return softmax(z)


# --- grouping ----------------------------------------------------------------

def test_past_into_u_uniform_seven():
    g = group_past_into_u(uniform(7), LAYOUT7, WIDE, 1)
    assert g.layout == [0, 3, 4, 5, 6]
    np.testing.assert_allclose(g.probs[0, 0], [3 / 7] + [1 / 7] * 4)


def test_new_into_u_uniform_seven():
    g = group_new_into_u(uniform(7), LAYOUT7, WIDE, 1)
    assert g.layout == [0, 1, 2]
    np.testing.assert_allclose(g.probs[0, 0], [5 / 7, 1 / 7, 1 / 7])


def test_step_zero_groupings():
    p = random_probs(np.random.default_rng(0), (3, 3), 3)
    ident = group_past_into_u(p, [0, 1, 2], D.DEFAULT_SCHEDULE, 0)
    np.testing.assert_array_equal(ident.probs, p)
    collapsed = group_new_into_u(p, [0, 1, 2], D.DEFAULT_SCHEDULE, 0)
    assert collapsed.probs.shape[-1] == 1
    np.testing.assert_allclose(collapsed.probs, 1.0, atol=1e-12)


def test_groupings_partition_real_classes():
    p = random_probs(np.random.default_rng(1), (4, 4), 7)
    a = group_past_into_u(p, LAYOUT7, WIDE, 1)
    b = group_new_into_u(p, LAYOUT7, WIDE, 1)
    assert not set(a.layout[1:]) & set(b.layout[1:])
    assert set(a.layout[1:]) | set(b.layout[1:]) == set(LAYOUT7[1:])
    assert np.all(a.probs[..., 0] >= p[..., 0]) and np.all(b.probs[..., 0] >= p[..., 0])


def test_grouping_layout_mismatch():
    with pytest.raises(ProtocolError):
        group_past_into_u(uniform(3), [0, 1, 2], D.DEFAULT_SCHEDULE, 1)
    with pytest.raises(ProtocolError):
        group_new_into_u(uniform(5), [0, 1, 3, 2, 9], D.DEFAULT_SCHEDULE, 1)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), t=st.integers(0, 2),
       mode=st.sampled_from([PAST_INTO_U, NEW_INTO_U]))
def test_grouping_conserves_mass(seed, t, mode):
    sched = D.DEFAULT_SCHEDULE
    layout = [0] + list(sched.seen_classes(t))
    z = np.random.default_rng(seed).standard_normal((5, 5, len(layout))) * 5
    g = group_logits(z, layout, sched, t, mode)
    np.testing.assert_allclose(g.probs.sum(-1), 1.0, atol=1e-6)
    fn = group_past_into_u if mode == PAST_INTO_U else group_new_into_u
    np.testing.assert_allclose(fn(softmax(z), layout, sched, t).probs, g.probs, atol=1e-12)


def test_group_logits_extreme_values_finite():
    z = np.array([[[0.0, 2000.0, -2000.0, 10.0, -10.0]]])
    g = group_logits(z, [0, 1, 2, 3, 4], D.DEFAULT_SCHEDULE, 1, NEW_INTO_U)
    assert np.all(np.isfinite(g.log_probs))
    assert g.log_probs[0, 0, 2] == pytest.approx(-4000.0)


# --- losses ------------------------------------------------------------------

def test_ce_perfect_and_uniform():
    layout = [0, 1, 2]
    z = np.full((3, 3, 3), -50.0)
    z[..., 1] = 50.0
    g = group_logits(z, layout, D.DEFAULT_SCHEDULE, 0, PAST_INTO_U)
    loss, _ = ce_loss(g, np.ones((3, 3), np.uint8))
    assert loss < 1e-5
    g = group_logits(np.zeros((3, 3, 3)), layout, D.DEFAULT_SCHEDULE, 0, PAST_INTO_U)
    loss, _ = ce_loss(g, np.full((3, 3), 2, np.uint8))
    assert loss == pytest.approx(np.log(3), abs=1e-6)
    # uniform sources: a singleton new channel keeps 1/5 after grouping
    g = group_logits(np.zeros((3, 3, 5)), [0, 1, 2, 3, 4], D.DEFAULT_SCHEDULE, 1, PAST_INTO_U)
    assert ce_loss(g, np.full((3, 3), 3, np.uint8))[0] == pytest.approx(np.log(5), abs=1e-6)


def test_ce_ignores_255_and_rejects_foreign_labels():
    g = group_logits(np.zeros((2, 2, 3)), [0, 1, 2], D.DEFAULT_SCHEDULE, 0, PAST_INTO_U)
    loss, dz = ce_loss(g, np.full((2, 2), 255, np.uint8))
    assert loss == 0 and np.all(dz == 0)
    with pytest.raises(LabelError):
        ce_loss(g, np.full((2, 2), 4, np.uint8))


def test_lws_all_ignore_and_self_consistent():
    z = np.random.default_rng(0).standard_normal((4, 4, 5))
    g = group_logits(z, [0, 1, 2, 3, 4], D.DEFAULT_SCHEDULE, 1, NEW_INTO_U)
    loss, dz = lws_loss(g, np.full((4, 4), 255, np.uint8))
    assert loss == 0 and np.all(dz == 0)
    sharp = np.full((4, 4, 5), -30.0)
    sharp[:2, :, 1] = 30.0
    sharp[2:, :, 2] = 30.0
    g = group_logits(sharp, [0, 1, 2, 3, 4], D.DEFAULT_SCHEDULE, 1, NEW_INTO_U)
    pseudo = np.array(g.layout)[np.argmax(g.probs, -1)].astype(np.uint8)
    assert lws_loss(g, pseudo)[0] < 1e-3
    with pytest.raises(ProtocolError):
        lws_loss(group_logits(sharp, [0, 1, 2, 3, 4], D.DEFAULT_SCHEDULE, 1, PAST_INTO_U), pseudo)


def test_kd_minimum_is_teacher_entropy():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((4, 4, 5))
    g = group_logits(z, [0, 1, 2, 3, 4], D.DEFAULT_SCHEDULE, 1, NEW_INTO_U)
    teacher = g.probs.copy()
    loss, _ = kd_loss(teacher, g)
    entropy = -np.sum(teacher * np.log(teacher)) / 16
    assert loss == pytest.approx(entropy, rel=1e-9)
    for _ in range(5):
        other = group_logits(z + rng.standard_normal(z.shape), [0, 1, 2, 3, 4],
                             D.DEFAULT_SCHEDULE, 1, NEW_INTO_U)
        assert kd_loss(teacher, other)[0] >= loss


def test_kd_one_hot_teacher_is_hard_ce():
    z = np.random.default_rng(4).standard_normal((3, 3, 5))
    g = group_logits(z, [0, 1, 2, 3, 4], D.DEFAULT_SCHEDULE, 1, NEW_INTO_U)
    labels = np.random.default_rng(5).choice([0, 1, 2], (3, 3)).astype(np.uint8)
    onehot = np.eye(3)[np.searchsorted([0, 1, 2], labels)]
    a, da = kd_loss(onehot, g)
    b, db = ce_loss(g, labels)
    assert a == pytest.approx(b, rel=1e-12)
    np.testing.assert_allclose(da, db, atol=1e-15)


def test_kd_channel_mismatch():
    g = group_logits(np.zeros((2, 2, 5)), [0, 1, 2, 3, 4], D.DEFAULT_SCHEDULE, 1, NEW_INTO_U)
    with pytest.raises(ProtocolError):
        kd_loss(uniform(5), g)
    with pytest.raises(ProtocolError):
        kd_loss(uniform(3), g, teacher_layout=[0, 2, 1])


@pytest.mark.parametrize("term", ["ce_n", "ce_o", "lws_n", "kd_o"])
def test_loss_gradients_through_model(term):
    student, teacher, xs, xo, labels, pseudo, sched = composite_instance(0)
    assert min(relu_margin(student, xs), relu_margin(student, xo)) > 0.05

    def loss_of(m):
        return composite_terms(m, teacher, xs, xo, labels, pseudo, sched)[term][0]

    _, dz, view = composite_terms(student, teacher, xs, xo, labels, pseudo, sched)[term]
    g = backward(student, [xs, xo][view], dz)
    assert gradcheck(student, loss_of, g) < 1e-4


def test_total_objective_gradient():
    student, teacher, xs, xo, labels, pseudo, sched = composite_instance(1)
    lam = {"ce_n": 1.0, "ce_o": 10.0, "lws_n": 10.0, "kd_o": 10.0}

    def total(m):
        return sum(lam[k] * v[0] for k, v in composite_terms(m, teacher, xs, xo, labels, pseudo,
                                                             sched).items())

    terms = composite_terms(student, teacher, xs, xo, labels, pseudo, sched)
    dl = np.zeros((2, 16, 16, student.num_channels))
    for k, (_, dz, view) in terms.items():
        dl[view] += lam[k] * dz
    g = backward(student, np.stack([xs, xo]), dl)
    assert gradcheck(student, total, g) < 1e-4


# --- pseudo-labels -------------------------------------------------------------

def test_pseudo_all_supervised_gives_all_u():
    probs = random_probs(np.random.default_rng(0), (1, 4, 4), 3)
    pl = fuse_pseudo_labels(probs, [0, 1, 2], np.full((4, 4), 3, np.uint8), 0.9, 0.66)
    assert np.all(pl.labels == D.UNKNOWN)


def test_pseudo_one_hot_single_style():
    probs = np.zeros((1, 4, 4, 3))
    probs[..., 2] = 1.0
    pl = fuse_pseudo_labels(probs, [0, 1, 2], np.zeros((4, 4), np.uint8), 0.9, 0.0)
    assert np.all(pl.labels == 2)


def test_pseudo_fusion_picks_highest_peak():
    probs = np.zeros((2, 1, 1, 3))
    probs[0, 0, 0] = [0.05, 0.95, 0.0]
    probs[1, 0, 0] = [0.1, 0.1, 0.8]
    pl = fuse_pseudo_labels(probs, [0, 1, 2], np.zeros((1, 1), np.uint8), 0.9, 0.0)
    assert pl.labels[0, 0] == 1 and pl.source_style[0, 0] == 0


def test_pseudo_ties_lowest_style_then_class():
    probs = np.zeros((2, 1, 2, 3))
    probs[0, 0, 0] = [0.0, 0.5, 0.5]
    probs[1, 0, 0] = [0.5, 0.0, 0.5]
    probs[:, 0, 1] = [0.2, 0.4, 0.4]
    pl = fuse_pseudo_labels(probs, [0, 1, 2], np.zeros((1, 2), np.uint8), 0.1, 0.0)
    assert pl.source_style.tolist() == [[0, 0]]
    assert pl.labels.tolist() == [[1, 1]]


def test_pseudo_topk_rescues_low_peaks():
    probs = np.zeros((1, 1, 4, 3))
    probs[0, 0, :, 1] = [0.6, 0.7, 0.5, 0.4]
    probs[0, 0, :, 0] = 1 - probs[0, 0, :, 1]
    pl = fuse_pseudo_labels(probs, [0, 1, 2], np.zeros((1, 4), np.uint8), 0.9, 0.5)
    # candidates are [1, 1, 0, 0] (pixel 2 ties to the lower id); each class keeps its top half
    assert pl.labels.tolist() == [[255, 1, 255, 0]]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), topk=st.sampled_from([0.0, 0.3, 0.66]))
def test_pseudo_never_labels_supervised_pixels(seed, topk):
    rng = np.random.default_rng(seed)
    probs = random_probs(rng, (2, 6, 6), 5)
    current = rng.choice([0, 5, 6, 255], (6, 6)).astype(np.uint8)
    pl = fuse_pseudo_labels(probs, [0, 1, 2, 3, 4], current, 0.7, topk)
    assert np.all(pl.labels[current != 0] == 0)
    assert set(np.unique(pl.labels)) <= {0, 1, 2, 3, 4, 255}


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_pseudo_tau_monotone(seed):
    rng = np.random.default_rng(seed)
    probs = random_probs(rng, (2, 8, 8), 3)
    current = np.zeros((8, 8), np.uint8)
    prev = None
    for tau in (0.5, 0.7, 0.9, 0.99):
        ignored = fuse_pseudo_labels(probs, [0, 1, 2], current, tau, 0.0).labels == 255
        if prev is not None:
            assert np.all(ignored[prev])
        prev = ignored


def _bank(images, steps, beta=0.01):
    bank = StyleBank(images[0].shape[0], images[0].shape[1], beta)
    for k in range(steps):
        bank = bank_add(bank, extract_style([images[k]], beta, k))
    return bank


def test_pseudo_label_requires_history():
    img = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
    teacher = freeze(init_model(0, 4, [1, 2]))
    with pytest.raises(ProtocolError):
        pseudo_label(teacher, img, _bank([img], 1), 0)
    with pytest.raises(ProtocolError):
        pseudo_label(teacher, img, StyleBank(32, 32, 0.01), 1)
    pl = pseudo_label(teacher, img, _bank([img], 1), 1)
    assert pl.labels.shape == (32, 32) and np.all(pl.source_style == 0)


# --- training loop ----------------------------------------------------------------

def _tiny_data(step, n, seed=3, size=32):
    sched = D.DEFAULT_SCHEDULE
    return D.make_split(D.DEFAULT_DOMAINS[step], D.train_seeds(seed, step, n),
                        sched.new_classes(step), size, size)


def test_step_zero_only_trains_ce_n():
    data = _tiny_data(0, 4)
    bank = _bank([data[0].image], 1)
    m = init_model(0, 4, [1, 2])
    cfg = TrainConfig(epochs=1, lr=0.01)
    _, trace = train_step(0, data, bank, None, m, cfg, D.DEFAULT_SCHEDULE)
    assert len(trace) == 4
    for r in trace:
        assert r.l_ce_o == 0 and r.l_lws_n == 0 and r.l_kd_o == 0 and r.l_ce_n > 0
        assert r.total == r.l_ce_n


def test_teacher_presence_checked():
    data = _tiny_data(0, 2)
    bank = _bank([data[0].image], 1)
    m = init_model(0, 4, [1, 2])
    with pytest.raises(ConfigError):
        train_step(0, data, bank, freeze(m), m, TrainConfig(epochs=1), D.DEFAULT_SCHEDULE)
    with pytest.raises(ProtocolError):
        train_step(0, data, StyleBank(32, 32, 0.01), None, m, TrainConfig(epochs=1),
                   D.DEFAULT_SCHEDULE)


def test_step_one_total_matches_weights():
    sched = D.DEFAULT_SCHEDULE
    d0, d1 = _tiny_data(0, 3), _tiny_data(1, 3)
    bank = _bank([d0[0].image, d1[0].image], 2)
    teacher = freeze(init_model(0, 4, [1, 2]))
    m = expand_head(teacher, [3, 4], seed=1)
    cfg = TrainConfig(epochs=1, lr=0.001, lambdas=(10.0, 10.0, 10.0))
    _, trace = train_step(1, d1, bank, teacher, m, cfg, sched)
    for r in trace:
        assert abs(r.total - (r.l_ce_n + 10 * r.l_ce_o + 10 * r.l_lws_n + 10 * r.l_kd_o)) < 1e-6
        assert r.l_kd_o > 0 and "lws_n" in r.valid_pixels


def test_ce_n_trace_decreases_on_small_set():
    data = _tiny_data(0, 10)
    bank = _bank([data[0].image], 1)
    m = init_model(2, 8, [1, 2])
    cfg = TrainConfig(epochs=12, lr=0.01)
    _, trace = train_step(0, data, bank, None, m, cfg, D.DEFAULT_SCHEDULE)
    per_epoch = np.array([np.mean([r.l_ce_n for r in trace if r.epoch == e]) for e in range(12)])
    smooth = np.convolve(per_epoch, np.ones(3) / 3, mode="valid")
    assert np.all(np.diff(smooth[3:]) <= 1e-9)


def test_cached_views_are_bit_identical():
    sched = D.DEFAULT_SCHEDULE
    d0, d1 = _tiny_data(0, 3), _tiny_data(1, 3)
    bank = _bank([d0[0].image, d1[0].image], 2)
    teacher = freeze(init_model(0, 4, [1, 2]))
    runs = []
    for cache in (False, True):
        m = expand_head(teacher, [3, 4], seed=1)
        m, _ = train_step(1, d1, bank, teacher, m, TrainConfig(epochs=2, lr=0.01, cache_views=cache),
                          sched)
        runs.append(m)
    for k in runs[0].params:
        assert np.array_equal(runs[0].params[k], runs[1].params[k])


def _protocol(tmp_path, name, steps=2, **kw):
    sched = D.ClassSchedule(D.DEFAULT_SCHEDULE.sets[:steps])
    cfg = TrainConfig(epochs=1, lr=0.01, **kw)
    log = D.AccessLog()
    res = run_protocol(sched, D.DEFAULT_DOMAINS[:steps], cfg, str(tmp_path / name), n_train=3,
                       n_eval=2, h=32, w=32, features=4, access_log=log,
                       data_dir=str(tmp_path / "data"))
    return res


def test_protocol_outputs_and_bank_growth(tmp_path):
    res = _protocol(tmp_path, "run")
    assert len(res.bank) == 2 and len(res.models) == 2
    assert res.models[1].channel_layout == [0, 1, 2, 3, 4]
    for f in ("step0.segc", "step1.segc", "styles.styb", "trace_step0.csv", "trace_step1.csv"):
        assert os.path.exists(tmp_path / "run" / f)
    assert exemplar_violations(res.access_log, res.train_dirs) == []
    assert {s for s, _ in res.access_log.records} == {0, 1}


def test_exemplar_audit_flags_late_reads(tmp_path):
    res = _protocol(tmp_path, "run")
    res.access_log.step = 1
    D.read_dataset(res.train_dirs[0], res.access_log.open)
    assert exemplar_violations(res.access_log, res.train_dirs)


def test_zero_lambdas_reproduce_self_style_baseline(tmp_path):
    a = _protocol(tmp_path, "zero", lambdas=(0.0, 0.0, 0.0))
    b = _protocol(tmp_path, "base", losses=frozenset({"ce_n"}))
    for ca, cb in zip(a.checkpoints, b.checkpoints):
        assert filecmp.cmp(ca, cb, shallow=False)


def test_single_step_protocol_is_supervised_training(tmp_path):
    res = _protocol(tmp_path, "one", steps=1)
    assert len(res.bank) == 1
    assert all(r.l_ce_o == r.l_kd_o == r.l_lws_n == 0 for r in res.traces)
