from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_diff, random_unit, rel_err
from repspace import contrastive, synthetic
from repspace.contrastive import Model, NegativeQueue, TrainConfig, TrainDivergedError
from repspace.numerics import CheckpointError, init_mlp


def _unit(rng, d):
    return random_unit(rng, 1, d)[0]


def _instance(seed, k=8, d=6):
    rng = np.random.default_rng(seed)
    return _unit(rng, d), _unit(rng, d), random_unit(rng, k, d)


# --- losses --------------------------------------------------------------------------

def test_info_nce_uniform_similarities():
    q = np.array([1.0, 0.0])
    loss, _ = contrastive.info_nce(q, q, np.tile(q, (3, 1)), tau=0.5)
    assert loss == pytest.approx(math.log(4))


def test_info_nce_closed_form():
    s = np.array([1.0, 0.0, 0.0])
    loss, _ = contrastive.info_nce_from_similarities(s, 1.0)
    assert loss == pytest.approx(math.log(1 + 2 / math.e))
    q = np.array([1.0, 0.0, 0.0])
    loss2, _ = contrastive.info_nce(q, q, np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]), 1.0)
    assert loss2 == pytest.approx(loss)


def test_loss_input_errors():
    q, k, negs = _instance(0)
    with pytest.raises(ValueError, match="temperature"):
        contrastive.info_nce(q, k, negs, 0.0)
    with pytest.raises(ValueError, match="unit"):
        contrastive.info_nce(2 * q, k, negs, 0.1)
    with pytest.raises(ValueError, match="unit"):
        contrastive.simple_loss(q, k, 2 * negs, 0.1)
    with pytest.raises(ValueError, match="empty"):
        contrastive.triplet_loss(q, k, np.zeros((0, len(q))))
    with pytest.raises(ValueError):
        contrastive.seed_distill_loss(q, k, negs, 0.1, -1.0)


@pytest.mark.parametrize("seed", range(10))
def test_similarity_gradients_match_fd(seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1, 1, 9)
    t = rng.uniform(-1, 1, 9)
    tau = rng.uniform(0.05, 1.0)
    _, g = contrastive.info_nce_from_similarities(s, tau)
    fd = central_diff(lambda: contrastive.info_nce_from_similarities(s, tau)[0], s)
    np.testing.assert_allclose(g, fd, atol=1e-6)
    _, g = contrastive.seed_distill_from_similarities(s, t, tau, 0.2)
    fd = central_diff(lambda: contrastive.seed_distill_from_similarities(s, t, tau, 0.2)[0], s)
    np.testing.assert_allclose(g, fd, atol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_info_nce_gradient_identities(seed):
    q, k, negs = _instance(seed)
    tau = 0.07 + seed * 0.1
    _, g = contrastive.info_nce(q, k, negs, tau)
    s = contrastive.similarities(q, k, negs)
    p = np.exp(s / tau) / np.exp(s / tau).sum()
    assert g[0] == pytest.approx((p[0] - 1) / tau, rel=1e-12)
    assert g[0] <= 0
    assert g[1:].sum() == pytest.approx((1 - p[0]) / tau, rel=1e-12)
    assert abs(g.sum()) < 1e-12 * np.abs(g).sum()
    # tau * grad is a function of the softmax only
    np.testing.assert_allclose(tau * g, p - np.eye(len(s))[0], atol=1e-12)


def test_simple_and_triplet_examples():
    q, k, negs = _instance(1)
    s = contrastive.similarities(q, k, negs)
    assert contrastive.simple_loss(q, k, negs, 0.0)[0] == pytest.approx(-s[0])
    e = np.eye(4)
    assert contrastive.simple_loss(e[0], e[1], e[2:], 0.5)[0] == 0.0
    # positive more similar than every negative: zero loss and gradient
    loss, g = contrastive.triplet_loss(e[0], e[0], e[1:])
    assert loss == 0 and not g.any()
    pos = np.array([0.5, 0.0, math.sqrt(0.75), 0.0])
    loss, g = contrastive.triplet_loss(e[0], pos, np.array([[0.8, 0.6, 0.0, 0.0], e[3]]))
    assert loss == pytest.approx(0.3)
    np.testing.assert_array_equal(g, [-1.0, 1.0, 0.0])


def test_large_temperature_matches_simple_loss_direction():
    for seed in range(10):
        q, k, negs = _instance(seed, k=8)
        _, g = contrastive.info_nce(q, k, negs, 100.0)
        _, gs = contrastive.simple_loss(q, k, negs, 1 / 8)
        cos = g @ gs / np.linalg.norm(g) / np.linalg.norm(gs)
        assert rel_err(g / np.linalg.norm(g), gs / np.linalg.norm(gs)) < 0.01
        assert cos > 0.9999


def test_small_temperature_concentrates_on_hardest_negative():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        s = np.concatenate([[0.0], rng.uniform(-1, 0.9, 8)])
        # hardest negative clears the runner-up by 0.05 (>> tau * ln 1e6)
        hard = 1 + rng.integers(8)
        s[hard] = np.delete(s[1:], hard - 1).max() + 0.05
        s[0] = s[hard] - rng.uniform(0.01, 0.5)
        _, g = contrastive.info_nce_from_similarities(s, 0.001)
        assert hard == 1 + np.argmax(s[1:])
        mass = np.abs(g) / np.abs(g).sum()
        assert mass.sum() - mass[0] - mass[hard] < 1e-6
    s = np.array([0.9, 0.2, 0.1])
    assert contrastive.info_nce_from_similarities(s, 0.001)[0] < 1e-12


def test_seed_distill_gibbs():
    q, _, negs = _instance(3)
    h_loss, g = contrastive.seed_distill_loss(q, q, negs, 0.2)
    s = contrastive.similarities(q, q, negs)
    p_t = np.exp(s / 0.2) / np.exp(s / 0.2).sum()
    assert h_loss == pytest.approx(contrastive.entropy(p_t), rel=1e-12)
    np.testing.assert_allclose(g, 0.0, atol=1e-12)
    for seed in range(20):
        student = _unit(np.random.default_rng(100 + seed), 6)
        assert contrastive.seed_distill_loss(student, q, negs, 0.2)[0] >= h_loss - 1e-12


def test_seed_teacher_path_is_gradient_free():
    rng = np.random.default_rng(4)
    s_q, t_q = random_unit(rng, 5, 6), random_unit(rng, 5, 6)
    negs = random_unit(rng, 16, 6)
    _, ds = contrastive.seed_distill_batch(s_q, t_q, negs, 0.2, 0.1)
    # FD through the unconstrained student outputs (negatives held fixed)
    fd = central_diff(lambda: contrastive.seed_distill_batch(s_q, t_q, negs, 0.2, 0.1)[0], s_q)
    assert rel_err(ds, fd) < 1e-6
    t2 = random_unit(rng, 5, 6)
    loss_a = contrastive.seed_distill_batch(s_q, t_q, negs, 0.2, 0.1)[0]
    loss_b, ds_b = contrastive.seed_distill_batch(s_q, t2, negs, 0.2, 0.1)
    assert loss_a != loss_b
    fd_b = central_diff(lambda: contrastive.seed_distill_batch(s_q, t2, negs, 0.2, 0.1)[0], s_q)
    assert rel_err(ds_b, fd_b) < 1e-6


def test_info_nce_batch_matches_single_sample():
    rng = np.random.default_rng(5)
    q, k, negs = random_unit(rng, 4, 6), random_unit(rng, 4, 6), random_unit(rng, 8, 6)
    loss, dq, _ = contrastive.info_nce_batch(q, k, negs, 0.3)
    singles = [contrastive.info_nce(q[i], k[i], negs, 0.3) for i in range(4)]
    assert loss == pytest.approx(np.mean([s[0] for s in singles]))
    for i, (_, g) in enumerate(singles):
        np.testing.assert_allclose(dq[i] * 4, g[0] * k[i] + g[1:] @ negs, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_model_composition_gradients_match_fd(seed):
    rng = np.random.default_rng(seed)
    model = contrastive.init_model(5, (7, 4), (6, 3), rng)
    for mlp in model.mlps():
        for layer in mlp.layers:
            layer.bias[:] = rng.normal(0, 0.1, layer.bias.shape)
    x = rng.normal(size=(6, 5))
    k, negs = random_unit(rng, 6, 3), random_unit(rng, 8, 3)

    def loss():
        q, _ = contrastive.model_forward(model, x)
        return contrastive.info_nce_batch(q, k, negs, 0.2)[0]

    q, tape = contrastive.model_forward(model, x)
    _, dq, _ = contrastive.info_nce_batch(q, k, negs, 0.2)
    grads, dx = contrastive.model_backward(tape, dq)
    for mlp_grads, mlp in zip(grads, model.mlps()):
        for (dw, db), layer in zip(mlp_grads, mlp.layers):
            assert rel_err(dw, central_diff(loss, layer.weight)) < 1e-4
            assert rel_err(db, central_diff(loss, layer.bias)) < 1e-4
    assert rel_err(dx, central_diff(loss, x)) < 1e-4


# --- queue ------------------------------------------------------------------------------

def test_queue_examples():
    rng = np.random.default_rng(6)
    q = NegativeQueue(8, 3)
    keys = random_unit(rng, 12, 3)
    q.enqueue(keys[:4])
    assert len(q) == 4
    np.testing.assert_array_equal(q.entries(), keys[:4])
    q.enqueue(keys[4:8])
    assert q.full
    np.testing.assert_array_equal(q.entries(), keys[:8])
    q.enqueue(keys[8:])
    assert len(q) == 8
    np.testing.assert_array_equal(q.entries(), keys[4:])
    with pytest.raises(ValueError):
        q.enqueue(2 * keys[:1])
    with pytest.raises(ValueError):
        q.enqueue(random_unit(rng, 9, 3))


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 12), st.lists(st.integers(1, 12), max_size=15), st.integers(0, 2**31))
def test_queue_matches_list_model(capacity, batches, seed):
    rng = np.random.default_rng(seed)
    q = NegativeQueue(capacity, 2)
    model: list[np.ndarray] = []
    for b in batches:
        b = min(b, capacity)
        keys = random_unit(rng, b, 2)
        q.enqueue(keys)
        model = (model + list(keys))[-capacity:]
        assert len(q) == len(model) <= capacity
    expected = np.array(model).reshape(-1, 2)
    np.testing.assert_array_equal(q.entries(), expected)


def test_losses_do_not_mutate_queue():
    rng = np.random.default_rng(7)
    queue = NegativeQueue(8, 4).enqueue(random_unit(rng, 8, 4))
    before = queue.entries()
    q, k = _unit(rng, 4), _unit(rng, 4)
    contrastive.info_nce(q, k, queue, 0.1)
    contrastive.seed_distill_loss(q, k, queue, 0.1)
    np.testing.assert_array_equal(queue.entries(), before)


# --- momentum -----------------------------------------------------------------------

def _pair(seed):
    rng = np.random.default_rng(seed)
    return (contrastive.init_model(4, (5, 3), (3,), rng), contrastive.init_model(4, (5, 3), (3,), rng))


def test_momentum_examples():
    key, query = _pair(0)
    k0 = key.copy()
    contrastive.momentum_update(key, query, 1.0)
    assert key.equals(k0)
    contrastive.momentum_update(key, query, 0.0)
    assert key.equals(query)
    one = Model(init_mlp([1, 1], np.random.default_rng(0)))
    one.encoder.layers[0].weight[:] = 1.0
    zero = one.copy()
    zero.encoder.layers[0].weight[:] = 0.0
    contrastive.momentum_update(one, zero, 0.999)
    assert one.encoder.layers[0].weight[0, 0] == 0.999


@pytest.mark.parametrize("m", [0.5, 0.9, 0.99, 0.999])
def test_momentum_contraction(m):
    key, query = _pair(1)
    dist = lambda a, b: np.sqrt(sum(np.sum((x - y) ** 2) for x, y in zip(a.arrays(), b.arrays())))
    before = dist(key, query)
    contrastive.momentum_update(key, query, m)
    assert dist(key, query) == pytest.approx(m * before, rel=1e-12)


# --- model checkpoints -------------------------------------------------------------------

def test_model_checkpoint_round_trip(tmp_path):
    model, _ = _pair(2)
    model.save(tmp_path / "m.rlns")
    back = Model.load(tmp_path / "m.rlns")
    assert back.equals(model)
    assert back.to_bytes() == model.to_bytes()
    data = model.to_bytes()
    with pytest.raises(CheckpointError):
        Model.from_bytes(data + data[:30])
    with pytest.raises(CheckpointError):
        Model.from_bytes(data * 3)
    encoder_only = Model(model.encoder)
    assert Model.from_bytes(encoder_only.to_bytes()).projector is None


# --- training ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def train_ds():
    return synthetic.generate(synthetic.DatasetSpec(), "train")


SMALL = TrainConfig(encoder_widths=(16, 8), epochs=3)


def test_config_validation():
    assert SMALL.errors(1000) == []
    errs = TrainConfig(temperature=-1, queue_size=100, batch_size=64).errors(1000)
    assert any("temperature" in e for e in errs)
    assert any("multiple" in e for e in errs)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=2048, queue_size=2048).validate(1000)


def test_zero_lr_leaves_params_and_fills_queue(train_ds):
    cfg = contrastive.with_overrides(SMALL, epochs=1, lr=0.0)
    result = contrastive.train(train_ds, cfg, seed=0)
    init = contrastive.fresh_model(train_ds.dim, cfg, 0)
    assert result.model.equals(init)
    assert result.queue.full
    assert len(result.stats) == 1


def test_training_is_deterministic(train_ds):
    a = contrastive.train(train_ds, SMALL, seed=4)
    b = contrastive.train(train_ds, SMALL, seed=4)
    assert a.model.to_bytes() == b.model.to_bytes()
    assert a.stats == b.stats
    c = contrastive.train(train_ds, SMALL, seed=5)
    assert c.model.to_bytes() != a.model.to_bytes()


@pytest.mark.parametrize("seed", range(3))
def test_loss_moving_average_decreases(train_ds, seed):
    cfg = contrastive.with_overrides(SMALL, epochs=20)
    losses = np.array([s.loss for s in contrastive.train(train_ds, cfg, seed).stats])
    ma = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(ma) < 0)


def test_divergence_reports_epoch_and_step(train_ds):
    cfg = contrastive.with_overrides(SMALL, lr=1e300, epochs=2)
    with pytest.raises((TrainDivergedError, FloatingPointError)) as info:
        with np.errstate(all="ignore"):
            contrastive.train(train_ds, cfg, 0)
    if isinstance(info.value, TrainDivergedError):
        assert info.value.epoch >= 0 and info.value.step >= 0


def test_train_rejects_mismatched_init(train_ds):
    bad = contrastive.init_model(5, (4,), (3,), np.random.default_rng(0))
    with pytest.raises(ValueError):
        contrastive.train(train_ds, SMALL, 0, init=bad)


def test_distill_zero_epochs_is_fresh_init(train_ds):
    teacher = contrastive.train(train_ds, SMALL, 1).model
    student = contrastive.distill_init(train_ds, teacher, 0, SMALL, seed=9)
    assert student.equals(contrastive.fresh_model(train_ds.dim, SMALL, 9))


def test_distill_identical_teacher_starts_at_entropy(train_ds):
    cfg = contrastive.with_overrides(SMALL, lr=0.0)
    student = contrastive.fresh_model(train_ds.dim, cfg, 3)
    x = train_ds.features[:64]
    out, _ = contrastive.model_forward(student, x)
    negs = random_unit(np.random.default_rng(0), cfg.queue_size, student.out_width)
    loss, ds = contrastive.seed_distill_batch(out, out, negs, 0.1, 0.1)
    logits = np.hstack([np.ones((64, 1)), out @ negs.T]) / 0.1
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    assert loss == pytest.approx(np.mean([contrastive.entropy(r) for r in p]), rel=1e-12)
    np.testing.assert_allclose(ds, 0.0, atol=1e-12)


def test_distill_errors(train_ds):
    teacher = contrastive.init_model(train_ds.dim, (16, 8), (64, 16), np.random.default_rng(0))
    with pytest.raises(ValueError, match="output dim"):
        contrastive.distill_init(train_ds, teacher, 1, SMALL, 0)
    with pytest.raises(ValueError):
        contrastive.distill_init(train_ds, teacher, -1, SMALL, 0)


def test_distilled_student_moves_toward_teacher(train_ds):
    teacher = contrastive.train(train_ds, SMALL, 1).model
    cfg = contrastive.with_overrides(SMALL, lr=0.01)
    x = train_ds.features[:200]
    t, _ = contrastive.model_forward(teacher, x)
    negs = random_unit(np.random.default_rng(0), 256, t.shape[1])

    def gap(student):
        s, _ = contrastive.model_forward(student, x)
        return contrastive.seed_distill_batch(s, t, negs, 0.1, 0.1)[0]

    s0 = contrastive.distill_init(train_ds, teacher, 0, cfg, 2)
    s3 = contrastive.distill_init(train_ds, teacher, 3, cfg, 2)
    assert gap(s3) < gap(s0)


def _shortcut_r2(model, train, val):
    """Held-out R^2 of a least-squares map from embeddings to the shortcut coordinates."""
    latent = train.layout.latent_dim

    def design(ds):
        h = model.embed(ds.features)
        return np.hstack([h, np.ones((len(h), 1))]), ds.layout.intrinsic(ds.features)[:, latent:]

    x, y = design(train)
    xv, yv = design(val)
    w = np.linalg.lstsq(x, y, rcond=None)[0]
    return 1 - np.sum((xv @ w - yv) ** 2) / np.sum((yv - yv.mean(axis=0)) ** 2)


@pytest.mark.parametrize("seed", range(3))
def test_strong_augmentation_hides_the_shortcut(seed):
    spec = synthetic.DatasetSpec()
    train, val = synthetic.generate(spec, "train"), synthetic.generate(spec, "val")
    base = TrainConfig(encoder_widths=(16, 8))
    plain = contrastive.train(train, base, seed).model
    strong = contrastive.train(train, contrastive.with_overrides(base, aug=synthetic.aug_preset("aug+")), seed).model
    assert _shortcut_r2(strong, train, val) < _shortcut_r2(plain, train, val)
