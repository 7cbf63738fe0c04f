import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from templar import synth
from templar.embed_train import (
    TrainConfig,
    Triplet,
    batch_loss_and_grad,
    check_triplet,
    count_triplets,
    embed,
    generate_triplets,
    init_embedding,
    load_embedding,
    save_embedding,
    sgd_step,
    train_embedding,
    triplet_losses,
)
from templar.errors import DimMismatch, InsufficientClasses


def test_three_labels_two_triplets():
    labels = ["A", "A", "B"]
    assert count_triplets(labels) == 2
    got = generate_triplets(labels, 100, seed=0)
    assert {(t.anchor, t.positive, t.negative) for t in got} == {(0, 1, 2), (1, 0, 2)}


def test_single_class_rejected():
    with pytest.raises(InsufficientClasses):
        generate_triplets(["x"] * 5, 10)
    with pytest.raises(InsufficientClasses):
        generate_triplets(["a", "b", "c"], 10)  # no class with two samples


@pytest.mark.parametrize("budget", [10, 1000, 10_000])
def test_generation_invariants(budget):
    labels = [c for c in range(5) for _ in range(10)]
    a = generate_triplets(labels, budget, seed=3)
    b = generate_triplets(labels, budget, seed=3)
    assert a == b
    assert len(a) == min(budget, count_triplets(labels))
    assert len(set(a)) == len(a)
    assert all(check_triplet(t, labels) for t in a)


def test_embed_basics():
    X = np.random.default_rng(0).normal(size=(4, 6))
    np.testing.assert_array_equal(embed(np.eye(6), X), X)
    assert np.all(embed(np.zeros((6, 3)), X) == 0)
    W = np.random.default_rng(1).normal(size=(6, 3))
    ref = [[sum(W[m, j] * X[i, m] for m in range(6)) for j in range(3)] for i in range(4)]
    np.testing.assert_allclose(embed(W, X), ref, atol=1e-12)
    with pytest.raises(DimMismatch):
        embed(W, np.zeros(5))


def test_embed_linear():
    rng = np.random.default_rng(2)
    W = rng.normal(size=(8, 3))
    x, y = rng.normal(size=(2, 8))
    np.testing.assert_allclose(embed(W, 2 * x - 3 * y), 2 * embed(W, x) - 3 * embed(W, y), atol=1e-12)


def _numeric_grad(f, W, h=1e-5):
    g = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        Wp, Wm = W.copy(), W.copy()
        Wp[idx] += h
        Wm[idx] -= h
        g[idx] = (f(Wp) - f(Wm)) / (2 * h)
    return g


@pytest.mark.parametrize("normalize", [False, True])
@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_difference(normalize, seed):
    rng = np.random.default_rng(seed)
    M, n, m = 7, 3, 6
    W = rng.normal(size=(M, n))
    A, P, N = rng.normal(size=(3, m, M))
    margin = 0.5
    loss, grad = batch_loss_and_grad(W, A, P, N, margin, normalize)
    # stay away from the hinge kink; a mix of active and inactive triplets is fine
    raw = triplet_losses(W, A, P, N, margin + 1e3, normalize) - 1e3
    assert np.all(np.abs(raw) > 1e-3)
    num = _numeric_grad(lambda V: batch_loss_and_grad(V, A, P, N, margin, normalize)[0], W)
    assert np.max(np.abs(grad - num)) <= 1e-4 * max(1.0, np.max(np.abs(num)))


def test_unnormalized_gradient_closed_form():
    rng = np.random.default_rng(9)
    W = rng.normal(size=(5, 2))
    a, p, n = rng.normal(size=(3, 5))
    _, grad = batch_loss_and_grad(W, a[None], p[None], n[None], 100.0, normalize=False)
    ea, ep, en = a @ W, p @ W, n @ W
    ref = 2 * (np.outer(a - p, ea - ep) - np.outer(a - n, ea - en))
    np.testing.assert_allclose(grad, ref, atol=1e-10)


def test_inactive_triplet_leaves_w_unchanged():
    X = np.array([[1.0, 0.0], [1.0, 0.01], [-1.0, 0.0]])
    W = np.eye(2)
    new, loss = sgd_step(W, X, [Triplet(0, 1, 2)], lr=0.5, margin=0.1, normalize=False)
    assert loss == 0.0
    np.testing.assert_array_equal(new, W)
    new, _ = sgd_step(W, X, [Triplet(0, 2, 1)], lr=0.0, margin=0.1, normalize=False)
    np.testing.assert_array_equal(new, W)


def test_zero_epochs_returns_init():
    rng = np.random.default_rng(4)
    X, y = synth.clustered_descriptors(rng, 2, 5, 6, 0.1, 1.0)
    W0 = init_embedding(6, 3, seed=11)
    W = train_embedding(X, y, TrainConfig(epochs=0, embed_dim=3), init=W0)
    np.testing.assert_array_equal(W, W0)


def test_training_is_deterministic_and_nonnegative():
    rng = np.random.default_rng(5)
    X, y = synth.clustered_descriptors(rng, 3, 10, 8, 0.2, 1.0)
    cfg = TrainConfig(epochs=3, embed_dim=4, triplets_per_epoch=300, batch_size=16, seed=7)
    t1, t2 = [], []
    W1 = train_embedding(X, y, cfg, loss_trace=t1)
    W2 = train_embedding(X, y, cfg, loss_trace=t2)
    assert W1.tobytes() == W2.tobytes() and t1 == t2
    assert all(loss >= 0 for _, loss in t1)


def test_train_rejects_bad_input():
    with pytest.raises(DimMismatch):
        train_embedding(np.zeros((3, 4)), [0, 0])
    with pytest.raises(InsufficientClasses):
        train_embedding(np.zeros((3, 4)), [0, 0, 0], TrainConfig(embed_dim=2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 3.0), st.booleans())
def test_loss_is_nonnegative(seed, margin, normalize):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(4, 2))
    A, P, N = rng.normal(size=(3, 5, 4))
    assert np.all(triplet_losses(W, A, P, N, margin, normalize) >= 0)


def test_embedding_roundtrip(tmp_path):
    W = init_embedding(20, 5, seed=1)
    save_embedding(W, tmp_path / "e.tmpl")
    assert load_embedding(tmp_path / "e.tmpl").tobytes() == W.tobytes()
    assert np.all(np.abs(W) <= 1 / np.sqrt(20))


def test_epoch_loss_drops_on_clusters():
    X, y = synth.clustered_descriptors(np.random.default_rng(6), 2, 100, 16, 0.05, 1.0)
    cfg = TrainConfig(epochs=10, learning_rate=1.0, triplets_per_epoch=2000, batch_size=8, embed_dim=4, normalize=False)
    trace = []
    train_embedding(X, y, cfg, loss_trace=trace)
    assert [e for e, _ in trace] == list(range(1, 11))
    assert trace[9][1] < trace[0][1]
