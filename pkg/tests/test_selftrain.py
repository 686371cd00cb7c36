import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from psumml.labels import BACKGROUND, ScenarioSpec
from psumml.model import SegNet, seg_forward, snapshot
from psumml.selftrain import SnapshotStore, assign_pseudo, ensemble_soft_label, modulate, snapshot_times

from conftest import random_probs

SC1 = ScenarioSpec.from_organs([1, 3], [2, 4])


def test_snapshot_times_examples():
    assert snapshot_times(500, 1000, 4) == [625, 750, 875, 1000]
    assert snapshot_times(0, 10, 1) == [10]
    assert snapshot_times(0, 10, 10) == list(range(1, 11))


@given(t0=st.integers(0, 5000), span=st.integers(1, 5000), K=st.integers(1, 64))
def test_snapshot_times_properties(t0, span, K):
    tK = t0 + span
    if span < K:
        with pytest.raises(ValueError):
            snapshot_times(t0, tK, K)
        return
    ts = snapshot_times(t0, tK, K)
    assert len(ts) == K and ts[-1] == tK
    assert all(t0 < a < b for a, b in zip(ts, ts[1:])) and ts[0] > t0


def test_snapshot_times_errors():
    for args in ((10, 10, 1), (10, 5, 1), (0, 10, 0)):
        with pytest.raises(ValueError):
            snapshot_times(*args)


def _store_with(nets, t0=0, tK=None):
    tK = tK or len(nets)
    store = SnapshotStore(t0, tK, len(nets))
    for net, t in zip(nets, store.times):
        store.maybe_capture(net, t)
    return store


def _const_net(channel, M=2):
    """Net whose output is (numerically exactly) one-hot on ``channel``."""
    net = SegNet(M, width=4).eval()
    with torch.no_grad():
        net.classifier.weight.zero_()
        net.classifier.bias.fill_(-100.0)
        net.classifier.bias[channel] = 100.0
    return net


def test_ensemble_requires_full_store():
    store = SnapshotStore(0, 10, 2)
    store.maybe_capture(_const_net(0), store.times[0])
    with pytest.raises(ValueError):
        ensemble_soft_label(store, _const_net(0), torch.rand(1, 1, 8, 8), "A")


def test_store_captures_only_scheduled_steps():
    store = SnapshotStore(0, 8, 2)
    net = _const_net(0)
    assert not store.maybe_capture(net, 3)
    assert store.maybe_capture(net, 4)
    assert not store.maybe_capture(net, 4)
    assert store.maybe_capture(net, 8) and store.full


def test_ensemble_identity_and_examples():
    x = torch.rand(2, 1, 8, 8)
    torch.manual_seed(0)
    net = SegNet(3, width=4).eval()
    one = seg_forward(net, x, "A")[1]
    assert torch.equal(ensemble_soft_label(_store_with([net]), net, x, "A"), one)
    assert torch.equal(ensemble_soft_label(_store_with([net] * 4), net, x, "A"), one)
    p = ensemble_soft_label(_store_with([_const_net(0), _const_net(1)]), _const_net(0), x, "A")
    assert torch.equal(p, torch.full_like(p, 0.5))


def test_ensemble_mean_and_convexity():
    x = torch.rand(2, 1, 8, 8)
    nets = []
    for s in range(4):
        torch.manual_seed(s)
        nets.append(SegNet(4, width=4).eval())
    outs = torch.stack([seg_forward(n, x, "B")[1] for n in nets])
    p = ensemble_soft_label(_store_with(nets), nets[0], x, "B")
    assert torch.allclose(p, outs.mean(0), atol=1e-6)
    assert torch.allclose(p.sum(1), torch.ones(2, 8, 8), atol=1e-5)
    assert (p >= outs.min(0).values - 1e-6).all() and (p <= outs.max(0).values + 1e-6).all()


def test_modulate_examples():
    c = torch.tensor([0.0, 1.0, 0.0]).view(1, 3, 1, 1)
    assert torch.equal(modulate(c, c), c)
    out = modulate(torch.tensor([0.8, 0.2]).view(1, 2, 1, 1), torch.tensor([0.9, 0.1]).view(1, 2, 1, 1))
    assert out.flatten().tolist() == pytest.approx([0.72, 0.02])
    u = torch.full((1, 5, 2, 2), 0.2)
    assert torch.allclose(modulate(u, u), torch.full_like(u, 1 / 25))
    with pytest.raises(ValueError):
        modulate(u, torch.full((1, 4, 2, 2), 0.25))


def test_modulate_reads_current_without_gradient():
    cur = torch.full((1, 2, 1, 1), 0.5, requires_grad=True)
    assert not modulate(cur, torch.full((1, 2, 1, 1), 0.5)).requires_grad


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_modulation_never_increases_confidence(seed):
    rng = np.random.default_rng(seed)
    cur, p = random_probs(rng, (1, 3, 3), 5), random_probs(rng, (1, 3, 3), 5)
    mx = modulate(cur, p).max(1).values
    assert (mx <= torch.minimum(cur.max(1).values, p.max(1).values) + 1e-15).all()


def _brute_assign(scores, partial, candidates, tau):
    n, _, h, w = scores.shape
    labels = np.zeros((n, h, w), dtype=np.int64)
    assigned = np.zeros((n, h, w), dtype=bool)
    for i in range(n):
        for y in range(h):
            for x in range(w):
                if partial[i, y, x] != BACKGROUND:
                    continue
                best_c, best_v = None, -1.0
                for c in sorted(candidates):
                    v = float(scores[i, c, y, x])
                    if v > best_v:
                        best_c, best_v = c, v
                if best_v > tau:
                    labels[i, y, x], assigned[i, y, x] = best_c, True
    return labels, assigned


def test_assign_examples(scenario1):
    s = torch.zeros(1, 5, 1, 1, dtype=torch.float64)
    s[0, 0], s[0, 2] = 0.1, 0.72
    pm = assign_pseudo(s, torch.zeros(1, 1, 1, dtype=torch.long), scenario1, "A", 0.5)
    assert pm.count == 1 and pm.labels.item() == 2
    assert assign_pseudo(s, torch.ones(1, 1, 1, dtype=torch.long), scenario1, "A", 0.5).count == 0
    assert assign_pseudo(s * 0.99, torch.zeros(1, 1, 1, dtype=torch.long), scenario1, "A", 1.0).count == 0
    with pytest.raises(ValueError):
        assign_pseudo(s, torch.zeros(1, 1, 1, dtype=torch.long), scenario1, "A", 0.0)


def test_assign_tie_goes_to_lowest_id(scenario1):
    s = torch.zeros(1, 5, 1, 1, dtype=torch.float64)
    s[0, 2] = s[0, 4] = 0.6
    assert assign_pseudo(s, torch.zeros(1, 1, 1, dtype=torch.long), scenario1, "A", 0.5).labels.item() == 2


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), tau=st.floats(0.01, 1.0))
def test_assign_matches_exhaustive_scan(seed, tau):
    rng = np.random.default_rng(seed)
    cur, p = random_probs(rng, (2, 4, 4), 5), random_probs(rng, (2, 4, 4), 5)
    scores = modulate(cur, p) * 3  # push some products over tau
    partial = rng.choice([0, 0, 1, 3], size=(2, 4, 4))
    for m in ("A", "B"):
        pm = assign_pseudo(scores, torch.from_numpy(partial), SC1, m, tau)
        labels, assigned = _brute_assign(scores.numpy(), partial, {0, *SC1.complement(m)}, tau)
        assert np.array_equal(pm.assigned.numpy(), assigned)
        assert np.array_equal(pm.labels.numpy()[assigned], labels[assigned])
        assert (partial[pm.assigned.numpy()] == BACKGROUND).all()
        assert set(pm.labels[pm.assigned].tolist()) <= pm.allowed


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), t1=st.floats(0.01, 0.99), dt=st.floats(0.001, 0.5))
def test_assign_monotone_in_tau(seed, t1, dt):
    rng = np.random.default_rng(seed)
    scores = random_probs(rng, (1, 5, 5), 5)
    partial = torch.zeros(1, 5, 5, dtype=torch.long)
    lo = assign_pseudo(scores, partial, SC1, "A", t1).assigned
    hi = assign_pseudo(scores, partial, SC1, "A", min(1.0, t1 + dt)).assigned
    assert not (hi & ~lo).any()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 100.0))
def test_assign_argmax_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    scores = random_probs(rng, (1, 4, 4), 5)
    partial = torch.zeros(1, 4, 4, dtype=torch.long)
    per_pixel = torch.from_numpy(rng.uniform(0.5, 2.0, size=(1, 1, 4, 4))) * scale
    # tau tiny so every pixel is assigned; only the argmax is compared
    a = assign_pseudo(scores, partial, SC1, "B", 1e-9)
    b = assign_pseudo(scores * per_pixel, partial, SC1, "B", 1e-9)
    assert torch.equal(a.labels, b.labels)
