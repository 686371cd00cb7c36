import math

import numpy as np
import pytest
import torch

from psumml.labels import ScenarioSpec, merge_probs
from psumml.losses import (
    EPS_LOG,
    LossError,
    LossValue,
    LossWeights,
    cross_entropy,
    dice_loss,
    dpca_disc_targets,
    dpca_discriminator_loss,
    dpca_encoder_loss,
    one_hot,
    pcl_loss,
    sest_loss,
    total_loss,
)
from psumml.selftrain import assign_pseudo

from conftest import random_probs
from gradcheck import GRAD_CASES, max_relative_error

D64 = torch.float64


def t(*vals):
    return torch.tensor(vals, dtype=D64).view(1, -1, 1, 1)


def test_cross_entropy_examples():
    assert cross_entropy(torch.tensor([[[0]]]), t(0.5, 0.5)).value.item() == pytest.approx(math.log(2))
    lv = cross_entropy(torch.tensor([[[1]]]), t(0.0, 1.0))
    assert 0 <= lv.value.item() <= -math.log(1 - EPS_LOG)
    assert lv.pixel_count == 1


def test_cross_entropy_soft_minimum_at_target(rng):
    # perturbation oracle: CE(t, q) is minimised at q = t and equals the entropy there
    target = random_probs(rng, (1, 1, 1), 4)
    at = cross_entropy(target, target).value.item()
    entropy = -(target * target.log()).sum().item()
    assert at == pytest.approx(entropy, abs=1e-12)
    for _ in range(200):
        q = torch.softmax(target.log() + 0.3 * torch.from_numpy(rng.normal(size=target.shape)), 1)
        assert cross_entropy(target, q).value.item() >= at - 1e-12


def test_cross_entropy_shape_errors():
    with pytest.raises(LossError):
        cross_entropy(torch.zeros(1, 2, 2, dtype=torch.long), torch.zeros(1, 3, 2, 3))
    with pytest.raises(LossError):
        cross_entropy(torch.zeros(1, 2, 2, 2), torch.zeros(1, 3, 2, 2))


def test_dice_examples():
    g = one_hot(torch.tensor([[[0, 1], [1, 0]]]), 2, D64)
    assert dice_loss(g, g.clone()).value.item() == pytest.approx(0, abs=1e-5)
    flipped = g.flip(1)
    assert dice_loss(g, flipped).value.item() == pytest.approx(1, abs=1e-5)
    gt = torch.tensor([1.0, 0.0], dtype=D64).view(1, 1, 1, 2)
    p = torch.tensor([0.5, 0.5], dtype=D64).view(1, 1, 1, 2)
    hand = 1 - (2 * 0.5 + 1e-5) / (1 + 1 + 1e-5)
    assert dice_loss(gt, p).value.item() == pytest.approx(hand, abs=1e-15)
    assert hand == pytest.approx(0.5, abs=1e-5)


def test_pcl_identity_merge_equals_plain_ce_dice(rng):
    sc = ScenarioSpec.from_organs([1, 2, 3], [1, 2])
    # modality A labels everything -> empty complement
    probs = random_probs(rng, (2, 3, 3), 4)
    mask = torch.from_numpy(rng.integers(0, 4, size=(2, 3, 3)))
    ref = cross_entropy(mask, probs).value + dice_loss(one_hot(mask, 4, D64), probs).value
    assert abs(pcl_loss(probs, mask, sc, "A").value.item() - ref.item()) < 1e-9


def test_pcl_hand_example():
    sc = ScenarioSpec.from_organs([1], [2])  # M = 3, L^a = {0, 1}
    probs = t(0.2, 0.5, 0.3)
    mask = torch.zeros(1, 1, 1, dtype=torch.long)
    merged, _ = merge_probs(probs, sc.complement("A"), sc.global_layout)
    assert merged.flatten().tolist() == pytest.approx([0.5, 0.5])
    ce = cross_entropy(mask, merged).value.item()
    assert ce == pytest.approx(math.log(2))
    assert pcl_loss(probs, mask, sc, "A").value.item() > ce


def test_pcl_rejects_unlabeled_class():
    sc = ScenarioSpec.from_organs([1], [2])
    with pytest.raises(LossError):
        pcl_loss(t(0.2, 0.5, 0.3), torch.full((1, 1, 1), 2), sc, "A")


def test_pcl_argmax_labeling_beats_permutations(rng):
    # permutation oracle on the CE term over 4x4 instances
    sc = ScenarioSpec.from_organs([1, 3], [2, 4])
    layout_ids = (0, 1, 3)
    for _ in range(10):
        probs = random_probs(rng, (1, 4, 4), 5)
        merged, _ = merge_probs(probs, sc.complement("A"), sc.global_layout)
        best = merged.argmax(1)
        ce_best = cross_entropy(best, merged).value.item()
        for perm in ([1, 0, 2], [2, 1, 0], [0, 2, 1], [1, 2, 0], [2, 0, 1]):
            permuted = torch.tensor(perm)[best]
            assert ce_best <= cross_entropy(permuted, merged).value.item() + 1e-12
        ids = torch.tensor(layout_ids)[best]
        assert pcl_loss(probs, ids, sc, "A").value.item() >= 0


def test_dpca_targets_placement():
    sc = ScenarioSpec.from_organs([1], [2])  # M = 3, M^a = 1
    # probs chosen so folding class 1 gives [0.6, 0.4] over (background, class 2)
    probs = t(0.5, 0.1, 0.4)
    from_b = dpca_disc_targets(probs, "A", "B", sc)
    from_a = dpca_disc_targets(probs, "A", "A", sc)
    assert from_b.flatten().tolist() == pytest.approx([0.6, 0.4, 0, 0])
    assert from_a.flatten().tolist() == pytest.approx([0, 0, 0.6, 0.4])
    assert from_b.sum(1).item() == pytest.approx(1.0)
    assert not from_b.requires_grad


def test_dpca_targets_are_detached():
    sc = ScenarioSpec.from_organs([1], [2])
    probs = t(0.5, 0.1, 0.4).requires_grad_(True)
    assert not dpca_disc_targets(probs, "A", "B", sc).requires_grad


def test_dpca_empty_complement(scenario3):
    with pytest.raises(LossError):
        dpca_disc_targets(torch.full((1, 5, 1, 1), 0.2), "A", "B", scenario3)
    assert dpca_discriminator_loss(None, None, None, None).value.item() == 0.0
    assert dpca_encoder_loss(None, None).value.item() == 0.0


def test_dpca_discriminator_loss_values():
    tgt = t(0.6, 0.4, 0.0, 0.0)
    lv = dpca_discriminator_loss(tgt, tgt, tgt, tgt)
    entropy = -(0.6 * math.log(0.6) + 0.4 * math.log(0.4))
    assert entropy == pytest.approx(0.6730, abs=1e-4)
    assert lv.value.item() == pytest.approx(2 * entropy, abs=1e-6)
    uni = t(0.25, 0.25, 0.25, 0.25)
    hard = t(1.0, 0.0, 0.0, 0.0)
    assert cross_entropy(hard, uni).value.item() == pytest.approx(math.log(4))


def test_dpca_encoder_flip_and_floor(rng):
    sc = ScenarioSpec.from_organs([1], [2])
    probs = t(0.5, 0.1, 0.4)
    flipped = dpca_disc_targets(probs, "A", "B", sc)
    # flipped target for guard-modality data uses the other modality's layout
    assert torch.equal(flipped, dpca_disc_targets(probs, "A", "B", sc))
    at = dpca_encoder_loss(flipped, flipped).value.item()
    assert at == pytest.approx(-(0.6 * math.log(0.6) + 0.4 * math.log(0.4)), abs=1e-7)
    for _ in range(100):
        d = torch.softmax(torch.log(flipped.clamp_min(1e-9)) + torch.from_numpy(rng.normal(size=flipped.shape)), 1)
        assert dpca_encoder_loss(d, flipped).value.item() >= at - 1e-9


def test_sest_loss_examples(scenario1):
    probs = torch.zeros(1, 5, 1, 2, dtype=D64)
    probs[0, :, 0, 0] = torch.tensor([0.05, 0.0, 0.9, 0.0, 0.05])
    probs[0, :, 0, 1] = torch.tensor([0.2, 0.2, 0.2, 0.2, 0.2])
    partial = torch.zeros(1, 1, 2, dtype=torch.long)
    none = assign_pseudo(probs, partial, scenario1, "A", 1.0)
    assert sest_loss(probs, none).value.item() == 0.0
    one = assign_pseudo(probs, partial, scenario1, "A", 0.5)
    assert one.count == 1 and one.labels[0, 0, 0].item() == 2
    assert sest_loss(probs, one).value.item() == pytest.approx(-math.log(0.9))
    onehot = torch.zeros(1, 5, 1, 2, dtype=D64)
    onehot[0, 2] = 1.0
    allp = assign_pseudo(onehot, partial, scenario1, "A", 0.5)
    assert allp.count == 2
    assert sest_loss(onehot, allp).value.item() == pytest.approx(0, abs=1e-7)


def test_sest_rejects_disallowed_label(scenario1):
    probs = torch.full((1, 5, 1, 1), 0.2, dtype=D64)
    pm = assign_pseudo(probs, torch.zeros(1, 1, 1, dtype=torch.long), scenario1, "A", 0.1)
    pm.labels[:] = 1  # class 1 is labeled in A, not a pseudo-label candidate
    pm.assigned[:] = True
    with pytest.raises(LossError):
        sest_loss(probs, pm)


def test_total_loss():
    w0 = LossWeights(lambda_dpca=0.0)
    assert total_loss({"pcl": 1.0, "dpca_a": 2.0, "dpca_b": 3.0, "sest": 0.5}, w0).value.item() == 1.5
    w = LossWeights(lambda_dpca=0.01)
    assert total_loss({"pcl": 1.0, "dpca_a": 2.0, "dpca_b": 3.0, "sest": 0.5}, w).value.item() == pytest.approx(1.55)
    off = LossWeights(lambda_dpca=0.01, sest_enabled=False)
    assert total_loss({"pcl": 1.0, "sest": 0.5}, off).value.item() == 1.0
    with pytest.raises(LossError, match="dpca_b"):
        total_loss({"pcl": 1.0, "dpca_b": float("nan")}, w)
    with pytest.raises(LossError):
        LossWeights(lambda_dpca=-1)


def test_total_loss_zero_branch(scenario3):
    # modality A is fully labeled: its adversarial term is exactly zero
    parts = {"pcl": torch.tensor(1.0), "dpca_a": dpca_encoder_loss(None, None), "dpca_b": torch.tensor(2.0)}
    assert total_loss(parts, LossWeights(0.01)).value.item() == pytest.approx(1.02)
    assert not scenario3.complement("A")


def test_non_negativity(rng):
    sc = ScenarioSpec.from_organs([1, 3], [2, 4])
    for _ in range(20):
        probs = random_probs(rng, (2, 4, 4), 5)
        mask = torch.from_numpy(rng.choice([0, 1, 3], size=(2, 4, 4)))
        assert pcl_loss(probs, mask, sc, "A").value.item() >= 0
        d = dice_loss(one_hot(probs.argmax(1), 5, D64), probs).value.item()
        assert 0 <= d <= 1 + 1e-5


# --- finite-difference gradient checks ----------------------------------------


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("case", sorted(GRAD_CASES))
def test_gradients_match_finite_differences(case, seed):
    loss_fn, params = GRAD_CASES[case](seed)
    assert max_relative_error(loss_fn, params) < 1e-4
