import math

import pytest
import torch

from modalmoe.config import ConfigError, FilterSchedule
from modalmoe.moe import AlignmentObjective
from modalmoe.objectives import (
    NumericsError,
    batch_objective_losses,
    batched_inter_losses,
    batched_intra_losses,
    filter_weights,
    inter_loss,
    intra_loss,
    reliability_weight,
    schedule_delta_bar,
    total_loss,
)


def _vec_with_dot(value, dim=4):
    """A vector whose dot with e1 is ``value`` (unit-free logit construction)."""
    v = torch.zeros(dim)
    v[0] = value
    v[1] = 1.0
    return v


E1 = torch.tensor([1.0, 0.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# single-pair losses


def test_inter_loss_equal_logits_is_ln2():
    loss = inter_loss(E1, _vec_with_dot(0.3), _vec_with_dot(0.3).unsqueeze(0), tau=0.07)
    assert abs(float(loss) - math.log(2)) < 1e-6


def test_inter_loss_hand_value_tau_one():
    loss = inter_loss(E1, _vec_with_dot(1.0), _vec_with_dot(0.0).unsqueeze(0), tau=1.0)
    assert abs(float(loss) - 0.31326168751822286) < 1e-6


@pytest.mark.parametrize("n_neg", [1, 3, 15])
def test_inter_loss_equal_logit_negatives(n_neg):
    negatives = torch.stack([_vec_with_dot(0.5)] * n_neg)
    loss = inter_loss(E1, _vec_with_dot(0.5), negatives, tau=0.07)
    assert abs(float(loss) - math.log(1 + n_neg)) < 1e-5


def test_inter_loss_shift_invariance():
    base = float(inter_loss(E1, _vec_with_dot(0.4), torch.stack([_vec_with_dot(0.1), _vec_with_dot(-0.2)]), tau=1.0))
    shifted = float(
        inter_loss(E1, _vec_with_dot(0.4 + 0.7), torch.stack([_vec_with_dot(0.8), _vec_with_dot(0.5)]), tau=1.0)
    )
    assert abs(base - shifted) < 1e-6


def test_inter_loss_nonnegative():
    g = torch.Generator().manual_seed(0)
    for _ in range(50):
        q = torch.randn(4, generator=g)
        p = torch.randn(4, generator=g)
        n = torch.randn(3, 4, generator=g)
        assert float(inter_loss(q, p, n, tau=0.07)) >= 0.0


def test_inter_loss_validation():
    with pytest.raises(ConfigError):
        inter_loss(E1, E1, E1.unsqueeze(0), tau=0.0)
    with pytest.raises(ConfigError):
        inter_loss(E1, E1, torch.zeros(0, 4), tau=0.07)


def test_intra_loss_equal_logits_is_ln2():
    loss = intra_loss(E1, _vec_with_dot(0.2), _vec_with_dot(0.2).unsqueeze(0), tau_tilde=0.07)
    assert abs(float(loss) - math.log(2)) < 1e-6


def test_intra_loss_saturates_at_large_gap():
    tau = 0.07
    loss = intra_loss(E1, _vec_with_dot(20.0 * tau), _vec_with_dot(0.0).unsqueeze(0), tau_tilde=tau)
    assert float(loss) < 1e-3


def test_intra_loss_hand_value():
    loss = intra_loss(E1, _vec_with_dot(0.9), _vec_with_dot(0.1).unsqueeze(0), tau_tilde=0.5)
    assert abs(float(loss) - 0.18390074088833888) < 1e-6


# ---------------------------------------------------------------------------
# reliability filtering


def test_delta_bar_endpoints_and_midpoint():
    schedule = FilterSchedule()
    assert schedule_delta_bar(0, 100, schedule) == pytest.approx(0.2)
    assert schedule_delta_bar(100, 100, schedule) == pytest.approx(-0.2)
    assert schedule_delta_bar(50, 100, schedule) == pytest.approx(0.0, abs=1e-12)


def test_delta_bar_monotone_nonincreasing():
    schedule = FilterSchedule()
    values = [schedule_delta_bar(s, 200, schedule) for s in range(201)]
    assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))


def test_delta_bar_range_validation():
    schedule = FilterSchedule()
    with pytest.raises(ConfigError):
        schedule_delta_bar(5, 4, schedule)
    with pytest.raises(ConfigError):
        schedule_delta_bar(-1, 10, schedule)
    with pytest.raises(ConfigError):
        schedule_delta_bar(0, 0, schedule)


def test_reliability_weight_at_margin_equal_offset():
    schedule = FilterSchedule(delta_bar_start=0.2, delta_bar_end=0.2, sharpness=5.0)
    phi = reliability_weight(E1, _vec_with_dot(0.5), _vec_with_dot(0.3), schedule, step=0, total_steps=10)
    assert abs(float(phi) - 0.5) < 1e-6


def test_reliability_weight_hand_sigmoid():
    schedule = FilterSchedule(delta_bar_start=0.0, delta_bar_end=0.0, sharpness=1.0)
    phi = reliability_weight(E1, _vec_with_dot(1.0), _vec_with_dot(0.0), schedule, step=0, total_steps=10)
    assert abs(float(phi) - 0.7310585786300049) < 1e-6


def test_reliability_weight_saturation():
    schedule = FilterSchedule(delta_bar_start=0.0, delta_bar_end=0.0, sharpness=10.0)
    phi = reliability_weight(E1, _vec_with_dot(1.0), _vec_with_dot(0.0), schedule, step=0, total_steps=10)
    assert float(phi) > 0.999


def test_reliability_weight_monotone_in_margin():
    schedule = FilterSchedule()
    margins = torch.linspace(-1.0, 1.0, 21)
    phis = [
        float(reliability_weight(E1, _vec_with_dot(float(m)), _vec_with_dot(0.0), schedule, 0, 10))
        for m in margins
    ]
    assert all(a < b for a, b in zip(phis, phis[1:]))


def test_lowering_offset_never_decreases_weights():
    early = FilterSchedule(delta_bar_start=0.2, delta_bar_end=0.2)
    late = FilterSchedule(delta_bar_start=-0.2, delta_bar_end=-0.2)
    for margin in (-0.5, 0.0, 0.3, 0.8):
        phi_early = float(reliability_weight(E1, _vec_with_dot(margin), _vec_with_dot(0.0), early, 0, 10))
        phi_late = float(reliability_weight(E1, _vec_with_dot(margin), _vec_with_dot(0.0), late, 0, 10))
        assert phi_late >= phi_early


@pytest.mark.parametrize(
    "phi,expected",
    [(0.7, 1.0), (0.5, 0.5), (0.6, 1.0), (0.0, 0.0)],
)
def test_filter_weights_threshold_rule(phi, expected):
    out = filter_weights(torch.tensor([phi]), delta_threshold=0.6)
    assert abs(float(out[0]) - expected) < 1e-7


# ---------------------------------------------------------------------------
# composition


def _loss_map(values):
    return {AlignmentObjective(m): torch.tensor(v) for m, v in enumerate(values)}


def test_total_loss_regularizers_off():
    losses = _loss_map([0.1, 0.2, 0.3, 0.4, 0.5])
    total = total_loss(losses, torch.ones(5), torch.tensor(1.0), torch.tensor(1.0), 0.0, 0.0)
    assert abs(float(total) - 1.5) < 1e-6


def test_total_loss_regularizers_only():
    losses = _loss_map([0.0] * 5)
    total = total_loss(
        losses, torch.ones(5), torch.tensor(1.0), torch.tensor(math.log(2)), 0.01, 0.01
    )
    assert abs(float(total) - 0.016931471805599452) < 1e-8


def test_total_loss_weights_objectives():
    losses = _loss_map([1.0, 0.0, 0.0, 0.0, 0.0])
    omega = torch.tensor([2.0, 1.0, 1.0, 1.0, 1.0])
    total = total_loss(losses, omega, torch.tensor(0.0), torch.tensor(0.0), 0.0, 0.0)
    assert abs(float(total) - 2.0) < 1e-6


def test_total_loss_names_nonfinite_objective():
    losses = _loss_map([0.1, float("nan"), 0.2, 0.3, 0.4])
    with pytest.raises(NumericsError, match="INTER_IMAGE"):
        total_loss(losses, torch.ones(5), torch.tensor(0.0), torch.tensor(0.0), 0.0, 0.0)


def test_total_loss_names_nonfinite_regularizer():
    losses = _loss_map([0.0] * 5)
    with pytest.raises(NumericsError, match="aux"):
        total_loss(losses, torch.ones(5), torch.tensor(float("inf")), torch.tensor(0.0), 1.0, 0.0)


# ---------------------------------------------------------------------------
# batched forms vs the single-pair oracles


def _random_roles(b=5, d=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    def unit(shape):
        v = torch.randn(*shape, generator=g)
        return v / v.norm(dim=-1, keepdim=True)
    return {role: unit((b, d)) for role in ("q_t", "q_i", "q_mm", "p_t", "p_i", "p_mm", "n_t", "n_i", "n_mm")}


def test_batched_inter_matches_single_oracle():
    reps = _random_roles()
    queries, positives, hard = reps["q_t"], reps["p_mm"], reps["n_mm"]
    losses, margins = batched_inter_losses(queries, positives, hard, tau=0.07)
    b = queries.shape[0]
    for j in range(b):
        negatives = torch.cat([positives[torch.arange(b) != j], hard[j : j + 1]])
        single = inter_loss(queries[j], positives[j], negatives, tau=0.07)
        assert abs(float(losses[j]) - float(single)) < 1e-5
        margin = float(queries[j] @ positives[j] - queries[j] @ hard[j])
        assert abs(float(margins[j]) - margin) < 1e-6


def test_batched_intra_matches_single_oracle():
    reps = _random_roles(seed=1)
    anchors, own, opposite = reps["p_i"], reps["p_t"], reps["n_t"]
    losses = batched_intra_losses(anchors, own, opposite, tau_tilde=0.07)
    b = anchors.shape[0]
    for j in range(b):
        unrelated = torch.cat([own[torch.arange(b) != j], opposite[j : j + 1]])
        single = intra_loss(anchors[j], own[j], unrelated, tau_tilde=0.07)
        assert abs(float(losses[j]) - float(single)) < 1e-5


def test_batched_inter_shape_validation():
    with pytest.raises(ConfigError):
        batched_inter_losses(torch.randn(4, 8), torch.randn(4, 8), torch.randn(3, 8), tau=0.07)


def test_batch_objective_losses_covers_all_objectives():
    reps = _random_roles(seed=2)
    losses, mean_phi = batch_objective_losses(
        reps, tau=0.07, tau_tilde=0.07, schedule=FilterSchedule(), step=0,
        total_steps=100, filtering_enabled=True, use_intra=True,
    )
    assert set(losses) == set(AlignmentObjective)
    for v in losses.values():
        assert torch.isfinite(v)
    assert 0.0 < float(mean_phi) < 1.0


def test_batch_objective_losses_without_intra():
    reps = _random_roles(seed=3)
    losses, _ = batch_objective_losses(
        reps, tau=0.07, tau_tilde=0.07, schedule=FilterSchedule(), step=0,
        total_steps=100, filtering_enabled=True, use_intra=False,
    )
    assert set(losses) == {
        AlignmentObjective.INTER_TEXT,
        AlignmentObjective.INTER_IMAGE,
        AlignmentObjective.INTER_MULTIMODAL,
    }


def test_filter_weights_scale_inter_losses_linearly():
    # Margins pinned at the current offset give phi = 0.5 < delta, so enabling
    # the filter must halve each inter loss exactly; intra losses are untouched.
    b, d = 4, 6
    queries = torch.zeros(b, d)
    queries[:, 0] = 1.0
    positives = torch.zeros(b, d)
    positives[:, 1] = 1.0  # q.p = 0 for every pair, on and off diagonal
    hard = torch.zeros(b, d)
    hard[:, 2] = 1.0  # q.n = 0, so margin = 0 = delta_bar
    reps = {f"q_{m}": queries.clone() for m in ("t", "i", "mm")}
    reps.update({"p_t": positives.clone(), "p_i": positives.clone(), "p_mm": positives.clone()})
    reps.update({"n_t": hard.clone(), "n_i": hard.clone(), "n_mm": hard.clone()})
    schedule = FilterSchedule(delta_bar_start=0.0, delta_bar_end=0.0, sharpness=5.0, delta_threshold=0.6)
    kwargs = dict(tau=0.07, tau_tilde=0.07, schedule=schedule, step=0, total_steps=10, use_intra=True)
    on, _ = batch_objective_losses(reps, filtering_enabled=True, **kwargs)
    off, _ = batch_objective_losses(reps, filtering_enabled=False, **kwargs)
    for m in (AlignmentObjective.INTER_TEXT, AlignmentObjective.INTER_IMAGE, AlignmentObjective.INTER_MULTIMODAL):
        assert abs(float(on[m]) - 0.5 * float(off[m])) < 1e-6
    for m in (AlignmentObjective.INTRA_POSITIVE, AlignmentObjective.INTRA_NEGATIVE):
        assert abs(float(on[m]) - float(off[m])) < 1e-7
