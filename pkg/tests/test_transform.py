import numpy as np
import pytest

from tadlab import (
    CoordinationPolicy,
    DecentralizedPolicySet,
    evaluate_policy,
    greedy_distill,
    inverse_transform,
    kl_distill,
    lift_policy,
    lower_policy,
    sequential_transform,
    size_report,
    validate,
    value_relation_check,
)
from tadlab.constructions import builtin_game, random_mmdp
from tadlab.core import Mdp, SizeGuardError
from tadlab.transform import layer_offsets, virtual_state_index


def test_table1_layout():
    g = builtin_game("table1")
    mdp = sequential_transform(g)
    assert mdp.n_states == 4  # 1 root + 3 after the first agent acts
    assert mdp.n_actions == 3
    assert mdp.horizon == 2
    assert mdp.gamma == pytest.approx(0.99**0.5, abs=1e-15)
    assert validate(mdp) == []
    assert mdp.n_states * mdp.n_actions == 12


def test_layer_offsets_and_index():
    offsets, total = layer_offsets(2, 3, 3)
    assert offsets == [0, 2, 8] and total == 26
    assert virtual_state_index(1, 1, 2, 2, 3, 3) == 2 + 1 * 3 + 2


def test_intermediate_rows_one_hot_zero_reward():
    model = random_mmdp(2, 3, 2, gamma=0.9, rng=1)
    mdp = sequential_transform(model)
    offsets, total = layer_offsets(2, 3, 2)
    for v in range(offsets[-1]):  # all but the final layer
        assert np.all(mdp.reward[v] == 0.0)
        for a in range(2):
            row = mdp.transition[v, a]
            assert row.max() == 1.0 and row.sum() == 1.0
    assert validate(mdp) == []


def test_single_agent_transform_is_identity():
    model = random_mmdp(3, 1, 2, gamma=0.7, rng=2)
    mdp = sequential_transform(model)
    assert np.array_equal(mdp.transition, model.transition)
    assert np.array_equal(mdp.reward, model.reward)
    assert mdp.gamma == model.gamma


def test_round_trip_table1_exact():
    g = builtin_game("table1")
    back = inverse_transform(sequential_transform(g), 2)
    assert np.array_equal(back.transition, g.transition)
    assert np.array_equal(back.reward, g.reward)
    assert np.array_equal(back.initial_dist, g.initial_dist)
    assert back.horizon == g.horizon
    assert back.gamma == pytest.approx(g.gamma, abs=1e-12)


def test_round_trip_random_models():
    for seed, (s, n, a) in enumerate([(2, 2, 3), (3, 3, 2), (1, 4, 2), (4, 2, 2)]):
        model = random_mmdp(s, n, a, gamma=0.9, rng=seed)
        back = inverse_transform(sequential_transform(model), n)
        assert np.array_equal(back.transition, model.transition)
        assert np.array_equal(back.reward, model.reward)
        assert np.array_equal(back.initial_dist, model.initial_dist)
        assert abs(back.gamma - model.gamma) < 1e-12


def test_gamma_power_identity():
    model = random_mmdp(2, 3, 2, gamma=0.37, rng=5)
    mdp = sequential_transform(model)
    assert mdp.gamma**3 == pytest.approx(0.37, abs=1e-12)


def test_inverse_rejects_corrupted_intermediate_reward():
    g = builtin_game("table1")
    mdp = sequential_transform(g)
    reward = mdp.reward.copy()
    reward[0, 1] = 1.0  # root layer must have zero reward
    broken = Mdp(mdp.n_states, mdp.n_actions, mdp.transition, reward,
                 mdp.gamma, mdp.initial_dist, mdp.horizon)
    with pytest.raises(ValueError, match="intermediate reward"):
        inverse_transform(broken, 2)


def test_inverse_rejects_wrong_state_count():
    model = random_mmdp(5, 1, 2, gamma=0.9, rng=6)
    with pytest.raises(ValueError):
        inverse_transform(model, 2)


def test_transform_size_guard():
    model = random_mmdp(2, 3, 3, gamma=0.9, rng=7)
    with pytest.raises(SizeGuardError):
        sequential_transform(model, size_guard=10)


def test_transform_rejects_zero_discount_multi_agent():
    from tadlab.core import Mmdp

    model = random_mmdp(2, 2, 2, gamma=0.9, rng=24)
    frozen = Mmdp(2, 2, 2, model.transition, model.reward, 0.0,
                  model.initial_dist, horizon=1)
    with pytest.raises(ValueError, match="gamma"):
        sequential_transform(frozen)
    single = random_mmdp(2, 1, 2, gamma=0.9, rng=25)
    degenerate = Mmdp(2, 1, 2, single.transition, single.reward, 0.0,
                      single.initial_dist, horizon=1)
    assert sequential_transform(degenerate).gamma == 0.0


def test_lower_policy_rejects_wrong_layout():
    policy = np.full((5, 2), 0.5)
    with pytest.raises(ValueError):
        lower_policy(policy, 2)


def test_policy_conversion_round_trip_exact():
    pc = CoordinationPolicy.random(3, 2, 2, rng=8)
    again = lower_policy(lift_policy(pc), 3)
    for a, b in zip(pc.tables, again.tables):
        assert np.array_equal(a, b)


def test_uniform_policy_lifts_to_uniform():
    pc = CoordinationPolicy.uniform(2, 1, 3)
    assert np.all(lift_policy(pc) == 1 / 3)


def test_deterministic_conversion_selects_same_entries():
    g = builtin_game("table1")
    tables = (np.array([[[0.0, 1.0, 0.0]]]),
              np.array([[[0, 0, 1], [1, 0, 0], [0, 1, 0]]], dtype=float).reshape(1, 3, 3))
    pc = CoordinationPolicy(tables)
    pol = lift_policy(pc)
    # root row is agent 0's table, rows 1..3 are agent 1's per-prefix rows
    assert np.array_equal(pol[0], [0, 1, 0])
    assert np.array_equal(pol[2], [1, 0, 0])
    mdp = sequential_transform(g)
    assert evaluate_policy(mdp, pol) == pytest.approx(0.99**0.5 * (-30), abs=1e-12)


def test_value_relation_table1():
    g = builtin_game("table1")
    pc = CoordinationPolicy(
        (np.array([[[1.0, 0, 0]]]), np.broadcast_to([1.0, 0, 0], (1, 3, 3)).copy())
    )
    j_m, j_g, residual = value_relation_check(g, pc)
    assert j_m == pytest.approx(10.0, abs=1e-12)
    assert j_g == pytest.approx(0.99**0.5 * 10.0, abs=1e-12)
    assert residual < 1e-10


def test_value_relation_single_agent_identity():
    model = random_mmdp(3, 1, 2, gamma=0.9, rng=9)
    pc = CoordinationPolicy.random(1, 3, 2, rng=10)
    j_m, j_g, residual = value_relation_check(model, pc)
    assert j_m == pytest.approx(j_g, abs=1e-12)
    assert residual < 1e-10


def test_value_relation_three_agents():
    model = random_mmdp(3, 3, 2, gamma=0.9, rng=11)
    pc = CoordinationPolicy.random(3, 3, 2, rng=12)
    _, _, residual = value_relation_check(model, pc)
    assert residual < 1e-8


def test_value_relation_rejects_gamma_zero():
    from tadlab.core import Mmdp

    model = random_mmdp(2, 2, 2, gamma=0.9, rng=13)
    bad = Mmdp(2, 2, 2, model.transition, model.reward, 0.0,
               model.initial_dist, horizon=1)
    pc = CoordinationPolicy.uniform(2, 2, 2)
    with pytest.raises(ValueError, match="gamma"):
        value_relation_check(bad, pc)


def test_greedy_distill_fixed_point_on_products():
    dec = DecentralizedPolicySet.deterministic(np.array([[1, 0], [2, 1]]), 3)
    pc = CoordinationPolicy.from_product(dec)
    model = random_mmdp(2, 2, 3, gamma=0.9, rng=14)
    out = greedy_distill(pc, model)
    assert np.array_equal(out.tables, dec.tables)


def test_greedy_distill_reaches_optimum_on_table1():
    g = builtin_game("table1")
    pc = CoordinationPolicy(
        (np.array([[[1.0, 0, 0]]]),
         np.array([[[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]]]))
    )
    out = greedy_distill(pc, g)
    assert evaluate_policy(g, out) == pytest.approx(10.0, abs=1e-12)


def test_greedy_distill_tie_break_lowest_index():
    pc = CoordinationPolicy.uniform(2, 1, 3)
    out = greedy_distill(pc, builtin_game("table1"))
    assert np.argmax(out.tables[0], axis=1)[0] == 0
    assert np.argmax(out.tables[1], axis=1)[0] == 0


def test_greedy_distill_value_equals_determinized_coordination_policy():
    model = random_mmdp(3, 3, 2, gamma=0.9, rng=15)
    pc = CoordinationPolicy.random(3, 3, 2, rng=16)
    out = greedy_distill(pc, model)
    determinized = CoordinationPolicy(
        tuple(np.eye(2)[np.argmax(tab, axis=2)] for tab in pc.tables)
    )
    assert evaluate_policy(model, out) == evaluate_policy(model, determinized)


def test_kl_distill_recovers_product_marginals():
    marg = np.array([[[0.7, 0.3]], [[0.2, 0.8]]])
    dec = DecentralizedPolicySet(marg)
    pc = CoordinationPolicy.from_product(dec)
    model = random_mmdp(1, 2, 2, gamma=0.9, rng=17, horizon=1)
    out, losses = kl_distill(pc, model, steps=4000)
    assert np.abs(out.tables - marg).max() < 1e-4
    entropy = -np.sum(pc.joint()[0] * np.log(pc.joint()[0]))
    assert losses[-1] == pytest.approx(entropy, abs=1e-6)


def test_kl_distill_correlated_policy_has_entropy_gap():
    # mass split over the two optima of matgame2 cannot be a product policy
    g = builtin_game("matgame2")
    joint = np.array([0.0, 0.5, 0.5, 0.0])
    tables = (
        np.array([[[0.5, 0.5]]]),
        np.array([[[0.0, 1.0], [1.0, 0.0]]]),
    )
    pc = CoordinationPolicy(tables)
    assert np.allclose(pc.joint()[0], joint)
    out, losses = kl_distill(pc, g, steps=6000)
    entropy = np.log(2.0)
    # best product fit: both marginals uniform, cross entropy 2 log 2
    assert losses[-1] == pytest.approx(2 * np.log(2.0), abs=1e-4)
    assert losses[-1] > entropy + 0.5
    assert np.abs(out.tables - 0.5).max() < 1e-3


def test_kl_distill_deterministic_matches_greedy_first_stage():
    model = random_mmdp(2, 2, 3, gamma=0.9, rng=18)
    dec = DecentralizedPolicySet.deterministic(np.array([[2, 0], [1, 1]]), 3)
    pc = CoordinationPolicy.from_product(dec)
    out, _ = kl_distill(pc, model, steps=3000)
    greedy = greedy_distill(pc, model)
    assert np.array_equal(
        np.argmax(out.tables, axis=2), np.argmax(greedy.tables, axis=2)
    )


def test_kl_distill_loss_non_increasing():
    pc = CoordinationPolicy.random(2, 3, 3, rng=19)
    model = random_mmdp(3, 2, 3, gamma=0.9, rng=20)
    _, losses = kl_distill(pc, model, steps=500, lr=1.0)
    assert np.all(np.diff(losses) <= 1e-12)


def test_kl_distill_rejects_bad_config():
    pc = CoordinationPolicy.uniform(2, 1, 2)
    model = builtin_game("matgame2")
    with pytest.raises(ValueError):
        kl_distill(pc, model, steps=0)
    with pytest.raises(ValueError):
        kl_distill(pc, model, steps=10, lr=-1.0)


def test_size_report_examples():
    g = builtin_game("table1")
    report = size_report(g)
    assert report == {"original_sa": 9, "transformed_sa": 12, "bound": True}
    model = random_mmdp(2, 3, 5, gamma=0.9, rng=21)
    report = size_report(model)
    assert report["original_sa"] == 250
    assert report["transformed_sa"] == 310
    assert report["bound"] is True


def test_size_report_single_action_degenerate():
    model = random_mmdp(3, 2, 1, gamma=0.9, rng=22)
    report = size_report(model)
    assert report == {"original_sa": 3, "transformed_sa": 6, "bound": True}
    model = random_mmdp(3, 4, 1, gamma=0.9, rng=23)
    assert size_report(model)["bound"] is False
