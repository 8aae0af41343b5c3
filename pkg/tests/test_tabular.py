import itertools

import numpy as np
import pytest

from pada.core import EnumerationLimitError, RngStream, episodic_return, rollout
from pada import tabular as tb


def make_cycle_mdp():
    # two states, single action, deterministic 0 -> 1 -> 0, start at 0
    transitions = np.zeros((2, 1, 2))
    transitions[0, 0, 1] = 1.0
    transitions[1, 0, 0] = 1.0
    return tb.TabularMdp(
        n_states=2,
        n_actions=1,
        horizon=2,
        transitions=transitions,
        rewards=np.array([0.25, 0.25]),
        initial=np.array([1.0, 0.0]),
    )


def identity_mdp(n_states, horizon):
    transitions = np.zeros((n_states, 1, n_states))
    transitions[np.arange(n_states), 0, np.arange(n_states)] = 1.0
    return tb.TabularMdp(
        n_states=n_states,
        n_actions=1,
        horizon=horizon,
        transitions=transitions,
        rewards=np.zeros(n_states),
        initial=np.full(n_states, 1.0 / n_states),
    )


def test_state_distribution_identity_fixed_point():
    mdp = identity_mdp(4, 5)
    per_step, avg = tb.exact_state_distribution(mdp, np.zeros(4, dtype=int))
    for h in range(5):
        assert np.allclose(per_step[h], mdp.initial, atol=1e-12)
    assert np.allclose(avg, mdp.initial, atol=1e-12)


def test_state_distribution_cycle():
    mdp = make_cycle_mdp()
    per_step, avg = tb.exact_state_distribution(mdp, np.zeros(2, dtype=int))
    assert np.allclose(per_step[0], [0.0, 1.0])
    assert np.allclose(per_step[1], [1.0, 0.0])
    assert np.allclose(avg, [0.5, 0.5])


def mc_state_distribution(mdp, policy, n, seed):
    # independent vectorized simulator, not the DP recursion under test
    gen = np.random.Generator(np.random.Philox(seed))
    kernel = mdp.transitions[np.arange(mdp.n_states), policy]
    kcum = kernel.cumsum(axis=1)
    states = np.searchsorted(np.cumsum(mdp.initial), gen.random(n), side="right").clip(max=mdp.n_states - 1)
    totals = np.zeros(mdp.n_states)
    for _ in range(mdp.horizon):
        states = (gen.random(n)[:, None] > kcum[states]).sum(axis=1).clip(max=mdp.n_states - 1)
        totals += np.bincount(states, minlength=mdp.n_states)
    return totals / (n * mdp.horizon)


def test_state_distribution_matches_monte_carlo():
    rng = RngStream(5, "mc")
    mdp = tb.random_mdp(5, 3, 4, rng.child("mdp"))
    policy = tb.random_policy(5, 3, rng.child("pi"))
    _, avg = tb.exact_state_distribution(mdp, policy)
    n = 100_000
    estimate = mc_state_distribution(mdp, policy, n, seed=2024)
    stderr = np.sqrt(avg * (1 - avg) / (n * mdp.horizon))
    assert np.all(np.abs(estimate - avg) <= 3 * stderr + 1e-9)


def test_trajectory_distribution_deterministic_point_mass():
    mdp = make_cycle_mdp()
    rho = tb.exact_trajectory_distribution(mdp, np.zeros(2, dtype=int))
    probs = rho.probs.reshape(2, 2)
    assert probs[1, 0] == pytest.approx(1.0)
    assert probs.sum() == pytest.approx(1.0)


def test_trajectory_distribution_horizon_one_is_pushforward():
    rng = RngStream(6, "h1")
    mdp = tb.random_mdp(4, 2, 1, rng.child("mdp"))
    policy = tb.random_policy(4, 2, rng.child("pi"))
    rho = tb.exact_trajectory_distribution(mdp, policy)
    kernel = tb.policy_kernel(mdp, policy)
    assert np.allclose(rho.probs, mdp.initial @ kernel, atol=1e-12)


def test_trajectory_distribution_matches_product_enumeration():
    rng = RngStream(7, "prod")
    mdp = tb.random_mdp(3, 2, 3, rng.child("mdp"))
    policy = tb.random_policy(3, 2, rng.child("pi"))
    rho = tb.exact_trajectory_distribution(mdp, policy).probs
    # brute force: mu-weighted product over every length-3 sequence
    brute = np.zeros(27)
    for idx, (s1, s2, s3) in enumerate(itertools.product(range(3), repeat=3)):
        mass = 0.0
        for s0 in range(3):
            mass += (
                mdp.initial[s0]
                * mdp.transitions[s0, policy[s0], s1]
                * mdp.transitions[s1, policy[s1], s2]
                * mdp.transitions[s2, policy[s2], s3]
            )
        brute[idx] = mass
    assert np.allclose(rho, brute, atol=1e-12)
    assert rho.sum() == pytest.approx(1.0, abs=1e-9)


def test_trajectory_distribution_guard():
    rng = RngStream(8, "guard")
    mdp = tb.random_mdp(12, 2, 8, rng.child("mdp"))
    with pytest.raises(EnumerationLimitError):
        tb.exact_trajectory_distribution(mdp, tb.random_policy(12, 2, rng.child("pi")))


def test_greedy_policy_recovers_permutation():
    rng = RngStream(9, "perm")
    source = tb.random_mdp(5, 3, 4, rng.child("mdp"))
    policy = tb.random_policy(5, 3, rng.child("pi"))
    target, perm = tb.permuted_action_target(source, rng.child("perm"))
    adapted = tb.greedy_adapted_policy(target.transitions, source, policy)
    assert np.array_equal(adapted, perm[policy])


def test_greedy_policy_tie_breaks_low_index():
    rng = RngStream(10, "tie")
    source = tb.random_mdp(3, 2, 4, rng.child("mdp"))
    rows = np.repeat(source.transitions[:, :1, :], 2, axis=1)  # both actions identical
    adapted = tb.greedy_adapted_policy(rows, source, np.zeros(3, dtype=int))
    assert np.array_equal(adapted, np.zeros(3, dtype=int))


def test_greedy_policy_matches_exhaustive_argmin():
    rng = RngStream(11, "argmin")
    source = tb.random_mdp(4, 3, 4, rng.child("s"))
    target = tb.random_mdp(4, 3, 4, rng.child("t"))
    policy = tb.random_policy(4, 3, rng.child("pi"))
    adapted = tb.greedy_adapted_policy(target.transitions, source, policy)
    for s in range(4):
        source_row = source.transitions[s, policy[s]]
        tvs = [0.5 * np.abs(target.transitions[s, a] - source_row).sum() for a in range(3)]
        assert adapted[s] == int(np.argmin(tvs))


def test_greedy_policy_invariant_under_monotone_transform():
    rng = RngStream(12, "mono")
    source = tb.random_mdp(5, 4, 4, rng.child("s"))
    target = tb.random_mdp(5, 4, 4, rng.child("t"))
    policy = tb.random_policy(5, 4, rng.child("pi"))
    adapted = tb.greedy_adapted_policy(target.transitions, source, policy)
    source_rows = tb.policy_kernel(source, policy)
    tv = 0.5 * np.abs(target.transitions - source_rows[:, None, :]).sum(axis=-1)
    squared_choice = np.argmin(tv**2, axis=1)
    assert np.array_equal(adapted, squared_choice)


def test_mle_update_empty_is_identity():
    model = tb.TabularDynamicsModel.uniform(3, 2)
    updated = tb.ftl_mle_update(model, [])
    assert np.array_equal(updated.counts, model.counts)
    assert np.allclose(model.predict(), 1.0 / 3.0)


def test_mle_update_single_triple_closed_form():
    model = tb.TabularDynamicsModel.uniform(3, 2, smoothing=0.01)
    updated = tb.ftl_mle_update(model, [(0, 1, 2)])
    rows = updated.predict()
    assert rows[0, 1, 2] == pytest.approx(1.01 / 1.03, abs=1e-12)
    assert rows[0, 1].sum() == pytest.approx(1.0, abs=1e-12)


def test_mle_update_learns_rows_from_samples():
    rng = RngStream(20, "mle")
    target = tb.random_mdp(3, 1, 4, rng.child("mdp"))
    gen = rng.child("draws").gen
    states = gen.integers(0, 3, size=1000)
    next_states = np.array(
        [gen.choice(3, p=target.transitions[s, 0]) for s in states], dtype=np.int64
    )
    model = tb.ftl_mle_update(
        tb.TabularDynamicsModel.uniform(3, 1), (states, np.zeros(1000, dtype=np.int64), next_states)
    )
    rows = model.predict()
    for s in range(3):
        assert 0.5 * np.abs(rows[s, 0] - target.transitions[s, 0]).sum() <= 0.05


def make_pair(seed, n_states=5, n_actions=3, horizon=6, kind="permuted", beta=0.1):
    rng = RngStream(seed, "pair")
    source = tb.random_mdp(n_states, n_actions, horizon, rng.child("mdp"))
    policy = tb.random_policy(n_states, n_actions, rng.child("pi"))
    if kind == "permuted":
        target, _ = tb.permuted_action_target(source, rng.child("target"))
    elif kind == "mixture":
        target = tb.uniform_mixture_target(source, beta)
    elif kind == "identity":
        target = source
    else:
        target = tb.random_mdp(n_states, n_actions, horizon, rng.child("target"))
    return source, policy, target


def test_adaptation_identity_target_converges_exactly():
    source, policy, target = make_pair(1, kind="identity")
    report = tb.pada_tabular(source, policy, target, iterations=50, n_samples=200, mode="exact")
    assert report.trajectory_gap[report.best_iteration] <= 1e-9


def test_adaptation_permuted_target_recovers_relabeling():
    rng = RngStream(2, "pair")
    source = tb.random_mdp(5, 3, 6, rng.child("mdp"))
    policy = tb.random_policy(5, 3, rng.child("pi"))
    target, perm = tb.permuted_action_target(source, rng.child("target"))
    report = tb.pada_tabular(source, policy, target, iterations=50, n_samples=200, mode="exact")
    assert report.trajectory_gap[report.best_iteration] <= 1e-9
    assert np.array_equal(report.best_policy, perm[policy])


def test_single_target_action_gap_equals_floor():
    rng = RngStream(3, "single")
    source = tb.random_mdp(4, 3, 5, rng.child("s"))
    policy = tb.random_policy(4, 3, rng.child("pi"))
    full = tb.random_mdp(4, 3, 5, rng.child("t"))
    target = tb.TabularMdp(
        n_states=4,
        n_actions=1,
        horizon=5,
        transitions=full.transitions[:, :1, :],
        rewards=full.rewards,
        initial=full.initial,
    )
    report = tb.pada_tabular(source, policy, target, iterations=5, n_samples=50, mode="exact")
    assert np.allclose(report.one_step_gap, report.eps_term, atol=1e-12)


def test_adaptation_gap_never_undercuts_floor():
    for seed in range(5):
        source, policy, target = make_pair(seed, kind="mixture")
        report = tb.pada_tabular(source, policy, target, iterations=60, n_samples=200, mode="exact")
        assert np.all(report.one_step_gap >= report.eps_term - 1e-9)


def test_adaptation_composition_bound_every_iteration():
    for seed in range(5):
        source, policy, target = make_pair(seed, kind="random")
        report = tb.pada_tabular(source, policy, target, iterations=40, n_samples=100, mode="exact")
        bound = source.horizon * report.one_step_gap + 1e-9
        assert np.all(report.trajectory_gap <= bound)


def test_adaptation_exact_mode_deterministic():
    source, policy, target = make_pair(4, kind="random")
    r1 = tb.pada_tabular(source, policy, target, iterations=30, n_samples=100, mode="exact")
    r2 = tb.pada_tabular(source, policy, target, iterations=30, n_samples=100, mode="exact")
    assert np.array_equal(r1.one_step_gap, r2.one_step_gap)
    assert np.array_equal(r1.policies, r2.policies)
    assert np.array_equal(r1.avg_regret, r2.avg_regret)


def test_adaptation_sampled_mode_reproducible():
    source, policy, target = make_pair(5, kind="permuted")
    r1 = tb.pada_tabular(source, policy, target, iterations=20, n_samples=100, mode="sampled", rng=RngStream(9, "run"))
    r2 = tb.pada_tabular(source, policy, target, iterations=20, n_samples=100, mode="sampled", rng=RngStream(9, "run"))
    assert np.array_equal(r1.one_step_gap, r2.one_step_gap)
    assert np.array_equal(r1.policies, r2.policies)


def test_adaptability_report_examples():
    rng = RngStream(6, "adapt")
    source = tb.random_mdp(4, 3, 5, rng.child("s"))
    policy = tb.random_policy(4, 3, rng.child("pi"))
    same = tb.adaptability_report(source, policy, source)
    assert np.allclose(same.eps, 0.0, atol=1e-12)

    target, perm = tb.permuted_action_target(source, rng.child("perm"))
    report = tb.adaptability_report(source, policy, target)
    assert np.allclose(report.eps, 0.0, atol=1e-12)
    assert np.array_equal(report.argmin_actions, np.broadcast_to(perm, (4, 3)))

    beta = 0.2
    mixed = tb.adaptability_report(source, policy, tb.uniform_mixture_target(source, beta))
    assert np.all(mixed.eps <= beta + 1e-12)


def test_divergence_bound_identical_chains():
    chain = tb.random_markov_chain(3, RngStream(7, "chain"))
    out = tb.verify_divergence_lemma(chain, chain, 3)
    assert out["lhs"] == pytest.approx(0.0, abs=1e-15)
    assert out["rhs"] == pytest.approx(0.0, abs=1e-15)
    assert out["holds"]


def test_divergence_bound_unreachable_state_divergence():
    # state 2 is unreachable under p1 but p2 funnels mass into it; the
    # trajectory gap is positive yet still below the step-wise bound
    k1 = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    k2 = np.array([[0.5, 0.0, 0.5], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    init = np.array([1.0, 0.0, 0.0])
    out = tb.verify_divergence_lemma(tb.MarkovChain(init, k1), tb.MarkovChain(init, k2), 3)
    assert out["lhs"] > 0.0
    assert out["holds"]


def test_divergence_bound_fuzz():
    violations = 0
    for seed in range(1000):
        rng = RngStream(seed, "fuzz")
        p1 = tb.random_markov_chain(3, rng.child("p1"))
        p2 = tb.random_markov_chain(3, rng.child("p2"))
        if not tb.verify_divergence_lemma(p1, p2, 3)["holds"]:
            violations += 1
    assert violations == 0


def test_regret_zero_for_realizable_warm_start():
    rng = RngStream(8, "warm")
    source = tb.random_mdp(4, 2, 4, rng.child("s"))
    policy = tb.random_policy(4, 2, rng.child("pi"))
    target, _ = tb.permuted_action_target(source, rng.child("t"))
    # alpha = 0 keeps the expected-count MLE exactly on the target rows, so
    # the learner plays the hindsight optimum from the start
    report = tb.pada_tabular(source, policy, target, iterations=32, n_samples=100, mode="exact", smoothing=0.0)
    curve = tb.ftl_regret_curve(report)
    # iteration 1 plays the uninformed uniform model; every later prefix is
    # exact, so regret is the first-step loss spread over T
    assert np.all(curve[1:] <= curve[:-1] + 1e-12)
    warm_losses = report.ftl_loss[1:]
    assert np.allclose(warm_losses, 0.0, atol=1e-12)


def test_regret_nonnegative_and_decaying():
    for seed in range(3):
        source, policy, target = make_pair(seed, kind="random")
        report = tb.pada_tabular(source, policy, target, iterations=256, n_samples=500, mode="exact", compute_trajectory_gap=False)
        curve = tb.ftl_regret_curve(report)
        assert np.all(curve >= -1e-12)
        assert curve[255] <= 0.25 * curve[15]


def test_regret_requires_exact_mode():
    source, policy, target = make_pair(9, kind="permuted")
    report = tb.pada_tabular(source, policy, target, iterations=5, n_samples=20, mode="sampled", rng=RngStream(1, "s"))
    with pytest.raises(ValueError):
        tb.ftl_regret_curve(report)


def test_mdp_json_roundtrip():
    rng = RngStream(10, "json")
    mdp = tb.random_mdp(4, 2, 5, rng.child("mdp"))
    doc = mdp.to_json_dict()
    back = tb.TabularMdp.from_json_dict(doc)
    assert np.array_equal(back.transitions, mdp.transitions)
    assert np.array_equal(back.rewards, mdp.rewards)
    assert np.array_equal(back.initial, mdp.initial)


def test_report_csv_columns(tmp_path):
    source, policy, target = make_pair(11, kind="permuted")
    report = tb.pada_tabular(source, policy, target, iterations=10, n_samples=50, mode="exact")
    path = tmp_path / "report.csv"
    report.to_csv(path)
    header = path.read_text().splitlines()[0]
    assert header == "iteration,one_step_gap,trajectory_gap,avg_regret,eps_term"
    assert len(path.read_text().splitlines()) == 11


def test_normalized_tabular_rollout_return_in_unit_interval():
    rng = RngStream(12, "roll")
    mdp = tb.random_mdp(5, 3, 6, rng.child("mdp"))
    env = tb.TabularEnv(mdp)
    policy_arr = tb.random_policy(5, 3, rng.child("pi"))
    for seed in range(10):
        traj = rollout(env, lambda s: int(policy_arr[s]), mdp.horizon, RngStream(seed, "ep"))
        assert 0.0 <= episodic_return(traj) <= 1.0


def test_trajectory_distribution_sums_to_one_fuzz():
    for seed in range(25):
        rng = RngStream(seed, "sum1")
        mdp = tb.random_mdp(int(rng.gen.integers(2, 6)), 2, int(rng.gen.integers(1, 5)), rng.child("mdp"))
        policy = tb.random_policy(mdp.n_states, 2, rng.child("pi"))
        rho = tb.exact_trajectory_distribution(mdp, policy)
        assert abs(rho.probs.sum() - 1.0) <= 1e-9
