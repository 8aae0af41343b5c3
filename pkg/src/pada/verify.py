"""Acceptance checks: one callable per criterion, shared by the test
suite and the ``pada verify`` command.

Each criterion returns a result with a pass flag and a human-readable
detail string.  The continuous-control criteria share one set of seeded
adaptation runs, cached per process, executed through the same config
path as the command line so their CSV artifacts are the audited ones.
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import cli, envs, tabular as tb
from .core import RngStream
from .nn import Mlp, mse_loss, grad as nn_grad
from .planner import ActionBox, CemConfig, cem_minimize

PENDULUM_SEEDS = (0, 1, 2, 3, 4)
PENDULUM_BUDGET = 50_000
CONTINUOUS_CRITERIA = (8, 9, 10)


@dataclass
class CriterionResult:
    number: int
    description: str
    passed: bool
    detail: str
    seconds: float
    executed: bool = True


# ---------------------------------------------------------------------------
# Tabular criteria


def criterion_1() -> tuple[bool, str]:
    """Exact-mode limit: permuted-action targets converge to zero gap."""
    worst = 0.0
    for seed in range(20):
        rng = RngStream(seed, "limit")
        source = tb.random_mdp(5, 3, 6, rng.child("mdp"))
        policy = tb.random_policy(5, 3, rng.child("policy"))
        target, _ = tb.permuted_action_target(source, rng.child("target"))
        report = tb.pada_tabular(source, policy, target, iterations=200, n_samples=500, mode="exact")
        worst = max(worst, float(report.trajectory_gap[report.best_iteration]))
    return worst <= 1e-6, f"worst final trajectory gap {worst:.3g} (bound 1e-6, 20 instances)"


def criterion_2() -> tuple[bool, str]:
    """Sampled-mode trend: the one-step gap at T=400 is at most half its
    value at T=25 (median over 20 seeds)."""
    at_25, at_400 = [], []
    for seed in range(20):
        rng = RngStream(seed, "rate")
        source = tb.random_mdp(6, 3, 5, rng.child("mdp"), concentration=0.5)
        policy = tb.random_policy(6, 3, rng.child("policy"))
        target, _ = tb.decoy_permuted_target(
            source, rng.child("target"), extra_actions=2, decoy_mix=0.06, shadow_policy=policy
        )
        report = tb.pada_tabular(
            source, policy, target, iterations=400, n_samples=500,
            mode="sampled", rng=rng.child("run"), compute_trajectory_gap=False,
        )
        at_25.append(report.one_step_gap[24])
        at_400.append(report.one_step_gap[399])
    early, late = float(np.median(at_25)), float(np.median(at_400))
    return late <= 0.5 * early, f"median gap {early:.4f} at T=25 vs {late:.4f} at T=400"


def criterion_3() -> tuple[bool, str]:
    """Mixture targets: the converged gap sits on the irreducible floor."""
    ok = True
    details = []
    for seed in range(10):
        rng = RngStream(seed, "floor")
        source = tb.random_mdp(5, 3, 6, rng.child("mdp"))
        policy = tb.random_policy(5, 3, rng.child("policy"))
        target = tb.uniform_mixture_target(source, 0.1)
        report = tb.pada_tabular(source, policy, target, iterations=200, n_samples=500, mode="exact")
        gap, floor = float(report.one_step_gap[-1]), float(report.eps_term[-1])
        ok = ok and (floor - 1e-9 <= gap <= floor + 0.05)
        details.append(gap - floor)
    return ok, f"gap minus floor within [{min(details):.2e}, {max(details):.2e}] over 10 instances"


def criterion_4() -> tuple[bool, str]:
    """Trajectory-vs-stepwise divergence bound fuzz, zero violations."""
    violations = 0
    for seed in range(1000):
        rng = RngStream(seed, "fuzz")
        p1 = tb.random_markov_chain(3, rng.child("p1"))
        p2 = tb.random_markov_chain(3, rng.child("p2"))
        if not tb.verify_divergence_lemma(p1, p2, 3)["holds"]:
            violations += 1
    return violations == 0, f"{violations} violations in 1000 chain pairs"


def criterion_5() -> tuple[bool, str]:
    """Average regret at T=256 is at most a quarter of its T=16 value."""
    worst_ratio = 0.0
    for seed in range(10):
        rng = RngStream(seed, "regret")
        source = tb.random_mdp(5, 3, 6, rng.child("mdp"))
        policy = tb.random_policy(5, 3, rng.child("policy"))
        target = tb.random_mdp(5, 3, 6, rng.child("target"))
        report = tb.pada_tabular(
            source, policy, target, iterations=256, n_samples=500, mode="exact", compute_trajectory_gap=False
        )
        curve = tb.ftl_regret_curve(report)
        worst_ratio = max(worst_ratio, float(curve[255] / curve[15]))
    return worst_ratio <= 0.25, f"worst regret ratio T=256 vs T=16: {worst_ratio:.4f} (bound 0.25)"


def criterion_6() -> tuple[bool, str]:
    """Finite-difference audit of every network architecture in use."""
    architectures = {
        "deviation": ([4, 128, 128, 3], 17),
        "policy": ([3, 128, 128, 1], 18),
        "inverse_dynamics": ([6, 128, 128, 1], 17),
        "source_model": ([4, 128, 128, 3], 19),
    }
    worst = 0.0
    for name, (widths, seed) in architectures.items():
        rng = RngStream(seed, f"fd-{name}")
        net = Mlp(widths, rng.child("init"))
        gen = rng.child("data").gen
        x = gen.standard_normal((8, widths[0]))
        t = gen.standard_normal((8, widths[-1]))
        grads, _ = nn_grad(net, x, t)
        params = list(net.parameters())
        flat = [g for pair in grads for g in pair]
        pick = rng.child("coords").gen
        eps = 1e-5
        for _ in range(100):
            pi = int(pick.integers(0, len(params)))
            idx = tuple(int(pick.integers(0, s)) for s in params[pi].shape)
            p = params[pi]
            old = p[idx]
            p[idx] = old + eps
            up = mse_loss(net, x, t)
            p[idx] = old - eps
            down = mse_loss(net, x, t)
            p[idx] = old
            numeric = (up - down) / (2 * eps)
            analytic = flat[pi][idx]
            rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, rel)
    return worst < 1e-4, f"worst relative gradient error {worst:.3g} (bound 1e-4)"


def criterion_7() -> tuple[bool, str]:
    """Planner accuracy on seeded random quadratics against a dense grid."""
    hits = 0
    total = 0
    for dim in (1, 2, 4):
        for trial in range(17 if dim != 4 else 16):
            rng = RngStream(1000 * dim + trial, "quadratic")
            gen = rng.child("instance").gen
            weights = gen.uniform(0.5, 3.0, size=dim)
            centers = gen.uniform(-0.9, 0.9, size=dim)
            box = ActionBox(-np.ones(dim), np.ones(dim))
            objective = lambda a: np.sum(weights * (a - centers) ** 2, axis=1)
            result = cem_minimize(objective, box, np.zeros(dim), CemConfig(), rng.child("cem"))
            grid = np.arange(-1.0, 1.0 + 1e-4, 1e-4)
            oracle = np.array([grid[np.argmin(w * (grid - c) ** 2)] for w, c in zip(weights, centers)])
            total += 1
            if np.max(np.abs(result - oracle)) < 1e-2:
                hits += 1
    return hits >= 48, f"{hits}/{total} quadratics within 1e-2 of the grid minimizer (need 48)"


# ---------------------------------------------------------------------------
# Continuous criteria (shared runs)


def _pendulum_config(algorithm: str) -> dict:
    return {
        "mode": "continuous",
        "env": "pendulum",
        "perturbation": {"mass_scale": 1.5},
        "algorithm": algorithm,
        "budget": PENDULUM_BUDGET,
        "seeds": list(PENDULUM_SEEDS),
        "source_model": "exact",
        "cem": {},
        "adapt": {"eval_interval": 2500, "eval_episodes": 5},
    }


@lru_cache(maxsize=None)
def _pendulum_rundir() -> str:
    return tempfile.mkdtemp(prefix="pada-accept-")


@lru_cache(maxsize=None)
def pendulum_summary(algorithm: str) -> dict:
    """Run (once per process) the shared mass-1.5 pendulum experiment."""
    cfg = cli.resolve_continuous_config(_pendulum_config(algorithm))
    out_dir = Path(_pendulum_rundir()) / algorithm
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_paths = {}
    for seed in cfg["seeds"]:
        seed_paths[seed] = cli.run_seed(cfg, seed, out_dir)
    summary = cli.summarize_run(cfg, out_dir, seed_paths, [])
    import json

    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return summary


def criterion_8() -> tuple[bool, str]:
    """Mass-1.5 pendulum: adapted return clears 80 percent of the frozen
    reference, beats the unadapted policy, and at least halves the mean
    per-step deviation of the unadapted policy."""
    adapted = pendulum_summary("pada_dm")
    unadapted = pendulum_summary("source_only")
    threshold = adapted["threshold_return"]
    ret_ok = adapted["final_return_median"] >= threshold
    beat_ok = adapted["final_return_median"] > unadapted["final_return_median"]
    dev_ok = adapted["final_deviation_median"] <= 0.5 * unadapted["final_deviation_median"]
    detail = (
        f"return {adapted['final_return_median']:.1f} (threshold {threshold:.1f}, "
        f"unadapted {unadapted['final_return_median']:.1f}); deviation "
        f"{adapted['final_deviation_median']:.4f} vs unadapted {unadapted['final_deviation_median']:.4f}"
    )
    return ret_ok and beat_ok and dev_ok, detail


def criterion_9() -> tuple[bool, str]:
    """Distilled policy return within ten percent of the planner-in-the-
    loop return."""
    adapted = pendulum_summary("pada_dm")
    distilled = pendulum_summary("pada_dm_distill")
    cem_return = adapted["final_return_median"]
    gap = abs(distilled["final_return_median"] - cem_return)
    return gap <= 0.10 * cem_return, (
        f"distilled {distilled['final_return_median']:.1f} vs planner {cem_return:.1f} "
        f"(gap {gap:.1f}, allowed {0.10 * cem_return:.1f})"
    )


def criterion_10() -> tuple[bool, str]:
    """Sample efficiency ordering against the inverse-dynamics baseline."""
    adapted = pendulum_summary("pada_dm")
    idm = pendulum_summary("idm_baseline")
    ours = adapted["samples_to_threshold_median"]
    theirs = idm["samples_to_threshold_median"]
    ours_v = float("inf") if ours is None else ours
    theirs_v = float("inf") if theirs is None else theirs
    return ours_v <= theirs_v, f"samples to threshold: ours {ours}, baseline {theirs}"


def criterion_11() -> tuple[bool, str]:
    """Byte-identical artifacts when a run repeats with the same config."""
    import filecmp
    import json

    with tempfile.TemporaryDirectory(prefix="pada-determinism-") as tmp:
        tmp_path = Path(tmp)
        tab_cfg = {
            "mode": "tabular",
            "instance": {"kind": "permuted", "n_states": 5, "n_actions": 3, "horizon": 6, "seed": 7},
            "iterations": 60,
            "samples_per_iteration": 200,
            "run_mode": "sampled",
            "seeds": [0, 1],
            "lemma_fuzz_pairs": 50,
        }
        cfg_path = tmp_path / "tabular.json"
        cfg_path.write_text(json.dumps(tab_cfg))
        cli.run_tabular_suite(str(cfg_path), out_override=tmp_path / "tab-a")
        cli.run_tabular_suite(str(cfg_path), out_override=tmp_path / "tab-b")

        cont_cfg = {
            "mode": "continuous",
            "env": "point_mass",
            "perturbation": {"mass_scale": 1.3},
            "algorithm": "pada_dm_distill",
            "budget": 3000,
            "seeds": [0],
            "source_model": "exact",
            "cem": {},
            "adapt": {"eval_interval": 1000, "eval_episodes": 2, "distill_period": 1500, "distill_sgd_steps": 200},
        }
        cfg_path2 = tmp_path / "continuous.json"
        cfg_path2.write_text(json.dumps(cont_cfg))
        cli.run_experiment(str(cfg_path2), out_override=tmp_path / "cont-a")
        cli.run_experiment(str(cfg_path2), out_override=tmp_path / "cont-b")

        mismatches = []
        for pair in (("tab-a", "tab-b"), ("cont-a", "cont-b")):
            left, right = tmp_path / pair[0], tmp_path / pair[1]
            for csv_file in sorted(left.glob("*.csv")):
                if not filecmp.cmp(csv_file, right / csv_file.name, shallow=False):
                    mismatches.append(csv_file.name)
        return not mismatches, (
            "all CSVs byte-identical across repeats" if not mismatches else f"differing files: {mismatches}"
        )


CRITERIA = {
    1: ("tabular exact-mode limit", criterion_1),
    2: ("tabular sampled-mode rate trend", criterion_2),
    3: ("irreducible-error floor", criterion_3),
    4: ("divergence-bound fuzz", criterion_4),
    5: ("model-sequence regret decay", criterion_5),
    6: ("gradient fidelity", criterion_6),
    7: ("planner accuracy on quadratics", criterion_7),
    8: ("pendulum adaptation, mass x1.5", criterion_8),
    9: ("distillation parity", criterion_9),
    10: ("baseline sample-efficiency ordering", criterion_10),
    11: ("determinism audit", criterion_11),
}


def run_criteria(only=None, skip_continuous: bool = False) -> list[CriterionResult]:
    numbers = sorted(only) if only else sorted(CRITERIA)
    results = []
    for number in numbers:
        description, fn = CRITERIA[number]
        if skip_continuous and number in CONTINUOUS_CRITERIA:
            results.append(CriterionResult(number, description, False, "skipped", 0.0, executed=False))
            continue
        start = time.perf_counter()
        passed, detail = fn()
        results.append(CriterionResult(number, description, passed, detail, time.perf_counter() - start))
    return results


def print_table(results: list[CriterionResult]):
    width = max(len(r.description) for r in results)
    for r in results:
        if not r.executed:
            status = "SKIP"
        else:
            status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.number:>2} {r.description:<{width}}  {r.detail} ({r.seconds:.1f}s)")
