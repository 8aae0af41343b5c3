"""Experiment driver.

``pada run`` executes seeded adaptation experiments from a JSON config and
writes one learning-curve CSV per seed plus a summary computed by reading
those CSVs back.  ``pada tabular`` drives the finite-MDP engine and its
diagnostic reports.  ``pada verify`` runs the acceptance checks and prints
a pass/fail table.  Column semantics for every emitted file are documented
in docs/metrics.md.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .adapt import AdaptRunConfig, idm_baseline_run, pada_dm_run, source_only_run
from .core import RngStream
from .envs import IDENTITY_CONFIG, REFERENCE_RETURNS, Env, PerturbationConfig, get_spec, make_pair, scripted_source_policy
from .nn import ExactSourceModel, save_checkpoint, pretrain_source_model
from .planner import CemConfig
from . import tabular as tb

ALGORITHMS = ("pada_dm", "pada_dm_distill", "idm_baseline", "source_only")
CURVE_COLUMNS = [
    "env_steps",
    "episodic_return_mean",
    "episodic_return_std",
    "deviation_mean",
    "explored_fraction",
    "buffer_size",
    "wall_time_s",
]
RETURN_THRESHOLD_FRACTION = 0.8


def _fmt(value) -> str:
    if isinstance(value, float):
        if value != value:
            return "nan"
        return repr(value)
    return str(value)


def config_digest(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


def load_config(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SystemExit(f"error: cannot read config {path}: {exc}")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SystemExit(f"error: {path}:{exc.lineno}:{exc.colno}: {exc.msg}")
    if not isinstance(doc, dict):
        raise SystemExit(f"error: {path}: top-level config must be an object")
    return doc


# ---------------------------------------------------------------------------
# Continuous experiments


def resolve_continuous_config(doc: dict) -> dict:
    cfg = dict(doc)
    cfg.setdefault("mode", "continuous")
    if cfg["mode"] != "continuous":
        raise ValueError(f"expected continuous mode, got {cfg['mode']!r}")
    if cfg.get("algorithm") not in ALGORITHMS:
        raise ValueError(f"algorithm must be one of {ALGORITHMS}")
    get_spec(cfg.get("env", ""))
    cfg["perturbation"] = PerturbationConfig.from_dict(cfg.get("perturbation", {})).to_dict()
    cfg["budget"] = int(cfg.get("budget", 50_000))
    seeds = cfg.get("seeds", [0])
    if not seeds:
        raise ValueError("seeds must be a nonempty list")
    cfg["seeds"] = [int(s) for s in seeds]
    env_seed = os.environ.get("PADA_SEED")
    if env_seed is not None:
        cfg["seeds"][0] = int(env_seed)
    cfg["source_model"] = cfg.get("source_model", "exact")
    if cfg["source_model"] not in ("exact", "pretrained"):
        raise ValueError("source_model must be 'exact' or 'pretrained'")
    cfg["cem"] = dict(cfg.get("cem", {}))
    CemConfig.from_dict(cfg["cem"])
    cfg["adapt"] = dict(cfg.get("adapt", {}))
    adapt_doc = dict(cfg["adapt"])
    adapt_doc["total_steps"] = cfg["budget"]
    adapt_doc["distill"] = cfg["algorithm"] == "pada_dm_distill"
    AdaptRunConfig.from_dict(adapt_doc)
    cfg["pretrain_seed"] = int(cfg.get("pretrain_seed", 0))
    cfg["pretrain_triples"] = int(cfg.get("pretrain_triples", 20_000))
    return cfg


def _build_source_model(cfg: dict, out_dir: Path | None):
    source_env = Env(cfg["env"], IDENTITY_CONFIG)
    policy = scripted_source_policy(cfg["env"])
    if cfg["source_model"] == "exact":
        return ExactSourceModel(source_env)
    rng = RngStream(cfg["pretrain_seed"], "source-model")
    states, actions, next_states = collect_source_triples(source_env, policy, cfg["pretrain_triples"], rng.child("collect"))
    model, rmse = pretrain_source_model(
        states, actions, next_states, source_env.spec.action_scale, rng.child("train")
    )
    if out_dir is not None:
        save_checkpoint(model.net, out_dir / "source_model.bin", normalizer=model.normalizer, extra={"holdout_rmse": rmse})
    return model


def collect_source_triples(env: Env, policy, n: int, rng: RngStream, jitter: float = 0.15):
    """Roll the scripted policy with exploration jitter to gather data."""
    states = np.empty((n, env.spec.state_dim))
    actions = np.empty((n, env.spec.action_dim))
    next_states = np.empty((n, env.spec.state_dim))
    state = env.reset(rng)
    episode = 0
    for i in range(n):
        action = np.asarray(policy(state), dtype=np.float64)
        action = action + jitter * env.spec.action_scale * rng.gen.standard_normal(action.shape)
        action = np.clip(action, env.spec.action_low, env.spec.action_high)
        nxt, terminated = env.step(state, action, rng)
        states[i], actions[i], next_states[i] = state, action, nxt
        state = nxt
        episode += 1
        if terminated or episode >= env.max_episode_steps:
            state = env.reset(rng)
            episode = 0
    return states, actions, next_states


def run_seed(cfg: dict, seed: int, out_dir: Path) -> Path:
    """Execute one seed and write its learning-curve CSV."""
    pair = make_pair(cfg["env"], PerturbationConfig.from_dict(cfg["perturbation"]))
    policy = scripted_source_policy(cfg["env"])
    source_model = _build_source_model(cfg, None)
    adapt_doc = dict(cfg["adapt"])
    adapt_doc["total_steps"] = cfg["budget"]
    adapt_doc["distill"] = cfg["algorithm"] == "pada_dm_distill"
    adapt_cfg = AdaptRunConfig.from_dict(adapt_doc)
    cem = CemConfig.from_dict(cfg["cem"])
    rng = RngStream(seed, f"{cfg['algorithm']}/{cfg['env']}")
    runner = {
        "pada_dm": pada_dm_run,
        "pada_dm_distill": pada_dm_run,
        "idm_baseline": idm_baseline_run,
        "source_only": source_only_run,
    }[cfg["algorithm"]]
    result = runner(pair, policy, source_model, adapt_cfg, cem, rng)
    path = out_dir / f"seed_{seed}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        for point in result.curve:
            writer.writerow(
                [
                    point.env_steps,
                    _fmt(point.episodic_return_mean),
                    _fmt(point.episodic_return_std),
                    _fmt(point.deviation_mean),
                    _fmt(point.explored_fraction),
                    point.buffer_size,
                    _fmt(point.wall_time_s),
                ]
            )
    return path


def read_curve(path) -> dict:
    rows = list(csv.DictReader(open(path)))
    return {
        "env_steps": [int(r["env_steps"]) for r in rows],
        "return_mean": [float(r["episodic_return_mean"]) for r in rows],
        "deviation_mean": [float(r["deviation_mean"]) for r in rows],
    }


def samples_to_threshold(curve: dict, threshold: float):
    for steps, value in zip(curve["env_steps"], curve["return_mean"]):
        if value >= threshold:
            return steps
    return None


def summarize_run(cfg: dict, out_dir: Path, seed_paths: dict, failed: list) -> dict:
    """Build the run summary strictly from the emitted CSV files."""
    reference = REFERENCE_RETURNS[cfg["env"]]
    threshold = RETURN_THRESHOLD_FRACTION * reference
    per_seed = []
    finals, deviations = [], []
    for seed in cfg["seeds"]:
        if seed in failed:
            per_seed.append({"seed": seed, "failed": True})
            continue
        path = seed_paths[seed]
        curve = read_curve(path)
        final_return = curve["return_mean"][-1]
        final_dev = curve["deviation_mean"][-1]
        finals.append(final_return)
        deviations.append(final_dev)
        per_seed.append(
            {
                "seed": seed,
                "csv": path.name,
                "final_return": final_return,
                "final_deviation": final_dev,
                "samples_to_threshold": samples_to_threshold(curve, threshold),
            }
        )
    reached = [p["samples_to_threshold"] for p in per_seed if not p.get("failed")]
    median_sts = None
    if reached:
        ordered = sorted(float("inf") if v is None else v for v in reached)
        mid = ordered[(len(ordered) - 1) // 2]
        median_sts = None if mid == float("inf") else int(mid)
    return {
        "algorithm": cfg["algorithm"],
        "env": cfg["env"],
        "config_hash": config_digest(cfg),
        "reference_return": reference,
        "threshold_return": threshold,
        "seeds": cfg["seeds"],
        "failed_seeds": failed,
        "final_return_mean": float(np.mean(finals)) if finals else None,
        "final_return_std": float(np.std(finals)) if finals else None,
        "final_return_median": float(np.median(finals)) if finals else None,
        "final_deviation_mean": float(np.mean(deviations)) if deviations else None,
        "final_deviation_median": float(np.median(deviations)) if deviations else None,
        "samples_to_threshold_per_seed": {str(p["seed"]): p.get("samples_to_threshold") for p in per_seed if not p.get("failed")},
        "samples_to_threshold_median": median_sts,
        "per_seed": per_seed,
    }


def _seed_worker(args):
    cfg, seed, out_dir = args
    return seed, run_seed(cfg, seed, Path(out_dir))


def run_experiment(config_path: str, seeds_override=None, out_override=None, parallel: int = 1) -> dict:
    doc = load_config(config_path)
    try:
        cfg = resolve_continuous_config(doc)
    except ValueError as exc:
        raise SystemExit(f"error: {config_path}: {exc}")
    if seeds_override:
        cfg["seeds"] = [int(s) for s in seeds_override]
    out_dir = Path(out_override or cfg.get("output_dir", "runs/experiment"))
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg["source_model"] == "pretrained":
        _build_source_model(cfg, out_dir)

    seed_paths: dict = {}
    failed: list = []
    if parallel > 1:
        ctx = get_context("spawn")
        with ctx.Pool(min(parallel, len(cfg["seeds"]))) as pool:
            for seed, path in pool.map(_seed_worker, [(cfg, s, str(out_dir)) for s in cfg["seeds"]]):
                seed_paths[seed] = path
    else:
        for seed in cfg["seeds"]:
            try:
                seed_paths[seed] = run_seed(cfg, seed, out_dir)
            except Exception as exc:  # keep partial outputs, mark the seed
                print(f"seed {seed} failed: {exc}", file=sys.stderr)
                failed.append(seed)
    summary = summarize_run(cfg, out_dir, seed_paths, failed)
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return summary


# ---------------------------------------------------------------------------
# Tabular experiments


def resolve_tabular_config(doc: dict) -> dict:
    cfg = dict(doc)
    if cfg.get("mode") != "tabular":
        raise ValueError(f"expected tabular mode, got {cfg.get('mode')!r}")
    inst = dict(cfg.get("instance", {}))
    kind = inst.setdefault("kind", "permuted")
    if "file" not in inst:
        if kind not in ("identity", "permuted", "mixture", "decoy", "random"):
            raise ValueError(f"unknown instance kind {kind!r}")
        inst.setdefault("n_states", 5)
        inst.setdefault("n_actions", 3)
        inst.setdefault("horizon", 6)
        inst.setdefault("seed", 0)
        inst.setdefault("beta", 0.1)
    cfg["instance"] = inst
    cfg["iterations"] = int(cfg.get("iterations", 200))
    cfg["samples_per_iteration"] = int(cfg.get("samples_per_iteration", 500))
    cfg["run_mode"] = cfg.get("run_mode", "exact")
    if cfg["run_mode"] not in ("exact", "sampled"):
        raise ValueError("run_mode must be 'exact' or 'sampled'")
    cfg["smoothing"] = float(cfg.get("smoothing", tb.DEFAULT_SMOOTHING))
    seeds = cfg.get("seeds", [0])
    if not seeds:
        raise ValueError("seeds must be a nonempty list")
    cfg["seeds"] = [int(s) for s in seeds]
    env_seed = os.environ.get("PADA_SEED")
    if env_seed is not None:
        cfg["seeds"][0] = int(env_seed)
    cfg["lemma_fuzz_pairs"] = int(cfg.get("lemma_fuzz_pairs", 1000))
    return cfg


def build_instance(inst: dict):
    """Materialize (source, source policy, target) from an instance spec."""
    if "file" in inst:
        with open(inst["file"]) as fh:
            source = tb.TabularMdp.from_json_dict(json.load(fh))
        rng = RngStream(int(inst.get("seed", 0)), "tabular-instance")
        policy = tb.random_policy(source.n_states, source.n_actions, rng.child("policy"))
        target, _ = tb.permuted_action_target(source, rng.child("target"))
        return source, policy, target
    rng = RngStream(int(inst["seed"]), "tabular-instance")
    source = tb.random_mdp(
        int(inst["n_states"]), int(inst["n_actions"]), int(inst["horizon"]),
        rng.child("source"), concentration=float(inst.get("concentration", 1.0)),
    )
    policy = tb.random_policy(source.n_states, source.n_actions, rng.child("policy"))
    kind = inst["kind"]
    if kind == "identity":
        target = source
    elif kind == "permuted":
        target, _ = tb.permuted_action_target(source, rng.child("target"))
    elif kind == "mixture":
        target = tb.uniform_mixture_target(source, float(inst["beta"]))
    elif kind == "decoy":
        target, _ = tb.decoy_permuted_target(
            source, rng.child("target"),
            extra_actions=int(inst.get("extra_actions", 2)),
            decoy_mix=float(inst.get("decoy_mix", 0.06)),
            shadow_policy=policy,
        )
    else:
        target = tb.random_mdp(
            int(inst["n_states"]), int(inst["n_actions"]), int(inst["horizon"]),
            rng.child("target"), concentration=float(inst.get("concentration", 1.0)),
        )
    return source, policy, target


def run_tabular_suite(config_path: str, out_override=None) -> dict:
    doc = load_config(config_path)
    try:
        cfg = resolve_tabular_config(doc)
    except ValueError as exc:
        raise SystemExit(f"error: {config_path}: {exc}")
    out_dir = Path(out_override or cfg.get("output_dir", "runs/tabular"))
    out_dir.mkdir(parents=True, exist_ok=True)

    source, policy, target = build_instance(cfg["instance"])
    adaptability = tb.adaptability_report(source, policy, target)
    with open(out_dir / "adaptability.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["state", "source_action", "eps", "argmin_target_action"])
        for s in range(source.n_states):
            for a in range(source.n_actions):
                writer.writerow([s, a, _fmt(float(adaptability.eps[s, a])), int(adaptability.argmin_actions[s, a])])

    summary: dict = {
        "config_hash": config_digest(cfg),
        "mode": cfg["run_mode"],
        "per_seed": [],
    }
    for seed in cfg["seeds"]:
        report = tb.pada_tabular(
            source,
            policy,
            target,
            iterations=cfg["iterations"],
            n_samples=cfg["samples_per_iteration"],
            mode=cfg["run_mode"],
            smoothing=cfg["smoothing"],
            rng=RngStream(seed, "tabular-run") if cfg["run_mode"] == "sampled" else None,
        )
        report.to_csv(out_dir / f"report_seed{seed}.csv")
        entry = {
            "seed": seed,
            "best_iteration": int(report.best_iteration + 1),
            "final_one_step_gap": float(report.one_step_gap[-1]),
            "best_one_step_gap": float(report.one_step_gap[report.best_iteration]),
            "final_trajectory_gap": float(report.trajectory_gap[-1]),
            "best_trajectory_gap": float(report.trajectory_gap[report.best_iteration]),
        }
        if cfg["run_mode"] == "exact":
            curve = tb.ftl_regret_curve(report)
            with open(out_dir / f"regret_seed{seed}.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["iteration", "avg_regret"])
                for i, value in enumerate(curve, start=1):
                    writer.writerow([i, _fmt(float(value))])
            entry["final_avg_regret"] = float(curve[-1])
        summary["per_seed"].append(entry)

    fuzz_rng = RngStream(cfg["seeds"][0], "lemma-fuzz")
    violations = 0
    with open(out_dir / "divergence_bound.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair", "lhs", "rhs", "holds"])
        for i in range(cfg["lemma_fuzz_pairs"]):
            p1 = tb.random_markov_chain(3, fuzz_rng.child(f"p1-{i}"))
            p2 = tb.random_markov_chain(3, fuzz_rng.child(f"p2-{i}"))
            out = tb.verify_divergence_lemma(p1, p2, 3)
            violations += 0 if out["holds"] else 1
            writer.writerow([i, _fmt(out["lhs"]), _fmt(out["rhs"]), int(out["holds"])])
    summary["divergence_bound_pairs"] = cfg["lemma_fuzz_pairs"]
    summary["divergence_bound_violations"] = violations

    with open(out_dir / "tabular_summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return summary


# ---------------------------------------------------------------------------
# Entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pada", description="Policy adaptation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a continuous adaptation experiment")
    p_run.add_argument("config")
    p_run.add_argument("--seeds", help="comma-separated seed list overriding the config")
    p_run.add_argument("--out", help="output directory override")
    p_run.add_argument("--parallel", type=int, default=1, help="worker processes, one per seed")

    p_tab = sub.add_parser("tabular", help="run the finite-MDP suite")
    p_tab.add_argument("config")
    p_tab.add_argument("--out", help="output directory override")

    p_verify = sub.add_parser("verify", help="run the acceptance checks")
    p_verify.add_argument("--skip-continuous", action="store_true", help="skip the long environment-adaptation checks")
    p_verify.add_argument("--only", help="comma-separated criterion numbers")

    args = parser.parse_args(argv)
    if args.command == "run":
        seeds = args.seeds.split(",") if args.seeds else None
        summary = run_experiment(args.config, seeds_override=seeds, out_override=args.out, parallel=args.parallel)
        print(json.dumps(summary, indent=1, sort_keys=True))
        return 0 if not summary["failed_seeds"] else 1
    if args.command == "tabular":
        summary = run_tabular_suite(args.config, out_override=args.out)
        print(json.dumps(summary, indent=1, sort_keys=True))
        return 0 if summary["divergence_bound_violations"] == 0 else 1
    if args.command == "verify":
        from . import verify

        only = [int(x) for x in args.only.split(",")] if args.only else None
        results = verify.run_criteria(only=only, skip_continuous=args.skip_continuous)
        verify.print_table(results)
        return 0 if all(r.passed for r in results if r.executed) else 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
