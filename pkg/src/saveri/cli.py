"""Command-line entry points.

Subcommands cover the whole workflow: ``gen`` rolls out episode batches,
``init`` performs offline initialization into a model bundle, ``adapt``
consumes real-system episodes online, ``assess`` scores a single input,
``run`` makes receding-horizon predictions with a recovery trigger,
``eval`` measures planning-phase prediction accuracy, and ``export`` dumps
plot-ready artifacts.

Exit codes: 0 success, 2 usage/input error, 3 insufficient data,
4 bundle/system incompatibility.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import belief, jsonio, metric
from .adapt import AdaptConfig, adaptation_step
from .belief import GridModel, assess, build_grid_model, grid_csv
from .bundle import BundleError, ModelBundle, load_bundle, save_bundle
from .config import config_hash, default_config, load_config, merge_config
from .dataset import (build_feedback_set, build_training_set, error_sequences,
                      scores, training_inputs)
from .dynamics import (SafeSet, UnknownSystemError, load_episodes, make_system,
                       plan_trajectory, rollout_batch, save_episodes,
                       system_from_config)
from .embedding import (EmbeddingConfig, NetworkConfig, map_input,
                        train_mapping, tsne_embed)
from .metric import distance_matrix, save_distance_matrix

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_INSUFFICIENT = 3
EXIT_INCOMPATIBLE = 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _system_from_cfg(cfg: dict, variant: str):
    return make_system(cfg["system"]["name"], variant,
                       **cfg["system"].get("params", {}))


def _adapt_config(cfg: dict) -> AdaptConfig:
    a = cfg["adapt"]
    return AdaptConfig(
        sigma_thre=a["sigma_thre"], mu_min=a["mu_min"], mu_ini=cfg["belief"]["mu_ini"],
        alpha=a["alpha"], beta=a["beta"], k_u=a["k_u"], k_min=cfg["belief"]["k_min"],
        decay_scope=a["decay_scope"], gp_signal_var=a["gp_signal_var"],
        gp_lengthscale=a["gp_lengthscale"], gp_noise=a["gp_noise"],
        gp_capacity=a["gp_capacity"], gp_optimize=a["gp_optimize"])


def _assessment_input(state, desired, H: int) -> np.ndarray:
    """[state; next H desired points], hold-last padded past the plan end."""
    desired = np.atleast_2d(np.asarray(desired, dtype=float))
    idx = np.minimum(np.arange(H), len(desired) - 1)
    return np.concatenate([np.asarray(state, dtype=float).ravel(),
                           desired[idx].ravel()])


# ---------------------------------------------------------------------------
# pipeline functions (importable; the cmd_* wrappers add I/O)


def offline_init(episodes, cfg: dict, seed: int):
    """Training set -> distances -> t-SNE -> mapping network -> grid priors.

    Returns (bundle-sans-meta fields, stats dict, distance matrix).
    """
    d = cfg["data"]
    data = build_training_set(episodes, H=d["H"], gamma=d["gamma"],
                              stride=d["stride"])
    n_t = len(data)
    e = cfg["embedding"]
    if n_t < 3 * e["perplexity"]:
        raise CliError(
            f"n_t={n_t} is below 3*perplexity={3 * e['perplexity']:.0f}; "
            "generate more episodes or lower the perplexity",
            EXIT_INSUFFICIENT)

    dist = distance_matrix((error_sequences(data), scores(data)),
                           cfg["metric"]["delta_lambda"])
    emb_cfg = EmbeddingConfig(
        n_y=e["n_y"], perplexity=e["perplexity"], iterations=e["iterations"],
        learning_rate=e["learning_rate"], exaggeration=e["exaggeration"],
        exaggeration_iters=e["exaggeration_iters"],
        momentum_start=e["momentum_start"], momentum_final=e["momentum_final"],
        momentum_switch=e["momentum_switch"], seed=seed)
    embedded = tsne_embed(dist, emb_cfg)

    n = cfg["network"]
    net_cfg = NetworkConfig(
        hidden=tuple(n["hidden"]), activation=n["activation"],
        learning_rate=n["learning_rate"], batch_size=n["batch_size"],
        epochs=n["epochs"], seed=seed + 1)
    net = train_mapping(training_inputs(data), embedded, net_cfg)

    g = cfg["grid"]
    model = build_grid_model(
        embedded.coordinates, scores(data), mu_ini=cfg["belief"]["mu_ini"],
        k_min=cfg["belief"]["k_min"], grid_shape=tuple(g["cells"]),
        expand=g["expand"], cell_length=g["cell_length"], net=net)

    populated = int(np.sum(model.k_tilde >= cfg["belief"]["k_min"]))
    stats = {"n_t": n_t, "kl": embedded.kl,
             "kl_exaggeration_end": embedded.kl_exaggeration_end,
             "rmse": net.final_rmse, "populated_cells": populated}
    return net, model, stats, dist


def run_adaptation(bundle: ModelBundle, n_episodes: int, seed: int,
                   k_u: Optional[int] = None, log_path=None):
    """Roll real-system episodes, build feedback data and adapt every k_u.

    Mutates the bundle's grid/gp in place (each step swaps in fresh model
    objects) and returns the number of feedback data consumed.
    """
    cfg = bundle.config
    acfg = _adapt_config(cfg)
    if k_u is not None:
        acfg.k_u = k_u
    d = cfg["data"]
    real = _system_from_cfg(cfg, "real")
    nominal = _system_from_cfg(cfg, "nominal")
    safe_set = real.default_safe_set()
    expected = real.n_s + d["H"] * real.n_z
    if bundle.net.layer_sizes[0] != expected:
        raise CliError(
            f"bundle expects input dimension {bundle.net.layer_sizes[0]}, "
            f"system produces {expected}", EXIT_INCOMPATIBLE)

    log_f = open(log_path, "w", encoding="utf-8") if log_path else None
    buffer = []
    total = 0
    step = 0
    try:
        def flush(batch):
            nonlocal step
            model, gp, entry = adaptation_step(bundle.grid, bundle.gp, batch, acfg)
            bundle.grid, bundle.gp = model, gp
            step += 1
            if entry and log_f:
                rec = {"step": step, **entry.to_dict()}
                log_f.write(jsonio.dumps(rec) + "\n")

        for i in range(n_episodes):
            ep = _roll_one(real, safe_set, d["T"], (seed, i))
            fb = build_feedback_set(ep, nominal, safe_set, H=d["H"],
                                    gamma=d["gamma"], stride=d["stride"],
                                    episode_id=i)
            buffer.extend(fb)
            total += len(fb)
            while len(buffer) >= acfg.k_u:
                flush(buffer[:acfg.k_u])
                buffer = buffer[acfg.k_u:]
        if buffer:
            flush(buffer)
    finally:
        if log_f:
            log_f.close()
    return total


def _roll_one(system, safe_set, T, seed):
    from .dynamics import rollout_episode
    return rollout_episode(system, safe_set, T, seed)


@dataclass
class EvalReport:
    episodes: int
    threshold: float
    safe_pred_safe: int = 0
    safe_pred_unsafe: int = 0
    unsafe_pred_unsafe: int = 0
    unsafe_pred_safe: int = 0
    brier: float = 0.0
    no_estimate: int = 0
    trigger: Optional[dict] = None

    @property
    def accuracy_safe(self) -> Optional[float]:
        n = self.safe_pred_safe + self.safe_pred_unsafe
        return self.safe_pred_safe / n if n else None

    @property
    def accuracy_unsafe(self) -> Optional[float]:
        n = self.unsafe_pred_unsafe + self.unsafe_pred_safe
        return self.unsafe_pred_unsafe / n if n else None

    def to_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "threshold": self.threshold,
            "counts": {
                "safe_pred_safe": self.safe_pred_safe,
                "safe_pred_unsafe": self.safe_pred_unsafe,
                "unsafe_pred_unsafe": self.unsafe_pred_unsafe,
                "unsafe_pred_safe": self.unsafe_pred_safe,
            },
            "accuracy": {"safe": self.accuracy_safe,
                         "unsafe": self.accuracy_unsafe},
            "brier": self.brier,
            "no_estimate": self.no_estimate,
            "trigger": self.trigger,
        }


def evaluate_planning(bundle: ModelBundle, variant: str, n_episodes: int,
                      threshold: float, seed: int) -> EvalReport:
    """Planning-phase verification: assess each fresh episode at k=0 and
    compare the prediction against the realized safety."""
    cfg = bundle.config
    d = cfg["data"]
    system = _system_from_cfg(cfg, variant)
    safe_set = system.default_safe_set()
    report = EvalReport(episodes=n_episodes, threshold=threshold)
    sq_sum = 0.0
    for i in range(n_episodes):
        ep = _roll_one(system, safe_set, d["T"], (seed, i))
        x0 = _assessment_input(ep.initial_state, ep.desired, d["H"])
        a = bundle.assess_input(x0)
        pred_safe = a.gamma >= threshold
        if a.no_estimate:
            report.no_estimate += 1
        if ep.safe and pred_safe:
            report.safe_pred_safe += 1
        elif ep.safe:
            report.safe_pred_unsafe += 1
        elif pred_safe:
            report.unsafe_pred_safe += 1
        else:
            report.unsafe_pred_unsafe += 1
        sq_sum += (a.gamma - (1.0 if ep.safe else 0.0)) ** 2
    report.brier = sq_sum / n_episodes if n_episodes else 0.0
    return report


def run_with_trigger(bundle: ModelBundle, variant: str, seed, threshold: float,
                     recovery: str = "hold",
                     disturbance_prob: Optional[float] = None) -> dict:
    """One receding-horizon episode: assess every step, emit a trigger when
    the predicted safety drops below the threshold, optionally switching the
    reference to hold position for the rest of the episode."""
    cfg = bundle.config
    d = cfg["data"]
    params = dict(cfg["system"].get("params", {}))
    if disturbance_prob is not None:
        dist = dict(params.get("disturbance", {}))
        dist["prob"] = disturbance_prob
        params["disturbance"] = dist
    system = make_system(cfg["system"]["name"], variant, **params)
    safe_set = system.default_safe_set()
    T, H = d["T"], d["H"]

    seed_pair = tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed), 0)
    rng = np.random.default_rng(np.random.SeedSequence(seed_pair))
    s = system.sample_initial_state(rng)
    goal = system.sample_goal(rng)
    plan = plan_trajectory(system.output(s), goal, T)

    gammas = []
    trigger_step = None
    violation_step = None
    safe = True
    if not _state_safe(s, safe_set):
        violation_step = 0
        safe = False
    k = 0
    while safe and k < T:
        x = _assessment_input(s, plan[k:], H)
        a = assess(bundle.grid, bundle.net, x)
        gammas.append(a.gamma)
        if trigger_step is None and a.gamma < threshold:
            trigger_step = k
            if recovery == "hold":
                plan[k:] = system.output(s)
        w = system.sample_disturbance(rng)
        s = system.step(s, plan[k], w)
        k += 1
        if not np.all(np.isfinite(s)) or not _state_safe(s, safe_set):
            violation_step = k
            safe = False
    return {"seed": list(seed_pair), "safe": bool(safe),
            "trigger_step": trigger_step, "violation_step": violation_step,
            "gamma_trace": gammas}


def _state_safe(s, safe_set: SafeSet) -> bool:
    from .dynamics import is_safe
    return is_safe(s, safe_set)


def trigger_summary(records: list[dict]) -> dict:
    """Aggregate trigger statistics over per-episode run records."""
    unsafe = [r for r in records if not r["safe"]]
    safe = [r for r in records if r["safe"]]
    early = [r for r in unsafe
             if r["trigger_step"] is not None
             and r["trigger_step"] < r["violation_step"]]
    leads = sorted(r["violation_step"] - r["trigger_step"] for r in early)
    false_triggers = sum(1 for r in safe if r["trigger_step"] is not None)
    return {
        "episodes": len(records),
        "unsafe_episodes": len(unsafe),
        "triggered_before_violation": len(early),
        "early_trigger_rate": len(early) / len(unsafe) if unsafe else None,
        "median_lead": float(np.median(leads)) if leads else None,
        "false_trigger_rate": false_triggers / len(safe) if safe else None,
    }


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    if args.system:
        cfg["system"]["name"] = args.system
    T = args.horizon or cfg["data"]["T"]
    system = _system_from_cfg(cfg, args.variant)
    safe_set = system.default_safe_set()
    episodes = rollout_batch(system, safe_set, T, args.episodes, args.seed)
    save_episodes(episodes, system, T, args.seed, args.out)
    n_safe = sum(ep.safe for ep in episodes)
    print(f"wrote {len(episodes)} episodes to {args.out} "
          f"({n_safe} safe, {len(episodes) - n_safe} unsafe)")
    return 0


def cmd_init(args) -> int:
    cfg = load_config(args.config)
    ep_config, episodes = load_episodes(args.data)
    cfg["system"]["name"] = ep_config["system"]
    cfg["system"]["params"] = ep_config["system_config"]["params"]
    cfg["data"]["T"] = ep_config["T"]

    net, model, stats, dist = offline_init(episodes, cfg, args.seed)
    meta = {"seed": args.seed, "dataset": str(args.data),
            "dataset_digest": jsonio.sha256_of_file(args.data), **stats}
    bundle = ModelBundle(config=cfg, net=net, grid=model, gp=None, meta=meta)
    save_bundle(bundle, args.out)
    if cfg["metric"]["save_matrix"]:
        save_distance_matrix(dist, Path(args.out) / "distances.bin")
    print(f"n_t={stats['n_t']} kl={stats['kl']:.4f} rmse={stats['rmse']:.4f} "
          f"populated_cells={stats['populated_cells']}")
    return 0


def cmd_adapt(args) -> int:
    bundle = load_bundle(args.model)
    out = Path(args.out or args.model)
    if args.episodes > 0:
        n_fb = run_adaptation(bundle, args.episodes, args.seed, k_u=args.k_u,
                              log_path=out / "adapt_log.jsonl")
    else:
        n_fb = 0
    bundle.meta["adapt_seed"] = args.seed
    bundle.meta["adapt_episodes"] = args.episodes
    bundle.meta["n_f"] = bundle.grid.n_f
    save_bundle(bundle, out)
    print(f"consumed {n_fb} feedback data over {args.episodes} episodes "
          f"(n_f={bundle.grid.n_f})")
    return 0


def cmd_assess(args) -> int:
    bundle = load_bundle(args.model)
    try:
        doc = jsonio.load_file(args.input)
        state = np.asarray(doc["state"], dtype=float)
        desired = np.asarray(doc["desired"], dtype=float)
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        raise CliError(f"malformed assessment input {args.input}: {e}")
    H = bundle.config["data"]["H"]
    x = _assessment_input(state, desired, H)
    if len(x) != bundle.net.layer_sizes[0]:
        raise CliError(
            f"input dimension {len(x)} does not match bundle "
            f"({bundle.net.layer_sizes[0]})")
    a = bundle.assess_input(x)
    print(jsonio.dumps(a.to_dict()))
    return 0


def cmd_run(args) -> int:
    bundle = load_bundle(args.model)
    _check_system_match(bundle, args.system)
    threshold = args.threshold if args.threshold is not None \
        else bundle.config["run"]["threshold"]
    records = []
    for i in range(args.episodes):
        records.append(run_with_trigger(
            bundle, args.variant, (args.seed, i), threshold,
            recovery=args.recovery, disturbance_prob=args.disturbance_prob))
    summary = trigger_summary(records)
    summary["threshold"] = threshold
    if args.log:
        with open(args.log, "w", encoding="utf-8") as f:
            for rec in records:
                f.write(jsonio.dumps(rec) + "\n")
            f.write(jsonio.dumps({"summary": summary}) + "\n")
    print(jsonio.dumps({"summary": summary}))
    return 0


def cmd_eval(args) -> int:
    bundle = load_bundle(args.model)
    _check_system_match(bundle, args.system)
    threshold = args.threshold if args.threshold is not None \
        else bundle.config["run"]["threshold"]
    report = evaluate_planning(bundle, args.variant, args.episodes,
                               threshold, args.seed)
    if args.report:
        jsonio.dump_file(report.to_dict(), args.report)
    print(jsonio.dumps(report.to_dict()))
    return 0


def _check_system_match(bundle: ModelBundle, system: Optional[str]):
    if system and system != bundle.config["system"]["name"]:
        raise CliError(
            f"bundle was built for {bundle.config['system']['name']!r}, "
            f"not {system!r}", EXIT_INCOMPATIBLE)


def cmd_export(args) -> int:
    bundle = load_bundle(args.model)
    what, fmt = args.what, args.format
    if what == "grid" and fmt == "csv":
        Path(args.out).write_text(grid_csv(bundle.grid), encoding="utf-8")
    elif what == "embedding" and fmt == "csv":
        lines = ["i,y0,y1,lambda,mu,ix,iy"]
        ny = bundle.grid.spec.shape[1]
        for i in range(len(bundle.grid.train_y)):
            c = int(bundle.grid.train_cell[i])
            y = bundle.grid.train_y[i]
            lines.append(f"{i},{y[0]:.17g},{y[1]:.17g},"
                         f"{bundle.grid.train_lambda[i]:.17g},"
                         f"{bundle.grid.train_mu[i]:.17g},{c // ny},{c % ny}")
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    elif what == "distances" and fmt == "bin":
        src = Path(args.model) / "distances.bin"
        if not src.exists():
            raise CliError("bundle has no stored distance matrix "
                           "(metric.save_matrix was off)")
        Path(args.out).write_bytes(src.read_bytes())
    else:
        raise CliError(f"unsupported export {what}/{fmt}; supported: "
                       "grid/csv, embedding/csv, distances/bin")
    print(f"wrote {what} ({fmt}) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="saveri",
        description="Learned probabilistic safety assessment for closed-loop "
                    "trajectory tracking")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="roll out an episode batch")
    g.add_argument("--system", choices=["point-mass", "cart-pole"])
    g.add_argument("--variant", choices=["nominal", "real"], default="nominal")
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--horizon", type=int, help="planning horizon T")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    i = sub.add_parser("init", help="offline initialization into a bundle")
    i.add_argument("--data", required=True, help="episode batch file")
    i.add_argument("--config")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", required=True, help="bundle directory")
    i.set_defaults(func=cmd_init)

    a = sub.add_parser("adapt", help="online adaptation from the real system")
    a.add_argument("--model", required=True)
    a.add_argument("--episodes", type=int, required=True)
    a.add_argument("--k-u", dest="k_u", type=int)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", help="output bundle dir (default: in place)")
    a.set_defaults(func=cmd_adapt)

    s = sub.add_parser("assess", help="assess one input")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True,
                   help="JSON file with 'state' and 'desired'")
    s.set_defaults(func=cmd_assess)

    r = sub.add_parser("run", help="receding-horizon runs with trigger")
    r.add_argument("--model", required=True)
    r.add_argument("--system")
    r.add_argument("--variant", choices=["nominal", "real"], default="real")
    r.add_argument("--threshold", type=float)
    r.add_argument("--episodes", type=int, default=1)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--recovery", choices=["hold", "none"], default="hold")
    r.add_argument("--disturbance-prob", dest="disturbance_prob", type=float)
    r.add_argument("--log")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="planning-phase accuracy evaluation")
    e.add_argument("--model", required=True)
    e.add_argument("--system")
    e.add_argument("--variant", choices=["nominal", "real"], default="real")
    e.add_argument("--episodes", type=int, required=True)
    e.add_argument("--threshold", type=float)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report", help="write the report JSON here")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="export artifacts")
    x.add_argument("--model", required=True)
    x.add_argument("--what", required=True,
                   choices=["grid", "embedding", "distances"])
    x.add_argument("--format", required=True, choices=["csv", "bin"])
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except UnknownSystemError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except BundleError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
