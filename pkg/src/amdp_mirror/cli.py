"""Batch command line: ``amdp-mirror {gen-env,solve,irl,verify}``.

Exit codes: 0 ok, 2 configuration, 3 solver, 4 data, 5 invariant failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import jsonschema
import numpy as np

from .amdp import RegularizerSpec, TabularAmdp
from .envs import EnvSpec, GeneratedEnv, generate, make_features
from .errors import (
    AmdpError,
    ConfigurationError,
    DataError,
    DimensionError,
    InvariantViolation,
    ParameterError,
)
from .geometry import BregmanGeometry
from .ipmd import (
    Demonstrations,
    InnerSpec,
    RewardModel,
    generate_expert,
    reward_recovery_error,
    run_ipmd,
)
from .spmd import RATE_MODELS, SCHEDULE_KINDS, CriticSpec, StepSchedule, fit_rate, reference_solution, run_spmd
from .verify import CORRUPTIONS, run_battery

log = logging.getLogger("amdp_mirror")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_DATA, EXIT_INVARIANT = 0, 2, 3, 4, 5
LOG_ENV = "AMDP_MIRROR_LOG"
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

_JSON_TYPES = {int: "integer", float: "number", str: "string", "int": "integer", "float": "number", "str": "string"}


def _env_schema() -> dict:
    props = {f.name: {"type": _JSON_TYPES[f.type]} for f in fields(EnvSpec)}
    for k in ("n_states", "n_actions", "grid_size", "n_features"):
        props[k]["minimum"] = 1
    props["seed"]["minimum"] = 0
    return {"type": "object", "properties": props, "additionalProperties": False}


def _obj(props: dict, required: Sequence[str] = ()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_NUM = {"type": "number"}
_NONNEG = {"type": "number", "minimum": 0}
_SEEDS = {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1}
_HORIZON = {"type": "integer", "minimum": 0}

CRITIC_SCHEMA = _obj(
    {
        "kind": {"enum": ["exact", "noisy", "td"]},
        "bias_bound": _NONNEG,
        "noise_std": _NONNEG,
        "batch_size": {"type": "integer", "minimum": 2},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "epochs": {"type": "integer", "minimum": 1},
    }
)

GEN_ENV_SCHEMA = _obj({"env": _env_schema()}, ["env"])

SOLVE_SCHEMA = _obj(
    {
        "env": _env_schema(),
        "env_path": {"type": "string"},
        "regularizer": _obj({"kind": {"enum": ["zero", "negative_entropy"]}, "weight": _NONNEG}),
        "geometry": {"enum": ["negative_entropy", "squared_euclidean"]},
        "schedule": _obj(
            {
                "kind": {"enum": list(SCHEDULE_KINDS)},
                "mu": _NUM,
                "distance_estimate": _NUM,
                "lipschitz_aggregate": _NUM,
                "sigma_omega": _NUM,
            },
            ["kind"],
        ),
        "critic": CRITIC_SCHEMA,
        "K": {"oneOf": [_HORIZON, {"type": "array", "items": _HORIZON, "minItems": 1}]},
        "seeds": _SEEDS,
        "rate_model": {"enum": list(RATE_MODELS)},
    },
    ["schedule", "K"],
)

IRL_SCHEMA = _obj(
    {
        "env": _env_schema(),
        "tau": {"type": "number", "exclusiveMinimum": 0},
        "K": _HORIZON,
        "alpha0": {"type": "number", "exclusiveMinimum": 0},
        "regularization_weight": _NONNEG,
        "inner": _obj(
            {
                "critic": CRITIC_SCHEMA,
                "agent_samples": {"type": "integer", "minimum": 0},
                "eta": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "n_inner": {"type": "integer", "minimum": 1},
            }
        ),
        "expert": _obj({"n_samples": {"type": "integer", "minimum": 1}, "burn_in": {"type": "integer", "minimum": 0}}),
        "demonstrations": {"type": "string"},
        "seeds": _SEEDS,
        "diagnostics": {"type": "boolean"},
    },
    ["env", "K", "alpha0"],
)

VERIFY_SCHEMA = _obj(
    {
        "seed": {"type": "integer", "minimum": 0},
        "n_instances": {"type": "integer", "minimum": 1},
        "corruption": {"enum": [None, *CORRUPTIONS]},
    }
)


def validate_config(config: Any, schema: dict) -> dict:
    try:
        jsonschema.validate(config, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigurationError(f"config error at {where}: {exc.message}") from None
    return config


def _dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        return float(x) if np.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


class Output:
    """Output directory guard: refuses to overwrite files unless ``force``."""

    def __init__(self, root: Path, force: bool):
        self.root = root
        self.force = force

    def check(self, names: Sequence[str]):
        if self.force:
            return
        clash = [n for n in names if (self.root / n).exists()]
        if clash:
            raise ConfigurationError(f"refusing to overwrite {clash[0]} in {self.root} (use --force)")

    def write(self, name: str, text: str) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / name
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        return path


def _quartiles(values) -> dict:
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=float)
    if v.size == 0:
        return {"median": None, "iqr": None}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"median": float(med), "iqr": float(q3 - q1)}


def _map(fn: Callable, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _seed_list(config: dict, seed: Optional[int]) -> list[int]:
    seeds = config.get("seeds")
    if seeds is None:
        return [seed or 0]
    if seed is not None:
        # --seed shifts the configured list so replicas stay distinct
        return [seed + s for s in seeds]
    return list(seeds)


# ----- gen-env -----


def cmd_gen_env(config: dict, out: Output, seed: Optional[int] = None) -> int:
    validate_config(config, GEN_ENV_SCHEMA)
    spec_d = dict(config["env"])
    if seed is not None:
        spec_d["seed"] = seed
    spec = EnvSpec.from_dict(spec_d)
    out.check(["env.json"])
    env = generate(spec)
    doc = env.mdp.to_dict()
    doc["spec"] = spec.to_dict()
    if env.features is not None:
        doc["features"] = env.features.tolist()
        doc["true_theta"] = env.true_theta.tolist()
    path = out.write("env.json", json.dumps(doc, sort_keys=True) + "\n")
    print(path)
    return EXIT_OK


def _load_env(config: dict, seed: Optional[int]) -> TabularAmdp:
    if "env_path" in config and "env" in config:
        raise ConfigurationError("give either env or env_path, not both")
    if "env_path" in config:
        path = Path(config["env_path"])
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read env file {path}: {exc}") from None
        try:
            return TabularAmdp.from_json(text)
        except (json.JSONDecodeError, DimensionError, ParameterError) as exc:
            raise ConfigurationError(f"bad env file {path}: {exc}") from None
    if "env" not in config:
        raise ConfigurationError("config needs env or env_path")
    return generate(EnvSpec.from_dict(config["env"])).mdp


# ----- solve -----


def _solve_job(job):
    mdp, h, geometry, schedule, critic, K, seed, reference = job
    _, trace = run_spmd(mdp, h, geometry, schedule, critic, K=K, rng_seed=seed, reference=reference)
    return trace


def cmd_solve(config: dict, out: Output, seed: Optional[int] = None, workers: int = 1) -> int:
    validate_config(config, SOLVE_SCHEMA)
    mdp = _load_env(config, seed)
    reg = config.get("regularizer", {"kind": "negative_entropy", "weight": 1.0})
    h = RegularizerSpec(reg.get("kind", "negative_entropy"), reg.get("weight", 1.0))
    geometry = BregmanGeometry(config.get("geometry", "negative_entropy"))
    critic = CriticSpec(**config.get("critic", {}))
    horizons = config["K"] if isinstance(config["K"], list) else [config["K"]]
    seeds = _seed_list(config, seed)
    names = [f"trace_K{K}_seed{s}.csv" for K in horizons for s in seeds] + ["summary.json"]
    out.check(names)

    sched_cfg = dict(config["schedule"])
    sched_cfg.setdefault("mu", h.tau)
    reference = reference_solution(mdp, h, geometry)
    jobs = []
    for K in horizons:
        schedule = StepSchedule(horizon=K, **sched_cfg)
        jobs += [(mdp, h, geometry, schedule, critic, K, s, reference) for s in seeds]
    traces = _map(_solve_job, jobs, workers)

    runs = []
    for (job, trace) in zip(jobs, traces):
        K, s = job[5], job[6]
        out.write(f"trace_K{K}_seed{s}.csv", trace.to_csv())
        final_gap = trace.rho_final - reference[1]
        tail = trace.gap[-max(1, len(trace.gap) // 10):] if trace.gap else []
        runs.append(
            {
                "K": K,
                "seed": s,
                "final_gap": final_gap,
                "running_average_gap": trace.running_average_gap(),
                "plateau": float(np.mean(tail)) if tail else None,
                "min_d_iterates": min(trace.d_iterates) if trace.d_iterates else None,
            }
        )
    summary: dict[str, Any] = {
        "command": "solve",
        "rho_star": reference[1],
        "critic": critic.kind,
        "bias_bound": critic.bias_bound,
        "noise_std": critic.noise_std,
        "runs": runs,
        "status": "ok" if any(K > 0 for K in horizons) else "no iterations",
    }
    for K in horizons:
        sel = [r for r in runs if r["K"] == K]
        summary[f"K{K}"] = {
            "final_gap": _quartiles([r["final_gap"] for r in sel]),
            "plateau": _quartiles([r["plateau"] for r in sel if r["plateau"] is not None]),
        }
    summary["final_gap"] = _quartiles([r["final_gap"] for r in runs if r["K"] == max(horizons)])
    pos = sorted({K for K in horizons if K > 0})
    if len(pos) >= 3:
        model = config.get("rate_model", "K^-1")
        med = [np.median([r["running_average_gap"] for r in runs if r["K"] == K]) for K in pos]
        fit = fit_rate(pos, med, model)
        summary["rate_fit"] = {"model": fit.model, "intercept": fit.intercept, "slope": fit.slope, "r2": fit.r2}
    out.write("summary.json", _dump_json(summary))
    log.info("solve finished: %d runs", len(runs))
    return EXIT_OK


# ----- irl -----


def _irl_env(config: dict) -> tuple[GeneratedEnv, RewardModel]:
    env = generate(EnvSpec.from_dict(config["env"]))
    w = config.get("regularization_weight", 0.0)
    if env.features is None:
        S, A = env.mdp.n_states, env.mdp.n_actions
        phi = make_features("one_hot", S, A, S * A, None)
        env = GeneratedEnv(env.mdp, phi, env.mdp.cost.reshape(-1).copy())
    return env, RewardModel(env.true_theta, env.features, w)


def _load_demos(path: str) -> Demonstrations:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read demonstrations {path}: {exc}") from None
    try:
        return Demonstrations.from_jsonl(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"bad demonstrations file {path}: {exc}") from None


def _irl_job(job):
    config, seed, demos_text = job
    env, true = _irl_env(config)
    tau = config.get("tau", 1.0)
    exp_cfg = config.get("expert", {})
    expert, generated = generate_expert(
        env.mdp, true, tau, exp_cfg.get("n_samples", 100_000), rng_seed=seed, burn_in=exp_cfg.get("burn_in", 1_000)
    )
    demos = Demonstrations.from_jsonl(demos_text) if demos_text is not None else generated
    S, A = env.mdp.n_states, env.mdp.n_actions
    if demos.pairs.min() < 0 or demos.pairs[:, 0].max() >= S or demos.pairs[:, 1].max() >= A:
        raise DataError("demonstration indices are out of range for the environment")
    inner_cfg = dict(config.get("inner", {}))
    critic = CriticSpec(**inner_cfg.pop("critic", {}))
    eta = inner_cfg.pop("eta", None)
    inner = InnerSpec(critic=critic, eta=np.inf if eta is None else eta, **inner_cfg)
    reward, pi, trace = run_ipmd(
        env.mdp,
        env.features,
        demos,
        tau,
        config["K"],
        config["alpha0"],
        inner,
        rng_seed=seed,
        regularization_weight=true.regularization_weight,
        true_reward=true,
        diagnostics=config.get("diagnostics", True),
    )
    tv = 0.5 * float(np.abs(pi.probs - expert.probs).sum(axis=1).max())
    return {
        "seed": seed,
        "theta": reward.theta,
        "cost": reward.cost_table(),
        "policy_tv_to_expert": tv,
        "reward_span_error": reward_recovery_error(reward, true),
        "true_reward_span": float(np.ptp(true.cost_table())),
        "mean_sq_grad_norm": trace.mean_sq_grad(),
        "log_gap_bound_held": bool(
            all(g <= b + 1e-12 for g, b in zip(trace.policy_log_gap, trace.log_gap_bound))
        )
        if config.get("diagnostics", True)
        else None,
        "cost_clip_events": trace.clip_events,
        "csv": trace.to_csv(),
        "demos": generated.to_jsonl() if demos_text is None else None,
    }


def cmd_irl(config: dict, out: Output, seed: Optional[int] = None, workers: int = 1) -> int:
    validate_config(config, IRL_SCHEMA)
    seeds = _seed_list(config, seed)
    demos_text = None
    if "demonstrations" in config:
        demos = _load_demos(config["demonstrations"])
        demos_text = demos.to_jsonl()
    names = [f"{p}_seed{s}.{e}" for s in seeds for p, e in (("trace", "csv"), ("reward", "json"))]
    out.check(names + ["summary.json"])
    results = _map(_irl_job, [(config, s, demos_text) for s in seeds], workers)
    runs = []
    for r in results:
        s = r["seed"]
        out.write(f"trace_seed{s}.csv", r.pop("csv"))
        demo_jsonl = r.pop("demos")
        if demo_jsonl is not None:
            out.write(f"demonstrations_seed{s}.jsonl", demo_jsonl)
        out.write(
            f"reward_seed{s}.json",
            _dump_json({"seed": s, "theta": r.pop("theta"), "cost": r.pop("cost")}),
        )
        runs.append(r)
    summary = {
        "command": "irl",
        "runs": runs,
        "policy_tv_to_expert": _quartiles([r["policy_tv_to_expert"] for r in runs]),
        "reward_span_error": _quartiles([r["reward_span_error"] for r in runs]),
        "status": "ok" if config["K"] > 0 else "no iterations",
    }
    out.write("summary.json", _dump_json(summary))
    return EXIT_OK


# ----- verify -----


def cmd_verify(config: dict, out: Output, seed: Optional[int] = None) -> int:
    validate_config(config, VERIFY_SCHEMA)
    s = seed if seed is not None else config.get("seed", 0)
    out.check(["report.json"])
    report = run_battery(s, config.get("corruption"), config.get("n_instances", 8))
    out.write("report.json", _dump_json(report))
    for c in report["checks"]:
        status = "pass" if c["passed"] else "FAIL"
        extra = "" if c["passed"] else f" (instance seed {c['failing_instance_seed']}: {c['message']})"
        print(f"{status} {c['name']}{extra}")
    if not report["passed"]:
        raise InvariantViolation("invariant battery failed")
    return EXIT_OK


# ----- entry point -----


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="amdp-mirror", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("gen-env", "solve", "irl", "verify"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config file (verify: optional)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=Path, default=Path("out"))
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    return ap


def _setup_logging():
    level_name = os.environ.get(LOG_ENV, "error").lower()
    if level_name not in LOG_LEVELS:
        raise ConfigurationError(f"{LOG_ENV} must be one of {sorted(LOG_LEVELS)}")
    logging.basicConfig(level=LOG_LEVELS[level_name], format="%(levelname)s %(name)s: %(message)s")


def _read_config(path: Optional[Path], required: bool) -> dict:
    if path is None:
        if required:
            raise ConfigurationError("--config is required for this command")
        return {}
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        _setup_logging()
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigurationError("--seed must be an unsigned 64-bit integer")
        if args.workers < 1:
            raise ConfigurationError("--workers must be >= 1")
        config = _read_config(args.config, required=args.command != "verify")
        out = Output(args.out, args.force)
        if args.command == "gen-env":
            return cmd_gen_env(config, out, args.seed)
        if args.command == "solve":
            return cmd_solve(config, out, args.seed, args.workers)
        if args.command == "irl":
            return cmd_irl(config, out, args.seed, args.workers)
        return cmd_verify(config, out, args.seed)
    except InvariantViolation as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigurationError, ParameterError, DimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AmdpError as exc:
        where = ""
        if getattr(exc, "seed", None) is not None or getattr(exc, "iteration", None) is not None:
            where = f" (seed {exc.seed}, iteration {exc.iteration})"
        print(f"solver error{where}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
