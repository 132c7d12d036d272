"""Run configuration, seeding, experiment orchestration and artifact writing."""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import tempfile
import zlib
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

from gridrl.astgcn import EncoderConfig
from gridrl.autodiff import load_checkpoint, save_checkpoint
from gridrl.baselines import MetaheuristicPolicy, SearchBudget, evaluate_policy
from gridrl.ddpg import DdpgAgent, DdpgConfig, train
from gridrl.environment import EnvConfig, GridEnv, StepInfo, do_nothing_policy, random_policy
from gridrl.grid_model import CaseError, load_case


class ConfigError(ValueError):
    """Invalid or unresolvable run configuration (exit status 2)."""


class NumericalError(RuntimeError):
    """Non-finite values or solver breakdown during a run (exit status 3)."""


_ENV_KEYS = [f.name for f in dataclasses.fields(EnvConfig) if f.name != "case"]
_AGENT_KEYS = [f.name for f in dataclasses.fields(DdpgConfig) if f.name != "encoder"]


def default_config() -> dict[str, Any]:
    env = EnvConfig()
    agent = DdpgConfig()
    enc = EncoderConfig()
    agent_d = {k: getattr(agent, k) for k in _AGENT_KEYS}
    agent_d["hidden"] = list(agent.hidden)
    return {
        "seed": 0,
        "case": env.case,
        "env": {k: getattr(env, k) for k in _ENV_KEYS},
        "agent": agent_d,
        "encoder": dataclasses.asdict(enc),
        "train": {"episodes": 300, "checkpoint": True},
        "eval": {"policy": "agent", "episodes": 100, "steps": 100, "checkpoint": None},
        "baseline": {"population": 30, "iterations": 100},
        "fault": {"counts": [1, 2, 3], "seeds": 20, "horizon": 48, "warm_steps": 4},
        "sweep": {"cases": None, "w_vol": [1, 2, 3, 4, 5], "w_rer": [1.0], "w_gen": [0.01]},
        "grad_check": {"seeds": 3, "h": 1e-5, "tol": 1e-4},
    }


# ------------------------------------------------------------------ config


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key '{key}'")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key '{key}' must be a mapping")
            out[k] = _merge(out[k], v, key + ".")
        else:
            out[k] = v
    return out


def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(f"override '{item}' is not of the form key=value")
    key, raw = item.split("=", 1)
    if not key:
        raise ConfigError(f"override '{item}' has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError:
        raise ConfigError(f"cannot parse value of override '{item}'") from None
    return key.split("."), value


def build_config(path: str | None = None, overrides: list[str] = (), seed: int | None = None) -> dict:
    """Defaults, then the config file, then ``--set`` overrides, then ``--seed``."""
    cfg = default_config()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML/JSON: {str(exc).splitlines()[0]}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        cfg = _merge(cfg, doc)
    for item in overrides:
        keys, value = parse_override(item)
        nested: dict = value
        for k in reversed(keys):
            nested = {k: nested}
        cfg = _merge(cfg, nested)
    if seed is not None:
        cfg["seed"] = seed
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a nonnegative integer")
    for k in ("w_vol", "w_rer", "w_gen"):
        v = cfg["env"][k]
        if not isinstance(v, (int, float)) or v < 0 or not math.isfinite(v):
            raise ConfigError(f"env.{k} must be a nonnegative number")
    if cfg["encoder"]["kind"] not in ("mg-astgcn", "mlp", "none"):
        raise ConfigError("encoder.kind must be one of mg-astgcn, mlp, none")
    if cfg["env"]["control_mode"] not in ("pv", "pq"):
        raise ConfigError("env.control_mode must be pv or pq")
    if cfg["env"]["warmup"] not in ("replay", "zeros"):
        raise ConfigError("env.warmup must be replay or zeros")
    if cfg["eval"]["policy"] not in ("agent", "random", "do-nothing", "hho", "gwo"):
        raise ConfigError("eval.policy must be one of agent, random, do-nothing, hho, gwo")
    for sec, key in (("train", "episodes"), ("eval", "episodes"), ("eval", "steps"),
                     ("baseline", "population"), ("baseline", "iterations"), ("fault", "seeds"),
                     ("fault", "horizon"), ("agent", "batch_size"), ("env", "max_steps")):
        v = cfg[sec][key]
        if not isinstance(v, int) or v < 0:
            raise ConfigError(f"{sec}.{key} must be a nonnegative integer")
    if cfg["baseline"]["population"] < 2 or cfg["baseline"]["iterations"] < 1:
        raise ConfigError("baseline budget needs population >= 2 and iterations >= 1")
    try:
        env_config(cfg)
        agent_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value: {exc}") from None


def env_config(cfg: dict, **changes) -> EnvConfig:
    return dataclasses.replace(EnvConfig(case=cfg["case"], **cfg["env"]), **changes)


def agent_config(cfg: dict) -> DdpgConfig:
    a = dict(cfg["agent"])
    a["hidden"] = tuple(int(h) for h in a["hidden"])
    return DdpgConfig(encoder=EncoderConfig(**cfg["encoder"]), **a)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


# ------------------------------------------------------------------- seeds


def stream_seed(master: int, name: str) -> np.random.SeedSequence:
    """Independent stream for ``name``: SeedSequence(master, spawn_key=(crc32(name),))."""
    return np.random.SeedSequence(master, spawn_key=(zlib.crc32(name.encode()),))


STREAMS = ("init", "train", "eval", "baseline", "fault")


def seed_report(master: int) -> dict[str, Any]:
    return {
        "master": master,
        "derivation": "numpy SeedSequence(master, spawn_key=(crc32(stream_name),))",
        "streams": {n: [int(w) for w in stream_seed(master, n).generate_state(4)] for n in STREAMS},
    }


# --------------------------------------------------------------- artifacts


def atomic_write(path: Path, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if isinstance(data, bytes) else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise OSError(f"cannot write {path}: {exc.strerror}") from None


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def step_header(n_gen: int, mode: str = "pv") -> list[str]:
    second = "v" if mode == "pv" else "q"
    cols = ["episode", "step", "reward", "j_vol", "j_rer", "j_gen", "penalties", "converged"]
    for i in range(n_gen):
        cols += [f"p_g{i}", f"{second}_g{i}"]
    return cols


EPISODE_HEADER = ["episode", "steps", "return", "mean_j_vol", "mean_j_rer", "penalties", "terminated"]


def step_row(episode: int, step: int, info: StepInfo) -> list:
    o = info.outcome
    row = [episode, step, o.reward, o.j_vol, o.j_rer, o.j_gen, o.n_penalties, o.converged]
    for p, v in zip(info.dispatch.p, info.dispatch.v):
        row += [p, v]
    return row


def csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


class RunLog:
    """Collects per-step and per-episode rows for one run directory."""

    def __init__(self, n_gen: int, mode: str = "pv"):
        self.header = step_header(n_gen, mode)
        self.steps: list[list] = []
        self.episodes: list[list] = []
        self._ep_rows: list[StepInfo] = []

    def on_step(self, episode: int, step: int, info: StepInfo) -> None:
        self.steps.append(step_row(episode, step, info))
        self._ep_rows.append(info)

    def end_episode(self, episode: int) -> None:
        infos = self._ep_rows
        o = [i.outcome for i in infos]
        vols = [x.j_vol for x in o if math.isfinite(x.j_vol)]
        self.episodes.append([
            episode, len(o), sum(x.reward for x in o),
            float(np.mean(vols)) if vols else math.nan,
            float(np.mean([x.j_rer for x in o if x.converged])) if vols else math.nan,
            sum(x.n_penalties for x in o), bool(o and o[-1].terminated),
        ])
        self._ep_rows = []

    def write(self, out: Path, prefix: str = "") -> None:
        atomic_write(out / f"{prefix}steps.csv", csv_text(self.header, self.steps))
        atomic_write(out / f"{prefix}episodes.csv", csv_text(EPISODE_HEADER, self.episodes))


def write_common(out: Path, cfg: dict) -> None:
    atomic_write(out / "config.yaml", yaml.safe_dump(cfg, sort_keys=True))
    atomic_write(out / "seeds.json", json.dumps(seed_report(cfg["seed"]), indent=2, sort_keys=True) + "\n")


def write_metrics(out: Path, metrics: dict) -> None:
    clean = {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in metrics.items()}
    atomic_write(out / "metrics.json", json.dumps(clean, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------- builders


def make_env(cfg: dict, **changes) -> GridEnv:
    try:
        return GridEnv(env_config(cfg, **changes))
    except (CaseError, FileNotFoundError) as exc:
        raise ConfigError(f"case '{cfg['case']}' cannot be loaded: {exc}") from None


def make_agent(cfg: dict, env: GridEnv) -> DdpgAgent:
    agent = DdpgAgent(env, agent_config(cfg), np.random.default_rng(stream_seed(cfg["seed"], "init")))
    env.encoder = agent.encoder
    return agent


def save_agent(agent: DdpgAgent, out: Path, cfg: dict) -> None:
    save_checkpoint(out / "agent", agent.state_arrays())
    meta = {"config_hash": config_hash(cfg), "n_updates": agent.n_updates,
            "actor_adam_step": agent.actor_opt.step, "critic_adam_step": agent.critic_opt.step}
    atomic_write(out / "agent.meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_agent(cfg: dict, env: GridEnv, path: str | Path) -> DdpgAgent:
    path = Path(path)
    base = path / "agent" if path.is_dir() else path
    if not base.with_suffix(".bin").exists():
        raise ConfigError(f"checkpoint not found: {base}.bin")
    agent = make_agent(cfg, env)
    try:
        agent.load_arrays(load_checkpoint(base))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"checkpoint {base} does not match the configured networks: {exc}") from None
    return agent


def _check_finite(agent: DdpgAgent) -> None:
    for mod in (agent.actor, agent.critic):
        for name, p in mod.named_parameters():
            if not np.all(np.isfinite(p.data)):
                raise NumericalError(f"non-finite parameter {name} after training")


# ----------------------------------------------------------------- commands


def run_train(cfg: dict, out: Path | None = None) -> tuple[DdpgAgent, dict]:
    env = make_env(cfg)
    agent = make_agent(cfg, env)
    log = RunLog(env.n_gen, cfg["env"]["control_mode"])

    def on_step(ep, step, info, _u):
        log.on_step(ep, step, info)

    tlog = train(env, agent, cfg["train"]["episodes"], stream_seed(cfg["seed"], "train"),
                 on_step=on_step, on_episode=lambda ep, ret, n: log.end_episode(ep))
    _check_finite(agent)
    rets = tlog.episode_returns
    summary = {
        "episodes": len(rets),
        "mean_return": float(np.mean(rets)) if rets else math.nan,
        "window_means": tlog.window_means(100),
        "updates": agent.n_updates,
    }
    if out is not None:
        write_common(out, cfg)
        log.write(out, "train_")
        if cfg["train"]["checkpoint"]:
            save_agent(agent, out, cfg)
        write_metrics(out, summary)
    return agent, summary


def build_policy(cfg: dict, env: GridEnv, agent: DdpgAgent | None = None) -> Callable:
    kind = cfg["eval"]["policy"]
    if kind == "agent":
        if agent is None:
            ckpt = cfg["eval"]["checkpoint"]
            if not ckpt:
                raise ConfigError("eval.policy=agent needs eval.checkpoint (a train output directory)")
            agent = load_agent(cfg, env, ckpt)
        return agent.policy
    if kind == "random":
        return random_policy(np.random.default_rng(stream_seed(cfg["seed"], "baseline")))
    if kind == "do-nothing":
        return do_nothing_policy
    budget = SearchBudget(cfg["baseline"]["population"], cfg["baseline"]["iterations"])
    return MetaheuristicPolicy(kind, budget, np.random.default_rng(stream_seed(cfg["seed"], "baseline")))


def run_eval(cfg: dict, out: Path | None = None, agent: DdpgAgent | None = None) -> dict:
    steps = cfg["eval"]["steps"]
    env = make_env(cfg, max_steps=max(steps, cfg["env"]["max_steps"]))
    policy = build_policy(cfg, env, agent)
    res = evaluate_policy(policy, lambda: env, cfg["eval"]["episodes"], steps,
                          stream_seed(cfg["seed"], "eval"), keep_infos=out is not None)
    metrics = res.as_dict()
    metrics["mean_step_seconds"] = res.step_seconds
    metrics["policy"] = cfg["eval"]["policy"]
    if out is not None:
        log = RunLog(env.n_gen, cfg["env"]["control_mode"])
        for ep, infos in enumerate(res.infos):
            for k, info in enumerate(infos):
                log.on_step(ep, k, info)
            log.end_episode(ep)
        write_common(out, cfg)
        log.write(out, "eval_")
        write_metrics(out, metrics)
    return metrics


def fault_sets(n_gen: int, counts, rng: np.random.Generator) -> dict[int, list[int]]:
    """Nested fault sets: the first ``k`` generators of one random permutation."""
    order = rng.permutation(n_gen)
    return {int(k): sorted(int(i) for i in order[:k]) for k in counts}


def run_fault_test(cfg: dict, out: Path | None = None, agent: DdpgAgent | None = None) -> dict:
    fc = cfg["fault"]
    counts = [int(k) for k in fc["counts"]]
    env = make_env(cfg, max_steps=10**9)
    if max(counts, default=0) > env.n_gen:
        raise ConfigError(f"cannot fault {max(counts)} of {env.n_gen} generators")
    policy = build_policy(cfg, env, agent)
    rows = []
    for child in stream_seed(cfg["seed"], "fault").spawn(fc["seeds"]):
        rng = np.random.default_rng(child)
        sets = fault_sets(env.n_gen, counts, rng)
        obs = env.reset(child)
        for _ in range(fc["warm_steps"]):
            obs, _, terminated, _ = env.step(policy(obs, env))
            if terminated:
                break
        shared = {id(env.case): env.case, id(env.graph): env.graph, id(env.encoder): env.encoder}
        for k in counts:
            trial = copy.deepcopy(env, dict(shared))
            steps, recovered = trial.measure_recovery(policy, sets[k], fc["horizon"])
            rows.append([int(child.spawn_key[-1]), k, steps, recovered])
    mean_by_count = {k: float(np.mean([r[2] for r in rows if r[1] == k])) for k in counts}
    metrics = {"mean_recovery_steps": {str(k): v for k, v in mean_by_count.items()},
               "recovered_fraction": {str(k): float(np.mean([r[3] for r in rows if r[1] == k]))
                                      for k in counts},
               "horizon": fc["horizon"]}
    if out is not None:
        write_common(out, cfg)
        atomic_write(out / "fault.csv", csv_text(["seed", "faults", "recovery_steps", "recovered"], rows))
        write_metrics(out, metrics)
    metrics["rows"] = rows
    return metrics


def run_sweep(cfg: dict, out: Path | None = None) -> list[dict]:
    sw = cfg["sweep"]
    cases = sw["cases"] or [cfg["case"]]
    rows = []
    for case in cases:
        for w_vol in sw["w_vol"]:
            for w_rer in sw["w_rer"]:
                for w_gen in sw["w_gen"]:
                    sub = copy.deepcopy(cfg)
                    sub["case"] = case
                    sub["env"].update(w_vol=float(w_vol), w_rer=float(w_rer), w_gen=float(w_gen))
                    validate_config(sub)
                    agent = None
                    if sub["eval"]["policy"] == "agent" and not sub["eval"]["checkpoint"]:
                        agent, _ = run_train(sub)
                    m = run_eval(sub, agent=agent)
                    rows.append({"case": case, "w_vol": float(w_vol), "w_rer": float(w_rer),
                                 "w_gen": float(w_gen), "SCORE": m["SCORE"],
                                 "alpha_vol": m["alpha_vol"], "alpha_rer": m["alpha_rer"]})
    if out is not None:
        write_common(out, cfg)
        header = ["case", "w_vol", "w_rer", "w_gen", "SCORE", "alpha_vol", "alpha_rer"]
        atomic_write(out / "sweep.csv", csv_text(header, [[r[k] for k in header] for r in rows]))
    return rows


def case_info(cfg: dict) -> dict:
    try:
        case = load_case(cfg["case"])
    except (CaseError, FileNotFoundError) as exc:
        raise ConfigError(f"case '{cfg['case']}' cannot be loaded: {exc}") from None
    return case.totals()
