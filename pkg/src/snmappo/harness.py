"""Experiment runner: config parsing, single runs, seed sweeps and CSV metrics.

Configs are JSON objects with flat keys. Top-level run keys (``env``,
``variant``, ``seeds``, ...) sit beside PPO keys written either as
``ppo.<field>`` or as bare PPO field names. Every run writes into its own
directory::

    <out_dir>/<env>_<variant>_seed<N>/
        config.json      resolved configuration
        metrics.csv      one row per update (deterministic)
        eval.csv         one row per evaluation point (deterministic)
        timing.csv       wallclock seconds per update
        checkpoint.pkl   latest resumable state
        status.txt       completed | failed: <reason> | timeout | stopped
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import pickle
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .envs import ENV_NAMES, make_env
from .errors import ConfigError, NumericError, SnMappoError
from .mappo import (
    VARIANTS,
    ActorCritic,
    PpoConfig,
    ReturnNormalizer,
    RolloutWorker,
    evaluate_policy,
    random_policy_baseline,
    update,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "variant",
    "env_steps",
    "mean_return",
    "win_rate",
    "deliveries",
    "dead_enemies",
    "policy_loss",
    "value_loss",
    "entropy",
    "mean_kl",
    "critic_grad_norm_preclip",
    "log10_critic_grad_norm",
    "sigma_hat_1",
    "sigma_hat_2",
    "sigma_hat_3",
)
EVAL_COLUMNS = ("variant", "env_steps", "episodes", "mean_return", "win_rate", "deliveries", "dead_enemies")
TIMING_COLUMNS = ("env_steps", "wallclock_seconds")
CHECKPOINT_FORMAT = "snmappo-checkpoint"
CHECKPOINT_VERSION = 1
EPISODE_WINDOW = 10


@dataclass
class RunConfig:
    env: str = "warehouse-tiny-2ag"
    variant: str = "none"
    ppo: PpoConfig = field(default_factory=PpoConfig)
    total_env_steps: int = 300_000
    eval_interval: int = 10
    eval_episodes: int = 32
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: str = "runs"
    precision: str = "float64"
    time_limit: float | None = None
    checkpoint_interval: int = 10
    workers: int = 1

    def __post_init__(self) -> None:
        if self.env not in ENV_NAMES:
            raise ConfigError(f"env: unknown environment {self.env!r}; choose from {list(ENV_NAMES)}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: unknown variant {self.variant!r}; choose from {list(VARIANTS)}")
        if self.ppo.variant != self.variant:
            self.ppo = dataclasses.replace(self.ppo, variant=self.variant)
        if self.total_env_steps < self.ppo.rollout_length:
            raise ConfigError("total_env_steps: must be >= ppo.rollout_length")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds: seeds must be distinct")
        for name in ("eval_interval", "eval_episodes", "checkpoint_interval", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.precision != "float64":
            raise ConfigError("precision: only 'float64' is implemented")
        if self.time_limit is not None and self.time_limit <= 0:
            raise ConfigError("time_limit: must be positive")

    def to_flat(self) -> dict:
        flat = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "ppo"}
        flat.update({f"ppo.{k}": v for k, v in dataclasses.asdict(self.ppo).items()})
        return flat

    def run_dir(self, seed: int) -> Path:
        return Path(self.out_dir) / f"{self.env}_{self.variant}_seed{seed}"


# expected JSON types per key: tuple of accepted python types; None marks an optional key
_RUN_TYPES = {
    "env": (str,),
    "variant": (str,),
    "total_env_steps": (int,),
    "eval_interval": (int,),
    "eval_episodes": (int,),
    "seeds": (list,),
    "out_dir": (str,),
    "precision": (str,),
    "time_limit": (int, float, None),
    "checkpoint_interval": (int,),
    "workers": (int,),
}


def _ppo_types() -> dict[str, tuple]:
    out = {}
    for f in dataclasses.fields(PpoConfig):
        default = f.default
        if f.name == "normalize_returns":
            out[f.name] = (bool, None)
        elif isinstance(default, bool):
            out[f.name] = (bool,)
        elif isinstance(default, int):
            out[f.name] = (int,)
        elif isinstance(default, float):
            out[f.name] = (int, float)
        else:
            out[f.name] = (str,)
    return out


def _check_type(key: str, value, accepted: tuple):
    if value is None:
        if None in accepted:
            return None
        raise ConfigError(f"{key}: null is not allowed")
    types = tuple(t for t in accepted if t is not None)
    # bool is a subclass of int; reject it wherever a number is expected
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"{key}: expected {'/'.join(t.__name__ for t in types)}, got bool")
    if not isinstance(value, types):
        raise ConfigError(f"{key}: expected {'/'.join(t.__name__ for t in types)}, got {type(value).__name__}")
    if float in types and isinstance(value, int):
        return float(value)
    if key == "seeds":
        if not all(isinstance(s, int) and not isinstance(s, bool) for s in value):
            raise ConfigError("seeds: expected a list of integers")
        return list(value)
    return value


def _flatten(doc: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in doc.items():
        if isinstance(v, dict):
            flat.update(_flatten(v, f"{prefix}{k}."))
        else:
            flat[f"{prefix}{k}"] = v
    return flat


def build_config(values: dict) -> RunConfig:
    """Validate a flat ``{key: value}`` mapping and build a :class:`RunConfig`."""
    ppo_types = _ppo_types()
    run_kw, ppo_kw = {}, {}
    for key, value in _flatten(values).items():
        name = key[4:] if key.startswith("ppo.") else key
        if key in _RUN_TYPES:
            run_kw[key] = _check_type(key, value, _RUN_TYPES[key])
        elif name in ppo_types:
            ppo_kw[name] = _check_type(key, value, ppo_types[name])
        else:
            raise ConfigError(f"{key}: unknown configuration key")
    if "variant" in run_kw:
        ppo_kw["variant"] = run_kw["variant"]
    elif "variant" in ppo_kw:
        run_kw["variant"] = ppo_kw["variant"]
    try:
        ppo = PpoConfig(**ppo_kw)
    except ConfigError as exc:
        raise ConfigError(f"ppo.{exc}") from exc
    return RunConfig(ppo=ppo, **run_kw)


def parse_config(path: str | Path | None, overrides: dict | None = None, echo: bool = True) -> RunConfig:
    """Load a JSON config, apply ``overrides`` (which win) and echo the result to ``out_dir``."""
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        values = _flatten(doc)
    for key, value in (overrides or {}).items():
        if key.startswith("ppo.") and key[4:] in values:
            values.pop(key[4:])
        elif f"ppo.{key}" in values:
            values.pop(f"ppo.{key}")
        values[key] = value
    config = build_config(values)
    if echo:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.json").write_text(json.dumps(config.to_flat(), indent=2, sort_keys=True) + "\n")
    return config


# ------------------------------------------------------------------ training


class Trainer:
    """All mutable state of one run; pickled whole for checkpoints."""

    def __init__(self, config: RunConfig, seed: int) -> None:
        self.config = config
        self.seed = seed
        self.env = make_env(config.env)
        spec = self.env.spec
        self.ac = ActorCritic(spec.observation_dim, spec.global_state_dim, spec.n_actions, config.ppo, seed=seed)
        self.rng = np.random.default_rng(seed)
        self.worker = RolloutWorker(self.env, self.ac, config.ppo, self.rng, seed=seed)
        self.normalizer = ReturnNormalizer()
        self.updates = 0
        self.env_steps = 0
        self.recent = deque(maxlen=EPISODE_WINDOW)

    @property
    def is_skirmish(self) -> bool:
        return self.config.env.startswith("skirmish")

    def train_step(self) -> dict:
        batch = self.worker.collect()
        stats = update(self.ac, batch, self.config.ppo, self.rng, self.normalizer)
        self.recent.extend(batch.episodes)
        self.updates += 1
        self.env_steps += batch.length
        return self.metrics_row(stats)

    def metrics_row(self, stats: dict) -> dict:
        eps = list(self.recent)

        def avg(values) -> float:
            return float(np.mean(values)) if values else 0.0

        sig = stats["sigma_hat"]
        row = {
            "variant": self.config.variant,
            "env_steps": self.env_steps,
            "mean_return": avg([e.ret for e in eps]),
            "win_rate": avg([float(e.won) for e in eps]),
            "deliveries": avg([e.deliveries for e in eps]),
            "dead_enemies": avg([e.enemies_killed for e in eps]),
            "policy_loss": stats["policy_loss"],
            "value_loss": stats["value_loss"],
            "entropy": stats["entropy"],
            "mean_kl": stats["mean_kl"],
            "critic_grad_norm_preclip": stats["critic_grad_norm_preclip"],
            "log10_critic_grad_norm": stats["log10_critic_grad_norm"],
            "sigma_hat_1": sig[0],
            "sigma_hat_2": sig[1],
            "sigma_hat_3": sig[2],
        }
        bad = [k for k, v in row.items() if isinstance(v, float) and not math.isfinite(v)]
        if bad:
            raise NumericError(f"non-finite metrics at env_steps={self.env_steps}: {bad}")
        post = max(stats["critic_norm_post_history"])
        if post > self.config.ppo.max_grad_norm * (1 + 1e-9):
            raise NumericError(f"post-clip critic gradient norm {post} exceeds {self.config.ppo.max_grad_norm}")
        return row

    def evaluate(self) -> dict:
        env = make_env(self.config.env)
        res = evaluate_policy(env, self.ac, self.config.eval_episodes, seed=self.seed * 100_003 + self.updates)
        return {"variant": self.config.variant, "env_steps": self.env_steps, **res}


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


class CsvLog:
    """Append-only CSV with a fixed header."""

    def __init__(self, path: Path, columns: Sequence[str]) -> None:
        self.path = path
        self.columns = tuple(columns)
        if not path.exists():
            with path.open("w", newline="") as fh:
                csv.writer(fh).writerow(self.columns)

    def append(self, row: dict) -> None:
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row[c]) for c in self.columns])

    def truncate_after(self, env_steps: int) -> None:
        """Drop rows logged after ``env_steps`` (used when resuming)."""
        with self.path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        idx = rows[0].index("env_steps")
        keep = [rows[0]] + [r for r in rows[1:] if int(r[idx]) <= env_steps]
        with self.path.open("w", newline="") as fh:
            csv.writer(fh).writerows(keep)


def save_checkpoint(path: str | Path, trainer: Trainer) -> None:
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    with tmp.open("wb") as fh:
        pickle.dump({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "trainer": trainer}, fh)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Trainer:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    with path.open("rb") as fh:
        doc = pickle.load(fh)
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    return doc["trainer"]


def run_training(config: RunConfig, seed: int, resume: bool = False, stop_after_updates: int | None = None) -> Path:
    """Train one seed until ``total_env_steps``; returns the metrics CSV path.

    ``stop_after_updates`` halts early (with a checkpoint) to emulate an
    interruption; ``resume`` continues from the run directory's checkpoint.
    """
    run_dir = config.run_dir(seed)
    ckpt = run_dir / "checkpoint.pkl"
    metrics_path = run_dir / "metrics.csv"
    if resume and ckpt.exists():
        trainer = load_checkpoint(ckpt)
        trainer.config = dataclasses.replace(trainer.config, out_dir=config.out_dir)
    else:
        if run_dir.exists():
            for name in ("metrics.csv", "eval.csv", "timing.csv", "checkpoint.pkl", "status.txt"):
                (run_dir / name).unlink(missing_ok=True)
        run_dir.mkdir(parents=True, exist_ok=True)
        trainer = Trainer(config, seed)
    (run_dir / "config.json").write_text(json.dumps({**config.to_flat(), "seed": seed}, indent=2,
                                                    sort_keys=True) + "\n")
    metrics = CsvLog(metrics_path, METRIC_COLUMNS)
    evals = CsvLog(run_dir / "eval.csv", EVAL_COLUMNS)
    timing = CsvLog(run_dir / "timing.csv", TIMING_COLUMNS)
    for logfile in (metrics, evals, timing):
        logfile.truncate_after(trainer.env_steps)

    status = run_dir / "status.txt"
    start = time.perf_counter()
    done_updates = 0
    try:
        while trainer.env_steps < config.total_env_steps:
            row = trainer.train_step()
            metrics.append(row)
            timing.append({"env_steps": trainer.env_steps, "wallclock_seconds": time.perf_counter() - start})
            done_updates += 1
            finished = trainer.env_steps >= config.total_env_steps
            if trainer.updates % config.eval_interval == 0 or finished:
                evals.append(trainer.evaluate())
            if trainer.updates % config.checkpoint_interval == 0 or finished:
                save_checkpoint(ckpt, trainer)
            if stop_after_updates is not None and done_updates >= stop_after_updates and not finished:
                save_checkpoint(ckpt, trainer)
                status.write_text("stopped\n")
                return metrics_path
            if config.time_limit is not None and time.perf_counter() - start > config.time_limit and not finished:
                save_checkpoint(ckpt, trainer)
                status.write_text("timeout\n")
                log.warning("run %s hit its time limit at %d env steps", run_dir, trainer.env_steps)
                return metrics_path
    except SnMappoError as exc:
        status.write_text(f"failed: {exc}\n")
        raise
    status.write_text("completed\n")
    return metrics_path


def read_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class SweepResult:
    run_files: dict[int, Path]
    summary_path: Path
    failed: dict[int, str]


def _sweep_worker(args: tuple[RunConfig, int]) -> tuple[int, str | None, str | None]:
    config, seed = args
    try:
        return seed, str(run_training(config, seed)), None
    except SnMappoError as exc:
        return seed, None, str(exc)


def summarize_runs(paths: Sequence[Path], out_path: Path, warning: bool = False) -> Path:
    """Per-row mean and population std across runs for every numeric metric column.

    Rows are aligned by update index and truncated to the shortest run.
    """
    runs = [read_csv(p) for p in paths]
    numeric = [c for c in METRIC_COLUMNS if c not in ("variant", "env_steps")]
    header = ["env_steps", "n_seeds", "warning"] + [f"{c}_{s}" for c in numeric for s in ("mean", "std")]
    n_rows = min((len(r) for r in runs), default=0)
    with out_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(n_rows):
            row = [runs[0][i]["env_steps"], len(runs), int(warning)]
            for c in numeric:
                vals = np.array([float(r[i][c]) for r in runs])
                row += [repr(float(vals.mean())), repr(float(vals.std()))]
            writer.writerow(row)
    return out_path


def run_sweep(config: RunConfig) -> SweepResult:
    """One run per seed (in worker processes when ``workers > 1``) plus a summary CSV."""
    jobs = [(config, s) for s in config.seeds]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_sweep_worker, jobs))
    else:
        results = [_sweep_worker(j) for j in jobs]
    files = {seed: Path(p) for seed, p, err in results if p is not None}
    failed = {seed: err for seed, p, err in results if err is not None}
    for seed, err in failed.items():
        log.warning("seed %d failed: %s", seed, err)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = out / f"summary_{config.env}_{config.variant}.csv"
    summarize_runs([files[s] for s in sorted(files)], summary, warning=bool(failed))
    return SweepResult(files, summary, failed)


def measure_random_baseline(env_name: str, episodes: int = 20, seed: int = 0) -> dict:
    """Uniform-over-legal-actions policy statistics, measured on the same simulator."""
    return random_policy_baseline(make_env(env_name), episodes, seed=seed)


def evaluate_checkpoint(path: str | Path, episodes: int, seed: int = 0) -> dict:
    trainer = load_checkpoint(path)
    return evaluate_policy(make_env(trainer.config.env), trainer.ac, episodes, seed=seed)


# ------------------------------------------------------- gradient analysis


ANALYSIS_COLUMNS = ("check", "trial", "widths", "sn_set", "predicted_ratio", "observed_ratio_min",
                    "observed_ratio_max", "max_rel_deviation", "passed")


def analyze_gradients_cmd(out_path: str | Path, layers: Sequence[int] = (2, 3, 4), trials: int = 50,
                          max_width: int = 32, sign_inputs: int = 1000, budget: int = 10_000, seed: int = 0,
                          skip_stop_gradient: bool = False, tol: float = 1e-6) -> tuple[Path, bool]:
    """Run the scaling-law, sign-preservation and bias counterexample suites; write a CSV report.

    ``skip_stop_gradient`` lets gradients flow through the singular value
    estimate, a fault injection under which the scaling law must fail.
    """
    from .grad_analysis import (
        BiasFreeMlp,
        bias_counterexample_search,
        gradient_scaling_check,
        sample_regular_input,
        sign_preservation_check,
    )

    if trials < 1 or not layers or min(layers) < 1 or max_width < 1:
        raise ConfigError("analysis needs trials >= 1, layer counts >= 1 and max_width >= 1")
    rng = np.random.default_rng(seed)
    rows, ok = [], True
    for trial in range(trials):
        n_layers = int(rng.choice(list(layers)))
        widths = [int(w) for w in rng.integers(1, max_width + 1, size=n_layers + 1)]
        sn_set = [l for l in range(1, n_layers + 1) if rng.random() < 0.5] or [int(rng.integers(1, n_layers + 1))]
        net = BiasFreeMlp.random(widths, rng, sn_set)
        x = sample_regular_input(net, rng)
        rep = gradient_scaling_check(net, x, rng.standard_normal(widths[-1]),
                                     stop_gradient=not skip_stop_gradient)
        finite = [r for r in rep.observed_ratio if math.isfinite(r)]
        passed = rep.passed(tol)
        ok &= passed
        rows.append({"check": "scaling_law", "trial": trial, "widths": "-".join(map(str, widths)),
                     "sn_set": "-".join(map(str, sn_set)), "predicted_ratio": rep.predicted_ratio,
                     "observed_ratio_min": min(finite, default=float("nan")),
                     "observed_ratio_max": max(finite, default=float("nan")),
                     "max_rel_deviation": rep.max_rel_deviation, "passed": int(passed)})

        match = sign_preservation_check(net, rng.standard_normal((sign_inputs, widths[0])))
        passed = bool(match.all())
        ok &= passed
        rows.append({"check": "sign_preservation", "trial": trial, "widths": "-".join(map(str, widths)),
                     "sn_set": "-".join(map(str, sn_set)), "predicted_ratio": "", "observed_ratio_min": "",
                     "observed_ratio_max": "", "max_rel_deviation": 1.0 - float(match.mean()),
                     "passed": int(passed)})

    for bias in (True, False):
        widths = [4, 8, 8, 1]
        res = bias_counterexample_search(widths, rng, budget=budget, bias=bias)
        passed = res.found == bias
        ok &= passed
        rows.append({"check": f"counterexample_{'biased' if bias else 'bias_free'}", "trial": res.samples_used,
                     "widths": "-".join(map(str, widths)), "sn_set": "1-2-3", "predicted_ratio": "",
                     "observed_ratio_min": "", "observed_ratio_max": "", "max_rel_deviation": "",
                     "passed": int(passed)})

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ANALYSIS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    return out_path, ok
