"""Flat ``key = value`` run configuration shared by every CLI command."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, MissingInputError
from .model import VARIANTS, ModelConfig
from .planning import PlanConfig
from .training import TrainConfig

ENVS = ("wall", "umaze", "medium", "teleport")
LINEAGE_KEYS = (
    "env", "layout", "n_traj", "traj_len", "dataset", "patch_size", "latent_channels", "action_embed",
    "history", "mode", "head_dim", "encoder_hidden", "predictor_hidden", "lam", "variant", "epochs",
    "batch_size", "encoder_lr", "predictor_lr", "steps_per_epoch",
)


@dataclass
class RunConfig:
    # bookkeeping
    name: str = ""  # empty -> "<env>-<lineage digest>"
    runs_dir: str = "runs"
    seed: int = 0
    seeds: str = ""  # comma list; empty -> just ``seed``
    timing: bool = False  # record wall time in eval CSVs (breaks byte-identical reruns)
    # environment and data
    env: str = "wall"
    layout: str = ""  # optional layout file overriding the env default
    n_traj: int = 0  # 0 -> env default
    traj_len: int = 0
    dataset: str = ""  # existing dataset file; empty -> generate
    # model
    patch_size: int = 8
    latent_channels: int = 8
    action_embed: int = 16
    history: int = 3
    mode: str = "spatial"
    head_dim: int = 32
    encoder_hidden: int = 32
    predictor_hidden: int = 256
    # training
    lam: float = 0.1
    variant: str = "agg"
    epochs: int = 20
    batch_size: int = 32
    encoder_lr: float = 0.0  # 0 -> 1e-4 with straightening, 1e-5 without
    predictor_lr: float = 5e-4
    steps_per_epoch: int = 0  # 0 -> one pass over the prediction pool
    checkpoint: str = ""  # existing checkpoint; empty -> runs/<name>/<seed>/model.ckpt
    # planning
    planner: str = "gd"
    budget: int = 25
    n_tasks: int = 50
    gd_lr: float = 0.01
    gd_steps: int = 100
    cem_population: int = 200
    cem_iterations: int = 10
    cem_elite_frac: float = 0.1
    cem_init_std: float = 0.5
    gamma: float = 0.9
    max_mpc_steps: int = 10
    # linear analysis
    linear_a: str = "1,0;0,1"  # rows separated by ';'
    linear_b: str = "1,0;0,1"
    linear_k: int = 5
    sweep_draws: int = 1000
    sweep_dim: int = 4
    sweep_eps: str = "0.1,0.25,0.4"
    sweep_horizons: str = "2,5,10"
    sweep_noise: float = 0.1
    # diagnostics
    heatmap_source: str = "pooled"
    heatmap_resolution: int = 1  # probes per cell side
    connectivity: int = 4
    teleport_aware: bool = False
    goal_cell: str = ""  # "r,c"; empty -> first free cell
    n_probe_traj: int = 10

    # parsing ----------------------------------------------------------------

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def parse(cls, text: str, overrides=()) -> "RunConfig":
        raw, problems = {}, []
        lines = text.splitlines() + list(overrides)
        for n, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                problems.append(f"line {n}: expected key = value")
                continue
            k, v = (s.strip() for s in line.split("=", 1))
            raw[k] = v
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for k, v in raw.items():
            if k not in types:
                problems.append(f"unknown key {k!r}")
                continue
            try:
                values[k] = _convert(v, types[k])
            except ValueError:
                problems.append(f"{k}: cannot parse {v!r} as {types[k]}")
        cfg = cls(**values)
        try:
            cfg.validate()
        except ConfigError as exc:
            problems.extend(exc.problems)
        if problems:
            raise ConfigError(list(dict.fromkeys(problems)))
        return cfg

    @classmethod
    def load(cls, path, overrides=()) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise MissingInputError(f"config file not found: {path}")
        return cls.parse(path.read_text(), overrides)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_render(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self, keys=None) -> str:
        keys = keys or self.keys()
        text = "".join(f"{k} = {_render(getattr(self, k))}\n" for k in keys)
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    @property
    def run_name(self) -> str:
        """Explicit name, else env plus a digest of everything that shapes the checkpoint."""
        return self.name or f"{self.env}-{self.digest(LINEAGE_KEYS)}"

    def run_dir(self, seed) -> Path:
        return Path(self.runs_dir) / self.run_name / str(seed)

    # validation -------------------------------------------------------------

    def validate(self):
        problems = []
        if self.env not in ENVS:
            problems.append(f"env must be one of {ENVS}")
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}")
        if self.planner not in ("gd", "cem"):
            problems.append("planner must be gd|cem")
        if self.budget not in (25, 50):
            problems.append("budget must be 25 or 50")
        if self.heatmap_source not in ("spatial", "pooled"):
            problems.append("heatmap_source must be spatial|pooled")
        if self.connectivity not in (4, 8):
            problems.append("connectivity must be 4 or 8")
        for k in ("n_tasks", "sweep_draws", "sweep_dim", "linear_k", "n_probe_traj", "heatmap_resolution"):
            if getattr(self, k) < 1:
                problems.append(f"{k} must be >= 1")
        for k in ("n_traj", "traj_len", "steps_per_epoch", "seed"):
            if getattr(self, k) < 0:
                problems.append(f"{k} must be >= 0")
        if self.lam < 0:
            problems.append("lam must be >= 0")
        for k, conv in (("seeds", int), ("sweep_eps", float), ("sweep_horizons", int)):
            try:
                _split(getattr(self, k), conv)
            except ValueError:
                problems.append(f"{k}: expected a comma-separated list")
        if self.heatmap_resolution > 1 and self.env == "teleport":
            problems.append("heatmap_resolution > 1 is not supported on the teleport layout")
        if self.goal_cell:
            try:
                if len(_split(self.goal_cell, int)) != 2:
                    raise ValueError
            except ValueError:
                problems.append("goal_cell must be 'row,col'")
        for k in ("linear_a", "linear_b"):
            try:
                self.matrix(k)
            except ValueError:
                problems.append(f"{k}: expected rows 'a,b;c,d' of equal length")
        # delegate to the module configs so every rule lives in one place
        for build in (self.model_config, self.train_config, self.plan_config):
            try:
                build()
            except ConfigError as exc:
                problems.extend(exc.problems)
            except (TypeError, ValueError) as exc:
                problems.append(str(exc))
        if problems:
            raise ConfigError(list(dict.fromkeys(problems)))

    # views ------------------------------------------------------------------

    @property
    def seed_list(self):
        return _split(self.seeds, int) or [self.seed]

    @property
    def horizon(self):
        return self.budget // 5

    def matrix(self, key):
        rows = [[float(x) for x in r.split(",")] for r in getattr(self, key).split(";") if r.strip()]
        if not rows or len({len(r) for r in rows}) != 1:
            raise ValueError(key)
        return np.array(rows)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            patch_size=self.patch_size,
            latent_channels=self.latent_channels,
            action_embed=self.action_embed,
            history=self.history,
            mode=self.mode,
            head_dim=self.head_dim,
            encoder_hidden=self.encoder_hidden,
            predictor_hidden=self.predictor_hidden,
        )

    def train_config(self, seed=None) -> TrainConfig:
        return TrainConfig(
            lam=self.lam,
            batch_size=self.batch_size,
            encoder_lr=self.encoder_lr or None,
            predictor_lr=self.predictor_lr,
            epochs=self.epochs,
            variant=self.variant,
            seed=self.seed if seed is None else seed,
            steps_per_epoch=self.steps_per_epoch or None,
        )

    def plan_config(self, seed=None) -> PlanConfig:
        return PlanConfig(
            horizon=self.horizon,
            optimizer=self.planner,
            gd_lr=self.gd_lr,
            gd_steps=self.gd_steps,
            cem_population=self.cem_population,
            cem_iterations=self.cem_iterations,
            cem_elite_frac=self.cem_elite_frac,
            cem_init_std=self.cem_init_std,
            gamma=self.gamma,
            max_mpc_steps=max(self.max_mpc_steps, self.horizon),
            seed=self.seed if seed is None else seed,
        )


def _split(text, conv):
    return [conv(x) for x in text.split(",") if x.strip()]


def _convert(v: str, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        low = v.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(v)
    if typ == "int":
        return int(v)
    if typ == "float":
        return float(v)
    return v


def _render(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)
