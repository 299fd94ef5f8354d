"""Run configuration: an INI-style file with one section per concern.

Example::

    [run]
    name = cartpole-anneal
    env = cartpole
    seeds = 0, 1, 2

    [train]
    total_steps = 300000

    [anneal]
    total_iterations = 500

Every value not given falls back to the environment's published defaults.
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .agents import TrainConfig


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


@dataclass
class AnnealSettings:
    total_iterations: int = 500
    warmup_fraction: float = 0.2
    beta_start: float = 1e-7
    beta_end: float = 1e-3
    shape: str = "geometric"
    n_checkpoints: int = 10


@dataclass
class EvalSettings:
    episodes: int = 20
    threshold: float = 150.0


@dataclass
class GridSettings:
    maze_seeds: tuple[int, ...] = (0,)
    maze_file: str = ""


@dataclass
class TransferSettings:
    split_seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[str, ...] = ("baseline:0", "ablation:1e-4", "ib:0.05")
    pretrain_steps: int = 400_000
    retrain_steps: int = 400_000
    threshold: float = 0.9
    window: int = 100


@dataclass
class RunConfig:
    name: str
    env: str
    seeds: tuple[int, ...] = (0,)
    beta: float = 0.0
    out: str = ""
    train: TrainConfig = field(default_factory=TrainConfig)
    anneal: AnnealSettings = field(default_factory=AnnealSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    grid: GridSettings = field(default_factory=GridSettings)
    transfer: TransferSettings = field(default_factory=TransferSettings)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of the full resolved configuration (output path excluded)."""
        d = self.to_dict()
        d.pop("out", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def tag(self) -> str:
        return "baseline" if self.beta == 0 and self.train.deterministic else "ib"


RUN_REQUIRED = ("name", "env")
RUN_KEYS = {"name": str, "env": str, "seeds": "ints", "beta": float, "out": str}
SECTIONS = {"anneal": AnnealSettings, "eval": EvalSettings, "grid": GridSettings, "transfer": TransferSettings}


def _convert(section: str, key: str, raw: str, kind):
    try:
        if kind == "ints":
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if kind == "strs":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc


def _kind_of(dc, name: str):
    f = {f.name: f for f in dataclasses.fields(dc)}[name]
    t = str(f.type)
    if "tuple[int" in t:
        return "ints"
    if "tuple[str" in t:
        return "strs"
    return {"int": int, "float": float, "str": str, "bool": bool}.get(t, str)


def _section(parser, name: str, dc, defaults: dict | None = None) -> dict:
    values = dict(defaults or {})
    if not parser.has_section(name):
        return values
    allowed = {f.name for f in dataclasses.fields(dc)}
    for key, raw in parser.items(name):
        if key not in allowed:
            raise ConfigError(f"[{name}] {key}: unknown key")
        values[key] = _convert(name, key, raw, _kind_of(dc, key))
    return values


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    unknown = set(parser.sections()) - {"run", "train", *SECTIONS}
    if unknown:
        raise ConfigError(f"unknown section [{sorted(unknown)[0]}]")
    if not parser.has_section("run"):
        raise ConfigError("[run] section is required")
    run: dict = {}
    for key, raw in parser.items("run"):
        if key not in RUN_KEYS:
            raise ConfigError(f"[run] {key}: unknown key")
        run[key] = _convert("run", key, raw, RUN_KEYS[key])
    for key in RUN_REQUIRED:
        if key not in run or run[key] == "":
            raise ConfigError(f"[run] {key}: required field missing")
    env = run["env"]
    if env not in ("grid", "cartpole"):
        raise ConfigError(f"[run] env: must be 'grid' or 'cartpole', got {env!r}")
    base = TrainConfig.grid_defaults() if env == "grid" else TrainConfig.cartpole_defaults()
    train_vals = _section(parser, "train", TrainConfig, dataclasses.asdict(base))
    if train_vals.get("env", env) != env:
        raise ConfigError(f"[train] env: {train_vals['env']!r} contradicts [run] env {env!r}")
    train_vals["env"] = env
    try:
        train = TrainConfig(**train_vals)
    except ValueError as exc:
        raise ConfigError(f"[train] {exc}") from exc
    cfg = RunConfig(
        name=run["name"], env=env, seeds=run.get("seeds", (0,)), beta=run.get("beta", 0.0),
        out=run.get("out", ""), train=train,
        **{name: dc(**_section(parser, name, dc)) for name, dc in SECTIONS.items()},
    )
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if not cfg.seeds:
        raise ConfigError("[run] seeds: at least one seed required")
    if cfg.beta < 0:
        raise ConfigError("[run] beta: must be non-negative")
    a = cfg.anneal
    if a.shape not in ("geometric", "linear"):
        raise ConfigError(f"[anneal] shape: must be geometric or linear, got {a.shape!r}")
    if not 0 < a.beta_start <= a.beta_end:
        raise ConfigError("[anneal] beta_start: need 0 < beta_start <= beta_end")
    if not 0 <= a.warmup_fraction < 1:
        raise ConfigError("[anneal] warmup_fraction: must lie in [0, 1)")
    if a.total_iterations <= 0 or a.n_checkpoints <= 0:
        raise ConfigError("[anneal] total_iterations: must be positive")
    if cfg.eval.episodes <= 0:
        raise ConfigError("[eval] episodes: must be positive")
    for v in cfg.transfer.variants:
        name, _, beta = v.partition(":")
        try:
            float(beta)
        except ValueError:
            raise ConfigError(f"[transfer] variants: {v!r} is not name:beta") from None


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def render_config(cfg: RunConfig) -> str:
    """Fully resolved config in the same INI format."""
    def fmt(v):
        if isinstance(v, tuple):
            return ", ".join(str(x) for x in v)
        if isinstance(v, bool):
            return "true" if v else "false"
        return repr(v) if isinstance(v, float) else str(v)

    lines = ["[run]"]
    for key in RUN_KEYS:
        lines.append(f"{key} = {fmt(getattr(cfg, key))}")
    for name, obj in [("train", cfg.train)] + [(n, getattr(cfg, n)) for n in SECTIONS]:
        lines.append("")
        lines.append(f"[{name}]")
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
