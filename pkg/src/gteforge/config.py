"""Run configuration: one YAML/JSON file, ``--set`` overrides, strict validation."""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import yaml

from .encoder import EncoderConfig
from .evaluation.report import TaskSpecError, validate_task_spec
from .trainer import TrainConfig

SEED_ENV = "GTEFORGE_SEED"

TOP_KEYS = {"seed", "output_dir", "encoder", "vocab", "data", "pretrain", "finetune", "eval"}
_STAGE_KEYS = {f.name for f in fields(TrainConfig)} - {"stage", "seed"}
_ENCODER_KEYS = {f.name for f in fields(EncoderConfig)}
_SOURCE_KEYS = {"name", "path", "kind", "task_family"}


class ConfigError(ValueError):
    """Invalid run configuration; message names the offending key."""


def _check_keys(section: dict, allowed: set, where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _typed(cls, values: dict, where: str):
    """Build a dataclass, checking each value against its default's type."""
    defaults = {f.name: f.default for f in fields(cls)}
    values = dict(values)
    for k, v in list(values.items()):
        d = defaults[k]
        if d is None or v is None:
            continue
        ok = isinstance(v, bool) if isinstance(d, bool) else (
            isinstance(v, (int, float)) and not isinstance(v, bool) if isinstance(d, float) else
            isinstance(v, int) and not isinstance(v, bool) if isinstance(d, int) else
            isinstance(v, type(d))
        )
        if not ok:
            raise ConfigError(f"{where}.{k}: expected {type(d).__name__}, got {v!r}")
        if isinstance(d, float):
            values[k] = float(v)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def apply_override(raw: dict, assignment: str) -> None:
    """Apply ``section.key=value`` (value parsed as YAML) to the raw config in place."""
    path, sep, value = assignment.partition("=")
    if not sep or not path:
        raise ConfigError(f"--set expects section.key=value, got {assignment!r}")
    keys = path.split(".")
    node = raw
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {path}: {k} is not a section")
    node[keys[-1]] = yaml.safe_load(value)


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path
    seed: int
    output_dir: Path
    encoder: EncoderConfig
    vocab_corpus: list
    sources: list
    pretrain: TrainConfig
    finetune: TrainConfig
    eval_tasks: list

    def fingerprint_dict(self) -> dict:
        """Resolved settings that define the experiment (locations excluded)."""
        return {
            "seed": self.seed,
            "encoder": self.encoder.to_dict(),
            "vocab_corpus": [str(p) for p in self.raw.get("vocab", {}).get("corpus", [])],
            "sources": self.sources,
            "pretrain": self.pretrain.to_dict(),
            "finetune": self.finetune.to_dict(),
            "eval_tasks": self.eval_tasks,
        }

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def vocab_path(self) -> Path:
        return self.output_dir / "vocab.txt"


def parse_config(raw: dict, base_dir=".", env: Optional[dict] = None) -> RunConfig:
    env = os.environ if env is None else env
    raw = copy.deepcopy(raw or {})
    base_dir = Path(base_dir)
    _check_keys(raw, TOP_KEYS, "config")

    seed = raw.get("seed", 0)
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed: expected a non-negative integer")

    out = raw.get("output_dir", "runs/default")
    output_dir = Path(out) if Path(out).is_absolute() else base_dir / out

    enc = raw.get("encoder", {})
    _check_keys(enc, _ENCODER_KEYS, "encoder")
    encoder = _typed(EncoderConfig, enc, "encoder")

    voc = raw.get("vocab", {})
    _check_keys(voc, {"corpus"}, "vocab")
    corpus = voc.get("corpus", [])
    if isinstance(corpus, str):
        corpus = [corpus]

    data = raw.get("data", {})
    _check_keys(data, {"sources"}, "data")
    sources = []
    names = set()
    for i, s in enumerate(data.get("sources", [])):
        where = f"data.sources[{i}]"
        _check_keys(s, _SOURCE_KEYS, where)
        for k in ("name", "path", "kind"):
            if k not in s:
                raise ConfigError(f"{where}.{k}: required")
        if s["kind"] not in ("pair", "triple"):
            raise ConfigError(f"{where}.kind: must be 'pair' or 'triple'")
        if s["name"] in names:
            raise ConfigError(f"{where}.name: duplicate source name {s['name']!r}")
        names.add(s["name"])
        sources.append({"name": str(s["name"]), "path": str(s["path"]), "kind": s["kind"],
                        "task_family": str(s.get("task_family", ""))})

    pt = raw.get("pretrain", {})
    _check_keys(pt, _STAGE_KEYS, "pretrain")
    pretrain = _typed(TrainConfig, dict(pt, stage="pretrain", seed=seed), "pretrain")
    pt_default = TrainConfig(stage="pretrain", seed=seed, peak_lr=pretrain.peak_lr)
    ft = raw.get("finetune", {})
    _check_keys(ft, _STAGE_KEYS, "finetune")
    ft_base = TrainConfig.finetune_defaults(pt_default).to_dict()
    ft_base.update(ft)
    ft_base.update(stage="finetune", seed=seed)
    finetune = _typed(TrainConfig, ft_base, "finetune")

    for stage in (pretrain, finetune):
        if stage.max_seq_len > encoder.max_seq_len:
            raise ConfigError(
                f"{stage.stage}.max_seq_len: {stage.max_seq_len} exceeds encoder.max_seq_len {encoder.max_seq_len}"
            )

    ev = raw.get("eval", {})
    _check_keys(ev, {"tasks"}, "eval")
    tasks = ev.get("tasks", [])
    for i, t in enumerate(tasks):
        try:
            validate_task_spec(t, f"eval.tasks[{i}]")
        except TaskSpecError as exc:
            raise ConfigError(str(exc)) from None

    return RunConfig(raw, base_dir, seed, output_dir, encoder, list(corpus), sources,
                     pretrain, finetune, list(tasks))


def load_config(path, overrides=(), env: Optional[dict] = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for o in overrides:
        apply_override(raw, o)
    return parse_config(raw, path.parent, env)
