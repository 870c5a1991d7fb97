"""Run configuration: JSON schema checks, defaults, digest and dataset loading."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, fields

from .data import Dataset, SyntheticSpec, generate_synthetic, ingest_dataset, split_edges, split_nodes
from .layers import AGGREGATIONS, COMPRESS_MODES, SCHEMES, VARIANTS, LayerSpec
from .model import ModelConfig
from .tasks import TASKS, TrainConfig


class ConfigError(ValueError):
    pass


_TOP = {"task", "seed", "data", "model", "train", "eval", "out_dir"}
_DATA_FILES = {"nodes", "edges", "labels"}
_MODEL = {f.name for f in fields(ModelConfig)}
_LAYER = {f.name for f in fields(LayerSpec)}
_EVAL = {"negatives", "hits"}


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key '{unknown[0]}'")


def _int(value, where: str, minimum: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError(f"{where}: expected an integer >= {minimum}")
    return value


def _enum(value, choices, where: str):
    if value not in choices:
        raise ConfigError(f"{where}: {value!r} is not one of {list(choices)}")
    return value


@dataclass(frozen=True)
class EvalConfig:
    negatives: int = 100
    hits: tuple[int, ...] = (1, 3, 5, 10)


@dataclass(frozen=True)
class RunConfig:
    task: str
    seed: int
    data: dict
    model: ModelConfig
    train: TrainConfig
    eval: EvalConfig
    out_dir: str | None = None
    base_dir: str = "."

    @property
    def digest(self) -> str:
        """SHA-256 over everything that determines the trained artifact (eval and out_dir excluded)."""
        payload = {"task": self.task, "seed": self.seed, "data": self.data,
                   "model": self.model.to_dict(),
                   "train": {f.name: getattr(self.train, f.name) for f in fields(TrainConfig)}}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    @property
    def synthetic(self) -> SyntheticSpec | None:
        spec = self.data.get("synthetic")
        return None if spec is None else SyntheticSpec.from_dict(spec)


def parse_config(raw: dict, base_dir: str = ".") -> RunConfig:
    _check_keys(raw, _TOP, "config")
    for key in ("task", "seed", "data"):
        if key not in raw:
            raise ConfigError(f"config: missing required field '{key}'")
    task = _enum(raw["task"], TASKS, "task")
    seed = _int(raw["seed"], "seed")

    data = raw["data"]
    _check_keys(data, _DATA_FILES | {"synthetic"}, "data")
    if "synthetic" in data:
        if set(data) != {"synthetic"}:
            raise ConfigError("data: give either 'synthetic' or file paths, not both")
        try:
            SyntheticSpec.from_dict(data["synthetic"])
        except ValueError as exc:
            raise ConfigError(f"data.synthetic: {exc}") from None
    elif not {"nodes", "edges"} <= set(data):
        raise ConfigError("data: need 'nodes' and 'edges' paths or a 'synthetic' spec")

    m = raw.get("model", {})
    _check_keys(m, _MODEL, "model")
    layers = []
    for i, spec in enumerate(m.get("layers", [{}])):
        where = f"model.layers[{i}]"
        _check_keys(spec, _LAYER, where)
        if "variant" in spec:
            _enum(spec["variant"], VARIANTS, where + ".variant")
        if "f_agg" in spec:
            _enum(spec["f_agg"], AGGREGATIONS, where + ".f_agg")
        if spec.get("weights") is not None:
            _enum(spec["weights"], SCHEMES, where + ".weights")
        try:
            layers.append(LayerSpec(**spec))
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    if "compress" in m:
        _enum(m["compress"], COMPRESS_MODES, "model.compress")
    for key in ("d", "heads", "max_len"):
        if key in m:
            _int(m[key], f"model.{key}", 1)
    if "blocks" in m:
        _int(m["blocks"], "model.blocks")
    try:
        model = ModelConfig(**{**m, "layers": tuple(layers)})
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None
    if model.d % model.heads:
        raise ConfigError(f"model.heads: d={model.d} is not divisible by heads={model.heads}")

    t = raw.get("train", {})
    _check_keys(t, TrainConfig.field_names(), "train")
    for key in ("epochs", "batch_size", "k_train"):
        if key in t:
            _int(t[key], f"train.{key}", 0 if key == "epochs" else 1)
    try:
        train = TrainConfig(**t)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None

    e = raw.get("eval", {})
    _check_keys(e, _EVAL, "eval")
    negatives = _int(e.get("negatives", 100), "eval.negatives", 1)
    hits = e.get("hits", [1, 3, 5, 10])
    if not isinstance(hits, list) or not hits:
        raise ConfigError("eval.hits: expected a nonempty list of integers")
    hits = tuple(_int(k, "eval.hits", 1) for k in hits)

    out_dir = raw.get("out_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError("out_dir: expected a string")
    return RunConfig(task, seed, data, model, train, EvalConfig(negatives, hits), out_dir, base_dir)


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
    return parse_config(raw, os.path.dirname(os.path.abspath(path)))


def load_run_dataset(cfg: RunConfig) -> Dataset:
    """Build (or read) the dataset and attach the task's split, all from ``cfg.seed``."""
    max_len = cfg.model.max_len
    if cfg.synthetic is not None:
        ds = generate_synthetic(cfg.synthetic, cfg.seed, max_len=max_len)
    else:
        labels = cfg.data.get("labels")
        ds = ingest_dataset(cfg.resolve(cfg.data["nodes"]), cfg.resolve(cfg.data["edges"]),
                            cfg.resolve(labels) if labels else None, max_len=max_len)
    return split_edges(ds, cfg.seed) if cfg.task == "link" else split_nodes(ds, cfg.seed)
