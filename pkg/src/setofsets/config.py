"""Run configuration: one JSON document, validated into typed sub-configs."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .evolver import MODES, EngineConfig, EngineError
from .genome import GRANULARITIES, GroupingError, GroupingMap
from .network import Architecture, NetworkError, TrainHyper
from .taskbed import SuiteError, SuiteSpec


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/default",
    "suite": {
        "generator": "gaussian_clusters",
        "n_classes": 10,
        "samples_per_class": 200,
        "input_dim": 16,
        "cluster_spread": 0.7,
        "task_splits": [[0, 2, 4, 6, 8], [1, 3, 5, 7, 9]],
        "csv_path": None,
    },
    "arch": {"layer_sizes": [16, 64, 10], "activation": "relu", "output": "softmax_logits"},
    "grouping": {"granularity": "per_neuron", "n_chunks": None},
    "jat_hyper": {"lr": 0.05, "lr_decay": 0.98, "epochs": 60, "batch_size": 32},
    "engine": {
        "population_size": 60,
        "generations": 120,
        "transfer": 0.3,
        "mutation_rate": None,
        "min_active_fraction": 0.125,
        "init_density": [0.3, 1.0],
    },
    "finetune_hyper": {"lr": 0.0005, "lr_decay": 0.95, "epochs": 20, "batch_size": 32},
    "arms": ["multitask", "singletask"],
    "repeats": 10,
    "finalize": {"arm": "multitask", "repeat": 0},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"{where}: unknown key")
        if isinstance(base[key], dict) and value is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


@dataclass(frozen=True)
class RunConfig:
    raw: dict = field(repr=False)
    seed: int
    output_dir: str
    suite: SuiteSpec
    arch: Architecture
    granularity: str
    n_chunks: int | None
    jat_hyper: TrainHyper
    engine: EngineConfig
    finetune_hyper: TrainHyper
    arms: tuple[str, ...]
    repeats: int
    finalize_arm: str
    finalize_repeat: int

    def grouping(self) -> GroupingMap:
        return GroupingMap(self.arch, self.granularity, self.n_chunks)

    def engine_for(self, arm: str, repeat: int) -> EngineConfig:
        return self.engine.replace(mode=arm, seed=self.seed + repeat)

    def hashable(self) -> dict:
        d = json.loads(json.dumps(self.raw))
        d.pop("output_dir", None)
        return d

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.hashable(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, **kw) -> "RunConfig":
        raw = json.loads(json.dumps(self.raw))
        for key, value in kw.items():
            if value is not None:
                raw[key] = value
        return build_config(raw)

    def dumps(self) -> str:
        return json.dumps({"config": self.raw, "config_hash": self.config_hash}, indent=2, sort_keys=True) + "\n"


def _section(path: str, fn):
    try:
        return fn()
    except ConfigError:
        raise
    except (NetworkError, SuiteError, EngineError, GroupingError) as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith(path) else f"{path}: {msg}") from None
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def build_config(overrides: dict | None = None) -> RunConfig:
    raw = _merge(DEFAULTS, overrides or {})
    seed = raw["seed"]
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed: must be a non-negative integer")
    suite = _section("suite", lambda: SuiteSpec(**raw["suite"], seed=seed))
    arch = _section("arch", lambda: Architecture(tuple(raw["arch"]["layer_sizes"]), raw["arch"]["activation"],
                                                 raw["arch"]["output"]))
    if suite.generator == "gaussian_clusters":
        if arch.input_dim != suite.input_dim:
            raise ConfigError("arch.layer_sizes: input size must equal suite.input_dim")
        if arch.output_dim < suite.n_classes:
            raise ConfigError("arch.layer_sizes: output size must cover suite.n_classes")
    g = raw["grouping"]
    if g["granularity"] not in GRANULARITIES:
        raise ConfigError(f"grouping.granularity: unknown granularity {g['granularity']!r}")
    _section("grouping", lambda: GroupingMap(arch, g["granularity"], g["n_chunks"]))
    jat_hyper = _section("jat_hyper", lambda: TrainHyper(**raw["jat_hyper"], seed=seed))
    finetune_hyper = _section("finetune_hyper", lambda: TrainHyper(**raw["finetune_hyper"], seed=seed))
    engine = _section("engine", lambda: EngineConfig(n_tasks=suite.n_tasks, seed=seed, **raw["engine"]))
    arms = tuple(raw["arms"])
    if not arms or any(a not in MODES for a in arms) or len(set(arms)) != len(arms):
        raise ConfigError(f"arms: must be a non-empty subset of {list(MODES)}")
    repeats = raw["repeats"]
    if not isinstance(repeats, int) or repeats < 1:
        raise ConfigError("repeats: must be an integer >= 1")
    fin = raw["finalize"]
    if fin["arm"] not in arms:
        raise ConfigError("finalize.arm: must be one of the configured arms")
    if not 0 <= fin["repeat"] < repeats:
        raise ConfigError("finalize.repeat: must index one of the repeats")
    return RunConfig(raw=raw, seed=seed, output_dir=str(raw["output_dir"]), suite=suite, arch=arch,
                     granularity=g["granularity"], n_chunks=g["n_chunks"], jat_hyper=jat_hyper,
                     engine=engine, finetune_hyper=finetune_hyper, arms=arms, repeats=repeats,
                     finalize_arm=fin["arm"], finalize_repeat=fin["repeat"])


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return build_config()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if "config" in data and "config_hash" in data:
        data = data["config"]
    return build_config(data)
