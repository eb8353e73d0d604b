"""Run configuration: JSON documents validated before any work starts."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .nets import FULL_SCALE_DCNET, DCNetConfig, UNetConfig
from .phantom import CohortConfig
from .training import Scenario, TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


def _build(cls, doc, path):
    if not isinstance(doc, dict):
        raise ConfigError(path, f"expected an object, got {type(doc).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for k in doc:
        if k not in names:
            raise ConfigError(f"{path}.{k}" if path else k, "unknown key")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(path, str(e)) from None


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    model: str = "dcnet"
    net: dict = field(default_factory=dict)  # DCNetConfig / UNetConfig overrides (minus in_channels)
    train: TrainConfig = field(default_factory=TrainConfig)
    scenario: Scenario = field(default_factory=lambda: Scenario("transfer"))
    cohorts: dict = field(default_factory=lambda: {
        "A": CohortConfig(style="fse", n_subjects=12, name="A"),
        "B": CohortConfig(style="dixon", n_subjects=12, name="B", seed=1),
    })
    folds: list = field(default_factory=lambda: [0, 1, 2, 3])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cohorts"] = {k: asdict(v) for k, v in self.cohorts.items()}
        return json.loads(json.dumps(d))


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("", "run config must be a JSON object")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    for k in doc:
        if k not in top:
            raise ConfigError(k, "unknown key")
    version = doc.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError("version", f"unsupported config version {version!r}")
    model = doc.get("model", "dcnet")
    if model not in ("dcnet", "unet"):
        raise ConfigError("model", f"must be 'dcnet' or 'unet', got {model!r}")
    net = doc.get("net", {})
    if not isinstance(net, dict):
        raise ConfigError("net", "expected an object")
    if "in_channels" in net:
        raise ConfigError("net.in_channels", "set by the data; do not configure it")
    if net.get("preset") == "full-scale":
        net = {**FULL_SCALE_DCNET, **{k: v for k, v in net.items() if k != "preset"}}
    _build(DCNetConfig if model == "dcnet" else UNetConfig, net, "net")
    train = _build(TrainConfig, doc.get("train", {}), "train")
    scenario = _build(Scenario, doc.get("scenario", {"kind": "transfer"}), "scenario")
    cohorts_doc = doc.get("cohorts")
    if cohorts_doc is None:
        cohorts = RunConfig().cohorts
    else:
        if not isinstance(cohorts_doc, dict) or not cohorts_doc:
            raise ConfigError("cohorts", "expected a non-empty object of cohort configs")
        cohorts = {}
        for name, c in cohorts_doc.items():
            c = dict(c) if isinstance(c, dict) else c
            if isinstance(c, dict):
                c.setdefault("name", name)
                if c["name"] != name:
                    raise ConfigError(f"cohorts.{name}.name", "must equal its key")
            cohorts[name] = _build(CohortConfig, c, f"cohorts.{name}")
    for role in (scenario.a, scenario.b):
        if role not in cohorts:
            raise ConfigError("scenario", f"refers to cohort {role!r}, which is not configured")
    folds = doc.get("folds", [0, 1, 2, 3])
    if not isinstance(folds, list) or not folds or not all(isinstance(f, int) and f >= 0 for f in folds):
        raise ConfigError("folds", "expected a non-empty list of fold indices")
    for name, c in cohorts.items():
        if max(folds) >= c.n_folds:
            raise ConfigError("folds", f"fold {max(folds)} exceeds cohort {name!r} n_folds={c.n_folds}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed", "must be an integer")
    return RunConfig(version, seed, model, net, train, scenario, cohorts, folds)


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("", f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError("", f"{path} is not valid JSON: {e}") from None
    return parse_run_config(doc)
