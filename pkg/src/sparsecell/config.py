"""Key = value run configuration with CLI overrides.

Config files are flat dotted keys, one per line::

    corpus.seed = 7
    train.sparse.t1 = 0.9

Every key can also be passed on the command line as ``--corpus.seed 7``.
Unknown keys are rejected, and the fully resolved mapping (defaults
included) is echoed into each run directory so a run can be reproduced
from its artifacts alone.
"""

from __future__ import annotations

import ast
from dataclasses import fields
from pathlib import Path

from .losses import SparseTrainConfig
from .model import DetectorConfig
from .synth import CorpusSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _defaults_from(prefix: str, obj, skip=()):
    out = {}
    for f in fields(obj):
        if f.name in skip:
            continue
        out[f"{prefix}.{f.name}"] = getattr(obj, f.name)
    return out


def default_config() -> dict:
    cfg = {"seed": 0, "out": "runs", "verbosity": "info"}
    cfg.update(_defaults_from("corpus", CorpusSpec(), skip=("attribute_rules",)))
    cfg.update(_defaults_from("train", TrainConfig(), skip=("sparse", "detector")))
    cfg.update(_defaults_from("train.sparse", SparseTrainConfig()))
    cfg.update(_defaults_from("train.detector", DetectorConfig()))
    cfg.update({
        "eval.conf_threshold": 0.1,
        "eval.nms_iou": 0.5,
        "ablate.n_seeds": 3,
        "report.conf_threshold": 0.25,
    })
    return cfg


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise IOError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = parse_value(value)
    return out


def resolve(file_overrides: dict = None, cli_overrides: dict = None) -> dict:
    cfg = default_config()
    for source, name in ((file_overrides, "config file"), (cli_overrides, "command line")):
        for key, value in (source or {}).items():
            if key not in cfg:
                raise ConfigError(f"unknown config key {key!r} (from {name})")
            cfg[key] = value
    return cfg


def write_resolved(cfg: dict, path) -> None:
    lines = [f"{k} = {cfg[k]!r}" for k in sorted(cfg)]
    Path(path).write_text("\n".join(lines) + "\n")


def _section(cfg: dict, prefix: str) -> dict:
    plen = len(prefix) + 1
    return {
        k[plen:]: v for k, v in cfg.items()
        if k.startswith(prefix + ".") and "." not in k[plen:]
    }


def corpus_spec(cfg: dict) -> CorpusSpec:
    spec = CorpusSpec(**_section(cfg, "corpus"))
    try:
        spec.validate()
    except ValueError as e:
        raise ConfigError(f"corpus: {e}") from e
    return spec


def train_config(cfg: dict) -> TrainConfig:
    tc = TrainConfig(
        sparse=SparseTrainConfig(**_section(cfg, "train.sparse")),
        detector=DetectorConfig(**{
            k: tuple(v) if isinstance(v, list) else v
            for k, v in _section(cfg, "train.detector").items()
        }),
        **_section(cfg, "train"),
    )
    try:
        tc.validate()
        tc.sparse.validate()
    except ValueError as e:
        raise ConfigError(f"train: {e}") from e
    return tc


def fingerprint(cfg: dict) -> str:
    """Short stable hash of the behavior-affecting config.

    The output location is excluded: runs that differ only in where they
    write must produce identical artifacts.
    """
    import hashlib

    blob = "\n".join(f"{k}={cfg[k]!r}" for k in sorted(cfg) if k != "out")
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
