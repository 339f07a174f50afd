"""Checkpoint serialization and the flat ``section.key=value`` run configuration.

Checkpoint layout (all integers little-endian)::

    b"TRXCKPT1" | u32 version | u64 header length | header JSON (UTF-8)
    | float32 tensor data in header order | sha256 of every preceding byte

The header carries the model configuration echo, free-form metadata (seed,
epoch, fold) and the ``[name, shape]`` table for the tensor data.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .data.synth import SynthConfig
from .encoder import NAMED_CONFIGS, EncoderConfig, named_config
from .evaluation import AGGREGATORS
from .fusion import ModelConfig, PairClassifier
from .nn_core import ConfigError
from .training import TrainConfig

MAGIC = b"TRXCKPT1"
FORMAT_VERSION = 1
_DIGEST = 32


class CheckpointError(Exception):
    """Base class for unreadable or incompatible checkpoints."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# Model config echo
# ---------------------------------------------------------------------------


def model_config_to_dict(cfg: ModelConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["encoder"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["encoder"].items()}
    return d


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["encoder"] = EncoderConfig(**d["encoder"])
    return ModelConfig(**d)


def _flat(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flat(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


def config_diff(a: ModelConfig, b: ModelConfig) -> list[str]:
    """Human-readable ``key: a != b`` lines for every differing field."""
    fa, fb = _flat(model_config_to_dict(a)), _flat(model_config_to_dict(b))
    return [f"{k}: {fa.get(k)!r} != {fb.get(k)!r}" for k in sorted(set(fa) | set(fb)) if fa.get(k) != fb.get(k)]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: PairClassifier, meta: dict, path: str | Path) -> Path:
    """Write ``model`` (parameters and buffers) with ``meta`` to ``path``."""
    state = model.state_dict()
    names = list(state)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate parameter names")
    table = [[name, list(state[name].shape)] for name in names]
    header = {"model_config": model_config_to_dict(model.cfg), "meta": meta, "tensors": table}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(head)), head]
    for name in names:
        parts.append(state[name].detach().cpu().numpy().astype("<f4").tobytes())
    body = b"".join(parts)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + hashlib.sha256(body).digest())
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Validate and parse a checkpoint file into ``(header, arrays)``."""
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (magic {blob[:len(MAGIC)]!r})")
    fixed = len(MAGIC) + 12
    if len(blob) < fixed + _DIGEST:
        raise ChecksumError(f"{path}: truncated file")
    version, head_len = struct.unpack("<IQ", blob[len(MAGIC) : fixed])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch")
    header = json.loads(body[fixed : fixed + head_len].decode("utf-8"))
    arrays, off = {}, fixed + head_len
    for name, shape in header["tensors"]:
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape).copy()
        off += 4 * n
    if off != len(body):
        raise ChecksumError(f"{path}: tensor table does not cover the data section")
    return header, arrays


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> tuple[PairClassifier, dict]:
    """Rebuild the model stored at ``path``; returns ``(model, meta)`` in eval mode.

    With ``expected`` set, a differing stored configuration raises
    :class:`ConfigMismatchError` listing both values of every differing field.
    """
    header, arrays = read_checkpoint(path)
    cfg = model_config_from_dict(header["model_config"])
    if expected is not None and cfg != expected:
        diff = "; ".join(config_diff(cfg, expected))
        raise ConfigMismatchError(f"{path}: checkpoint config vs run config: {diff}")
    model = PairClassifier(cfg)
    state = model.state_dict()
    if set(state) != set(arrays):
        raise ConfigMismatchError(f"{path}: parameter names do not match the configured model")
    model.load_state_dict({k: torch.from_numpy(v).to(state[k].dtype) for k, v in arrays.items()})
    model.eval()
    return model, header["meta"]


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    k: int = 3
    how: str = "mean"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("eval.k must be at least 1")
        if self.how not in AGGREGATORS:
            raise ConfigError(f"eval.how must be one of {AGGREGATORS}")


@dataclass(frozen=True)
class RunSection:
    seed: int = 0  # synthesis, fold split and initialisation
    data_dir: str = ""  # dataset root holding manifest.csv; empty = from the command line
    encoder_preset: str = "toy"

    def __post_init__(self):
        if self.encoder_preset not in NAMED_CONFIGS:
            raise ConfigError(f"run.encoder_preset must be one of {sorted(NAMED_CONFIGS)}")


# keys owned by another section, so not settable where they would conflict
_MODEL_DERIVED = ("kind", "encoder", "no_dca", "no_dt")
_TRAIN_DERIVED = ("seed",)


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = RunSection()
    synth: SynthConfig = SynthConfig()
    encoder: EncoderConfig = EncoderConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()

    def __post_init__(self):
        object.__setattr__(self, "train", replace(self.train, seed=self.run.seed))
        object.__setattr__(
            self,
            "model",
            replace(
                self.model,
                kind=self.train.model_kind,
                encoder=self.encoder,
                no_dca=self.train.no_dca,
                no_dt=self.train.no_dt,
            ),
        )

    @property
    def seed(self) -> int:
        return self.run.seed

    def model_config(self) -> ModelConfig:
        return self.model

    def override(self, seed: int | None = None, model: str | None = None, task: str | None = None,
                 k: int | None = None, **train_kw) -> "RunConfig":
        """Apply command-line overrides."""
        run = self.run if seed is None else replace(self.run, seed=seed)
        tkw = dict(train_kw)
        if model is not None:
            tkw["model_kind"] = model
        if task is not None:
            tkw["task"] = task
        ev = self.eval if k is None else replace(self.eval, k=k)
        return RunConfig(run, self.synth, self.encoder, self.model, replace(self.train, **tkw), ev)

    def to_text(self) -> str:
        lines = ["# resolved configuration; every key is explicit"]
        for section, obj, skip in self._sections():
            for f in fields(obj):
                if f.name not in skip:
                    lines.append(f"{section}.{f.name}={_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def _sections(self):
        return (
            ("run", self.run, ()),
            ("synth", self.synth, ()),
            ("encoder", self.encoder, ()),
            ("model", self.model, _MODEL_DERIVED),
            ("train", self.train, _TRAIN_DERIVED),
            ("eval", self.eval, ()),
        )


_SECTION_TYPES = {
    "run": (RunSection, ()),
    "synth": (SynthConfig, ()),
    "encoder": (EncoderConfig, ()),
    "model": (ModelConfig, _MODEL_DERIVED),
    "train": (TrainConfig, _TRAIN_DERIVED),
    "eval": (EvalConfig, ()),
}


def _format(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    return str(v)


def _coerce(hint: Any, text: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if text.lower() == "none" and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _coerce(inner, text)
    if origin is tuple:
        items = [s.strip() for s in text.split(",") if s.strip()]
        elem = args[0] if args else str
        return tuple(_coerce(elem, s) for s in items)
    if hint is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    return text


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``section.key=value`` lines; ``#`` starts a comment line.

    Unknown sections or keys, duplicates and malformed values raise
    :class:`ConfigError` with the line number.
    """
    values: dict[str, dict[str, Any]] = {s: {} for s in _SECTION_TYPES}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected section.key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in _SECTION_TYPES or not name:
            raise ConfigError(f"{source}:{lineno}: unknown section in key {key!r}")
        cls, skip = _SECTION_TYPES[section]
        hints = typing.get_type_hints(cls)
        if name not in hints or name in skip:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if name in values[section]:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[section][name] = _coerce(hints[name], val)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {e}") from None
    try:
        run = RunSection(**values["run"])
        enc_base = named_config(run.encoder_preset)
        return RunConfig(
            run=run,
            synth=SynthConfig(**values["synth"]),
            encoder=replace(enc_base, **values["encoder"]),
            model=ModelConfig(**values["model"]),
            train=TrainConfig(**values["train"]),
            eval=EvalConfig(**values["eval"]),
        )
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{source}: {e}") from None


def load_run_config(path: str | Path) -> RunConfig:
    return parse_run_config(Path(path).read_text(encoding="utf-8"), str(path))


def write_resolved(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.to_text(), encoding="utf-8")
    return path
