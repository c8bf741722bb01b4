"""Run configuration, checkpoint files, metrics CSV and episode traces.

Checkpoint layout (a single JSON document)::

    {
      "format": "pregrasp-checkpoint",
      "format_version": 1,
      "meta": {...},                      # seed, episode, config digest, ...
      "optimizer_steps": {"actor": n, ...},
      "tensors": [{"name": ..., "shape": [...], "dtype": "<f8"}, ...],
      "payload": {"<name>": "<base64 of little-endian float64>", ...}
    }
"""
from __future__ import annotations

import base64
import csv
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .environment import EnvConfig, InvalidConfigError, PreGraspEnv
from .neuralnet import Network, OptimizerState, ShapeError
from .sac import (
    NET_NAMES,
    TRAINED_NETS,
    InvalidTrainerConfig,
    MetricsRow,
    NetworksBundle,
    TrainerConfig,
    TrainState,
    make_bundle,
)

FORMAT_NAME = "pregrasp-checkpoint"
FORMAT_VERSION = 1

METRICS_COLUMNS = ("episode", "reward_total", "reward_rd", "reward_rtheta", "reward_rtop",
                   "reward_pf", "success", "alpha", "lr", "wall_time_s")


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ConfigDigestError(CheckpointError):
    pass


class RunConfigError(ValueError):
    pass


# ------------------------------------------------------------------ #
# Run configuration
# ------------------------------------------------------------------ #
@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    output_dir: str = "runs/default"
    run_name: str = "default"
    deterministic: bool = True

    def to_dict(self) -> dict:
        return {
            "env": self.env.to_dict(),
            "trainer": self.trainer.to_dict(),
            "output": {"directory": self.output_dir, "run_name": self.run_name,
                       "deterministic": self.deterministic},
        }

    @classmethod
    def from_dict(cls, data: Any) -> "RunConfig":
        if not isinstance(data, dict):
            raise RunConfigError("config: top level must be a JSON object")
        unknown = sorted(set(data) - {"env", "trainer", "output"})
        if unknown:
            raise RunConfigError(f"{unknown[0]}: unknown section")
        for section in ("env", "trainer", "output"):
            if section in data and not isinstance(data[section], dict):
                raise RunConfigError(f"{section}: must be an object")
        try:
            env = EnvConfig.from_dict(data.get("env", {}))
            trainer = TrainerConfig.from_dict(data.get("trainer", {}))
        except (InvalidConfigError, InvalidTrainerConfig) as exc:
            raise RunConfigError(str(exc)) from None
        out = dict(data.get("output", {}))
        unknown = sorted(set(out) - {"directory", "run_name", "deterministic"})
        if unknown:
            raise RunConfigError(f"output.{unknown[0]}: unknown key")
        cfg = cls(env, trainer,
                  str(out.get("directory", "runs/default")),
                  str(out.get("run_name", "default")),
                  out.get("deterministic", True))
        if not isinstance(cfg.deterministic, bool):
            raise RunConfigError("output.deterministic: must be true or false")
        return cfg

    def digest(self) -> str:
        """Hash of everything that shapes training except the episode budget."""
        d = self.to_dict()
        d["trainer"].pop("episodes")
        d.pop("output")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise RunConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RunConfigError(f"config: invalid JSON ({exc})") from None
    return RunConfig.from_dict(data)


# ------------------------------------------------------------------ #
# Checkpoints
# ------------------------------------------------------------------ #
def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode(text: str, shape: Sequence[int], name: str) -> np.ndarray:
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (ValueError, UnicodeError):
        raise CorruptCheckpointError(f"tensor {name}: payload is not valid base64") from None
    count = int(np.prod(shape)) if len(shape) else 1
    if len(raw) != 8 * count:
        raise CorruptCheckpointError(f"tensor {name}: expected {8 * count} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def bundle_tensors(bundle: NetworksBundle) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    for name in NET_NAMES:
        net = getattr(bundle, name)
        for pname, p in zip(net.param_names(), net.params()):
            out[f"{name}.{pname}"] = p
        if net.input_scale is not None:
            out[f"{name}.input_scale"] = net.input_scale
    out["log_alpha"] = np.array([bundle.log_alpha])
    for oname, opt in bundle.optimizers.items():
        pnames = getattr(bundle, oname).param_names() if oname in TRAINED_NETS else ["value"]
        for pname, m, v in zip(pnames, opt.m, opt.v):
            out[f"opt.{oname}.m.{pname}"] = m
            out[f"opt.{oname}.v.{pname}"] = v
    return out


def save_checkpoint(bundle: NetworksBundle, meta: dict, path) -> None:
    tensors = bundle_tensors(bundle)
    doc = {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "meta": meta,
        "optimizer_steps": {k: v.step for k, v in bundle.optimizers.items()},
        "optimizer_hyper": {k: [v.beta1, v.beta2, v.eps] for k, v in bundle.optimizers.items()},
        "tensors": [{"name": k, "shape": list(v.shape), "dtype": "<f8"} for k, v in tensors.items()],
        "payload": {k: _encode(v) for k, v in tensors.items()},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc))
    os.replace(tmp, path)


def _read_document(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        raise CorruptCheckpointError(f"checkpoint {path} is truncated or not JSON") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise CorruptCheckpointError(f"{path} is not a {FORMAT_NAME} file")
    version = doc.get("format_version")
    if not isinstance(version, int):
        raise CorruptCheckpointError("checkpoint has no format_version")
    if version > FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is newer than supported version {FORMAT_VERSION}")
    if version < 1:
        raise CheckpointVersionError(f"unsupported checkpoint format version {version}")
    for key in ("meta", "tensors", "payload", "optimizer_steps"):
        if key not in doc:
            raise CorruptCheckpointError(f"checkpoint is missing '{key}'")
    return doc


def _bundle_template(meta: dict) -> NetworksBundle:
    """Empty bundle shaped after the run config stored in ``meta``."""
    cfg = RunConfig.from_dict(meta["run_config"])
    dims = meta.get("dims", {})
    obs_dim = int(dims.get("obs", PreGraspEnv.observation_dim))
    act_dim = int(dims.get("action", PreGraspEnv.action_dim))
    return make_bundle(obs_dim, act_dim, cfg.trainer.hidden_sizes, np.random.default_rng(0),
                       cfg.trainer.initial_alpha)


def load_checkpoint(path, template: Optional[NetworksBundle] = None) -> Tuple[NetworksBundle, dict]:
    """Read a checkpoint into ``template`` (or a bundle built from its own config)."""
    doc = _read_document(path)
    meta = doc["meta"]
    if template is None:
        if "run_config" not in meta:
            raise CorruptCheckpointError("checkpoint has no run_config to build networks from")
        try:
            template = _bundle_template(meta)
        except RunConfigError as exc:
            raise CorruptCheckpointError(f"stored run config is invalid: {exc}") from None
    bundle = template
    manifest = {t["name"]: t for t in doc["tensors"]}
    for name, net in bundle.networks().items():
        if f"{name}.input_scale" in manifest and net.input_scale is None:
            net.input_scale = np.ones(net.in_dim)
    expected = bundle_tensors(bundle)
    for name, dst in expected.items():
        if name not in manifest or name not in doc["payload"]:
            raise CorruptCheckpointError(f"tensor {name} missing from checkpoint")
        shape = tuple(manifest[name]["shape"])
        if shape != dst.shape:
            raise ShapeError(f"tensor {name}: checkpoint shape {shape} != configured shape {dst.shape}")
        dst[...] = _decode(doc["payload"][name], shape, name)
    extra = sorted(set(manifest) - set(expected))
    if extra:
        raise ShapeError(f"tensor {extra[0]}: not present in the configured networks")
    bundle.log_alpha = float(expected["log_alpha"][0])
    for k, step in doc["optimizer_steps"].items():
        if k in bundle.optimizers:
            bundle.optimizers[k].step = int(step)
    for k, (b1, b2, eps) in doc.get("optimizer_hyper", {}).items():
        if k in bundle.optimizers:
            opt = bundle.optimizers[k]
            opt.beta1, opt.beta2, opt.eps = b1, b2, eps
    return bundle, meta


def checkpoint_meta(cfg: RunConfig, state: TrainState, kind: str, dims: Tuple[int, int],
                    extra: Optional[dict] = None) -> dict:
    meta = {
        "kind": kind,
        "seed": cfg.trainer.seed,
        "episode": state.episode,
        "total_steps": state.total_steps,
        "config_digest": cfg.digest(),
        "run_config": cfg.to_dict(),
        "dims": {"obs": dims[0], "action": dims[1]},
        "best_score": [x if math.isfinite(x) else None for x in state.best_score],
        "rng_state": _jsonable(state.rng_state),
    }
    if extra:
        meta.update(extra)
    return meta


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def resume_state(path, cfg: RunConfig) -> TrainState:
    """Load a progress checkpoint for continuing ``cfg``; digests must agree."""
    bundle, meta = load_checkpoint(path)
    if meta.get("config_digest") != cfg.digest():
        raise ConfigDigestError("run config differs from the one the checkpoint was trained with "
                                "(only trainer.episodes and output may change on resume)")
    if "rng_state" not in meta:
        raise CorruptCheckpointError("checkpoint has no rng state; it cannot be resumed")
    best = tuple(-math.inf if x is None else x for x in meta.get("best_score", [None, None]))
    return TrainState(bundle, int(meta["episode"]), int(meta["total_steps"]), meta["rng_state"], best)


# ------------------------------------------------------------------ #
# Metrics and traces
# ------------------------------------------------------------------ #
def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics(rows: Iterable[MetricsRow], path, append: bool = False) -> None:
    """CSV with the fixed :data:`METRICS_COLUMNS` header."""
    path = Path(path)
    fresh = not (append and path.exists())
    with path.open("w" if fresh else "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(getattr(row, c)) for c in METRICS_COLUMNS])


def read_metrics(path) -> List[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


class MetricsWriter:
    """Append-as-you-go CSV writer so an interrupted run keeps its rows."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        if not (append and self.path.exists()):
            write_metrics([], self.path)

    def __call__(self, row: MetricsRow) -> None:
        write_metrics([row], self.path, append=True)


def trace_record(step: int, env: PreGraspEnv, action, obs, info) -> dict:
    terms = info["reward_terms"]
    return {
        "step": step,
        "gripper_pose": env.world.gripper_pose.as_array().tolist(),
        "target_pose": env.world.target_pose.as_array().tolist(),
        "d": float(obs[38]),
        "f_n": float(obs[39]),
        "action": np.asarray(action, float).tolist(),
        "reward": terms.as_dict(),
    }


def record_trace(policy, env_config: EnvConfig, seed: int) -> List[dict]:
    from .sac import episode_seed, run_episode

    env = PreGraspEnv(env_config)
    records: List[dict] = []

    def on_step(env_, action, obs, reward, info):
        records.append(trace_record(len(records), env_, action, obs, info))

    run_episode(policy, env, episode_seed(seed, 0), on_step)
    return records


def write_trace(trace: List[dict], path) -> None:
    Path(path).write_text(json.dumps(trace, indent=1))
