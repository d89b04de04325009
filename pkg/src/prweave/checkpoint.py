"""Directory checkpoints: a JSON manifest plus one raw ``<f8`` file per array.

Layout::

    manifest.json          names, shapes, dtype, sha256 per array, stage
                           history, step counters, RNG derivation
    arrays/<name>.bin      little-endian float64, C order

Saving the same state twice yields byte-identical directories.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from . import rng
from .optim import Adam
from .prw import ModelConfig, PRWModel
from .trainer import StageConfig, TrainState

FORMAT_VERSION = 1
DTYPE = "<f8"


class CheckpointError(IOError):
    pass


def _write_array(path: Path, arr: np.ndarray) -> str:
    raw = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
    path.write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def state_arrays(state: TrainState) -> Dict[str, np.ndarray]:
    arrays = {f"param.{n}": p.data for n, p in state.model.named_parameters().items()}
    if state.optimizer is not None:
        arrays.update(state.optimizer.state_arrays())
    return arrays


def save(directory, state: TrainState, stages: Sequence[StageConfig] = ()) -> Path:
    """Write ``state`` to ``directory`` (replacing any previous contents)."""
    directory = Path(directory)
    array_dir = directory / "arrays"
    try:
        array_dir.mkdir(parents=True, exist_ok=True)
        for old in array_dir.glob("*.bin"):
            old.unlink()
        entries = []
        for name, arr in state_arrays(state).items():
            fname = f"{name}.bin"
            digest = _write_array(array_dir / fname, arr)
            entries.append({"name": name, "file": f"arrays/{fname}", "shape": list(arr.shape),
                            "dtype": DTYPE, "sha256": digest})
        model = state.model
        manifest = {
            "version": FORMAT_VERSION,
            "mode": state.mode,
            "seed": state.seed,
            "step": state.step,
            "stage_step": state.stage_step,
            "model_config": asdict(model.config),
            "experts": [{"rank": e.rank, "lora_alpha": e.lora_alpha} for e in model.blocks[0].pool.experts],
            "trainable": [n for n, p in model.named_parameters().items() if p.requires_grad],
            "optimizer": None if state.optimizer is None else {
                "lr": state.optimizer.lr, "step_count": state.optimizer.step_count,
                "params": list(state.optimizer.params)},
            "completed_stages": [asdict(s) for s in state.completed],
            "stages": [asdict(s) for s in stages],
            "rng": rng.describe(),
            "arrays": entries,
        }
        tmp = directory / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        os.replace(tmp, directory / "manifest.json")
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {directory}: {exc}") from exc
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    return manifest


def load_arrays(directory, manifest: dict = None) -> Dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = read_manifest(directory) if manifest is None else manifest
    out = {}
    for e in manifest["arrays"]:
        try:
            raw = (directory / e["file"]).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"missing array file {e['file']}: {exc}") from exc
        if hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise CheckpointError(f"array {e['name']} fails its sha256 check")
        out[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).astype(np.float64)
    return out


def stages_from_manifest(manifest: dict) -> List[StageConfig]:
    return [StageConfig(**s) for s in manifest["stages"]]


def load(directory) -> TrainState:
    """Rebuild the model, optimizer and counters saved by :func:`save`."""
    manifest = read_manifest(directory)
    arrays = load_arrays(directory, manifest)
    seed = manifest["seed"]
    model = PRWModel(ModelConfig(**manifest["model_config"]), rng.generator(seed, "init", 0))
    for spec in manifest["experts"]:
        model.add_expert(spec["rank"], spec["lora_alpha"], np.random.default_rng(0))
    params = model.named_parameters()
    expected = {f"param.{n}" for n in params}
    found = {n for n in arrays if n.startswith("param.")}
    if expected != found:
        missing = sorted(expected - found)[:3]
        extra = sorted(found - expected)[:3]
        raise CheckpointError(f"parameter set mismatch; missing {missing}, unexpected {extra}")
    trainable = set(manifest["trainable"])
    for n, p in params.items():
        arr = arrays[f"param.{n}"]
        if arr.shape != p.shape:
            raise CheckpointError(f"{n}: shape {arr.shape} != model shape {p.shape}")
        p.data = np.array(arr)
        p.requires_grad = n in trainable
    state = TrainState(model=model, seed=seed,
                       completed=[StageConfig(**s) for s in manifest["completed_stages"]],
                       step=manifest["step"], stage_step=manifest["stage_step"], mode=manifest["mode"])
    opt = manifest["optimizer"]
    if opt is not None:
        state.optimizer = Adam({n: params[n] for n in opt["params"]}, lr=opt["lr"])
        state.optimizer.load_state_arrays(arrays, opt["step_count"])
    return state
