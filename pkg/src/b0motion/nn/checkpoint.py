"""Network checkpoints: a JSON manifest plus one raw little-endian f32 file per tensor.

Layout::

    ckpt/
      manifest.json
      tensors/000_enc0.conv1.weight.f32
      ...
      optim/m_000.f32, optim/v_000.f32   (only when optimizer state exists)
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .unet import UNetConfig, UNetParams, config_dict

FORMAT = "b0motion-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_f32(path: Path, arr: np.ndarray) -> str:
    raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    path.write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def _read_f32(path: Path, shape, sha: str | None) -> np.ndarray:
    if not path.exists():
        raise CheckpointError(f"missing payload {path.name}")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise CheckpointError(f"{path.name}: expected {expected} bytes, found {len(raw)}")
    if sha is not None and hashlib.sha256(raw).hexdigest() != sha:
        raise CheckpointError(f"{path.name}: checksum mismatch")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def save_checkpoint(params: UNetParams, directory, extra: dict | None = None) -> Path:
    """Write ``params`` (weights, Adam state, metadata) under ``directory``."""
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, t) in enumerate(params.weights.items()):
        fname = f"{i:03d}_{name}.f32"
        sha = _write_f32(directory / "tensors" / fname, t.data)
        entries.append({"name": name, "shape": list(t.shape), "file": f"tensors/{fname}", "sha256": sha})
    optim = None
    state = params.optimizer_state
    if state:
        (directory / "optim").mkdir(exist_ok=True)
        moments = {}
        for kind in ("m", "v"):
            for idx, arr in sorted(state[kind].items()):
                fname = f"optim/{kind}_{int(idx):03d}.f32"
                moments[fname] = _write_f32(directory / fname, arr)
        optim = {"step": int(state["step"]), "files": moments}
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "dtype": "f32le",
        "config": config_dict(params.config),
        "seed": params.seed,
        "metadata": params.metadata,
        "tensors": entries,
        "optimizer": optim,
    }
    if extra:
        manifest["extra"] = extra
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> UNetParams:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest in {directory}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} manifest")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    config = UNetConfig(**manifest["config"])
    expected = {}
    for name, kind, shape in config.layer_shapes():
        expected[f"{name}.weight"] = tuple(shape)
        expected[f"{name}.bias"] = (shape[0] if kind == "conv" else shape[1],)
    names = [e["name"] for e in manifest["tensors"]]
    if names != list(expected):
        raise CheckpointError("tensor list does not match the layer order implied by the config")
    weights = {}
    for e in manifest["tensors"]:
        shape = tuple(e["shape"])
        if shape != expected[e["name"]]:
            raise CheckpointError(f"{e['name']}: shape {shape} does not match config {expected[e['name']]}")
        data = _read_f32(directory / e["file"], shape, e.get("sha256"))
        weights[e["name"]] = Tensor(data, requires_grad=True)
    state: dict = {}
    optim = manifest.get("optimizer")
    if optim:
        shapes = [w.shape for w in weights.values()]
        state = {"step": int(optim["step"]), "m": {}, "v": {}}
        for fname, sha in optim["files"].items():
            kind, idx = Path(fname).stem.split("_")
            state[kind][int(idx)] = _read_f32(directory / fname, shapes[int(idx)], sha)
    return UNetParams(config, weights, int(manifest["seed"]), state, dict(manifest.get("metadata", {})))


def read_manifest(directory) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text())
