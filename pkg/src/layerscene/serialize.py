"""Checkpoint container, raw grid files, and 8-bit image output.

Checkpoints are versioned JSON documents; grids travel as base64-encoded
little-endian float32 in C order. Saving is byte-deterministic (sorted
keys, fixed separators), so identical runs produce identical files.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .denoiser import ConditionToken
from .sampler import SceneCheckpoint
from .scene import Layer, Mask, Scene
from .schedule import NoiseSchedule

CHECKPOINT_FORMAT = "layerscene-checkpoint"
CHECKPOINT_VERSION = 1

TONEMAP_SCALE = 127.5
TONEMAP_OFFSET = 127.5


class SerializationError(ValueError):
    pass


def encode_grid(arr: np.ndarray) -> str:
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()
    ).decode("ascii")


def decode_grid(data: str, shape) -> np.ndarray:
    raw = base64.b64decode(data)
    expect = int(np.prod(shape)) * 4
    if len(raw) != expect:
        raise SerializationError(
            f"grid payload holds {len(raw)} bytes, shape {tuple(shape)} needs {expect}"
        )
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def token_to_dict(tok: ConditionToken) -> dict:
    return {"id": tok.id, "label": tok.label}


def token_from_dict(d: dict) -> ConditionToken:
    return ConditionToken(id=int(d["id"]), label=d.get("label", ""))


def mask_to_dict(mask: Mask) -> dict:
    d: dict = {"kind": mask.kind, "bitmap": encode_grid(mask.values)}
    if mask.params is not None:
        d["params"] = mask.params
    return d


def mask_from_dict(d: dict, hw) -> Mask:
    return Mask(
        values=decode_grid(d["bitmap"], hw),
        kind=d["kind"],
        params=d.get("params"),
    )


def layer_to_dict(layer: Layer) -> dict:
    return {
        "mask": mask_to_dict(layer.mask),
        "movement_range": list(layer.movement_range),
        "offset": list(layer.offset),
        "token": token_to_dict(layer.condition),
        "feature": encode_grid(layer.feature),
    }


def layer_from_dict(d: dict, shape) -> Layer:
    c, h, w = shape
    return Layer(
        mask=mask_from_dict(d["mask"], (h, w)),
        movement_range=tuple(d["movement_range"]),
        offset=tuple(d["offset"]),
        condition=token_from_dict(d["token"]),
        feature=decode_grid(d["feature"], (c, h, w)),
    )


def scene_to_dict(scene: Scene) -> dict:
    c, h, w = scene.shape
    return {
        "shape": {"c": c, "h": h, "w": w},
        "step": scene.step,
        "rng_seed": scene.rng_seed,
        "layers": [layer_to_dict(l) for l in scene.layers],
    }


def scene_from_dict(d: dict) -> Scene:
    shape = (d["shape"]["c"], d["shape"]["h"], d["shape"]["w"])
    layers = tuple(layer_from_dict(ld, shape) for ld in d["layers"])
    return Scene(layers=layers, step=int(d["step"]), rng_seed=int(d["rng_seed"]))


def checkpoint_to_dict(cp: SceneCheckpoint) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "schedule": cp.schedule.to_dict(),
        "blend": cp.blend,
        "step_kind": cp.step_kind,
        "guidance": cp.guidance,
        "global_token": token_to_dict(cp.global_token),
        "scene": scene_to_dict(cp.scene),
    }


def checkpoint_from_dict(d: dict) -> SceneCheckpoint:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise SerializationError(f"not a checkpoint document: {d.get('format')!r}")
    if d.get("version") != CHECKPOINT_VERSION:
        raise SerializationError(f"unsupported checkpoint version {d.get('version')}")
    return SceneCheckpoint(
        scene=scene_from_dict(d["scene"]),
        schedule=NoiseSchedule.from_dict(d["schedule"]),
        blend=d["blend"],
        step_kind=d["step_kind"],
        guidance=float(d["guidance"]),
        global_token=token_from_dict(d["global_token"]),
    )


def dumps(document: dict) -> str:
    return json.dumps(document, sort_keys=True, separators=(",", ":"))


def save_checkpoint(cp: SceneCheckpoint, path) -> None:
    Path(path).write_text(dumps(checkpoint_to_dict(cp)))


def load_checkpoint(path) -> SceneCheckpoint:
    return checkpoint_from_dict(json.loads(Path(path).read_text()))


def save_raw_grid(arr: np.ndarray, path) -> dict:
    """Write raw little-endian float32 bytes; returns the manifest entry."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    Path(path).write_bytes(arr.tobytes())
    return {"path": Path(path).name, "shape": list(arr.shape), "dtype": "<f4"}


def load_raw_grid(path, shape) -> np.ndarray:
    raw = Path(path).read_bytes()
    expect = int(np.prod(shape)) * 4
    if len(raw) != expect:
        raise SerializationError(f"raw grid file has {len(raw)} bytes, need {expect}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def tonemap_to_u8(
    arr: np.ndarray, scale: float = TONEMAP_SCALE, offset: float = TONEMAP_OFFSET
) -> np.ndarray:
    """Affine map from feature range to 8 bit: clip(round(scale*x + offset))."""
    mapped = np.rint(scale * np.asarray(arr, dtype=np.float64) + offset)
    return np.clip(mapped, 0, 255).astype(np.uint8)


def tonemap_from_u8(
    img: np.ndarray, scale: float = TONEMAP_SCALE, offset: float = TONEMAP_OFFSET
) -> np.ndarray:
    return ((np.asarray(img, dtype=np.float32) - offset) / scale).astype(np.float32)


def save_png(
    arr: np.ndarray, path, scale: float = TONEMAP_SCALE, offset: float = TONEMAP_OFFSET
) -> dict:
    """Tonemap a (c, h, w) grid to PNG; returns the manifest entry."""
    u8 = tonemap_to_u8(arr, scale, offset)
    if u8.ndim != 3 or u8.shape[0] not in (1, 3):
        raise SerializationError(f"PNG output needs 1 or 3 channels, got {u8.shape}")
    if u8.shape[0] == 1:
        img = Image.fromarray(u8[0], mode="L")
    else:
        img = Image.fromarray(np.moveaxis(u8, 0, 2), mode="RGB")
    img.save(path, format="PNG")
    return {
        "path": Path(path).name,
        "tonemap": {"scale": scale, "offset": offset},
        "shape": list(arr.shape),
    }


def load_png(path, scale: float = TONEMAP_SCALE, offset: float = TONEMAP_OFFSET) -> np.ndarray:
    img = Image.open(path)
    u8 = np.asarray(img)
    if u8.ndim == 2:
        u8 = u8[None]
    else:
        u8 = np.moveaxis(u8, 2, 0)
    return tonemap_from_u8(u8, scale, offset)
