"""File-backed scene persistence.

One JSON document per scene under ``<root>/scenes/`` plus an index file.
A record stores the original optimized checkpoint and the ordered edit
history; the current state is always reproduced by replaying the history,
so the two can never drift apart.
"""

from __future__ import annotations

import json
import uuid
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .config import RunConfig, SceneConfig, run_config_from_dict, run_config_to_dict, \
    scene_config_from_dict, scene_config_to_dict
from .sampler import SceneCheckpoint
from .scene import EditOp, apply_edit
from .serialize import (
    checkpoint_from_dict,
    checkpoint_to_dict,
    decode_grid,
    dumps,
    encode_grid,
    layer_from_dict,
    layer_to_dict,
)


class StoreError(RuntimeError):
    pass


class SceneNotFound(StoreError):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def edit_to_dict(op: EditOp) -> dict:
    d = op.to_dict()
    if op.op == "import":
        if op.imported is None:
            raise StoreError("import edit without a layer payload")
        d["layer_payload"] = layer_to_dict(op.imported)
    return d


def edit_from_dict(d: dict, shape) -> EditOp:
    imported = None
    if d.get("op") == "import" and "layer_payload" in d:
        imported = layer_from_dict(d["layer_payload"], shape)
    return EditOp.from_dict(d, imported=imported)


def replay_edits(cp: SceneCheckpoint, edits: list[dict]):
    """Apply serialized edits over a checkpoint.

    Returns (checkpoint, origins, restyles): ``origins[k]`` is the index of
    layer k in the original scene (None for imported layers) and
    ``restyles`` maps original indices to their latest restyle token.
    """
    scene = cp.scene
    origins: list[int | None] = list(range(scene.K))
    restyles: dict[int, dict] = {}
    for ed in edits:
        op = edit_from_dict(ed, scene.shape)
        scene = apply_edit(scene, op)
        if op.op == "clone":
            origins.insert(op.layer, origins[op.layer])
        elif op.op == "delete":
            origins.pop(op.layer)
        elif op.op == "reorder":
            origins = [origins[i] for i in op.order] + [origins[-1]]
        elif op.op == "import":
            origins.insert(op.position, None)
        elif op.op == "restyle":
            src = origins[op.layer]
            if src is not None:
                restyles[src] = {"id": op.token.id, "label": op.token.label}
    return replace(cp, scene=scene), origins, restyles


@dataclass
class SceneRecord:
    id: str
    scene_config: SceneConfig
    run_config: RunConfig
    base_checkpoint: SceneCheckpoint | None = None
    edits: list[dict] = field(default_factory=list)
    anchor: dict | None = None  # {"image": b64, "layout": [...], "weight": w}
    created: str = field(default_factory=_now)
    updated: str = field(default_factory=_now)

    def current(self):
        """(checkpoint, origins, restyles) after replaying the history."""
        if self.base_checkpoint is None:
            raise StoreError(f"scene {self.id} is not optimized yet")
        return replay_edits(self.base_checkpoint, self.edits)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "created": self.created,
            "updated": self.updated,
            "scene_config": scene_config_to_dict(self.scene_config),
            "run_config": run_config_to_dict(self.run_config),
            "base_checkpoint": (
                None if self.base_checkpoint is None
                else checkpoint_to_dict(self.base_checkpoint)
            ),
            "edits": self.edits,
            "anchor": self.anchor,
        }

    @staticmethod
    def from_dict(d: dict) -> "SceneRecord":
        base = d.get("base_checkpoint")
        return SceneRecord(
            id=d["id"],
            scene_config=scene_config_from_dict(d["scene_config"]),
            run_config=run_config_from_dict(d["run_config"]),
            base_checkpoint=None if base is None else checkpoint_from_dict(base),
            edits=list(d.get("edits", [])),
            anchor=d.get("anchor"),
            created=d.get("created", _now()),
            updated=d.get("updated", _now()),
        )

    def anchor_image(self) -> np.ndarray | None:
        if self.anchor is None:
            return None
        c, h, w = self.scene_config.shape
        return decode_grid(self.anchor["image"], (c, h, w))

    def set_anchor(self, image: np.ndarray, layout, weight: float) -> None:
        self.anchor = {
            "image": encode_grid(image),
            "layout": [list(o) for o in layout],
            "weight": float(weight),
        }


class SceneStore:
    """Directory of scene records with an index file."""

    def __init__(self, root):
        self.root = Path(root)
        (self.root / "scenes").mkdir(parents=True, exist_ok=True)
        self._index_path = self.root / "index.json"
        if not self._index_path.exists():
            self._write_index({})

    def _write_index(self, index: dict) -> None:
        self._index_path.write_text(dumps(index))

    def _read_index(self) -> dict:
        return json.loads(self._index_path.read_text())

    def _path(self, scene_id: str) -> Path:
        return self.root / "scenes" / f"{scene_id}.json"

    def new_id(self) -> str:
        return uuid.uuid4().hex[:12]

    def save(self, record: SceneRecord) -> SceneRecord:
        record.updated = _now()
        self._path(record.id).write_text(dumps(record.to_dict()))
        index = self._read_index()
        index[record.id] = {
            "created": record.created,
            "updated": record.updated,
            "layers": len(record.scene_config.layers),
            "optimized": record.base_checkpoint is not None,
        }
        self._write_index(index)
        return record

    def get(self, scene_id: str) -> SceneRecord:
        path = self._path(scene_id)
        if not path.exists():
            raise SceneNotFound(scene_id)
        return SceneRecord.from_dict(json.loads(path.read_text()))

    def list_meta(self) -> dict:
        return self._read_index()

    def delete(self, scene_id: str) -> None:
        path = self._path(scene_id)
        if not path.exists():
            raise SceneNotFound(scene_id)
        path.unlink()
        index = self._read_index()
        index.pop(scene_id, None)
        self._write_index(index)
