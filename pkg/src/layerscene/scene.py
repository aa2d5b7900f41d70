"""Layered scene representation.

A scene is a depth-ordered stack of layers (front to back); the last layer
is the background (all-ones mask, immovable). Each layer carries a mask, a
movement range, a condition token and a feature grid of shape
(channels, height, width). Offsets are (dx, dy) with +dx right and +dy
down; moving zero-fills vacated cells and discards values pushed past the
boundary.

Scenes are values: every edit returns a new Scene.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as kernels
from .denoiser import ConditionToken

BINARY_MASK_KINDS = ("box", "blob", "full")
MASK_KINDS = BINARY_MASK_KINDS + ("soft-blob", "free")


class SceneError(ValueError):
    """Structural violation of the layered-scene contract."""


class EditError(SceneError):
    pass


def move(g, offset):
    """Translate a grid or mask by (dx, dy); zero-fill, clip at borders."""
    dx, dy = int(offset[0]), int(offset[1])
    if isinstance(g, Mask):
        return Mask(values=kernels.shift2d(g.values, dx, dy), kind=g.kind)
    return kernels.shift2d(np.asarray(g), dx, dy)


@dataclass(frozen=True)
class Mask:
    """Single-channel (h, w) visibility weights in [0, 1].

    ``params`` keeps the parametric description (box extents, blob
    geometry) for serialization; bitmap-only masks have params=None.
    """

    values: np.ndarray
    kind: str = "free"
    params: dict | None = None

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 2:
            raise SceneError(f"mask must be 2-d, got shape {vals.shape}")
        if np.any(vals < 0) or np.any(vals > 1):
            raise SceneError("mask values must lie in [0, 1]")
        if self.kind not in MASK_KINDS:
            raise SceneError(f"unknown mask kind {self.kind!r}")
        if self.kind in BINARY_MASK_KINDS and not self._vals_binary(vals):
            raise SceneError(f"{self.kind} masks must be binary")
        object.__setattr__(self, "values", vals)

    @staticmethod
    def _vals_binary(vals) -> bool:
        return bool(np.all((vals == 0) | (vals == 1)))

    @property
    def is_binary(self) -> bool:
        return self._vals_binary(self.values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def full_mask(hw: tuple[int, int], dtype=np.float32) -> Mask:
    """All-ones background mask."""
    return Mask(values=np.ones(hw, dtype=dtype), kind="full", params={})


def box_mask(
    hw: tuple[int, int], x0: int, y0: int, box_w: int, box_h: int, dtype=np.float32
) -> Mask:
    """Axis-aligned binary box with top-left corner (x0, y0)."""
    h, w = hw
    if box_w <= 0 or box_h <= 0:
        raise SceneError("box extents must be positive")
    vals = np.zeros((h, w), dtype=dtype)
    vals[max(y0, 0) : max(y0 + box_h, 0), max(x0, 0) : max(x0 + box_w, 0)] = 1.0
    return Mask(
        values=vals,
        kind="box",
        params={"x0": int(x0), "y0": int(y0), "w": int(box_w), "h": int(box_h)},
    )


def blob_mask(
    hw: tuple[int, int],
    centroid: tuple[float, float],
    scale,
    angle: float = 0.0,
    edge: float = 0.0,
    dtype=np.float32,
) -> Mask:
    """Elliptical blob mask.

    ``centroid`` is (cx, cy) in pixels, ``scale`` the semi-axes in pixels
    (a scalar gives a circle), ``angle`` the rotation in radians, and
    ``edge`` the softness: alpha = sigmoid((1 - r)/edge) with r the
    normalized elliptical radius, so edge=0 hard-thresholds at r=1.
    """
    h, w = hw
    sx, sy = (scale, scale) if np.isscalar(scale) else scale
    if sx <= 0 or sy <= 0:
        raise SceneError(f"degenerate blob scale ({sx}, {sy})")
    if edge < 0:
        raise SceneError("edge softness must be >= 0")
    cx, cy = centroid
    ys, xs = np.mgrid[0:h, 0:w]
    rx = (xs - cx) * math.cos(angle) + (ys - cy) * math.sin(angle)
    ry = -(xs - cx) * math.sin(angle) + (ys - cy) * math.cos(angle)
    r = np.sqrt((rx / sx) ** 2 + (ry / sy) ** 2)
    if edge == 0.0:
        vals = (r <= 1.0).astype(dtype)
        kind = "blob"
    else:
        with np.errstate(over="ignore"):
            vals = (1.0 / (1.0 + np.exp(-(1.0 - r) / edge))).astype(dtype)
        kind = "soft-blob"
    return Mask(
        values=vals,
        kind=kind,
        params={
            "cx": float(cx),
            "cy": float(cy),
            "sx": float(sx),
            "sy": float(sy),
            "angle": float(angle),
            "edge": float(edge),
        },
    )


@dataclass(frozen=True)
class Layer:
    mask: Mask
    movement_range: tuple[int, int] = (0, 0)
    offset: tuple[int, int] = (0, 0)
    condition: ConditionToken = ConditionToken(0)
    feature: np.ndarray | None = None

    def __post_init__(self):
        mu, nu = self.movement_range
        if mu < 0 or nu < 0:
            raise SceneError("movement range must be nonnegative")
        dx, dy = self.offset
        if abs(dx) > mu or abs(dy) > nu:
            raise SceneError(
                f"offset {self.offset} outside movement range (+-{mu}, +-{nu})"
            )

    def with_feature(self, feature: np.ndarray) -> "Layer":
        return replace(self, feature=feature)


@dataclass(frozen=True)
class LayerSpec:
    """Declarative layer description used to initialize scenes."""

    mask: Mask
    movement_range: tuple[int, int] = (0, 0)
    condition: ConditionToken = ConditionToken(0)
    offset: tuple[int, int] = (0, 0)


@dataclass(frozen=True)
class Layout:
    """One offset per layer; the background offset is always (0, 0)."""

    offsets: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(
            self,
            "offsets",
            tuple((int(dx), int(dy)) for dx, dy in self.offsets),
        )

    def __len__(self) -> int:
        return len(self.offsets)


@dataclass(frozen=True)
class Scene:
    layers: tuple[Layer, ...]
    step: int
    rng_seed: int

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise SceneError("a scene needs at least one layer")
        shapes = {l.feature.shape for l in layers}
        if len(shapes) != 1:
            raise SceneError(f"feature grids disagree on shape: {sorted(shapes)}")
        c, h, w = shapes.pop()
        bg = layers[-1]
        if bg.mask.shape != (h, w) or not np.all(bg.mask.values == 1.0):
            raise SceneError("background layer must carry an all-ones mask")
        if bg.movement_range != (0, 0) or bg.offset != (0, 0):
            raise SceneError("background layer must be immovable")
        for l in layers:
            if l.mask.shape != (h, w):
                raise SceneError("mask shape must match the canvas")

    @property
    def K(self) -> int:
        return len(self.layers)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.layers[0].feature.shape

    @property
    def tokens(self) -> list[ConditionToken]:
        return [l.condition for l in self.layers]

    def canonical_layout(self) -> Layout:
        return Layout(offsets=tuple(l.offset for l in self.layers))

    def validate_layout(self, layout: Layout) -> Layout:
        if len(layout) != self.K:
            raise SceneError(f"layout has {len(layout)} offsets, scene has {self.K}")
        for l, (dx, dy) in zip(self.layers, layout.offsets):
            mu, nu = l.movement_range
            if abs(dx) > mu or abs(dy) > nu:
                raise SceneError(
                    f"offset ({dx}, {dy}) outside movement range (+-{mu}, +-{nu})"
                )
        if layout.offsets[-1] != (0, 0):
            raise SceneError("background offset must stay (0, 0)")
        return layout

    def with_features(self, features, step: int) -> "Scene":
        layers = tuple(
            l.with_feature(f) for l, f in zip(self.layers, features)
        )
        return replace(self, layers=layers, step=step)


@dataclass(frozen=True)
class View:
    """A rendered composite at one layout and one noise level."""

    values: np.ndarray
    layout: Layout
    step: int
    blend: str


def layer_rng(seed: int, layer_index: int) -> np.random.Generator:
    """Deterministic per-layer noise substream."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(layer_index,)))
    )


def init_scene(
    specs: list[LayerSpec],
    T: int,
    shape: tuple[int, int, int],
    seed: int,
    dtype=np.float32,
) -> Scene:
    """Fill every layer with i.i.d. standard normal noise at step T."""
    c, h, w = shape
    layers = []
    for k, spec in enumerate(specs):
        feature = layer_rng(seed, k).standard_normal((c, h, w), dtype=dtype)
        layers.append(
            Layer(
                mask=spec.mask,
                movement_range=spec.movement_range,
                offset=spec.offset,
                condition=spec.condition,
                feature=feature,
            )
        )
    return Scene(layers=tuple(layers), step=int(T), rng_seed=int(seed))


def compute_alpha(scene: Scene, layout: Layout, blend: str = "binary") -> np.ndarray:
    """Per-layer visibility maps under a layout, as a (K, h, w) stack.

    binary: alpha_k = move(m_k) * prod_{j<k} (1 - move(m_j))
    soft:   alpha_k = move(m_k) * prod_{j<k} sqrt(1 - move(m_j)^2)
    """
    scene.validate_layout(layout)
    if blend not in ("binary", "soft"):
        raise SceneError(f"unknown blend mode {blend!r}")
    if blend == "binary":
        for l in scene.layers:
            if not l.mask.is_binary:
                raise SceneError("binary blending requires binary masks")
    moved = np.stack(
        [
            kernels.shift2d(l.mask.values, dx, dy)
            for l, (dx, dy) in zip(scene.layers, layout.offsets)
        ]
    )
    if blend == "binary":
        return kernels.alpha_chain_binary(moved)
    return kernels.alpha_chain_soft(moved)


def render(scene: Scene, layout: Layout, blend: str = "binary") -> View:
    """Composite the layer features under a layout: v = sum_k alpha_k * f_k."""
    values, _ = render_with_alphas(scene, layout, blend)
    return View(values=values, layout=layout, step=scene.step, blend=blend)


def render_with_alphas(scene: Scene, layout: Layout, blend: str = "binary"):
    alphas = compute_alpha(scene, layout, blend)
    moved = np.stack(
        [
            kernels.shift2d(l.feature, dx, dy)
            for l, (dx, dy) in zip(scene.layers, layout.offsets)
        ]
    )
    return kernels.composite(alphas, moved), alphas


def sample_layouts(scene: Scene, N: int, rng: np.random.Generator) -> list[Layout]:
    """Draw N layouts, each offset uniform over the layer's signed range."""
    if N < 1:
        raise SceneError("need N >= 1 layouts")
    layouts = []
    for _ in range(N):
        offsets = []
        for l in scene.layers[:-1]:
            mu, nu = l.movement_range
            dx = int(rng.integers(-mu, mu + 1)) if mu else 0
            dy = int(rng.integers(-nu, nu + 1)) if nu else 0
            offsets.append((dx, dy))
        offsets.append((0, 0))
        layouts.append(Layout(offsets=tuple(offsets)))
    return layouts


# --- structural edits -------------------------------------------------------

@dataclass(frozen=True)
class EditOp:
    op: str
    layer: int | None = None
    offset: tuple[int, int] | None = None
    factor: float | None = None
    order: tuple[int, ...] | None = None
    token: ConditionToken | None = None
    imported: Layer | None = field(default=None, repr=False)
    position: int = 0

    def to_dict(self) -> dict:
        d: dict = {"op": self.op}
        if self.layer is not None:
            d["layer"] = self.layer
        if self.offset is not None:
            d["offset"] = list(self.offset)
        if self.factor is not None:
            d["factor"] = self.factor
        if self.order is not None:
            d["order"] = list(self.order)
        if self.token is not None:
            d["token"] = {"id": self.token.id, "label": self.token.label}
        if self.op == "import":
            d["position"] = self.position
        return d

    @staticmethod
    def from_dict(d: dict, imported: Layer | None = None) -> "EditOp":
        token = None
        if "token" in d:
            token = ConditionToken(id=int(d["token"]["id"]), label=d["token"].get("label", ""))
        return EditOp(
            op=d["op"],
            layer=d.get("layer"),
            offset=tuple(d["offset"]) if "offset" in d else None,
            factor=d.get("factor"),
            order=tuple(d["order"]) if "order" in d else None,
            token=token,
            imported=imported,
            position=d.get("position", 0),
        )


def move_op(layer: int, offset) -> EditOp:
    return EditOp(op="move", layer=layer, offset=(int(offset[0]), int(offset[1])))


def resize_op(layer: int, factor: float) -> EditOp:
    return EditOp(op="resize", layer=layer, factor=float(factor))


def clone_op(layer: int, offset) -> EditOp:
    return EditOp(op="clone", layer=layer, offset=(int(offset[0]), int(offset[1])))


def delete_op(layer: int) -> EditOp:
    return EditOp(op="delete", layer=layer)


def reorder_op(order) -> EditOp:
    return EditOp(op="reorder", order=tuple(int(i) for i in order))


def restyle_op(layer: int, token: ConditionToken) -> EditOp:
    return EditOp(op="restyle", layer=layer, token=token)


def import_op(layer_payload: Layer, position: int = 0) -> EditOp:
    return EditOp(op="import", imported=layer_payload, position=position)


def _check_target(scene: Scene, k, allow_background: bool = False) -> int:
    if k is None or not 0 <= k < scene.K:
        raise EditError(f"no layer {k}")
    if not allow_background and k == scene.K - 1:
        raise EditError("cannot edit the background layer")
    return int(k)


def _resample_nearest(arr: np.ndarray, factor: float, center: tuple[float, float],
                      fill_original: bool) -> np.ndarray:
    """Zoom about ``center`` by ``factor`` with nearest-neighbor lookup.

    Out-of-source pixels keep their original value (features) or become 0
    (masks).
    """
    h, w = arr.shape[-2], arr.shape[-1]
    cy, cx = center
    ys, xs = np.mgrid[0:h, 0:w]
    src_y = np.rint(cy + (ys - cy) / factor).astype(int)
    src_x = np.rint(cx + (xs - cx) / factor).astype(int)
    valid = (src_y >= 0) & (src_y < h) & (src_x >= 0) & (src_x < w)
    out = arr.copy() if fill_original else np.zeros_like(arr)
    out[..., valid] = arr[..., src_y[valid], src_x[valid]]
    return out


def _mask_center(mask: Mask) -> tuple[float, float]:
    on = np.argwhere(mask.values > 0)
    if len(on) == 0:
        h, w = mask.shape
        return ((h - 1) / 2.0, (w - 1) / 2.0)
    (y0, x0), (y1, x1) = on.min(axis=0), on.max(axis=0)
    return ((y0 + y1) / 2.0, (x0 + x1) / 2.0)


def apply_edit(scene: Scene, edit: EditOp) -> Scene:
    """Apply one structural edit, returning a new scene."""
    layers = list(scene.layers)
    if edit.op == "move":
        k = _check_target(scene, edit.layer)
        layers[k] = replace(layers[k], offset=edit.offset)
    elif edit.op == "resize":
        k = _check_target(scene, edit.layer)
        if edit.factor is None or edit.factor <= 0:
            raise EditError("resize factor must be positive")
        l = layers[k]
        if edit.factor == 1.0:
            return scene
        center = _mask_center(l.mask)
        new_vals = _resample_nearest(l.mask.values, edit.factor, center, False)
        new_feat = _resample_nearest(l.feature, edit.factor, center, True)
        layers[k] = replace(l, mask=Mask(values=new_vals, kind="free"), feature=new_feat)
    elif edit.op == "clone":
        k = _check_target(scene, edit.layer)
        src = layers[k]
        mu, nu = src.movement_range
        dx, dy = edit.offset or (0, 0)
        if abs(dx) > mu or abs(dy) > nu:
            raise EditError("clone offset outside movement range")
        layers.insert(k, replace(src, offset=(dx, dy), feature=src.feature.copy()))
    elif edit.op == "delete":
        k = _check_target(scene, edit.layer)
        del layers[k]
    elif edit.op == "reorder":
        fg = list(range(scene.K - 1))
        if edit.order is None or sorted(edit.order) != fg:
            raise EditError(
                f"reorder must permute the {scene.K - 1} foreground layers"
            )
        layers = [layers[i] for i in edit.order] + [layers[-1]]
    elif edit.op == "restyle":
        k = _check_target(scene, edit.layer, allow_background=True)
        if edit.token is None:
            raise EditError("restyle needs a token")
        layers[k] = replace(layers[k], condition=edit.token)
    elif edit.op == "import":
        if edit.imported is None:
            raise EditError("import needs a layer payload")
        if edit.imported.feature.shape != scene.shape:
            raise EditError(
                f"imported layer shape {edit.imported.feature.shape} "
                f"incompatible with scene {scene.shape}"
            )
        pos = edit.position
        if not 0 <= pos <= scene.K - 1:
            raise EditError(f"import position {pos} out of range")
        layers.insert(pos, edit.imported)
    else:
        raise EditError(f"unknown edit op {edit.op!r}")
    return replace(scene, layers=tuple(layers))
