"""Declarative configuration for scenes and sampling runs.

Scene configs name layers by prompt and parametric mask; run configs pin
the schedule, sampler settings and denoiser. Both round-trip through JSON
and are the CLI/service input format. Analytic denoisers get their
per-token templates from the layer `template` entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .denoiser import ConditionToken, GaussianDenoiser, PointMassDenoiser
from .scene import LayerSpec, Mask, blob_mask, box_mask, full_mask
from .schedule import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    NoiseSchedule,
    build_schedule,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MaskConfig:
    kind: str  # box | blob | full
    params: dict = field(default_factory=dict)

    def build(self, hw, dtype=np.float32) -> Mask:
        p = self.params
        if self.kind == "full":
            return full_mask(hw, dtype=dtype)
        if self.kind == "box":
            return box_mask(hw, p["x0"], p["y0"], p["w"], p["h"], dtype=dtype)
        if self.kind == "blob":
            scale = p.get("sx"), p.get("sy")
            if scale[0] is None:
                scale = p["s"]
            elif scale[1] is None:
                scale = scale[0]
            return blob_mask(
                hw,
                (p["cx"], p["cy"]),
                scale,
                angle=p.get("angle", 0.0),
                edge=p.get("edge", 0.0),
                dtype=dtype,
            )
        raise ConfigError(f"unknown mask kind {self.kind!r}")


@dataclass(frozen=True)
class TemplateConfig:
    """Analytic-denoiser template for one prompt."""

    kind: str = "constant"  # constant | hgradient | vgradient | checker
    value: list[float] | float = 0.0
    lo: float = -1.0
    hi: float = 1.0
    size: int = 4

    def build(self, shape, dtype=np.float32) -> np.ndarray:
        c, h, w = shape
        if self.kind == "constant":
            vals = np.broadcast_to(
                np.asarray(self.value, dtype=dtype).reshape(-1, 1, 1), (c, h, w)
            ).copy()
            return vals if np.ndim(self.value) else np.full((c, h, w), self.value, dtype)
        if self.kind == "hgradient":
            ramp = np.linspace(self.lo, self.hi, w, dtype=dtype)
            return np.broadcast_to(ramp, (c, h, w)).copy()
        if self.kind == "vgradient":
            ramp = np.linspace(self.lo, self.hi, h, dtype=dtype)[:, None]
            return np.broadcast_to(ramp, (c, h, w)).copy()
        if self.kind == "checker":
            ys, xs = np.mgrid[0:h, 0:w]
            cells = ((ys // self.size + xs // self.size) % 2).astype(dtype)
            vals = self.lo + (self.hi - self.lo) * cells
            return np.broadcast_to(vals, (c, h, w)).copy()
        raise ConfigError(f"unknown template kind {self.kind!r}")


@dataclass(frozen=True)
class LayerConfig:
    mask: MaskConfig
    prompt: str
    movement: tuple[int, int] = (0, 0)
    offset: tuple[int, int] = (0, 0)
    template: TemplateConfig | None = None


@dataclass(frozen=True)
class SceneConfig:
    shape: tuple[int, int, int]  # (c, h, w)
    seed: int
    layers: tuple[LayerConfig, ...]
    global_prompt: str | None = None
    global_template: TemplateConfig | None = None

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("scene config needs at least one layer")
        if self.layers[-1].mask.kind != "full":
            raise ConfigError("last layer must use the full background mask")

    def tokens(self) -> list[ConditionToken]:
        """One token per layer; equal prompts share a token id."""
        ids: dict[str, int] = {}
        toks = []
        for lc in self.layers:
            if lc.prompt not in ids:
                ids[lc.prompt] = len(ids)
            toks.append(ConditionToken(id=ids[lc.prompt], label=lc.prompt))
        return toks

    def layer_specs(self, dtype=np.float32) -> list[LayerSpec]:
        c, h, w = self.shape
        toks = self.tokens()
        return [
            LayerSpec(
                mask=lc.mask.build((h, w), dtype=dtype),
                movement_range=tuple(lc.movement),
                condition=tok,
                offset=tuple(lc.offset),
            )
            for lc, tok in zip(self.layers, toks)
        ]


@dataclass(frozen=True)
class DenoiserConfig:
    kind: str = "pointmass"  # pointmass | gaussian | remote
    var: float = 1.0
    host: str = "127.0.0.1"
    port: int = 0
    timeout: float = 10.0
    guidance: float = 7.5


@dataclass(frozen=True)
class RunConfig:
    T: int = 50
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    N: int = 8
    tau: int = 13
    blend: str = "binary"
    step_kind: str = "ddim"
    guidance: float | None = None
    denoiser: DenoiserConfig = DenoiserConfig()
    anchor_weight: float = 1e4

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.T, self.beta_start, self.beta_end)


def build_denoiser(run: RunConfig, scene: SceneConfig | None = None, dtype=np.float32):
    """Instantiate the configured denoiser, registering scene templates."""
    dc = run.denoiser
    if dc.kind == "pointmass":
        d = PointMassDenoiser(guidance=dc.guidance)
    elif dc.kind == "gaussian":
        d = GaussianDenoiser(var=dc.var, guidance=dc.guidance)
    elif dc.kind == "remote":
        from .bridge import RemoteDenoiser

        return RemoteDenoiser(dc.host, dc.port, dc.timeout, guidance=dc.guidance)
    else:
        raise ConfigError(f"unknown denoiser kind {dc.kind!r}")
    if scene is not None:
        toks = scene.tokens()
        for lc, tok in zip(scene.layers, toks):
            if lc.template is not None:
                d.register(tok, lc.template.build(scene.shape, dtype=dtype))
        if scene.global_template is not None and scene.global_prompt is not None:
            d.register(
                ConditionToken.derived(scene.global_prompt),
                scene.global_template.build(scene.shape, dtype=dtype),
            )
    return d


# --- JSON round-trip --------------------------------------------------------

def scene_config_to_dict(sc: SceneConfig) -> dict:
    d = asdict(sc)
    d["shape"] = list(sc.shape)
    d["layers"] = []
    for lc in sc.layers:
        ld = {
            "mask": {"kind": lc.mask.kind, "params": dict(lc.mask.params)},
            "prompt": lc.prompt,
            "movement": list(lc.movement),
            "offset": list(lc.offset),
        }
        if lc.template is not None:
            ld["template"] = asdict(lc.template)
        d["layers"].append(ld)
    if sc.global_template is not None:
        d["global_template"] = asdict(sc.global_template)
    return d


def _template_from(d: dict | None) -> TemplateConfig | None:
    if d is None:
        return None
    return TemplateConfig(**d)


def scene_config_from_dict(d: dict) -> SceneConfig:
    try:
        layers = tuple(
            LayerConfig(
                mask=MaskConfig(
                    kind=ld["mask"]["kind"], params=ld["mask"].get("params", {})
                ),
                prompt=ld["prompt"],
                movement=tuple(ld.get("movement", (0, 0))),
                offset=tuple(ld.get("offset", (0, 0))),
                template=_template_from(ld.get("template")),
            )
            for ld in d["layers"]
        )
        return SceneConfig(
            shape=tuple(d["shape"]),
            seed=int(d["seed"]),
            layers=layers,
            global_prompt=d.get("global_prompt"),
            global_template=_template_from(d.get("global_template")),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed scene config: {exc}") from exc


def run_config_to_dict(rc: RunConfig) -> dict:
    d = asdict(rc)
    return d


def run_config_from_dict(d: dict) -> RunConfig:
    try:
        dc = DenoiserConfig(**d.get("denoiser", {}))
        kwargs = {k: v for k, v in d.items() if k != "denoiser"}
        return RunConfig(denoiser=dc, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"malformed run config: {exc}") from exc
