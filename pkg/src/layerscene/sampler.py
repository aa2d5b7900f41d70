"""The joint multi-layout denoising loop.

Each optimization step renders N randomly laid-out views of the scene,
denoises every view one reverse step, and writes the results back into the
layer features through a closed-form least-squares update:

    f_k = sum_n w_n * move(alpha_kn * v_n, -o_kn)
          / sum_n w_n * move(alpha_kn, -o_kn)

Pixels of a layer visible in no view keep their previous value. An anchor
trajectory (noised copies of a reference image at a fixed layout) can be
appended as an extra, heavily weighted view to pin the scene to existing
content.

Randomness is derived from the scene seed through fixed substream domains,
so a (seed, config) pair reproduces checkpoints and renders bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as kernels
from .denoiser import NULL_TOKEN, AnalyticDenoiser, ConditionToken, cfg, lcd_compose
from .scene import (
    Layout,
    Scene,
    LayerSpec,
    SceneError,
    compute_alpha,
    init_scene,
    render_with_alphas,
    sample_layouts,
)
from .schedule import NoiseSchedule, ddim_step, ddpm_step, forward_noise

DEFAULT_VIEWS = 8
DEFAULT_ANCHOR_WEIGHT = 1e4

# substream domains under the scene seed
_D_LAYOUTS = 1
_D_STEP_NOISE = 2
_D_RENDER_NOISE = 4


class SamplerError(RuntimeError):
    pass


def stream(seed: int, domain: int, t: int) -> np.random.Generator:
    """Deterministic generator for one (domain, step) substream."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=(int(seed), domain, int(t))))
    )


@dataclass(frozen=True)
class AnchorTrajectory:
    """Noised copies of a reference image at a fixed layout, one per step."""

    base: np.ndarray
    layout: Layout
    weight: float
    noised: tuple[np.ndarray, ...]
    eps: tuple[np.ndarray, ...] = field(repr=False, default=())

    def __post_init__(self):
        if self.weight <= 0:
            raise SamplerError("anchor weight must be positive")

    def noised_at(self, t: int) -> np.ndarray:
        if not 1 <= t <= len(self.noised):
            raise SamplerError(f"anchor has no level t={t}")
        return self.noised[t - 1]


def build_anchor(
    image: np.ndarray,
    layout: Layout,
    w: float,
    s: NoiseSchedule,
    rng: np.random.Generator,
) -> AnchorTrajectory:
    """Forward-noise a reference image to every level with recorded draws."""
    image = np.asarray(image)
    noised, eps = [], []
    for t in range(1, s.T + 1):
        e = rng.standard_normal(image.shape, dtype=image.dtype)
        noised.append(forward_noise(image, t, e, s))
        eps.append(e)
    return AnchorTrajectory(
        base=image, layout=layout, weight=float(w),
        noised=tuple(noised), eps=tuple(eps),
    )


@dataclass(frozen=True)
class SceneCheckpoint:
    """Scene state frozen at step tau, plus everything rendering needs."""

    scene: Scene
    schedule: NoiseSchedule
    blend: str
    step_kind: str
    guidance: float
    global_token: ConditionToken

    @property
    def tau(self) -> int:
        return self.scene.step


def solve_feature_update(
    views_hat,
    layouts,
    alphas,
    weights,
    prev_features,
) -> list[np.ndarray]:
    """Closed-form minimizer of the weighted render-matching objective.

    views_hat[n] is a (c, h, w) denoised view, layouts[n] its layout,
    alphas[n] the (K, h, w) visibility stack used to render it, and
    weights[n] > 0 its weight. Unconstrained pixels (zero denominator)
    retain prev_features.
    """
    n_views = len(views_hat)
    if not (len(layouts) == len(alphas) == len(weights) == n_views):
        raise SamplerError("views, layouts, alphas and weights must align")
    if any(w <= 0 for w in weights):
        raise SamplerError("weights must be positive")
    K = len(prev_features)
    out = []
    for k in range(K):
        prev = np.asarray(prev_features[k])
        num = np.zeros_like(prev)
        den = np.zeros(prev.shape[-2:], dtype=prev.dtype)
        for n in range(n_views):
            dx, dy = layouts[n].offsets[k]
            kernels.scatter_accumulate(
                num, den, alphas[n][k], views_hat[n], weights[n], dx, dy
            )
        seen = den > 0
        safe = np.where(seen, den, den.dtype.type(1.0))
        out.append(np.where(seen, num / safe, prev))
    return out


def scene_diffusion_step(
    scene: Scene,
    t: int,
    N: int,
    d,
    s: NoiseSchedule,
    rng: np.random.Generator,
    *,
    blend: str = "binary",
    guidance: float | None = None,
    step_kind: str = "ddim",
    anchor: AnchorTrajectory | None = None,
    z: np.ndarray | None = None,
) -> Scene:
    """One joint update from step t to t-1. Fails atomically."""
    if scene.step != t:
        raise SamplerError(f"scene is at step {scene.step}, not {t}")
    if t < 1:
        raise SamplerError("cannot step below t=1")
    if step_kind not in ("ddim", "ddpm"):
        raise SamplerError(f"unknown step kind {step_kind!r}")
    g = d.guidance if guidance is None else float(guidance)

    layouts = sample_layouts(scene, N, rng)
    views, alpha_stacks, weights = [], [], []
    for layout in layouts:
        v, a = render_with_alphas(scene, layout, blend)
        views.append(v)
        alpha_stacks.append(a)
        weights.append(1.0)
    if anchor is not None:
        scene.validate_layout(anchor.layout)
        views.append(anchor.noised_at(t).astype(views[0].dtype, copy=False))
        alpha_stacks.append(compute_alpha(scene, anchor.layout, blend))
        layouts = layouts + [anchor.layout]
        weights.append(anchor.weight)

    if step_kind == "ddpm":
        if t == 1:
            z = np.zeros(scene.shape, dtype=views[0].dtype)
        elif z is None:
            z = rng.standard_normal(scene.shape, dtype=views[0].dtype)

    tokens = scene.tokens
    stepped = []
    for v, a in zip(views, alpha_stacks):
        eps = lcd_compose(d, v, t, a, tokens, g, s, blend)
        if step_kind == "ddim":
            stepped.append(ddim_step(v, eps, t, t - 1, s))
        else:
            stepped.append(ddpm_step(v, eps, t, z, s))

    feats = solve_feature_update(
        stepped, layouts, alpha_stacks, weights,
        [l.feature for l in scene.layers],
    )
    return scene.with_features(feats, step=t - 1)


def default_global_label(scene: Scene) -> str:
    """Concatenated local prompt labels in depth order."""
    return ", ".join(l.condition.label for l in scene.layers)


def optimize_scene(
    scene: Scene,
    d,
    s: NoiseSchedule,
    N: int = DEFAULT_VIEWS,
    tau: int = 0,
    *,
    blend: str = "binary",
    guidance: float | None = None,
    step_kind: str = "ddim",
    anchor: AnchorTrajectory | None = None,
    global_label: str | None = None,
) -> SceneCheckpoint:
    """Run joint denoising from the scene's step down to tau and freeze."""
    if not 0 <= tau <= scene.step:
        raise SamplerError(f"tau={tau} outside 0..{scene.step}")
    g = d.guidance if guidance is None else float(guidance)
    for t in range(scene.step, tau, -1):
        rng = stream(scene.rng_seed, _D_LAYOUTS, t)
        z = None
        if step_kind == "ddpm" and t > 1:
            z = stream(scene.rng_seed, _D_STEP_NOISE, t).standard_normal(
                scene.shape, dtype=scene.layers[0].feature.dtype
            )
        scene = scene_diffusion_step(
            scene, t, N, d, s, rng,
            blend=blend, guidance=guidance, step_kind=step_kind,
            anchor=anchor, z=z,
        )
    label = default_global_label(scene) if global_label is None else global_label
    return SceneCheckpoint(
        scene=scene, schedule=s, blend=blend, step_kind=step_kind,
        guidance=g, global_token=ConditionToken.derived(label),
    )


def _auto_register_global(cp: SceneCheckpoint, layout: Layout, d, token: ConditionToken):
    """For analytic denoisers, derive the global-token template as the
    composite of the per-layer templates at the render layout."""
    scene = cp.scene
    alphas = compute_alpha(scene, layout, cp.blend)
    moved = np.stack(
        [
            kernels.shift2d(
                d.template_for(l.condition, like=l.feature), dx, dy
            )
            for l, (dx, dy) in zip(scene.layers, layout.offsets)
        ]
    )
    d.ensure_auto(token, kernels.composite(alphas, moved))


def render_final(
    cp: SceneCheckpoint,
    layout: Layout,
    d,
    s: NoiseSchedule | None = None,
    *,
    global_label: str | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Render the checkpoint at a layout, then run the remaining tau steps
    of plain (full-canvas) diffusion under the global token."""
    s = cp.schedule if s is None else s
    x, _ = render_with_alphas(cp.scene, layout, cp.blend)
    tau = cp.tau
    if tau == 0:
        return x
    token = (
        cp.global_token if global_label is None
        else ConditionToken.derived(global_label)
    )
    if isinstance(d, AnalyticDenoiser):
        _auto_register_global(cp, layout, d, token)
    g = cp.guidance
    for t in range(tau, 0, -1):
        eps = cfg(d.predict(x, t, token, s), d.predict(x, t, NULL_TOKEN, s), g)
        if cp.step_kind == "ddim":
            x = ddim_step(x, eps, t, t - 1, s)
        else:
            if t == 1:
                z = np.zeros_like(x)
            elif rng is not None:
                z = rng.standard_normal(x.shape, dtype=x.dtype)
            else:
                z = stream(cp.scene.rng_seed, _D_RENDER_NOISE, t).standard_normal(
                    x.shape, dtype=x.dtype
                )
            x = ddpm_step(x, eps, t, z, s)
    return x


def run_pipeline(
    specs: list[LayerSpec],
    *,
    shape: tuple[int, int, int],
    seed: int,
    d,
    s: NoiseSchedule,
    N: int = DEFAULT_VIEWS,
    tau: int = 0,
    blend: str = "binary",
    guidance: float | None = None,
    step_kind: str = "ddim",
    anchor: AnchorTrajectory | None = None,
    dtype=np.float32,
    global_label: str | None = None,
) -> SceneCheckpoint:
    """Initialize a scene from specs and optimize it to a checkpoint."""
    scene = init_scene(specs, s.T, shape, seed, dtype=dtype)
    return optimize_scene(
        scene, d, s, N, tau,
        blend=blend, guidance=guidance, step_kind=step_kind,
        anchor=anchor, global_label=global_label,
    )


def restyle_layer(
    specs: list[LayerSpec], k: int, new_token: ConditionToken, **pipeline_kwargs
) -> SceneCheckpoint:
    """Re-run the pipeline with identical initialization and one token swapped."""
    if not 0 <= k < len(specs):
        raise SceneError(f"no layer {k}")
    specs = list(specs)
    specs[k] = replace(specs[k], condition=new_token)
    return run_pipeline(specs, **pipeline_kwargs)
