"""Noise predictors: the denoiser contract, analytic toy denoisers,
classifier-free guidance, and spatially composed (locally conditioned)
prediction.

A denoiser maps (x_t, t, token) to a noise estimate of the same shape.
Analytic kinds are exact for simple data distributions (a point mass or an
isotropic Gaussian per token) and make full sampling runs verifiable in
closed form. The remote kind forwards over the wire protocol in
``bridge.py``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import _kernels as kernels
from .schedule import NoiseSchedule

DEFAULT_GUIDANCE = 7.5


class DenoiserError(Exception):
    """Base for prediction failures (distinct from transport errors)."""


class UnknownTokenError(DenoiserError):
    pass


@dataclass(frozen=True)
class ConditionToken:
    """A local prompt identity. ``label`` is display/wire text only."""

    id: int
    label: str = ""
    is_null: bool = False

    @staticmethod
    def derived(label: str) -> "ConditionToken":
        """Deterministic token for generated prompts (e.g. global prompts)."""
        return ConditionToken(id=2**32 + zlib.crc32(label.encode("utf-8")), label=label)


NULL_TOKEN = ConditionToken(id=-1, label="", is_null=True)


def cfg(eps_cond: np.ndarray, eps_uncond: np.ndarray, g: float) -> np.ndarray:
    """Classifier-free guidance: extrapolate from unconditional by scale g."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("guidance inputs must share a shape")
    gg = eps_cond.dtype.type(g)
    return eps_uncond + gg * (eps_cond - eps_uncond)


class AnalyticDenoiser:
    """Base for template-backed denoisers.

    Templates are registered per token id; the null token always resolves to
    the zero grid. Auto-registered templates (derived global prompts) never
    shadow manual ones.
    """

    kind = "analytic"

    def __init__(self, guidance: float = DEFAULT_GUIDANCE):
        self.guidance = float(guidance)
        self._templates: dict[int, np.ndarray] = {}
        self._auto_ids: set[int] = set()

    def register(self, token: ConditionToken, template: np.ndarray) -> None:
        self._templates[token.id] = np.asarray(template)
        self._auto_ids.discard(token.id)

    def ensure_auto(self, token: ConditionToken, template: np.ndarray) -> None:
        """Register a derived template unless a manual one exists."""
        if token.id in self._templates and token.id not in self._auto_ids:
            return
        self._templates[token.id] = np.asarray(template)
        self._auto_ids.add(token.id)

    def template_for(self, token: ConditionToken, like: np.ndarray) -> np.ndarray:
        if token.is_null:
            return np.zeros_like(like)
        if token.id not in self._templates:
            raise UnknownTokenError(f"no template for token {token.id} ({token.label!r})")
        tmpl = self._templates[token.id]
        if tmpl.shape != like.shape:
            raise DenoiserError(
                f"template shape {tmpl.shape} != grid shape {like.shape}"
            )
        return tmpl.astype(like.dtype, copy=False)

    def predict(self, x_t, t, token, s):
        raise NotImplementedError


class PointMassDenoiser(AnalyticDenoiser):
    """Exact noise predictor when each token's data is a single image.

    Under the forward marginal, the residual (x_t - sqrt(lb)*mu)/sqrt(1-lb)
    is exactly the injected noise.
    """

    kind = "analytic-pointmass"

    def predict(
        self, x_t: np.ndarray, t: int, token: ConditionToken, s: NoiseSchedule
    ) -> np.ndarray:
        mu = self.template_for(token, x_t)
        lb = s.lambda_bar(s._check_t(t))
        dt = x_t.dtype.type
        return (x_t - dt(np.sqrt(lb)) * mu) * dt(1.0 / np.sqrt(1.0 - lb))


class GaussianDenoiser(AnalyticDenoiser):
    """Exact posterior-mean predictor for N(mu, var*I) data per token."""

    kind = "analytic-gaussian"

    def __init__(self, var: float = 1.0, guidance: float = DEFAULT_GUIDANCE):
        super().__init__(guidance=guidance)
        if var <= 0:
            raise ValueError("data variance must be positive")
        self.var = float(var)

    def predict(
        self, x_t: np.ndarray, t: int, token: ConditionToken, s: NoiseSchedule
    ) -> np.ndarray:
        mu = self.template_for(token, x_t)
        lb = s.lambda_bar(s._check_t(t))
        dt = x_t.dtype.type
        denom = lb * self.var + (1.0 - lb)
        x0_hat = (
            dt(np.sqrt(lb) * self.var / denom) * x_t + dt((1.0 - lb) / denom) * mu
        )
        return (x_t - dt(np.sqrt(lb)) * x0_hat) * dt(1.0 / np.sqrt(1.0 - lb))


def predict_noise(d, x_t, t, token, s: NoiseSchedule) -> np.ndarray:
    """Single noise prediction through any denoiser kind."""
    return d.predict(x_t, t, token, s)


def lcd_compose(
    d,
    view,
    t: int,
    alphas: np.ndarray,
    tokens: list[ConditionToken],
    g: float,
    s: NoiseSchedule,
    blend: str = "binary",
) -> np.ndarray:
    """Locally conditioned prediction: per-token guided noise, composed
    through the occlusion-resolved visibility maps.

    ``alphas`` is the (K, h, w) stack from compute_alpha; in binary mode it
    must be an exact partition of the canvas.
    """
    x = getattr(view, "values", view)
    if len(tokens) != alphas.shape[0]:
        raise ValueError("one token per layer required")
    if blend == "binary":
        binary = np.all((alphas == 0.0) | (alphas == 1.0))
        if not binary or not np.all(alphas.sum(axis=0) == 1.0):
            raise ValueError("binary-mode alphas must form an exact partition")
    eps_uncond = d.predict(x, t, NULL_TOKEN, s)
    guided: dict[int, np.ndarray] = {}
    stack = np.empty((len(tokens),) + x.shape, dtype=x.dtype)
    for k, token in enumerate(tokens):
        if token.id not in guided:
            guided[token.id] = cfg(d.predict(x, t, token, s), eps_uncond, g)
        stack[k] = guided[token.id]
    return kernels.composite(np.ascontiguousarray(alphas), stack)
