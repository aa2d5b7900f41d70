"""Layout-alignment and cross-layout consistency metrics.

All metrics are pure functions of arrays. Masks are binary (h, w) arrays;
images are (c, h, w) grids in a known display range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricsError(ValueError):
    pass


def _as_binary_mask(m) -> np.ndarray:
    vals = np.asarray(getattr(m, "values", m))
    if vals.ndim != 2:
        raise MetricsError(f"mask must be 2-d, got {vals.shape}")
    if not np.all((vals == 0) | (vals == 1)):
        raise MetricsError("metric masks must be binary")
    return vals.astype(np.float64)


def mask_iou(a, b) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    a, b = _as_binary_mask(a), _as_binary_mask(b)
    if a.shape != b.shape:
        raise MetricsError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = float(np.sum(a * b))
    union = float(np.sum(a) + np.sum(b) - inter)
    if union == 0:
        return 1.0
    return inter / union


def _corr_counts(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Integer cross-correlation over all shifts of b (zero padded)."""
    h, w = a.shape
    fh, fw = 2 * h - 1, 2 * w - 1
    fa = np.fft.rfft2(a, (fh, fw))
    fb = np.fft.rfft2(b[::-1, ::-1], (fh, fw))
    corr = np.fft.irfft2(fa * fb, (fh, fw))
    return np.rint(corr).astype(np.int64)


def _best_shifted_iou(a: np.ndarray, b: np.ndarray) -> float:
    """max_delta IoU(a, move(b, delta)) with boundary clipping."""
    ones = np.ones_like(a)
    inter = _corr_counts(a, b)
    b_in_canvas = _corr_counts(ones, b)
    union = int(a.sum()) + b_in_canvas - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / union, 1.0)
    return float(iou.max())


def consistency(a, b) -> float:
    """Mask IoU after the best pure translation, compensating pixels that
    clipped at the canvas edge; the better of the two alignment directions.
    """
    a, b = _as_binary_mask(a), _as_binary_mask(b)
    if a.shape != b.shape:
        raise MetricsError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if a.sum() == 0 and b.sum() == 0:
        return 1.0
    if a.sum() == 0 or b.sum() == 0:
        return 0.0
    return max(_best_shifted_iou(a, b), _best_shifted_iou(b, a))


def _window_mean(x: np.ndarray, win: int) -> np.ndarray:
    views = np.lib.stride_tricks.sliding_window_view(x, (win, win))
    return views.mean(axis=(-1, -2))


def ssim(a, b, data_range: float = 1.0, win: int = 7) -> float:
    """Mean structural similarity with the standard constants.

    Uniform win x win windows, K1=0.01, K2=0.03, sample-covariance
    normalization; windows touching the border are excluded. Channel
    results are averaged.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricsError(f"grid shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < win:
        raise MetricsError(f"grids smaller than the {win}x{win} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    np_win = win * win
    cov_norm = np_win / (np_win - 1)
    vals = []
    for ch in range(a.shape[0]):
        ux = _window_mean(a[ch], win)
        uy = _window_mean(b[ch], win)
        uxx = _window_mean(a[ch] * a[ch], win)
        uyy = _window_mean(b[ch] * b[ch], win)
        uxy = _window_mean(a[ch] * b[ch], win)
        vx = cov_norm * (uxx - ux * ux)
        vy = cov_norm * (uyy - uy * uy)
        vxy = cov_norm * (uxy - ux * uy)
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / (
            (ux * ux + uy * uy + c1) * (vx + vy + c2)
        )
        vals.append(s.mean())
    return float(np.mean(vals))


def _bbox(mask: np.ndarray) -> tuple[int, int]:
    on = np.argwhere(mask > 0)
    if len(on) == 0:
        raise MetricsError("empty foreground mask")
    y0, x0 = on.min(axis=0)
    return int(y0), int(x0)


def _paste_at_origin(img: np.ndarray, mask: np.ndarray):
    """White canvas with the masked foreground moved so its bounding box
    starts at (0, 0)."""
    y0, x0 = _bbox(mask)
    h, w = mask.shape
    canvas = np.ones_like(img)
    moved_mask = np.zeros_like(mask)
    canvas[..., : h - y0, : w - x0] = img[..., y0:, x0:]
    moved_mask[: h - y0, : w - x0] = mask[y0:, x0:]
    canvas = np.where(moved_mask > 0, canvas, np.ones_like(canvas))
    return canvas, moved_mask


def visual_consistency(img_a, mask_a, img_b, mask_b) -> float:
    """Foreground appearance distance, ignoring position and background.

    Both foregrounds are pasted at a canonical position on white canvases;
    the result is the mean squared error over the union of the pasted
    masks (a pixel-space stand-in for a perceptual distance).
    """
    img_a, img_b = np.asarray(img_a, np.float64), np.asarray(img_b, np.float64)
    mask_a, mask_b = _as_binary_mask(mask_a), _as_binary_mask(mask_b)
    if img_a.shape != img_b.shape or mask_a.shape != mask_b.shape:
        raise MetricsError("image/mask shapes must agree")
    ca, ma = _paste_at_origin(img_a, mask_a)
    cb, mb = _paste_at_origin(img_b, mask_b)
    union = (ma > 0) | (mb > 0)
    diff = (ca - cb) ** 2
    return float(diff[..., union].mean())


@dataclass
class PairRecord:
    name: str
    mask_iou: float | None = None
    consistency: float | None = None
    visual_consistency: float | None = None
    ssim: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass
class MetricsReport:
    """Per-pair metric records plus recomputable aggregates."""

    records: list[PairRecord] = field(default_factory=list)

    METRICS = ("mask_iou", "consistency", "visual_consistency", "ssim")

    def aggregates(self) -> dict:
        out = {}
        for m in self.METRICS:
            vals = [getattr(r, m) for r in self.records if getattr(r, m) is not None]
            if vals:
                out[m] = {
                    "mean": float(np.mean(vals)),
                    "stddev": float(np.std(vals)),
                    "count": len(vals),
                }
        return out

    def to_dict(self) -> dict:
        return {
            "records": [r.to_dict() for r in self.records],
            "aggregates": self.aggregates(),
        }

    @staticmethod
    def from_dict(d: dict) -> "MetricsReport":
        recs = [PairRecord(**r) for r in d["records"]]
        return MetricsReport(records=recs)
