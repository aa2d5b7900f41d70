"""Pure-numpy implementations of the hot per-pixel kernels.

These are the reference semantics; the Cython extension in ``_core.pyx``
mirrors them operation-for-operation so both backends produce bit-identical
results. Grids are arrays whose last two axes are (row, col) = (y, x);
``dx`` shifts toward +x (right), ``dy`` toward +y (down).
"""

import numpy as np


def shift2d(arr: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate over the last two axes, zero-filling vacated cells.

    Values pushed past the boundary are discarded.
    """
    out = np.zeros_like(arr)
    h, w = arr.shape[-2], arr.shape[-1]
    if abs(dx) >= w or abs(dy) >= h:
        return out
    ys_dst = slice(max(dy, 0), h + min(dy, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_dst = slice(max(dx, 0), w + min(dx, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[..., ys_dst, xs_dst] = arr[..., ys_src, xs_src]
    return out


def alpha_chain_binary(moved_masks: np.ndarray) -> np.ndarray:
    """Front-to-back visibility: alpha_k = m_k * prod_{j<k} (1 - m_j).

    ``moved_masks`` is (K, h, w), already shifted to layout positions.
    """
    K = moved_masks.shape[0]
    alphas = np.empty_like(moved_masks)
    occ = np.ones_like(moved_masks[0])
    for k in range(K):
        alphas[k] = moved_masks[k] * occ
        if k < K - 1:
            occ = occ * (1.0 - moved_masks[k])
    return alphas


def alpha_chain_soft(moved_masks: np.ndarray) -> np.ndarray:
    """Soft-mask visibility: alpha_k = m_k * prod_{j<k} sqrt(1 - m_j^2)."""
    K = moved_masks.shape[0]
    alphas = np.empty_like(moved_masks)
    occ = np.ones_like(moved_masks[0])
    for k in range(K):
        alphas[k] = moved_masks[k] * occ
        if k < K - 1:
            occ = occ * np.sqrt(1.0 - moved_masks[k] * moved_masks[k])
    return alphas


def composite(alphas: np.ndarray, moved_features: np.ndarray) -> np.ndarray:
    """Blend K moved feature grids: sum_k alpha_k * f_k.

    alphas is (K, h, w); moved_features is (K, c, h, w); result (c, h, w).
    """
    out = np.zeros_like(moved_features[0])
    for k in range(alphas.shape[0]):
        out += alphas[k] * moved_features[k]
    return out


def scatter_accumulate(
    num: np.ndarray,
    den: np.ndarray,
    alpha: np.ndarray,
    view: np.ndarray,
    weight: float,
    dx: int,
    dy: int,
) -> None:
    """Accumulate one (view, layer) term of the least-squares update.

    num += weight * shift(alpha * view, (-dx, -dy))
    den += weight * shift(alpha,        (-dx, -dy))

    num is (c, h, w), den and alpha are (h, w), view is (c, h, w). The shift
    is the inverse of the layer's layout offset (dx, dy).
    """
    h, w = alpha.shape
    if abs(dx) >= w or abs(dy) >= h:
        return
    # shift by (-dx, -dy): destination slice of the back-moved values
    ys_dst = slice(max(-dy, 0), h + min(-dy, 0))
    ys_src = slice(max(dy, 0), h + min(dy, 0))
    xs_dst = slice(max(-dx, 0), w + min(-dx, 0))
    xs_src = slice(max(dx, 0), w + min(dx, 0))
    wgt = num.dtype.type(weight)
    a = alpha[ys_src, xs_src]
    num[..., ys_dst, xs_dst] += wgt * (a * view[..., ys_src, xs_src])
    den[ys_dst, xs_dst] += wgt * a
