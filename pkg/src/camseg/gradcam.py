"""Grad-CAM heatmaps, the explicit-weight CAM they reduce to, and rendering."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imaging import resize_bilinear, round_half_up
from .network import Network, forward, grad_wrt_feature_maps

__all__ = [
    "Cam",
    "UnsupportedArchitectureError",
    "cam_explicit_weights",
    "grad_cam",
    "make_cam",
    "normalize_unit",
    "quantize_gray",
    "render_heatmap_overlay",
    "resize_bilinear",
]


class UnsupportedArchitectureError(ValueError):
    pass


@dataclass
class Cam:
    raw: np.ndarray  # (x, y) feature-map resolution, may be negative
    unit: np.ndarray  # (H, W) in [0, 1]
    gray: np.ndarray  # (H, W) uint8
    provenance: dict = field(default_factory=dict)


def grad_cam(net: Network, image: np.ndarray, c: int, rectify: bool = False) -> np.ndarray:
    """Gradient-weighted class activation map for class ``c``.

    ``raw[i, j] = x*y * sum_k dY^c/df^k[i, j] * f^k[i, j]`` where ``f^k`` are the
    maps entering GAP and ``Y^c`` is the pre-softmax logit. Unrectified unless
    ``rectify`` is set.
    """
    acts = forward(net, image)
    grads = grad_wrt_feature_maps(net, acts, c)
    f = acts.features
    _, x, y = f.shape
    raw = (x * y) * np.sum(grads * f, axis=0)
    return np.maximum(raw, 0) if rectify else raw


def cam_explicit_weights(net: Network, image: np.ndarray, c: int) -> np.ndarray:
    """``sum_k w_k^c f^k`` read straight from the GAP->output weights (no gradients)."""
    if not net.spec.is_gap_head:
        raise UnsupportedArchitectureError(
            f"{net.spec.name}: explicit-weight CAM needs GAP feeding the output layer directly"
        )
    if c not in (0, 1):
        raise ValueError(f"class index must be 0 or 1, got {c}")
    head = len(net.spec.layers) - 1
    w = net.params[f"{head}.weight"][c]
    f = forward(net, image).features
    return np.tensordot(w, f, axes=(0, 0))


def normalize_unit(m: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant map becomes all zeros."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros_like(m)
    return np.clip((m - lo) / (hi - lo), 0.0, 1.0)


# Gray levels are snapped to this grid before rounding. Corner-aligned upsampling
# produces exact half levels (127.5, 25.5, ...), and float noise from an affine
# rescale of the raw map would otherwise push them to either side of the boundary.
GRAY_SNAP_DECIMALS = 6


def quantize_gray(unit: np.ndarray) -> np.ndarray:
    """``floor(255 * unit + 0.5)`` as uint8, computed on a 1e-6 snapped level grid."""
    return round_half_up(np.round(np.asarray(unit) * 255, GRAY_SNAP_DECIMALS)).astype(np.uint8)


def make_cam(
    net: Network,
    image: np.ndarray,
    c: int,
    shape: tuple[int, int] | None = None,
    rectify: bool = False,
    method: str = "grad",
    provenance: dict | None = None,
) -> Cam:
    """Raw map, resized to ``shape`` (default: the image's), normalized and quantized."""
    if method == "grad":
        raw = grad_cam(net, image, c, rectify=rectify)
    elif method == "explicit":
        raw = cam_explicit_weights(net, image, c)
        if rectify:
            raw = np.maximum(raw, 0)
    else:
        raise ValueError(f"unknown CAM method {method!r}")
    if shape is None:
        shape = np.asarray(image).shape[-2:]
    unit = normalize_unit(resize_bilinear(raw, *shape))
    return Cam(raw=raw, unit=unit, gray=quantize_gray(unit), provenance=dict(provenance or {}, c=c))


# A coarse sampling of MATLAB's parula, interpolated linearly.
_PARULA = np.array([
    [0.2422, 0.1504, 0.6603],
    [0.2803, 0.2782, 0.9221],
    [0.2440, 0.4358, 0.9988],
    [0.1540, 0.5902, 0.9218],
    [0.0297, 0.7082, 0.8163],
    [0.1938, 0.7758, 0.6251],
    [0.5044, 0.7993, 0.3480],
    [0.8634, 0.7406, 0.1596],
    [0.9892, 0.8136, 0.1885],
    [0.9763, 0.9831, 0.0538],
])
PALETTES = {
    "parula": _PARULA,
    "gray": np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]),
}


def colormap(unit: np.ndarray, palette: str = "parula") -> np.ndarray:
    """Map values in [0, 1] to float RGB in [0, 1]."""
    try:
        table = PALETTES[palette]
    except KeyError:
        raise ValueError(f"unknown palette {palette!r}; choose from {sorted(PALETTES)}") from None
    stops = np.linspace(0.0, 1.0, len(table))
    u = np.clip(np.asarray(unit, dtype=np.float64), 0, 1)
    return np.stack([np.interp(u, stops, table[:, ch]) for ch in range(3)], axis=-1)


def render_heatmap_overlay(image: np.ndarray, cam: Cam | np.ndarray, palette: str = "parula", alpha: float = 0.5) -> np.ndarray:
    """Blend the colormapped CAM over a grayscale image; returns ``(H, W, 3)`` uint8."""
    unit = cam.unit if isinstance(cam, Cam) else np.asarray(cam)
    image = np.asarray(image)
    if unit.shape != image.shape:
        raise ValueError(f"CAM shape {unit.shape} does not match image shape {image.shape}")
    base = (image.astype(np.float64) / 255.0)[..., None]
    rgb = (1 - alpha) * base + alpha * colormap(unit, palette)
    return round_half_up(rgb * 255).clip(0, 255).astype(np.uint8)
