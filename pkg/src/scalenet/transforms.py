"""Deterministic image-space operators.

Everything in this module is a pure function over numpy arrays: quarter-turn
rotations built from flips and transposes, the shrinking resize operator used
by the multi-scale curriculum, dataset standardization, pseudo-grayscale
conversion, Harris corner detection, and corner whitening. Images are H x W x C
float arrays; datasets are N x H x W x C stacks. No function mutates its input.

Conventions that downstream code relies on:
  * rotations are exact pixel permutations (no interpolation),
  * resize uses top-left-aligned source coordinates src = dst / alpha, so
    alpha = 0.5 on an even-sized image keeps exactly the even-coordinate
    pixels, bit for bit,
  * corner whitening writes the raw value 255 and is meant to run before
    standardization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ImageTensor",
    "HarrisParams",
    "CornerMask",
    "ChannelStats",
    "rotate_quarter",
    "resize",
    "resize_dataset",
    "standardize",
    "apply_stats",
    "to_pseudo_grayscale",
    "luminance",
    "harris_response",
    "harris_corners",
    "remove_corners",
    "whiten_corners_dataset",
    "make_hybrid",
]

RAW_RANGE = "raw_0_255"
STANDARDIZED = "standardized"


class StatsError(ValueError):
    """Raised when dataset statistics are degenerate (zero channel variance)."""


def _check_image(data: np.ndarray) -> np.ndarray:
    data = np.asarray(data)
    if data.ndim != 3 or data.shape[2] not in (1, 3):
        raise ValueError(f"expected H x W x C with C in {{1, 3}}, got shape {data.shape}")
    if data.shape[0] < 2 or data.shape[1] < 2:
        raise ValueError(f"image too small: {data.shape[0]} x {data.shape[1]}")
    if not np.isfinite(data).all():
        raise ValueError("image contains non-finite values")
    return data


@dataclass
class ImageTensor:
    """A single H x W x C image plus a flag saying which value range it is in.

    ``value_range`` is ``"raw_0_255"`` for ingested pixel data and
    ``"standardized"`` after per-channel whitening.
    """

    data: np.ndarray
    value_range: str = RAW_RANGE

    def __post_init__(self):
        self.data = _check_image(self.data)
        if self.value_range not in (RAW_RANGE, STANDARDIZED):
            raise ValueError(f"unknown value_range {self.value_range!r}")

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class HarrisParams:
    """Detector knobs: Gaussian window width, sensitivity k, relative threshold."""

    window_sigma: float = 1.0
    k: float = 0.04
    rel_threshold: float = 0.01

    def __post_init__(self):
        if self.window_sigma <= 0:
            raise ValueError("window_sigma must be positive")
        if not 0.01 <= self.k <= 0.1:
            raise ValueError(f"k must be in [0.01, 0.1], got {self.k}")
        if not 0.0 < self.rel_threshold < 1.0:
            raise ValueError(f"rel_threshold must be in (0, 1), got {self.rel_threshold}")


@dataclass
class CornerMask:
    """Boolean H x W mask of detected corners plus the params that produced it."""

    mask: np.ndarray
    detector_params: HarrisParams = field(default_factory=HarrisParams)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ValueError(f"mask must be H x W, got shape {self.mask.shape}")


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean and std computed over a whole dataset."""

    mean: np.ndarray
    std: np.ndarray


def _unwrap(img):
    if isinstance(img, ImageTensor):
        return img.data, img.value_range
    return _check_image(img), None


def _rewrap(data: np.ndarray, template, value_range=None):
    if isinstance(template, ImageTensor):
        return ImageTensor(data, value_range or template.value_range)
    return data


def rotate_quarter(img, y: int):
    """Rotate an image counterclockwise by 90*y degrees without interpolation.

    The rotation is composed purely from transpose / vertical-flip /
    horizontal-flip, so the output is an exact permutation of the input
    pixels: y=1 is transpose then vflip, y=2 is vflip then hflip, y=3 is
    vflip then transpose. Output shape is W x H x C for odd y.
    """
    data, _ = _unwrap(img)
    if y not in (0, 1, 2, 3):
        raise ValueError(f"rotation label y must be one of 0, 1, 2, 3, got {y!r}")
    if y == 0:
        out = data.copy()
    elif y == 1:
        out = np.swapaxes(data, 0, 1)[::-1]
    elif y == 2:
        out = data[::-1, ::-1]
    else:
        out = np.swapaxes(data[::-1], 0, 1)
    return _rewrap(np.ascontiguousarray(out), img)


def _resize_axes(in_h, in_w, alpha):
    out_h = math.floor(alpha * in_h)
    out_w = math.floor(alpha * in_w)
    if out_h < 2 or out_w < 2:
        raise ValueError(
            f"resize output {out_h} x {out_w} is degenerate (input {in_h} x {in_w}, alpha={alpha})"
        )
    return out_h, out_w


def _bilinear_taps(n_out: int, n_in: int, alpha: float):
    # Top-left-aligned source grid: src = dst / alpha. With alpha = 0.5 the
    # sources land exactly on even coordinates, so no blending happens.
    src = np.arange(n_out, dtype=np.float64) / alpha
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    return lo, hi, w


def resize(img, alpha: float):
    """Shrink an image by the resize operator alpha using bilinear sampling.

    Output shape is floor(alpha*H) x floor(alpha*W) x C; alpha = 1 returns an
    identical copy. Source coordinates are top-left aligned (src = dst/alpha),
    which makes alpha = 0.5 keep the even-coordinate pixels exactly.
    """
    data, _ = _unwrap(img)
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    if alpha == 1.0:
        return _rewrap(data.copy(), img)
    h, w = data.shape[:2]
    out_h, out_w = _resize_axes(h, w, alpha)
    y0, y1, wy = _bilinear_taps(out_h, h, alpha)
    x0, x1, wx = _bilinear_taps(out_w, w, alpha)
    d = data.astype(np.float64, copy=False)
    top = d[y0][:, x0] * (1.0 - wx)[None, :, None] + d[y0][:, x1] * wx[None, :, None]
    bot = d[y1][:, x0] * (1.0 - wx)[None, :, None] + d[y1][:, x1] * wx[None, :, None]
    out = top * (1.0 - wy)[:, None, None] + bot * wy[:, None, None]
    return _rewrap(out.astype(data.dtype, copy=False), img)


def resize_dataset(images: np.ndarray, alpha: float) -> np.ndarray:
    """Apply :func:`resize` to a whole N x H x W x C stack in one shot."""
    images = np.asarray(images)
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    if alpha == 1.0:
        return images.copy()
    n, h, w, _ = images.shape
    out_h, out_w = _resize_axes(h, w, alpha)
    y0, y1, wy = _bilinear_taps(out_h, h, alpha)
    x0, x1, wx = _bilinear_taps(out_w, w, alpha)
    d = images.astype(np.float64, copy=False)
    top = d[:, y0][:, :, x0] * (1.0 - wx)[None, None, :, None] + d[:, y0][:, :, x1] * wx[None, None, :, None]
    bot = d[:, y1][:, :, x0] * (1.0 - wx)[None, None, :, None] + d[:, y1][:, :, x1] * wx[None, None, :, None]
    out = top * (1.0 - wy)[None, :, None, None] + bot * wy[None, :, None, None]
    return out.astype(images.dtype, copy=False)


def standardize(images: np.ndarray):
    """Whiten a dataset to zero mean and unit std per channel.

    Stats are computed over every pixel of every image and returned so the
    same transform can be replayed on held-out splits. Raises
    :class:`StatsError` if any channel has zero variance.
    """
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError(f"expected a non-empty N x H x W x C stack, got shape {images.shape}")
    mean = images.mean(axis=(0, 1, 2), dtype=np.float64)
    std = images.std(axis=(0, 1, 2), dtype=np.float64)
    dead = np.nonzero(std == 0)[0]
    if dead.size:
        raise StatsError(f"zero variance in channel(s) {dead.tolist()}")
    stats = ChannelStats(mean=mean, std=std)
    return apply_stats(images, stats), stats


def apply_stats(images: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """Replay stored per-channel stats onto another split."""
    images = np.asarray(images)
    out = (images.astype(np.float64, copy=False) - stats.mean) / stats.std
    return out.astype(np.float32)


def luminance(data: np.ndarray) -> np.ndarray:
    """BT.601 luma, H x W. Exact for already-gray pixels by construction."""
    d = data.astype(np.float64, copy=False)
    # Integer-weighted form: products and sums are exact in float64 for any
    # float32 input, and the final /1000 reproduces gray inputs bit for bit.
    return (299.0 * d[..., 0] + 587.0 * d[..., 1] + 114.0 * d[..., 2]) / 1000.0


def to_pseudo_grayscale(img):
    """Replace all three channels with the BT.601 luminance image.

    Keeps the 3-channel shape so gray inputs stay drop-in compatible with
    models built for color. Idempotent: applying it twice changes nothing.
    """
    data, _ = _unwrap(img)
    if data.shape[2] != 3:
        raise ValueError(f"pseudo-grayscale needs a 3-channel image, got C={data.shape[2]}")
    g = luminance(data).astype(data.dtype, copy=False)
    return _rewrap(np.repeat(g[..., None], 3, axis=2), img)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _smooth(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    # Symmetric (edge-repeating) padding, explicit tap loop; arrays are tiny.
    radius = len(kernel) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad, mode="symmetric")
    out = np.zeros_like(arr, dtype=np.float64)
    for t, kv in enumerate(kernel):
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(t, t + arr.shape[axis])
        out += kv * padded[tuple(sl)]
    return out


def gaussian_window(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing over the last two axes."""
    k = _gaussian_kernel(sigma)
    return _smooth(_smooth(np.asarray(arr, dtype=np.float64), k, -2), k, -1)


def harris_response(data: np.ndarray, params: HarrisParams) -> np.ndarray:
    """Harris corner response det(M) - k * trace(M)^2 for ... x H x W input.

    M is the structure tensor: Gaussian-windowed products of central-difference
    gradients. Accepts a batch in the leading axes.
    """
    d = np.asarray(data, dtype=np.float64)
    iy = np.gradient(d, axis=-2)
    ix = np.gradient(d, axis=-1)
    sxx = gaussian_window(ix * ix, params.window_sigma)
    syy = gaussian_window(iy * iy, params.window_sigma)
    sxy = gaussian_window(ix * iy, params.window_sigma)
    det = sxx * syy - sxy * sxy
    trace = sxx + syy
    return det - params.k * trace * trace


def harris_corners(img, params: HarrisParams | None = None) -> CornerMask:
    """Detect corners: response above rel_threshold * max(response).

    Three-channel input is reduced to luminance first. A constant image has
    zero response everywhere and yields an empty mask.
    """
    params = params or HarrisParams()
    data, _ = _unwrap(img)
    lum = luminance(data) if data.shape[2] == 3 else data[..., 0].astype(np.float64)
    resp = harris_response(lum, params)
    peak = resp.max()
    if peak <= 0:
        return CornerMask(np.zeros(lum.shape, dtype=bool), params)
    return CornerMask(resp > params.rel_threshold * peak, params)


def remove_corners(img, mask: CornerMask):
    """White out masked pixels (raw value 255 in every channel), leave the rest."""
    data, value_range = _unwrap(img)
    if value_range == STANDARDIZED:
        raise ValueError("corner whitening expects raw-range images")
    m = mask.mask if isinstance(mask, CornerMask) else np.asarray(mask, dtype=bool)
    if m.shape != data.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match image {data.shape[:2]}")
    out = data.copy()
    out[m] = 255
    return _rewrap(out, img)


def whiten_corners_dataset(images: np.ndarray, params: HarrisParams | None = None) -> np.ndarray:
    """Corner-whiten every image of a raw N x H x W x C stack."""
    params = params or HarrisParams()
    images = np.asarray(images)
    if images.shape[-1] == 3:
        lum = luminance(images)
    else:
        lum = images[..., 0].astype(np.float64)
    resp = harris_response(lum, params)
    peaks = resp.max(axis=(-2, -1), keepdims=True)
    masks = (resp > params.rel_threshold * peaks) & (peaks > 0)
    out = images.copy()
    out[masks] = 255
    return out


def make_hybrid(images: np.ndarray, mix_prob: float = 0.5, seed: int = 0,
                params: HarrisParams | None = None):
    """Randomly mix original and corner-whitened images.

    Each image is independently replaced by its corner-removed version with
    probability ``mix_prob``, reproducibly under ``seed``. Returns the new
    stack and the boolean vector of which images were replaced.
    """
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError(f"expected a non-empty N x H x W x C stack, got shape {images.shape}")
    if not 0.0 <= mix_prob <= 1.0:
        raise ValueError(f"mix_prob must be in [0, 1], got {mix_prob}")
    rng = np.random.default_rng(seed)
    replaced = rng.random(images.shape[0]) < mix_prob
    out = images.copy()
    if replaced.any():
        out[replaced] = whiten_corners_dataset(images[replaced], params)
    return out, replaced
