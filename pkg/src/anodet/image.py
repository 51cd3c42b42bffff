"""Image representation, raster I/O, pyramid construction, convolution.

Images are immutable ``(channels, height, width)`` float64 arrays.  Loads
scale integer rasters to [0, 1]; PFM floats pass through untouched.  Float
maps are written as PFM (32-bit little-endian, scale field -1.0, bottom-up
scanlines), which round-trips float32 data bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError
from scipy.signal import fftconvolve

from .errors import CorruptFileError, ParameterError, UnsupportedFormatError

__all__ = [
    "Image",
    "Pyramid",
    "load_image",
    "load_float_map",
    "save_float_map",
    "save_heatmap",
    "save_mask",
    "convolve2d",
    "downsample_half",
    "upsample_to",
    "build_pyramid",
]


@dataclass(frozen=True)
class Image:
    """Multi-channel 2-D raster; data indexed (channel, row, col)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=float)
        if arr.ndim == 2:
            arr = arr[None, :, :]
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ParameterError(f"image data must be (c, H, W), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ParameterError("image samples must be finite")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def channel(self, i) -> np.ndarray:
        return self.data[i]


@dataclass(frozen=True)
class Pyramid:
    """Coarse-to-fine stack of images; level 0 is the original."""

    levels: list = field(default_factory=list)

    @property
    def scale_count(self) -> int:
        return len(self.levels)


_SUPPORTED_PIL_FORMATS = {"PNG", "PPM", "PGM", "PBM"}


def load_image(path) -> Image:
    """Load a PNG / PGM / PPM / PFM raster.

    Integer formats are scaled by their bit depth to [0, 1]; PFM data is
    already real-valued and is taken as-is.  Raises FileNotFoundError,
    UnsupportedFormatError or CorruptFileError as appropriate.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    if path.suffix.lower() == ".pfm":
        return Image(load_float_map(path))
    try:
        with PILImage.open(path) as img:
            fmt = img.format
            if fmt not in _SUPPORTED_PIL_FORMATS:
                raise UnsupportedFormatError(f"{path}: unsupported format {fmt!r}")
            img.load()
            return _from_pil(img, path)
    except UnidentifiedImageError as exc:
        raise UnsupportedFormatError(f"{path}: not a recognized raster file") from exc
    except (OSError, SyntaxError, ValueError) as exc:
        raise CorruptFileError(f"{path}: {exc}") from exc


def _from_pil(img, path):
    mode = img.mode
    if mode in ("LA", "RGBA"):
        img = img.convert(mode[:-1])
        mode = img.mode
    elif mode == "P":
        img = img.convert("RGB")
        mode = "RGB"
    arr = np.asarray(img)
    if mode == "L":
        return Image(arr.astype(float)[None] / 255.0)
    if mode == "RGB":
        return Image(arr.astype(float).transpose(2, 0, 1) / 255.0)
    if mode in ("I", "I;16"):
        return Image(arr.astype(float)[None] / 65535.0)
    raise UnsupportedFormatError(f"{path}: unsupported pixel mode {mode!r}")


def load_float_map(path) -> np.ndarray:
    """Read a single-channel PFM file into a float32 (H, W) array."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic == b"PF":
            raise UnsupportedFormatError(f"{path}: 3-channel PFM not supported")
        if magic != b"Pf":
            raise CorruptFileError(f"{path}: bad PFM magic {magic!r}")
        try:
            dims = f.readline().split()
            w, h = int(dims[0]), int(dims[1])
            scale = float(f.readline())
        except (ValueError, IndexError) as exc:
            raise CorruptFileError(f"{path}: bad PFM header") from exc
        if w < 1 or h < 1:
            raise CorruptFileError(f"{path}: bad PFM dims {w}x{h}")
        payload = f.read(4 * w * h)
        if len(payload) != 4 * w * h:
            raise CorruptFileError(f"{path}: truncated PFM payload")
    endian = "<" if scale < 0 else ">"
    data = np.frombuffer(payload, dtype=endian + "f4").reshape(h, w)
    # PFM scanlines are stored bottom-to-top
    return np.flipud(data).copy()


def save_float_map(map2d, path):
    """Write a single-channel float map as PFM (casts to float32)."""
    arr = np.asarray(map2d, dtype=np.float32)
    if arr.ndim != 2:
        raise ParameterError(f"expected a 2-D map, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError("float map must be finite")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(arr).astype("<f4").tobytes())


# Piecewise-linear heatmap ramp, anchors at t = 0, 0.25, 0.5, 0.75, 1
# (dark blue -> magenta -> orange -> yellow); values are the colormap spec.
_HEAT_ANCHORS = np.array(
    [
        [13, 8, 135],
        [126, 3, 168],
        [204, 71, 120],
        [248, 149, 64],
        [240, 249, 33],
    ],
    dtype=float,
)


def _heat_rgb(t):
    t = np.clip(t, 0.0, 1.0)
    pos = t * (len(_HEAT_ANCHORS) - 1)
    i = np.minimum(pos.astype(int), len(_HEAT_ANCHORS) - 2)
    frac = (pos - i)[..., None]
    rgb = _HEAT_ANCHORS[i] * (1.0 - frac) + _HEAT_ANCHORS[i + 1] * frac
    return np.round(rgb).astype(np.uint8)


def save_heatmap(map2d, path):
    """Write an 8-bit PNG rendering of a float map under the fixed ramp.

    The data range is recorded in a ``<name>.range.txt`` sidecar (two ASCII
    floats: min max).  A constant map renders at the ramp midpoint.
    """
    arr = np.asarray(map2d, dtype=float)
    if arr.ndim != 2:
        raise ParameterError(f"expected a 2-D map, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError("heatmap input must be finite")
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        t = (arr - lo) / (hi - lo)
    else:
        t = np.full_like(arr, 0.5)
    PILImage.fromarray(_heat_rgb(t), mode="RGB").save(path, format="PNG")
    path = Path(path)
    sidecar = path.with_name(path.stem + ".range.txt")
    sidecar.write_text(f"{lo!r} {hi!r}\n")


def save_mask(mask2d, path):
    """Write a binary map as an 8-bit PNG with values {0, 255}."""
    arr = np.asarray(mask2d)
    if arr.ndim != 2:
        raise ParameterError(f"expected a 2-D mask, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ParameterError("mask values must be 0 or 1")
    PILImage.fromarray((arr.astype(np.uint8)) * 255, mode="L").save(path, format="PNG")


def convolve2d(channel, kernel, padding="reflect") -> np.ndarray:
    """Same-size correlation (no kernel flip).

    ``padding`` is "reflect" (mirror without repeating the edge sample,
    the default) or "zero".  The kernel side must be odd and no larger
    than either image dimension.
    """
    x = np.asarray(channel, dtype=float)
    k = np.asarray(kernel, dtype=float)
    if x.ndim != 2 or k.ndim != 2:
        raise ParameterError("convolve2d expects 2-D arrays")
    if padding not in ("reflect", "zero"):
        raise ParameterError(f"unknown padding mode {padding!r}")
    s_h, s_w = k.shape
    if s_h != s_w or s_h % 2 == 0:
        raise ParameterError(f"kernel must be square with odd side, got {k.shape}")
    if s_h > min(x.shape):
        raise ParameterError(f"kernel side {s_h} exceeds image dims {x.shape}")
    p = s_h // 2
    if p == 0:
        return x * k[0, 0]
    # flipping the kernel turns fftconvolve into correlation
    if padding == "zero":
        return fftconvolve(x, k[::-1, ::-1], mode="same")
    padded = np.pad(x, p, mode="reflect")
    return fftconvolve(padded, k[::-1, ::-1], mode="valid")


def _gaussian_kernel(size=5, sigma=1.0):
    ax = np.arange(size, dtype=float) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def downsample_half(img: Image) -> Image:
    """Gaussian pre-blur (sigma 1.0, 5x5, reflect borders) then 2x decimation."""
    if img.height < 2 or img.width < 2:
        raise ParameterError("image must be at least 2x2 to downsample")
    k = _gaussian_kernel(5, 1.0)
    if min(img.height, img.width) < 5:
        # small levels: shrink the blur kernel to fit
        side = min(img.height, img.width)
        side -= 1 - side % 2
        k = _gaussian_kernel(side, 1.0)
    out = np.stack([convolve2d(img.channel(c), k)[::2, ::2] for c in range(img.channels)])
    return Image(out)


def upsample_to(map2d, height, width) -> np.ndarray:
    """Nearest-neighbor upsampling to (height, width).

    Nearest neighbor keeps the value set intact, which matters because the
    maps being upsampled hold log-probabilities: interpolating those has no
    probabilistic meaning.
    """
    src = np.asarray(map2d)
    if src.ndim != 2:
        raise ParameterError("expected a 2-D map")
    h, w = src.shape
    if height < h or width < w:
        raise ParameterError(f"target {height}x{width} smaller than source {h}x{w}")
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return src[np.ix_(rows, cols)]


def build_pyramid(img: Image, n_scales, min_side=3) -> Pyramid:
    """Halve width and height repeatedly, up to ``n_scales`` levels.

    Levels whose dimensions would drop below ``min_side`` are not built;
    the pyramid is silently clamped (callers report it in diagnostics).
    Level 0 is always the input itself.
    """
    if not isinstance(n_scales, (int, np.integer)) or n_scales < 1:
        raise ParameterError(f"n_scales must be a positive integer, got {n_scales!r}")
    levels = [img]
    current = img
    while len(levels) < n_scales:
        nh = -(-current.height // 2)
        nw = -(-current.width // 2)
        if min(current.height, current.width) < 2 or min(nh, nw) < max(min_side, 2):
            break
        current = downsample_half(current)
        levels.append(current)
    return Pyramid(levels=levels)
