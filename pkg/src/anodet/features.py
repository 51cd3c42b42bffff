"""Feature front-ends: filters learned from the image, fixed Gabor banks,
and externally computed feature maps.

The patch-PCA front-end builds its kernels from the image under analysis:
the eigenvectors of the covariance of all s x s patches double as
convolution kernels, so filtering projects every patch onto the principal
axes in one pass.  The global channel mean is subtracted up front instead
of per-patch centering; the difference cancels in the downstream
standardized distances.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateInputError, ManifestError, ParameterError
from .image import Image, convolve2d, load_float_map
from .numerics import symmetric_eig

__all__ = [
    "FilterBank",
    "FeatureStack",
    "learn_patch_pca_filters",
    "make_gabor_bank",
    "apply_filter_bank",
    "multilight_pca",
    "load_external_features",
    "pca_reduce_features",
]

PATCH_SAMPLE_CAP = 200_000


@dataclass(frozen=True)
class FilterBank:
    """Ordered set of 2-D kernels plus optional per-kernel variances.

    ``source`` is "patch_pca" or "gabor".  For patch_pca the kernels are
    orthonormal as flattened vectors and ``eigenvalues`` holds their
    variances (descending).  Gabor kernels are zero-mean with unit L2 norm.
    """

    kernels: list
    source: str
    eigenvalues: np.ndarray | None = None

    def __len__(self):
        return len(self.kernels)

    @property
    def max_side(self) -> int:
        return max(k.shape[0] for k in self.kernels)


@dataclass(frozen=True)
class FeatureStack:
    """Per-channel filter responses: array of shape (channels, dof, H, W)."""

    maps: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.maps, dtype=float)
        if arr.ndim != 4:
            raise ParameterError(f"feature maps must be (c, m, H, W), got {arr.shape}")
        object.__setattr__(self, "maps", arr)

    @property
    def channel_count(self) -> int:
        return self.maps.shape[0]

    @property
    def dof(self) -> int:
        return self.maps.shape[1]

    @property
    def height(self) -> int:
        return self.maps.shape[2]

    @property
    def width(self) -> int:
        return self.maps.shape[3]


def learn_patch_pca_filters(channel, s, m, seed=0) -> FilterBank:
    """Learn convolution kernels as PCA eigenvectors of the patch set.

    ``channel`` is a 2-D array.  All overlapping interior patches are used
    when there are at most 200 000 of them; otherwise a seeded uniform
    subset of that size.  ``m`` is either a component count or a variance
    fraction in (0, 1].

    Raises DegenerateInputError (code "no_texture") for a constant channel.
    """
    x = np.asarray(channel, dtype=float)
    if x.ndim != 2:
        raise ParameterError("expected a single 2-D channel")
    if not isinstance(s, (int, np.integer)) or s < 1 or s % 2 == 0:
        raise ParameterError(f"patch side must be odd and positive, got {s}")
    h, w = x.shape
    n_rows, n_cols = h - s + 1, w - s + 1
    if n_rows < 1 or n_cols < 1 or n_rows * n_cols < 10 * s * s:
        raise ParameterError(
            f"image {h}x{w} admits {max(n_rows, 0) * max(n_cols, 0)} patches, "
            f"need at least {10 * s * s} for patch side {s}"
        )
    x = x - x.mean()
    windows = sliding_window_view(x, (s, s))
    n_total = n_rows * n_cols
    dim = s * s

    cov = np.zeros((dim, dim))
    count = 0
    if n_total <= PATCH_SAMPLE_CAP:
        chunk = max(1, PATCH_SAMPLE_CAP // max(n_cols, 1) // 4)
        for r0 in range(0, n_rows, chunk):
            block = windows[r0 : r0 + chunk].reshape(-1, dim)
            cov += block.T @ block
            count += block.shape[0]
    else:
        rng = np.random.default_rng(seed)
        flat_idx = np.sort(rng.choice(n_total, size=PATCH_SAMPLE_CAP, replace=False))
        for c0 in range(0, flat_idx.size, 50_000):
            sel = flat_idx[c0 : c0 + 50_000]
            block = windows[sel // n_cols, sel % n_cols].reshape(-1, dim)
            cov += block.T @ block
            count += block.shape[0]
    cov /= max(count - 1, 1)

    if np.trace(cov) <= 1e-12:
        raise DegenerateInputError(
            "constant channel: no texture to learn filters from", code="no_texture"
        )
    dec = symmetric_eig(0.5 * (cov + cov.T))
    keep = _resolve_component_count(m, dec.eigenvalues, dim)
    kernels = [dec.eigenvectors[:, i].reshape(s, s).copy() for i in range(keep)]
    return FilterBank(
        kernels=kernels, source="patch_pca", eigenvalues=dec.eigenvalues[:keep].copy()
    )


def _resolve_component_count(m, eigenvalues, dim):
    if isinstance(m, (bool, np.bool_)):
        raise ParameterError(f"invalid component count {m!r}")
    if isinstance(m, (float, np.floating)):
        if not 0.0 < m <= 1.0:
            raise ParameterError(f"variance fraction must be in (0, 1], got {m}")
        total = eigenvalues.sum()
        frac = np.cumsum(eigenvalues) / total
        return int(np.searchsorted(frac, m - 1e-12) + 1)
    if isinstance(m, (int, np.integer)):
        if not 1 <= m <= dim:
            raise ParameterError(f"component count must be in [1, {dim}], got {m}")
        return int(m)
    raise ParameterError(f"invalid component count {m!r}")


def _gabor_kernel(size, theta, wavelength, sigma=None):
    # cosine-phase kernel; sigma defaults to size/6 so the envelope fits
    if sigma is None:
        sigma = size / 6.0
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=float)
    xx, yy = np.meshgrid(ax, ax, indexing="xy")
    xr = xx * np.cos(theta) + yy * np.sin(theta)
    yr = -xx * np.sin(theta) + yy * np.cos(theta)
    k = np.exp(-0.5 * (xr**2 + yr**2) / sigma**2) * np.cos(2.0 * np.pi * xr / wavelength)
    k -= k.mean()
    norm = np.sqrt((k**2).sum())
    if norm > 0:
        k /= norm
    return k


def make_gabor_bank(sizes=(7, 15, 23, 31), orientations=6, wavelengths=3) -> FilterBank:
    """Build a fixed bank of cosine-phase Gabor kernels.

    Orientations are spread uniformly over [0, 180); wavelength j of a
    size-s kernel is s / 2^(j+1).  The default geometry
    (4 sizes x 6 orientations x 3 wavelengths) yields 72 kernels.
    """
    sizes = tuple(int(s) for s in sizes)
    for s in sizes:
        if s < 3 or s % 2 == 0:
            raise ParameterError(f"gabor sizes must be odd and >= 3, got {s}")
    if orientations < 1 or wavelengths < 1:
        raise ParameterError("orientations and wavelengths must be >= 1")
    kernels = []
    for s in sizes:
        for oi in range(orientations):
            theta = np.pi * oi / orientations
            for wi in range(wavelengths):
                lam = s / float(2 ** (wi + 1))
                kernels.append(_gabor_kernel(s, theta, lam))
    return FilterBank(kernels=kernels, source="gabor", eigenvalues=None)


def apply_filter_bank(img: Image, bank: FilterBank, padding="reflect") -> FeatureStack:
    """Convolve every channel, minus its global mean, with every kernel.

    With ``padding="zero"`` the border is padded with the (subtracted)
    channel mean, so border responses are projections onto truncated
    kernel supports; the detection pipeline uses this because it keeps
    border distances stochastically below their full-support law.
    """
    if len(bank) == 0:
        raise ParameterError("empty filter bank")
    if bank.max_side > min(img.height, img.width):
        raise ParameterError(
            f"kernel side {bank.max_side} exceeds image {img.height}x{img.width}"
        )
    maps = np.empty((img.channels, len(bank), img.height, img.width))
    for c in range(img.channels):
        x = img.channel(c) - img.channel(c).mean()
        for i, k in enumerate(bank.kernels):
            maps[c, i] = convolve2d(x, k, padding=padding)
    return FeatureStack(maps=maps)


def multilight_pca(images, keep_last) -> Image:
    """Per-pixel PCA across aligned single-channel shots; keep the last
    ``keep_last`` components as channels.

    The leading components carry global structure (color, texture); local
    structure concentrates in the trailing ones, which is what makes this
    a useful preprocessing step for multi-illumination rigs.  Output
    channels are ordered from eigenvalue index k-q to k-1.
    """
    if len(images) < 1:
        raise ParameterError("need at least one image")
    k = len(images)
    if not 1 <= keep_last <= k:
        raise ParameterError(f"keep_last must be in [1, {k}], got {keep_last}")
    dims = {(im.height, im.width) for im in images}
    if len(dims) != 1 or any(im.channels != 1 for im in images):
        raise ParameterError("multilight inputs must be aligned single-channel images")
    h, w = dims.pop()
    data = np.stack([im.channel(0).ravel() for im in images], axis=1)  # (HW, k)
    data = data - data.mean(axis=0)
    cov = (data.T @ data) / max(data.shape[0] - 1, 1)
    dec = symmetric_eig(0.5 * (cov + cov.T))
    proj = data @ dec.eigenvectors[:, k - keep_last :]
    return Image(proj.T.reshape(keep_last, h, w))


def load_external_features(directory, manifest_name="manifest.txt") -> FeatureStack:
    """Ingest precomputed feature maps described by a plain-text manifest.

    Manifest format: line 1 ``count=<m>``, line 2 ``dims=<H>x<W>``, then one
    PFM filename per line.  Maps must already be aligned to the analysis
    image.  The result is a single-channel stack with dof = count.
    """
    directory = Path(directory)
    manifest = directory / manifest_name
    if not manifest.exists():
        raise ManifestError(f"manifest not found: {manifest}")
    lines = [ln.strip() for ln in manifest.read_text().splitlines() if ln.strip()]
    if len(lines) < 3 or not lines[0].startswith("count=") or not lines[1].startswith("dims="):
        raise ManifestError(f"{manifest}: expected 'count=<m>' then 'dims=<H>x<W>'")
    try:
        count = int(lines[0].split("=", 1)[1])
        h, w = (int(v) for v in lines[1].split("=", 1)[1].lower().split("x"))
    except ValueError as exc:
        raise ManifestError(f"{manifest}: unparseable header") from exc
    names = lines[2:]
    if len(names) != count:
        raise ManifestError(f"{manifest}: count={count} but {len(names)} filenames listed")
    maps = np.empty((1, count, h, w))
    for i, name in enumerate(names):
        fpath = directory / name
        if not fpath.exists():
            raise ManifestError(f"{manifest}: listed file missing: {name}")
        arr = load_float_map(fpath)
        if arr.shape != (h, w):
            raise ManifestError(f"{name}: dims {arr.shape} do not match manifest {h}x{w}")
        maps[0, i] = arr
    return FeatureStack(maps=maps)


def pca_reduce_features(fs: FeatureStack, variance_fraction=0.9) -> FeatureStack:
    """Decorrelate a single-channel stack and keep the leading components
    whose cumulative eigenvalue fraction reaches ``variance_fraction``."""
    if not 0.0 < variance_fraction <= 1.0:
        raise ParameterError(f"variance fraction must be in (0, 1], got {variance_fraction}")
    if fs.channel_count != 1:
        raise ParameterError("PCA reduction expects a single-channel feature stack")
    m, h, w = fs.dof, fs.height, fs.width
    data = fs.maps[0].reshape(m, h * w).T  # (HW, m)
    data = data - data.mean(axis=0)
    cov = (data.T @ data) / max(data.shape[0] - 1, 1)
    dec = symmetric_eig(0.5 * (cov + cov.T))
    eig = dec.eigenvalues
    total = eig.sum()
    if total <= 0:
        raise DegenerateInputError("all feature maps constant", code="no_texture")
    positive = eig > 1e-12 * eig[0]
    frac = np.cumsum(eig) / total
    keep = int(np.searchsorted(frac, variance_fraction - 1e-12) + 1)
    keep = min(keep, int(np.count_nonzero(positive)))
    proj = data @ dec.eigenvectors[:, :keep]
    return FeatureStack(maps=proj.T.reshape(1, keep, h, w))
