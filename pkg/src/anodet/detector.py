"""Distance maps, NFA maps, merging, and the full detection pipeline.

Per channel, filter responses are standardized against statistics
estimated from the image itself and summed into a squared Mahalanobis
distance map; under the Gaussian background model that map is chi-square
distributed with one degree of freedom per retained component.  Each
pixel (or block) is then assigned a number of false alarms: the expected
count of equally extreme events under the background model.  Thresholding
the final map at NFA = 1 (anomaly score 0) therefore bounds the expected
number of false detections per image by one.

Channel maps are min-merged first, then scales; min is associative so the
order only matters for diagnostics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import DetectorConfig
from .errors import ContractError, DegenerateInputError, ParameterError
from .features import (
    FeatureStack,
    apply_filter_bank,
    learn_patch_pca_filters,
    load_external_features,
    make_gabor_bank,
    pca_reduce_features,
)
from .image import Image, build_pyramid, upsample_to
from .numerics import binomial_tail, chi2_isf, chi2_sf

__all__ = [
    "ComponentStats",
    "MahalanobisMap",
    "NfaMap",
    "DetectionResult",
    "estimate_component_stats",
    "mahalanobis_map",
    "pixel_nfa",
    "block_nfa",
    "merge_channels",
    "merge_scales",
    "stack_nfa_maps",
    "standardize_border_variance",
    "plan_scale_count",
    "detect",
]

# a component flatter than this (relative to the largest variance) would
# turn rounding noise into infinite distances
DEGENERATE_VARIANCE_RTOL = 1e-10


@dataclass(frozen=True)
class ComponentStats:
    """Per-component response mean/variance plus the retained index set."""

    means: np.ndarray
    variances: np.ndarray
    retained: np.ndarray

    @property
    def dof(self) -> int:
        return len(self.retained)


@dataclass(frozen=True)
class MahalanobisMap:
    """Squared Mahalanobis distance to the image's own normality."""

    values: np.ndarray
    dof: int


@dataclass(frozen=True)
class NfaMap:
    """Per-pixel log10 NFA for one channel at one scale."""

    log10_nfa: np.ndarray
    tests: int
    scale_index: int = 0
    channel_index: int = 0


@dataclass(frozen=True)
class DetectionResult:
    """Final anomaly-score map (AS = -log10 NFA), mask, and diagnostics."""

    anomaly_score: np.ndarray
    mask: np.ndarray
    per_scale: list
    config_echo: str = ""
    diagnostics: dict = field(default_factory=dict)


def estimate_component_stats(fs: FeatureStack, channel) -> ComponentStats:
    """Empirical mean/variance of each response map of one channel.

    Components with variance below 1e-10 times the largest variance are
    pruned (flat responses carry no signal, only rounding noise).
    """
    maps = fs.maps[channel]
    if not np.all(np.isfinite(maps)):
        raise ParameterError("response maps must be finite")
    flat = maps.reshape(maps.shape[0], -1)
    means = flat.mean(axis=1)
    variances = flat.var(axis=1, ddof=1)
    vmax = variances.max() if len(variances) else 0.0
    retained = np.nonzero(variances >= DEGENERATE_VARIANCE_RTOL * vmax)[0] if vmax > 0 else np.array([], dtype=int)
    if retained.size == 0:
        raise DegenerateInputError(
            "all response components degenerate", code="no_texture"
        )
    return ComponentStats(means=means, variances=variances, retained=retained)


def mahalanobis_map(fs: FeatureStack, channel, stats: ComponentStats) -> MahalanobisMap:
    """Sum of standardized squared responses over the retained components."""
    maps = fs.maps[channel]
    if stats.means.shape[0] != maps.shape[0]:
        raise ContractError(
            f"stats cover {stats.means.shape[0]} components, stack has {maps.shape[0]}"
        )
    if stats.dof < 1:
        raise ContractError("stats retain no components")
    d = np.zeros(maps.shape[1:])
    for i in stats.retained:
        r = maps[i] - stats.means[i]
        d += (r * r) / stats.variances[i]
    return MahalanobisMap(values=d, dof=int(stats.dof))


def pixel_nfa(dm: MahalanobisMap, scale_index=0, channel_index=0) -> NfaMap:
    """Per-pixel NFA: N_T times the chi-square tail of each distance,
    with N_T = H*W (every pixel is tested)."""
    h, w = dm.values.shape
    tests = h * w
    log10 = math.log10(tests) + chi2_sf(dm.values, dm.dof)
    return NfaMap(
        log10_nfa=log10, tests=tests, scale_index=scale_index, channel_index=channel_index
    )


def block_nfa(dm: MahalanobisMap, w=51, stride=10, p=0.01, g=17,
              scale_index=0, channel_index=0) -> NfaMap:
    """Block NFA: detect suspicious concentrations of candidate pixels.

    Pixels whose distance exceeds the p-quantile threshold are candidates.
    Within each w x w block the candidates are pooled over g x g subsampled
    grids (the grid step decorrelates overlapping filter supports), and the
    pooled count feeds a binomial tail: n = floor(w^2/g^2) trials,
    k = floor(|candidates|/g^2) successes (floor keeps the bound
    conservative).  Blocks tile with the given stride, the last block is
    clamped to the border, and every pixel takes the minimum NFA over the
    blocks covering it.
    """
    h, wid = dm.values.shape
    if not (1 <= g <= w):
        raise ParameterError(f"need 1 <= g <= w, got g={g} w={w}")
    if w > min(h, wid):
        raise ParameterError(f"block side {w} exceeds map dims {h}x{wid}")
    if not 0.0 < p < 1.0:
        raise ParameterError(f"candidate p-value must be in (0, 1), got {p}")
    if stride < 1:
        raise ParameterError("stride must be >= 1")

    tau = chi2_isf(p, dm.dof)
    cand = dm.values > tau
    ii = np.zeros((h + 1, wid + 1))
    ii[1:, 1:] = cand.cumsum(axis=0).cumsum(axis=1)

    rows = _block_starts(h, w, stride)
    cols = _block_starts(wid, w, stride)
    n = (w * w) // (g * g)
    log_nt = math.log10(h * wid * g * g / (w * w))
    tails = np.array([binomial_tail(n, k, p) for k in range(n + 1)])

    counts = (
        ii[np.ix_(rows + w, cols + w)]
        - ii[np.ix_(rows, cols + w)]
        - ii[np.ix_(rows + w, cols)]
        + ii[np.ix_(rows, cols)]
    ).astype(int)
    k_grid = np.minimum(counts // (g * g), n)
    block_vals = log_nt + tails[k_grid]

    out = np.full((h, wid), np.inf)
    for ri, r in enumerate(rows):
        for ci, c in enumerate(cols):
            region = out[r : r + w, c : c + w]
            np.minimum(region, block_vals[ri, ci], out=region)
    tests = max(1, round(h * wid * g * g / (w * w)))
    return NfaMap(
        log10_nfa=out, tests=tests, scale_index=scale_index, channel_index=channel_index
    )


def _block_starts(dim, w, stride):
    starts = list(range(0, dim - w + 1, stride))
    if starts[-1] != dim - w:
        starts.append(dim - w)
    return np.asarray(starts)


def merge_channels(maps) -> NfaMap:
    """Pixelwise minimum of log10 NFA across channel maps at one scale."""
    if not maps:
        raise ParameterError("no maps to merge")
    dims = {m.log10_nfa.shape for m in maps}
    if len(dims) != 1:
        raise ContractError(f"channel maps disagree on dims: {sorted(dims)}")
    merged = np.minimum.reduce([m.log10_nfa for m in maps])
    return NfaMap(
        log10_nfa=merged,
        tests=maps[0].tests,
        scale_index=maps[0].scale_index,
        channel_index=-1,
    )


def merge_scales(per_scale, target_hw, threshold_as=0.0, config_echo="",
                 diagnostics=None) -> DetectionResult:
    """Upsample every scale map to the target dims, min-merge, negate.

    The anomaly score is AS = -log10 NFA; the mask keeps pixels with
    AS >= ``threshold_as`` (the default 0 is the NFA = 1 operating point).
    """
    if not per_scale:
        raise ParameterError("no scale maps to merge")
    h, w = target_hw
    upsampled = [upsample_to(m.log10_nfa, h, w) for m in per_scale]
    final_log10 = np.minimum.reduce(upsampled)
    anomaly_score = -final_log10
    mask = (anomaly_score >= threshold_as).astype(np.uint8)
    return DetectionResult(
        anomaly_score=anomaly_score,
        mask=mask,
        per_scale=list(per_scale),
        config_echo=config_echo,
        diagnostics=dict(diagnostics or {}),
    )


def _reflect101(idx, n):
    return np.where(idx < 0, -idx, np.where(idx >= n, 2 * n - 2 - idx, idx))


def _reflect_variance_table(kernel, h, w):
    """Response-variance multipliers near the borders under reflect padding.

    Reflect padding folds kernel taps onto duplicated source pixels, so for
    i.i.d. input the response variance at a border pixel is the interior
    variance times the squared norm of the folded kernel.  The factor only
    depends on the distance to each edge, giving a (2p+1) x (2p+1) class
    table (p rows per edge plus the interior class at index p).
    """
    s = kernel.shape[0]
    p = s // 2
    row_positions = list(range(p)) + [min(p, h - 1 - p)] + list(range(h - p, h))
    col_positions = list(range(p)) + [min(p, w - 1 - p)] + list(range(w - p, w))
    base = float((kernel**2).sum())
    taps = np.arange(s)
    table = np.empty((2 * p + 1, 2 * p + 1))
    for i, r in enumerate(row_positions):
        rsrc = _reflect101(r + taps - p, h)
        rr, rinv = np.unique(rsrc, return_inverse=True)
        folded_rows = np.zeros((rr.size, s))
        np.add.at(folded_rows, rinv, kernel)
        for j, c in enumerate(col_positions):
            csrc = _reflect101(c + taps - p, w)
            cc, cinv = np.unique(csrc, return_inverse=True)
            folded = np.zeros((rr.size, cc.size))
            np.add.at(folded.T, cinv, folded_rows.T)
            table[i, j] = (folded**2).sum() / base
    return table


def _border_class_index(dim, p):
    idx = np.full(dim, p)
    idx[:p] = np.arange(p)
    idx[dim - p :] = np.arange(p + 1, 2 * p + 1)
    return idx


def standardize_border_variance(fs: FeatureStack, bank) -> FeatureStack:
    """Divide each response map by the per-pixel fold std of its kernel.

    After this step the responses of i.i.d. input are variance-stationary
    across the whole map, which is what the chi-square background model
    assumes; without it, reflect-padding inflates border distances and
    breaks the false-alarm bound there.
    """
    h, w = fs.height, fs.width
    out = fs.maps.copy()
    for i, kernel in enumerate(bank.kernels):
        p = kernel.shape[0] // 2
        if p == 0:
            continue
        table = _reflect_variance_table(kernel, h, w)
        rows = _border_class_index(h, p)
        cols = _border_class_index(w, p)
        scale = np.sqrt(table[np.ix_(rows, cols)])
        out[:, i] /= scale
    return FeatureStack(maps=out)


def stack_nfa_maps(fs: FeatureStack, cfg: DetectorConfig, scale_index=0) -> list:
    """Stats -> distance -> NFA for every channel of a feature stack.

    This is the back half of the pipeline; calibration code feeds it
    synthetic stacks directly to exercise the NFA guarantee under an exact
    background model.
    """
    out = []
    for ci in range(fs.channel_count):
        try:
            stats = estimate_component_stats(fs, ci)
        except DegenerateInputError as exc:
            exc.scale_index = scale_index
            exc.channel_index = ci
            raise
        dm = mahalanobis_map(fs, ci, stats)
        if cfg.nfa == "pixel":
            out.append(pixel_nfa(dm, scale_index, ci))
        else:
            out.append(
                block_nfa(
                    dm,
                    w=cfg.block.w,
                    stride=cfg.block.stride,
                    p=cfg.block.p,
                    g=cfg.resolve_block_g(),
                    scale_index=scale_index,
                    channel_index=ci,
                )
            )
    return out


def plan_scale_count(height, width, cfg: DetectorConfig) -> int:
    """Number of pyramid levels every stage can actually process.

    Levels are dropped (coarsest first) until each remaining one fits the
    largest kernel, admits enough patches for PCA learning, and can hold a
    block when block NFA is configured.  The finest level must fit, else
    the input is too small for this configuration.
    """
    s = cfg.filter_side
    feasible = 0
    h, w = height, width
    for _ in range(cfg.scales):
        ok = min(h, w) >= 2 * s + 1
        if cfg.variant == "patch_pca":
            ps = cfg.patch_size
            ok = ok and (h - ps + 1) * (w - ps + 1) >= 10 * ps * ps
        if cfg.nfa == "block":
            ok = ok and min(h, w) >= cfg.block.w
        if not ok:
            break
        feasible += 1
        h, w = -(-h // 2), -(-w // 2)
    if feasible == 0:
        raise ParameterError(
            f"image {height}x{width} is too small for variant={cfg.variant} "
            f"(filter side {s}, nfa={cfg.nfa})"
        )
    return feasible


def detect(img, cfg: DetectorConfig, features=None) -> DetectionResult:
    """Run the full pipeline and return the merged detection result.

    For the external variant ``features`` (or ``cfg.external_dir``)
    supplies the feature stack and ``img`` may be None; learned and fixed
    banks run over an image pyramid, each scale and channel independently.
    Deterministic for a fixed config and seed.
    """
    if cfg.variant == "external":
        fs = features if features is not None else load_external_features(cfg.external_dir)
        if cfg.external_variance_fraction is not None:
            fs = pca_reduce_features(fs, cfg.external_variance_fraction)
        maps = stack_nfa_maps(fs, cfg, scale_index=0)
        merged = merge_channels(maps)
        diag = _diagnostics(cfg, [(fs.height, fs.width)], [[fs.dof]], requested=1, used=1,
                            channels=fs.channel_count)
        return merge_scales(
            [merged], (fs.height, fs.width), threshold_as=cfg.threshold_as,
            config_echo=cfg.echo_text(), diagnostics=diag,
        )

    if img is None:
        raise ParameterError("detect requires an image for learned/fixed filter banks")
    n_used = plan_scale_count(img.height, img.width, cfg)
    pyramid = build_pyramid(img, n_used, min_side=2 * cfg.filter_side + 1)
    gabor_bank = make_gabor_bank(
        cfg.gabor.sizes, cfg.gabor.orientations, cfg.gabor.wavelengths
    ) if cfg.variant == "gabor" else None

    per_scale = []
    dofs = []
    dims = []
    for si, level in enumerate(pyramid.levels):
        channel_maps = []
        scale_dofs = []
        for ci in range(level.channels):
            chan_img = Image(level.data[ci : ci + 1])
            try:
                if cfg.variant == "patch_pca":
                    bank = learn_patch_pca_filters(
                        level.channel(ci), cfg.patch_size, cfg.m, seed=cfg.seed
                    )
                else:
                    bank = gabor_bank
                fs = apply_filter_bank(chan_img, bank)
                fs = standardize_border_variance(fs, bank)
                if cfg.variant == "gabor" and cfg.gabor.decorrelate:
                    fs = pca_reduce_features(fs, 1.0)
                channel_maps.extend(stack_nfa_maps(fs, cfg, scale_index=si))
                scale_dofs.append(fs.dof)
            except DegenerateInputError as exc:
                exc.scale_index = si
                exc.channel_index = ci
                raise
        # restore true channel provenance (stack_nfa_maps saw c=1 stacks)
        channel_maps = [
            NfaMap(m.log10_nfa, m.tests, si, ci)
            for ci, m in enumerate(channel_maps)
        ]
        dofs.append(scale_dofs)
        dims.append((level.height, level.width))
        per_scale.append(merge_channels(channel_maps))

    diag = _diagnostics(cfg, dims, dofs, requested=cfg.scales, used=n_used,
                        channels=img.channels)
    return merge_scales(
        per_scale, (img.height, img.width), threshold_as=cfg.threshold_as,
        config_echo=cfg.echo_text(), diagnostics=diag,
    )


def _diagnostics(cfg, dims, dofs, requested, used, channels):
    base_tests = dims[0][0] * dims[0][1]
    return {
        "variant": cfg.variant,
        "nfa": cfg.nfa,
        "scales_requested": requested,
        "scales_used": used,
        "scales_clamped": used < requested,
        "level_dims": list(dims),
        "dof_per_scale": list(dofs),
        "channels": channels,
        "tests_per_map": base_tests,
        # no multiplicity correction is applied across channels/scales; the
        # corrected count is recorded alongside for reference
        "tests_times_maps": base_tests * channels * used,
        "seed": cfg.seed,
    }
