"""Detector configuration: dataclasses, config-file parsing, echo text.

Defaults follow the stock texture setup: patch-PCA with m=45, s=17 and
4 scales; the Gabor bank with 72 kernels sized 7 to 31; block testing
with w=51, stride 10, p=0.01.  Config files are INI-style text
(key = value, one section per group) and are overridden by CLI flags.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .errors import ParameterError

__all__ = ["BlockParams", "GaborParams", "MultilightParams", "DetectorConfig"]

VARIANTS = ("patch_pca", "gabor", "external")
NFA_KINDS = ("pixel", "block")


@dataclass(frozen=True)
class BlockParams:
    w: int = 51
    stride: int = 10
    p: float = 0.01
    # subsampling grid step; None -> use the filter side (patch side for
    # patch-PCA, largest kernel for Gabor), which keeps the per-grid
    # samples non-overlapping
    g: int | None = None


@dataclass(frozen=True)
class GaborParams:
    sizes: tuple = (7, 15, 23, 31)
    orientations: int = 6
    wavelengths: int = 3
    # optional PCA rotation of the responses before the distance step
    decorrelate: bool = False


@dataclass(frozen=True)
class MultilightParams:
    enabled: bool = False
    keep_last: int = 3


@dataclass(frozen=True)
class DetectorConfig:
    variant: str = "patch_pca"
    nfa: str = "pixel"
    # component count (int) or variance fraction (float in (0,1])
    m: object = 45
    patch_size: int = 17
    scales: int = 4
    block: BlockParams = field(default_factory=BlockParams)
    gabor: GaborParams = field(default_factory=GaborParams)
    multilight: MultilightParams = field(default_factory=MultilightParams)
    external_dir: str | None = None
    external_variance_fraction: float | None = 0.9
    threshold_as: float = 0.0
    seed: int = 0
    jobs: int = 1
    debug_dir: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.nfa not in NFA_KINDS:
            raise ParameterError(f"nfa must be one of {NFA_KINDS}, got {self.nfa!r}")
        if self.scales < 1:
            raise ParameterError("scales must be >= 1")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ParameterError("patch size must be odd and positive")

    @property
    def filter_side(self) -> int:
        """Largest kernel side of the configured front-end."""
        if self.variant == "gabor":
            return max(self.gabor.sizes)
        return self.patch_size

    def resolve_block_g(self) -> int:
        if self.block.g is not None:
            return self.block.g
        return self.filter_side

    def replace(self, **kw) -> "DetectorConfig":
        return dataclasses.replace(self, **kw)

    def echo_text(self, comments=()) -> str:
        """Serializable snapshot, sufficient to re-run the same detection.

        ``comments`` lines (e.g. a timestamp) are emitted as '#' comments so
        payload lines stay identical across reruns.
        """
        lines = [f"# {c}" for c in comments]
        lines += [
            "[detector]",
            f"variant = {self.variant}",
            f"nfa = {self.nfa}",
            f"scales = {self.scales}",
            f"threshold_as = {self.threshold_as!r}",
            f"seed = {self.seed}",
            "",
            "[patch_pca]",
            f"m = {self.m!r}",
            f"patch_size = {self.patch_size}",
            "",
            "[gabor]",
            f"sizes = {','.join(str(s) for s in self.gabor.sizes)}",
            f"orientations = {self.gabor.orientations}",
            f"wavelengths = {self.gabor.wavelengths}",
            f"decorrelate = {self.gabor.decorrelate}",
            "",
            "[block]",
            f"w = {self.block.w}",
            f"stride = {self.block.stride}",
            f"p = {self.block.p!r}",
            f"g = {'auto' if self.block.g is None else self.block.g}",
            "",
            "[multilight]",
            f"enabled = {self.multilight.enabled}",
            f"keep_last = {self.multilight.keep_last}",
            "",
            "[external]",
            f"dir = {self.external_dir or ''}",
            f"variance_fraction = {'' if self.external_variance_fraction is None else repr(self.external_variance_fraction)}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_file(cls, path) -> "DetectorConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        read = parser.read(path)
        if not read:
            raise ParameterError(f"cannot read config file {path}")
        kw = {}
        det = parser["detector"] if parser.has_section("detector") else {}
        for key in ("variant", "nfa"):
            if key in det:
                kw[key] = det[key].strip()
        if "scales" in det:
            kw["scales"] = int(det["scales"])
        if "threshold_as" in det:
            kw["threshold_as"] = float(det["threshold_as"])
        if "seed" in det:
            kw["seed"] = int(det["seed"])
        if parser.has_section("patch_pca"):
            sec = parser["patch_pca"]
            if "m" in sec:
                kw["m"] = _int_or_fraction(sec["m"])
            if "patch_size" in sec:
                kw["patch_size"] = int(sec["patch_size"])
        if parser.has_section("gabor"):
            sec = parser["gabor"]
            kw["gabor"] = GaborParams(
                sizes=tuple(int(v) for v in sec.get("sizes", "7,15,23,31").split(",")),
                orientations=sec.getint("orientations", 6),
                wavelengths=sec.getint("wavelengths", 3),
                decorrelate=sec.getboolean("decorrelate", False),
            )
        if parser.has_section("block"):
            sec = parser["block"]
            g_raw = sec.get("g", "auto").strip()
            kw["block"] = BlockParams(
                w=sec.getint("w", 51),
                stride=sec.getint("stride", 10),
                p=sec.getfloat("p", 0.01),
                g=None if g_raw in ("", "auto") else int(g_raw),
            )
        if parser.has_section("multilight"):
            sec = parser["multilight"]
            kw["multilight"] = MultilightParams(
                enabled=sec.getboolean("enabled", False),
                keep_last=sec.getint("keep_last", 3),
            )
        if parser.has_section("external"):
            sec = parser["external"]
            if sec.get("dir", "").strip():
                kw["external_dir"] = sec["dir"].strip()
            vf = sec.get("variance_fraction", "").strip()
            if vf:
                kw["external_variance_fraction"] = float(vf)
        return cls(**kw)


def _int_or_fraction(text):
    text = text.strip()
    if "." in text or "e" in text.lower():
        return float(text)
    return int(text)
