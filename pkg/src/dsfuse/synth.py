"""Synthetic paired-modality phantoms with ellipsoidal lesions.

Modality A (PET-like) shows lesions with high but heterogeneous uptake
over a smooth, quiet background. Modality B (CT-like) shows them with
lower contrast over a structured background with vessel-like distractors.
Each lesion is independently visible in A with probability ``p_visible_a``
and in B with ``p_visible_b``, so some lesions appear in one modality only
and the two branches get to disagree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DomainError, FormatError, GenerationError
from .volume import Modality, Volume, load_volume, save_volume

SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.tsv"


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (32, 64, 64)
    lesion_count: tuple[int, int] = (1, 6)
    lesion_radius: tuple[float, float] = (2.0, 6.0)
    contrast_a: float = 3.0
    noise_a: float = 0.5
    contrast_b: float = 2.0
    noise_b: float = 0.6
    # per-lesion contrast is scaled by a factor drawn from these ranges
    uptake_range_a: tuple[float, float] = (0.3, 1.0)
    uptake_range_b: tuple[float, float] = (0.6, 1.0)
    # partial-volume blur of lesion edges, per modality (voxels)
    blur_a: float = 0.7
    blur_b: float = 0.7
    texture_scale: float = 6.0
    texture_amplitude_b: float = 0.8
    # elongated vessel-like structures in modality B only
    distractors_b: tuple[int, int] = (2, 6)
    distractor_contrast: float = 0.6
    p_visible_a: float = 0.95
    p_visible_b: float = 0.7
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    max_retries: int = 200

    def __post_init__(self):
        lo, hi = self.lesion_count
        rlo, rhi = self.lesion_radius
        if not (0 <= lo <= hi):
            raise DomainError(f"bad lesion count range {self.lesion_count}")
        if not (1.0 <= rlo <= rhi):
            raise DomainError(f"lesion radii must be >= 1, got {self.lesion_radius}")
        for lo_u, hi_u in (self.uptake_range_a, self.uptake_range_b):
            if not (0.0 <= lo_u <= hi_u):
                raise DomainError("uptake ranges must satisfy 0 <= low <= high")
        for p in (self.p_visible_a, self.p_visible_b):
            if not (0.0 <= p <= 1.0):
                raise DomainError(f"visibility probability {p} outside [0, 1]")
        if min(self.dims) < 1 or hi > 0 and min(self.dims) <= 2 * math.ceil(rhi):
            raise DomainError(f"dims {self.dims} cannot hold lesions of radius {rhi}")
        if min(self.noise_a, self.noise_b, self.texture_scale, self.blur_a, self.blur_b) < 0:
            raise DomainError("noise, blur and texture scale must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        tuples = {"dims", "lesion_count", "lesion_radius", "distractors_b", "spacing",
                  "uptake_range_a", "uptake_range_b"}
        kwargs = {k: tuple(v) if k in tuples else v for k, v in d.items()}
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise DomainError(f"unknown phantom option: {exc}") from exc


@dataclass(frozen=True)
class Lesion:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    visible_a: bool
    visible_b: bool
    uptake_a: float = 1.0
    uptake_b: float = 1.0


@dataclass(frozen=True)
class CaseTriple:
    vol_a: Volume
    vol_b: Volume
    mask: Volume
    lesions: tuple[Lesion, ...] = field(default=(), compare=False)


def _ellipsoid(dims, center, radii) -> np.ndarray:
    zz, yy, xx = np.ogrid[tuple(slice(0, n) for n in dims)]
    r = ((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2 \
        + ((xx - center[2]) / radii[2]) ** 2
    return r <= 1.0


def _smooth_field(rng, dims, scale) -> np.ndarray:
    """Zero-mean, unit-variance low-frequency random field."""
    f = rng.standard_normal(dims)
    if scale > 0:
        f = ndimage.gaussian_filter(f, scale, mode="wrap")
    std = f.std()
    return (f - f.mean()) / std if std > 0 else f


def _place_lesions(rng, cfg: PhantomConfig):
    n = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
    taken = np.zeros(cfg.dims, dtype=bool)
    lesions, masks = [], []
    for _ in range(n):
        for _attempt in range(cfg.max_retries):
            radii = tuple(float(r) for r in rng.uniform(*cfg.lesion_radius, size=3))
            center = tuple(float(rng.uniform(math.ceil(r), d - 1 - math.ceil(r)))
                           for r, d in zip(radii, cfg.dims))
            m = _ellipsoid(cfg.dims, center, radii)
            # keep a one-voxel gap between lesions
            if m.any() and not (ndimage.binary_dilation(m) & taken).any():
                break
        else:
            raise GenerationError(f"could not place {n} lesions in {cfg.dims} "
                                  f"after {cfg.max_retries} attempts")
        taken |= m
        masks.append(m)
        vis_a = bool(rng.random() < cfg.p_visible_a)
        vis_b = bool(rng.random() < cfg.p_visible_b)
        lesions.append(Lesion(center, radii, vis_a, vis_b,
                              float(rng.uniform(*cfg.uptake_range_a)),
                              float(rng.uniform(*cfg.uptake_range_b))))
    return lesions, masks, taken


def generate_case(cfg: PhantomConfig, seed: int) -> CaseTriple:
    rng = np.random.default_rng(seed)
    lesions, masks, union = _place_lesions(rng, cfg)

    shown_a = np.zeros(cfg.dims)
    shown_b = np.zeros(cfg.dims)
    for lesion, m in zip(lesions, masks):
        shown_a += (lesion.visible_a * lesion.uptake_a) * m
        shown_b += (lesion.visible_b * lesion.uptake_b) * m
    # partial-volume blur at lesion borders
    shown_a = ndimage.gaussian_filter(shown_a, cfg.blur_a)
    shown_b = ndimage.gaussian_filter(shown_b, cfg.blur_b)

    vol_a = 0.3 * _smooth_field(rng, cfg.dims, cfg.texture_scale) + cfg.contrast_a * shown_a
    vol_a += cfg.noise_a * ndimage.gaussian_filter(rng.standard_normal(cfg.dims), 0.5)

    anatomy = cfg.texture_amplitude_b * _smooth_field(rng, cfg.dims, cfg.texture_scale / 2)
    n_dis = int(rng.integers(cfg.distractors_b[0], cfg.distractors_b[1] + 1))
    for _ in range(n_dis):
        radii = np.full(3, rng.uniform(1.0, cfg.lesion_radius[0] + 0.5))
        radii[rng.integers(3)] = max(cfg.dims) / 2
        center = rng.uniform(0, 1, size=3) * np.array(cfg.dims)
        tube = _ellipsoid(cfg.dims, center, radii) & ~union
        anatomy += cfg.distractor_contrast * cfg.contrast_b * ndimage.gaussian_filter(
            tube.astype(float), 0.7)
    vol_b = anatomy + cfg.contrast_b * shown_b
    vol_b += cfg.noise_b * ndimage.gaussian_filter(rng.standard_normal(cfg.dims), 0.5)

    return CaseTriple(
        Volume(vol_a.astype(np.float32), cfg.spacing, Modality.PET),
        Volume(vol_b.astype(np.float32), cfg.spacing, Modality.CT),
        Volume(union.astype(np.float32), cfg.spacing, Modality.MASK),
        tuple(lesions),
    )


def case_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def split_sizes(n: int) -> tuple[int, int, int]:
    """80/10/10 split; validation and test get ``round(n / 10)`` each."""
    n_val = n_test = int(round(0.1 * n))
    if n - n_val - n_test < 1:
        n_val = n_test = 0
    return n - n_val - n_test, n_val, n_test


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    split: str
    path_a: Path
    path_b: Path
    path_mask: Path

    def load(self) -> CaseTriple:
        return CaseTriple(load_volume(self.path_a), load_volume(self.path_b),
                          load_volume(self.path_mask))


def generate_dataset(cfg: PhantomConfig, n_cases: int, seed: int, out_dir) -> Path:
    """Write ``n_cases`` phantoms and a manifest; returns the manifest path.

    Cases are assigned to splits by index: the first 80% train, then
    validation, then test.
    """
    if n_cases < 1:
        raise DomainError(f"need at least one case, got {n_cases}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train, n_val, _ = split_sizes(n_cases)
    rows = []
    for i in range(n_cases):
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        case = generate_case(cfg, case_seed(seed, i))
        cid = f"case{i:04d}"
        names = []
        for suffix, vol in (("a", case.vol_a), ("b", case.vol_b), ("mask", case.mask)):
            hpath = save_volume(vol, out / f"{cid}_{suffix}")
            names.append(hpath.name)
        rows.append("\t".join([cid, split] + names))
    manifest = out / MANIFEST_NAME
    manifest.write_text("# case_id\tsplit\tvol_a\tvol_b\tmask\n" + "\n".join(rows) + "\n")
    return manifest


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError as exc:
        raise FormatError(f"manifest not found: {path}") from exc
    entries = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5 or parts[1] not in SPLITS:
            raise FormatError(f"{path}:{lineno}: malformed manifest row")
        cid, split, a, b, m = parts
        base = path.parent
        entries.append(ManifestEntry(cid, split, base / a, base / b, base / m))
    return entries
