"""Random affine + elastic augmentation shared across the three volumes of a case."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from ..synth import CaseTriple
from ..volume import Volume


@dataclass(frozen=True)
class AugmentConfig:
    affine: bool = True
    elastic: bool = True
    max_rotation_deg: float = 10.0
    max_translation: float = 0.05  # fraction of each dimension
    scale_range: tuple[float, float] = (0.9, 1.1)
    elastic_sigma: float = 4.0
    elastic_amplitude: float = 2.0  # voxels

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(max_rotation_deg=0.0, max_translation=0.0, scale_range=(1.0, 1.0),
                   elastic_amplitude=0.0)

    def is_identity(self) -> bool:
        no_affine = not self.affine or (
            self.max_rotation_deg == 0 and self.max_translation == 0
            and self.scale_range == (1.0, 1.0))
        no_elastic = not self.elastic or self.elastic_amplitude == 0
        return no_affine and no_elastic


def sample_coordinates(dims, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Source coordinates ``(3, *dims)`` for every output voxel."""
    grid = np.indices(dims, dtype=np.float64)
    center = (np.array(dims, dtype=np.float64) - 1) / 2
    coords = grid
    if cfg.affine:
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        angle = np.deg2rad(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
        scale = rng.uniform(*cfg.scale_range)
        shift = rng.uniform(-cfg.max_translation, cfg.max_translation, size=3) * np.array(dims)
        # inverse mapping: output voxel -> where to read in the source
        mat = Rotation.from_rotvec(axis * angle).as_matrix() / scale
        rel = grid.reshape(3, -1) - center[:, None]
        coords = (mat @ rel + center[:, None] - shift[:, None]).reshape(grid.shape)
    if cfg.elastic and cfg.elastic_amplitude > 0:
        disp = np.empty_like(grid)
        for ax in range(3):
            field = ndimage.gaussian_filter(rng.uniform(-1, 1, size=dims), cfg.elastic_sigma)
            peak = np.abs(field).max()
            disp[ax] = field / peak * cfg.elastic_amplitude if peak > 0 else 0.0
        coords = coords + disp
    return coords


def augment(case: CaseTriple, seed: int, cfg: AugmentConfig | None = None) -> CaseTriple:
    """Apply one random geometric transform to all three volumes.

    Images are resampled trilinearly with edge replication; the mask uses
    nearest-neighbour with zero fill, so it stays binary.
    """
    cfg = cfg or AugmentConfig()
    if cfg.is_identity():
        return case
    rng = np.random.default_rng(seed)
    coords = sample_coordinates(case.mask.dims, cfg, rng)

    def warp(v: Volume, order: int, mode: str) -> Volume:
        out = ndimage.map_coordinates(v.data, coords, order=order, mode=mode, cval=0.0)
        return v.with_data(out.astype(v.data.dtype))

    return CaseTriple(
        warp(case.vol_a, 1, "nearest"),
        warp(case.vol_b, 1, "nearest"),
        warp(case.mask, 0, "constant"),
        case.lesions,
    )
