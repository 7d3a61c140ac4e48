"""
Phantom Generator
Deterministic nested-ellipsoid volumes used as the canonical desk-scale dataset
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from modules.config import DegradeConfig, PhantomSpec
from modules.degrade import QualityBand, degrade_to_band, derive_seed
from modules.errors import BandUnreachableError
from modules.volume_io import IMAGES_DIR, LABELS_DIR, load_label_volume, save_image_volume, save_label_volume

logger = logging.getLogger(__name__)

INTENSITY_SCALE = 1000.0
BACKGROUND_INTENSITY = 0.1


def phantom_volume(spec: PhantomSpec, index: int):
    """
    One subject: nested ellipsoids whose in-plane size shrinks towards both axial ends

    Returns:
        (image, mask, affine)
    """
    rng = np.random.default_rng([spec.seed, index])
    g = spec.grid_size
    n = int(rng.integers(spec.slice_range[0], spec.slice_range[1] + 1))
    cx, cy = g / 2 + rng.uniform(-g / 16, g / 16, size=2)
    a, b = rng.uniform(0.22, 0.35, size=2) * g
    cz = (n - 1) / 2
    c = 0.95 * n / 2

    x, y, z = np.meshgrid(np.arange(g), np.arange(g), np.arange(n), indexing="ij")
    mask = np.zeros((g, g, n), dtype=np.int16)
    for k in range(1, spec.n_classes + 1):
        scale = 1.0 if spec.n_classes == 1 else 1.0 - 0.45 * (k - 1) / (spec.n_classes - 1)
        # inner classes drift along x with height so slice position is informative
        shift = 0.2 * a * (k - 1) / max(1, spec.n_classes - 1) * (z - cz) / c
        r2 = ((x - cx - shift) / (a * scale)) ** 2 + ((y - cy) / (b * scale)) ** 2 + ((z - cz) / (c * scale)) ** 2
        mask[r2 <= 1.0] = k

    intensity = np.where(mask > 0, 0.3 + 0.6 * mask / spec.n_classes, BACKGROUND_INTENSITY)
    image = (intensity + rng.normal(0.0, spec.noise_level, size=mask.shape)) * INTENSITY_SCALE
    affine = np.diag([*spec.spacing, 1.0])
    return image.astype(np.float32), mask, affine


def generate_phantoms(spec: PhantomSpec, out_dir: Path) -> Path:
    """
    Write spec.n_subjects image/label pairs in the imagesTr/labelsTr layout

    Args:
        spec: PhantomSpec
        out_dir: Dataset root

    Returns:
        out_dir
    """
    out_dir = Path(out_dir)
    for index in tqdm(range(spec.n_subjects), desc="Phantoms", leave=False):
        image, mask, affine = phantom_volume(spec, index)
        subject_id = f"phantom_{index:03d}"
        save_image_volume(image, affine, out_dir / IMAGES_DIR / f"{subject_id}.nii.gz")
        save_label_volume(mask, affine, out_dir / LABELS_DIR / f"{subject_id}.nii.gz")
    (out_dir / "phantom_spec.json").write_text(json.dumps(spec.model_dump(mode="json"), indent=2), encoding="utf-8")
    logger.info("Generated %d phantom subjects in %s", spec.n_subjects, out_dir)
    return out_dir


def degrade_volume(mask: np.ndarray, band: QualityBand, seed: int, subject_id: str,
                   cfg: Optional[DegradeConfig] = None, axial_axis: int = 2) -> np.ndarray:
    """Degrade every non-empty axial slice of a 3D mask into the band"""
    moved = np.moveaxis(mask, axial_axis, 0)
    out = np.zeros_like(moved)
    for k, gt in enumerate(moved):
        if not gt.any():
            continue
        try:
            pair = degrade_to_band(gt.astype(np.float32), gt, 0.0, band, derive_seed(seed, subject_id, k, 0), cfg,
                                   subject_id, k)
            out[k] = pair.degraded_mask
        except BandUnreachableError as e:
            logger.debug("%s; slice left empty", e)
    return np.moveaxis(out, 0, axial_axis)


def write_synthetic_model_outputs(dataset_dir: Path, out_dir: Path, subject_ids: Sequence[str],
                                  models: Dict[str, Optional[QualityBand]], seed: int,
                                  cfg: Optional[DegradeConfig] = None) -> List[Path]:
    """
    Emulate segmentation models of known quality for ranking experiments

    Args:
        dataset_dir: Dataset root with labelsTr/
        out_dir: One sub-directory per model is written here
        subject_ids: Subjects to segment
        models: {model name: band to degrade into, None for an exact GT copy}
        seed: Degradation seed

    Returns:
        The model directories
    """
    dirs = []
    for name, band in models.items():
        model_dir = Path(out_dir) / name
        for subject_id in subject_ids:
            gt, affine = load_label_volume(Path(dataset_dir) / LABELS_DIR / f"{subject_id}.nii.gz")
            seg = gt if band is None else degrade_volume(gt, band, derive_seed(seed, name, 0, 0), subject_id, cfg)
            save_label_volume(seg, affine, model_dir / f"{subject_id}.nii.gz")
        dirs.append(model_dir)
        logger.info("Wrote synthetic model '%s' for %d subjects", name, len(subject_ids))
    return dirs
