"""
Volume I/O Module
Reads and writes NIfTI image/segmentation pairs
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import nibabel as nib
import numpy as np

from modules.errors import DataError

logger = logging.getLogger(__name__)

NIFTI_SUFFIXES = (".nii.gz", ".nii")
IMAGES_DIR = "imagesTr"
LABELS_DIR = "labelsTr"


@dataclass
class VolumePair:
    """A 3D image with its aligned integer label grid"""

    image: np.ndarray
    mask: np.ndarray
    spacing: Tuple[float, float, float]
    affine: np.ndarray
    subject_id: str

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask)
        if self.image.ndim != 3:
            raise DataError(f"{self.subject_id}: expected a 3D image, got shape {self.image.shape}")
        if self.image.shape != self.mask.shape:
            raise DataError(
                f"{self.subject_id}: image {self.image.shape} and mask {self.mask.shape} differ in shape"
            )
        if not np.issubdtype(self.mask.dtype, np.integer):
            rounded = np.rint(self.mask)
            if not np.array_equal(rounded, self.mask):
                raise DataError(f"{self.subject_id}: mask contains non-integer labels")
            self.mask = rounded
        self.mask = self.mask.astype(np.int16)
        if self.mask.min(initial=0) < 0:
            raise DataError(f"{self.subject_id}: mask contains negative labels")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise DataError(f"{self.subject_id}: voxel spacing must be three positive values")
        self.affine = np.asarray(self.affine, dtype=np.float64)

    @property
    def orientation(self) -> str:
        return "".join(nib.orientations.aff2axcodes(self.affine))

    @property
    def num_labels(self) -> int:
        return int(self.mask.max(initial=0))


def _strip_suffix(path: Path) -> str:
    name = path.name
    for suffix in NIFTI_SUFFIXES:
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def load_label_volume(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    """
    Load an integer label grid

    Returns:
        (labels, affine)
    """
    img = nib.load(str(path))
    data = np.asanyarray(img.dataobj)
    return np.rint(data).astype(np.int16), img.affine


def load_volume_pair(image_path: Path, mask_path: Optional[Path] = None,
                     subject_id: Optional[str] = None) -> VolumePair:
    """
    Load an image and its segmentation

    Args:
        image_path: NIfTI image
        mask_path: NIfTI label grid; None yields an all-background mask
        subject_id: Identifier, defaults to the image file name

    Returns:
        VolumePair in the file's voxel order
    """
    image_path = Path(image_path)
    if not image_path.exists():
        raise DataError(f"image not found: {image_path}")
    img = nib.load(str(image_path))
    image = np.asanyarray(img.dataobj).astype(np.float32)
    # Drop a singleton channel axis
    if image.ndim == 4 and image.shape[-1] == 1:
        image = image[..., 0]
    if image.ndim != 3:
        raise DataError(f"{image_path}: only single-channel 3D volumes are supported")

    # Missing segmentation is all background
    if mask_path is None:
        mask = np.zeros(image.shape, dtype=np.int16)
    else:
        mask_path = Path(mask_path)
        if not mask_path.exists():
            raise DataError(f"mask not found: {mask_path}")
        mask, mask_affine = load_label_volume(mask_path)
        if not np.allclose(mask_affine, img.affine, atol=1e-3):
            logger.warning("%s: mask affine differs from image affine, using the image header", mask_path.name)

    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return VolumePair(
        image=image,
        mask=mask,
        spacing=spacing,
        affine=img.affine,
        subject_id=subject_id or _strip_suffix(image_path),
    )


def save_label_volume(mask: np.ndarray, affine: np.ndarray, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    nib.save(nib.Nifti1Image(np.asarray(mask, dtype=np.int16), affine), str(path))
    return path


def save_image_volume(image: np.ndarray, affine: np.ndarray, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    nib.save(nib.Nifti1Image(np.asarray(image, dtype=np.float32), affine), str(path))
    return path


def find_volume(directory: Path, subject_id: str) -> Optional[Path]:
    for suffix in NIFTI_SUFFIXES:
        candidate = Path(directory) / f"{subject_id}{suffix}"
        if candidate.exists():
            return candidate
    return None


def discover_dataset(root: Path) -> Dict[str, Tuple[Path, Optional[Path]]]:
    """
    Index an imagesTr/labelsTr dataset directory

    Returns:
        {subject_id: (image_path, label_path or None)}, sorted by id
    """
    root = Path(root)
    images_dir = root / IMAGES_DIR
    if not images_dir.is_dir():
        raise DataError(f"{root} has no {IMAGES_DIR}/ directory")
    entries = {}
    for path in sorted(images_dir.iterdir()):
        if not path.name.endswith(NIFTI_SUFFIXES):
            continue
        subject_id = _strip_suffix(path)
        entries[subject_id] = (path, find_volume(root / LABELS_DIR, subject_id))
    if not entries:
        raise DataError(f"no NIfTI volumes found in {images_dir}")
    return dict(sorted(entries.items()))


def load_dataset(root: Path, subject_ids: Optional[Sequence[str]] = None) -> List[VolumePair]:
    entries = discover_dataset(root)
    if subject_ids is not None:
        missing = [s for s in subject_ids if s not in entries]
        if missing:
            raise DataError(f"subjects not found in {root}: {missing}")
        entries = {s: entries[s] for s in subject_ids}
    pairs = []
    for subject_id, (image_path, label_path) in entries.items():
        if label_path is None:
            raise DataError(f"{subject_id}: no label volume in {Path(root) / LABELS_DIR}")
        pairs.append(load_volume_pair(image_path, label_path, subject_id))
    return pairs


def split_subjects(subject_ids: Sequence[str], test_fraction: float, seed: int) -> Tuple[List[str], List[str]]:
    """
    Deterministic subject-level train/test split

    Returns:
        (train_ids, test_ids), each sorted
    """
    ids = sorted(subject_ids)
    if len(ids) < 2:
        raise DataError("at least two subjects are needed for a train/test split")
    # At least one subject on each side
    n_test = min(len(ids) - 1, max(1, int(round(len(ids) * test_fraction))))
    order = np.random.default_rng(seed).permutation(len(ids))
    test = sorted(ids[i] for i in order[:n_test])
    train = sorted(ids[i] for i in order[n_test:])
    return train, test
