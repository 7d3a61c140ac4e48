"""
Dataset Fingerprint Module
Extracts dataset statistics and applies/reverses the standardization they drive
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import nibabel as nib
import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage
from tqdm import tqdm

from modules.errors import DataError
from modules.volume_io import VolumePair

logger = logging.getLogger(__name__)

LOWER_PERCENTILE = 0.5
UPPER_PERCENTILE = 99.5


class DatasetFingerprint(BaseModel):
    """Per-dataset statistics driving pre/post-processing"""

    model_config = ConfigDict(populate_by_name=True)

    median_spacing: Tuple[float, float, float]
    median_foreground_size: Tuple[float, float, float]
    canonical_orientation: str = Field("RAS", alias="orientation")
    intensity_lo: float
    intensity_hi: float
    num_labels: int = Field(ge=1)
    target_size: Tuple[int, int] = (256, 256)

    @model_validator(mode="after")
    def _check(self):
        if not self.intensity_lo < self.intensity_hi:
            raise ValueError("intensity_lo must be below intensity_hi")
        if min(self.median_spacing) <= 0:
            raise ValueError("median_spacing must be positive")
        if min(self.target_size) < 1:
            raise ValueError("target_size must be positive")
        return self

    @property
    def axial_axis(self) -> int:
        for axis, code in enumerate(self.canonical_orientation):
            if code in "SI":
                return axis
        raise DataError(f"orientation {self.canonical_orientation} has no superior/inferior axis")

    def to_dict(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def save(self, path: Path, provenance: Optional[dict] = None) -> Path:
        """Write the fixed fingerprint fields, plus an optional provenance block ignored on load"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = self.to_dict()
        if provenance:
            payload["provenance"] = provenance
        path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Path) -> "DatasetFingerprint":
        path = Path(path)
        if not path.exists():
            raise DataError(f"fingerprint file not found: {path}")
        return cls.model_validate(json.loads(path.read_text(encoding="utf-8")))


@dataclass
class RestoreMeta:
    """Everything postprocess needs to map slices back onto the source grid"""

    subject_id: str
    original_shape: Tuple[int, int, int]
    to_canonical: np.ndarray
    canonical_shape: Tuple[int, int, int]
    resampled_shape: Tuple[int, int, int]
    axial_axis: int
    crop_offsets: Tuple[int, int]
    crop_window: Tuple[int, int]
    spacing: Tuple[float, float, float]
    affine: np.ndarray

    @property
    def n_slices(self) -> int:
        return self.resampled_shape[self.axial_axis]


@dataclass
class SlicePack:
    """Standardized 2D slices of one subject, ordered along the axial axis"""

    subject_id: str
    images: np.ndarray
    masks: np.ndarray
    ratios: np.ndarray
    meta: RestoreMeta

    def __len__(self) -> int:
        return len(self.ratios)

    def __iter__(self) -> Iterator[Tuple[np.ndarray, np.ndarray, float]]:
        for k in range(len(self)):
            yield self.images[k], self.masks[k], float(self.ratios[k])


def slice_ratios(n: int) -> np.ndarray:
    """Relative axial position index/(N-1); a single slice sits at 0.5"""
    if n < 1:
        raise DataError("volume has no axial slices")
    if n == 1:
        return np.array([0.5])
    return np.arange(n, dtype=np.float64) / (n - 1)


def _orientation_transform(affine: np.ndarray, canonical: str) -> np.ndarray:
    source = nib.orientations.io_orientation(affine)
    target = nib.orientations.axcodes2ornt(tuple(canonical))
    return nib.orientations.ornt_transform(source, target)


def _canonical_spacing(spacing: Sequence[float], transform: np.ndarray) -> Tuple[float, float, float]:
    out = [0.0, 0.0, 0.0]
    for axis, value in enumerate(spacing):
        out[int(transform[axis, 0])] = float(value)
    return tuple(out)


def _resize_volume(volume: np.ndarray, shape: Sequence[int], order: int) -> np.ndarray:
    """scipy zoom to an exact output shape"""
    shape = tuple(int(s) for s in shape)
    if volume.shape == shape:
        return volume.copy()
    factors = [t / s for t, s in zip(shape, volume.shape)]
    out = ndimage.zoom(volume, factors, order=order, mode="nearest", grid_mode=False)
    # zoom rounds the output shape; pad or trim the last voxel if it is off by one
    pads = [(0, max(0, t - o)) for t, o in zip(shape, out.shape)]
    out = np.pad(out, pads, mode="edge")
    return out[tuple(slice(0, t) for t in shape)]


def _resize_slice(array: np.ndarray, size: Tuple[int, int], is_mask: bool) -> np.ndarray:
    """Resize a 2D array to size=(rows, cols) with Pillow"""
    if array.shape == tuple(size):
        return array.copy()
    rows, cols = size
    if is_mask:
        img = Image.fromarray(array.astype(np.int32))
        return np.asarray(img.resize((cols, rows), resample=Image.NEAREST)).astype(np.int16)
    img = Image.fromarray(array.astype(np.float32))
    return np.asarray(img.resize((cols, rows), resample=Image.BILINEAR)).astype(np.float32)


def _foreground_extent(mask: np.ndarray) -> np.ndarray:
    coords = np.argwhere(mask > 0)
    return coords.max(axis=0) - coords.min(axis=0) + 1


def extract_fingerprint(dataset: Sequence[VolumePair], target_size: Tuple[int, int] = (256, 256),
                        orientation: str = "RAS") -> DatasetFingerprint:
    """
    Compute the dataset fingerprint

    Args:
        dataset: Training subjects
        target_size: In-plane output size (rows, cols)
        orientation: Canonical axis code

    Returns:
        DatasetFingerprint
    """
    if not dataset:
        raise DataError("cannot fingerprint an empty dataset")

    # Spacing in canonical axis order
    spacings = []
    for pair in dataset:
        transform = _orientation_transform(pair.affine, orientation)
        spacings.append(_canonical_spacing(pair.spacing, transform))
    median_spacing = np.median(np.array(spacings), axis=0)

    extents = []
    foreground_values = []
    num_labels = 0
    for pair, spacing in zip(dataset, spacings):
        transform = _orientation_transform(pair.affine, orientation)
        mask = nib.orientations.apply_orientation(pair.mask, transform)
        if not (mask > 0).any():
            logger.warning("%s has no foreground, skipped for size and intensity statistics", pair.subject_id)
            continue
        extents.append(_foreground_extent(mask) * np.asarray(spacing) / median_spacing)
        foreground_values.append(pair.image[pair.mask > 0])
        num_labels = max(num_labels, pair.num_labels)

    if not foreground_values:
        raise DataError("no subject has foreground voxels; intensity percentiles are undefined")

    # Intensity window from pooled foreground voxels
    pooled = np.concatenate(foreground_values)
    lo, hi = np.percentile(pooled, [LOWER_PERCENTILE, UPPER_PERCENTILE])
    if hi <= lo:
        hi = lo + 1.0

    fp = DatasetFingerprint(
        median_spacing=tuple(float(s) for s in median_spacing),
        median_foreground_size=tuple(float(e) for e in np.median(np.array(extents), axis=0)),
        canonical_orientation=orientation,
        intensity_lo=float(lo),
        intensity_hi=float(hi),
        num_labels=num_labels,
        target_size=tuple(target_size),
    )
    logger.info(
        "Fingerprint over %d subjects: spacing=%s, intensity=[%.3f, %.3f], labels=%d",
        len(dataset), fp.median_spacing, fp.intensity_lo, fp.intensity_hi, fp.num_labels,
    )
    return fp


def preprocess(pair: VolumePair, fp: DatasetFingerprint, crop_margin: float = 2.0,
               max_resample_ratio: float = 100.0) -> SlicePack:
    """
    Standardize one subject into axial 2D slices

    Args:
        pair: Source volume
        fp: Fingerprint of the dataset the model was trained on
        crop_margin: In-plane crop window in multiples of the median foreground extent
        max_resample_ratio: Larger per-axis zoom factors are treated as a corrupt header

    Returns:
        SlicePack with images in [0,1] and masks in {0..L}
    """
    if min(pair.image.shape) < 1:
        raise DataError(f"{pair.subject_id}: degenerate volume shape {pair.image.shape}")

    # Reorient
    transform = _orientation_transform(pair.affine, fp.canonical_orientation)
    image = nib.orientations.apply_orientation(pair.image, transform)
    mask = nib.orientations.apply_orientation(pair.mask, transform)
    spacing = np.asarray(_canonical_spacing(pair.spacing, transform))
    canonical_shape = tuple(image.shape)

    # Resample to the median spacing
    factors = spacing / np.asarray(fp.median_spacing)
    if factors.max() > max_resample_ratio or factors.min() < 1.0 / max_resample_ratio:
        raise DataError(
            f"{pair.subject_id}: spacing {tuple(spacing)} vs median {fp.median_spacing} "
            f"needs more than {max_resample_ratio:g}x resampling"
        )
    resampled_shape = tuple(max(1, int(round(n * f))) for n, f in zip(image.shape, factors))
    image = _resize_volume(image, resampled_shape, order=1)
    mask = _resize_volume(mask, resampled_shape, order=0)

    # Clip and rescale to [0, 1]
    image = (np.clip(image, fp.intensity_lo, fp.intensity_hi) - fp.intensity_lo) / (fp.intensity_hi - fp.intensity_lo)

    axial = fp.axial_axis
    image = np.moveaxis(image, axial, 0)
    mask = np.moveaxis(mask, axial, 0)
    in_plane = [a for a in range(3) if a != axial]

    # Centered in-plane crop sized from the median foreground extent
    offsets, window = [], []
    for dim, axis in zip(image.shape[1:], in_plane):
        size = min(dim, max(1, math.ceil(crop_margin * fp.median_foreground_size[axis])))
        offsets.append((dim - size) // 2)
        window.append(size)
    crop = (slice(None), slice(offsets[0], offsets[0] + window[0]), slice(offsets[1], offsets[1] + window[1]))
    image = image[crop]
    mask = mask[crop]

    target = tuple(fp.target_size)
    images = np.stack([np.clip(_resize_slice(s, target, False), 0.0, 1.0) for s in image]).astype(np.float32)
    masks = np.stack([_resize_slice(s, target, True) for s in mask])
    np.clip(masks, 0, fp.num_labels, out=masks)

    meta = RestoreMeta(
        subject_id=pair.subject_id,
        original_shape=tuple(pair.image.shape),
        to_canonical=transform,
        canonical_shape=canonical_shape,
        resampled_shape=resampled_shape,
        axial_axis=axial,
        crop_offsets=tuple(offsets),
        crop_window=tuple(window),
        spacing=tuple(pair.spacing),
        affine=pair.affine,
    )
    return SlicePack(
        subject_id=pair.subject_id,
        images=images,
        masks=masks,
        ratios=slice_ratios(images.shape[0]),
        meta=meta,
    )


def preprocess_dataset(pairs: Sequence[VolumePair], fp: DatasetFingerprint, crop_margin: float = 2.0,
                       max_resample_ratio: float = 100.0, show_progress: bool = False) -> List[SlicePack]:
    """Preprocess every subject with one fingerprint, in input order"""
    return [preprocess(p, fp, crop_margin, max_resample_ratio)
            for p in tqdm(pairs, desc="Preprocessing", leave=False, disable=not show_progress)]


def postprocess(pgt_slices: Sequence[np.ndarray], meta: RestoreMeta) -> np.ndarray:
    """
    Map standardized 2D masks back onto the subject's original grid

    Args:
        pgt_slices: One mask per axial slice, in slice order
        meta: RestoreMeta from preprocess

    Returns:
        3D label grid with the original shape and voxel order
    """
    if len(pgt_slices) != meta.n_slices:
        raise ValueError(f"expected {meta.n_slices} slices for {meta.subject_id}, got {len(pgt_slices)}")

    # Undo resize, crop, resampling and reorientation in reverse order
    rows, cols = meta.crop_window
    cropped = np.stack([_resize_slice(np.asarray(s), (rows, cols), True) for s in pgt_slices])

    plane = [n for axis, n in enumerate(meta.resampled_shape) if axis != meta.axial_axis]
    resampled = np.zeros((meta.n_slices, *plane), dtype=np.int16)
    r0, c0 = meta.crop_offsets
    resampled[:, r0:r0 + rows, c0:c0 + cols] = cropped
    resampled = np.moveaxis(resampled, 0, meta.axial_axis)

    canonical = _resize_volume(resampled, meta.canonical_shape, order=0)
    restored = nib.orientations.apply_orientation(canonical, _invert_transform(meta.to_canonical))
    return np.ascontiguousarray(restored).astype(np.int16)


def _invert_transform(transform: np.ndarray) -> np.ndarray:
    """Orientation transform undoing `transform` (axis permutation plus flips)"""
    # ornt_transform(identity, T) undoes T
    identity = np.column_stack([np.arange(len(transform)), np.ones(len(transform))])
    return nib.orientations.ornt_transform(identity, np.asarray(transform, dtype=np.float64))
