"""
Degradation Module
Synthesizes imperfect segmentations at controlled DSC quality bands
"""

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from modules.config import DEFAULT_BANDS, DegradeConfig
from modules.errors import BandUnreachableError, DataError
from modules.fingerprint import SlicePack
from modules.metrics import dsc

logger = logging.getLogger(__name__)

CORPUS_INDEX = "index.json"


@dataclass(frozen=True)
class QualityBand:
    """DSC interval [lo, hi); the top band is closed at hi"""

    lo: float
    hi: float
    closed: bool = False

    def __post_init__(self):
        if not 0 <= self.lo < self.hi <= 1:
            raise ValueError(f"invalid quality band [{self.lo}, {self.hi})")

    def contains(self, value: float) -> bool:
        return self.lo <= value < self.hi or (self.closed and value == self.hi)

    @property
    def label(self) -> str:
        return f"[{self.lo:.2f},{self.hi:.2f}{']' if self.closed else ')'}"


def make_bands(bounds: Sequence[Tuple[float, float]] = DEFAULT_BANDS) -> List[QualityBand]:
    top = max(hi for _, hi in bounds)
    return [QualityBand(float(lo), float(hi), closed=hi == top) for lo, hi in bounds]


def band_for(value: float, bands: Sequence[QualityBand]) -> Optional[QualityBand]:
    for band in bands:
        if band.contains(value):
            return band
    return None


@dataclass
class DegradedPair:
    subject_id: str
    slice_index: int
    image: np.ndarray
    gt_mask: np.ndarray
    degraded_mask: np.ndarray
    slice_ratio: float
    band: QualityBand
    achieved_dsc: float
    seed: int

    def record(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "slice_index": self.slice_index,
            "band_lo": self.band.lo,
            "band_hi": self.band.hi,
            "band_closed": self.band.closed,
            "seed": self.seed,
            "slice_ratio": self.slice_ratio,
            "achieved_dsc": self.achieved_dsc,
        }


@dataclass
class Corpus:
    """Degraded pairs in (subject, slice, band) order plus the unreachable cases"""

    pairs: List[DegradedPair] = field(default_factory=list)
    unreachable: List[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


def _disk(shape: Tuple[int, int], center: Sequence[int], radius: float) -> np.ndarray:
    rows, cols = np.ogrid[: shape[0], : shape[1]]
    return (rows - center[0]) ** 2 + (cols - center[1]) ** 2 <= radius ** 2


def _present_labels(mask: np.ndarray) -> List[int]:
    return [int(c) for c in np.unique(mask) if c > 0]


def punch_holes(mask: np.ndarray, n: int, radius_range: Tuple[float, float], seed: int) -> np.ndarray:
    """
    Erase n disks from every foreground class

    Args:
        mask: 2D label grid
        n: Holes per class
        radius_range: (min, max) disk radius in pixels
        seed: RNG seed

    Returns:
        New label grid
    """
    if n < 0:
        raise ValueError("number of holes must be non-negative")
    rng = np.random.default_rng(seed)
    out = mask.copy()
    # Centers are sampled inside each class
    for c in _present_labels(mask):
        coords = np.argwhere(mask == c)
        for _ in range(n):
            center = coords[rng.integers(len(coords))]
            radius = rng.uniform(*radius_range)
            out[_disk(mask.shape, center, radius) & (out == c)] = 0
    return out


def erode_iterative(mask: np.ndarray, iterations: int, seed: int = 0) -> np.ndarray:
    """
    Per-class binary erosion, applied `iterations` times

    The seed picks the 3x3 structuring element: the full square or the
    4-connected cross.
    """
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    if iterations == 0:
        return mask.copy()
    connectivity = int(np.random.default_rng(seed).integers(1, 3))
    structure = ndimage.generate_binary_structure(2, connectivity)
    out = np.zeros_like(mask)
    for c in _present_labels(mask):
        eroded = ndimage.binary_erosion(mask == c, structure=structure, iterations=iterations)
        out[eroded] = c
    return out


def add_false_positives(mask: np.ndarray, n_blobs: int, radius_range: Tuple[float, float],
                        seed: int) -> np.ndarray:
    """Paint disks of a random existing class onto background pixels"""
    if n_blobs < 0:
        raise ValueError("number of blobs must be non-negative")
    labels = _present_labels(mask)
    if not labels:
        return mask.copy()
    rng = np.random.default_rng(seed)
    out = mask.copy()
    background = np.argwhere(mask == 0)
    if len(background) == 0:
        return out
    # Centers are sampled on background only
    for _ in range(n_blobs):
        center = background[rng.integers(len(background))]
        radius = rng.uniform(*radius_range)
        label = labels[rng.integers(len(labels))]
        out[_disk(mask.shape, center, radius) & (out == 0)] = label
    return out


def collapse_classes(mask: np.ndarray) -> np.ndarray:
    """Map every foreground label to the smallest one present"""
    labels = _present_labels(mask)
    out = mask.copy()
    if labels:
        out[mask > 0] = labels[0]
    return out


def swap_classes(mask: np.ndarray, seed: int) -> np.ndarray:
    """Relabel foreground classes with a random non-identity permutation"""
    labels = _present_labels(mask)
    if len(labels) < 2:
        return mask.copy()
    rng = np.random.default_rng(seed)
    permuted = [labels[i] for i in rng.permutation(len(labels))]
    # Rotate once when the shuffle came back unchanged
    if permuted == labels:
        permuted = permuted[1:] + permuted[:1]
    out = mask.copy()
    for src, dst in zip(labels, permuted):
        out[mask == src] = dst
    return out


def _class_radius(mask: np.ndarray) -> float:
    """Radius of a disk with the mean per-class area"""
    areas = [np.count_nonzero(mask == c) for c in _present_labels(mask)]
    return max(1.0, math.sqrt(np.mean(areas) / math.pi))


@dataclass(frozen=True)
class OperatorDraw:
    """
    One random operator combination with its placements fixed

    Only the size of the corruption follows `strength`. Holes and false
    positives are both placed against the class-relabelled GT, and erosion
    runs last, so the DSC varies with strength without the placements moving.
    """

    class_ops: Tuple[Tuple[str, int], ...]
    holes: Optional[Tuple[int, int]]
    false_positives: Optional[Tuple[int, int]]
    erosion: Optional[Tuple[float, int]]
    radius: float
    cfg: DegradeConfig

    @property
    def names(self) -> List[str]:
        names = [name for name, _ in self.class_ops]
        names += [name for name, part in (("holes", self.holes), ("false_positives", self.false_positives),
                                          ("erode", self.erosion)) if part is not None]
        return names

    def apply(self, gt: np.ndarray, strength: float) -> np.ndarray:
        # Relabel first
        base = gt
        for name, op_seed in self.class_ops:
            base = collapse_classes(base) if name == "collapse" else swap_classes(base, op_seed)
        out = base
        # Sizes scale with strength, placements stay fixed
        if self.holes is not None:
            n, op_seed = self.holes
            r_max = self.cfg.hole_radius_fraction * self.radius * strength
            out = punch_holes(base, n, (0.25 * r_max, r_max), op_seed)
        if self.false_positives is not None:
            n, op_seed = self.false_positives
            r_max = self.cfg.fp_radius_fraction * self.radius * strength
            painted = add_false_positives(base, n, (0.25 * r_max, r_max), op_seed)
            # blobs only cover base background, holes only base foreground
            out = np.where(painted != base, painted, out)
        if self.erosion is not None:
            depth, op_seed = self.erosion
            out = erode_iterative(out, int(round(depth * self.radius * strength)), op_seed)
        return out


def draw_operators(gt: np.ndarray, cfg: DegradeConfig, rng: np.random.Generator) -> OperatorDraw:
    """Pick 1-3 operators and fix their counts, placements and seeds"""
    ops = ["holes", "erode", "false_positives"]
    if len(_present_labels(gt)) > 1:
        # Class operators need at least two labels
        ops += ["collapse", "swap"]
    lo, hi = cfg.ops_per_trial
    count = min(len(ops), int(rng.integers(lo, hi + 1)))
    chosen = [str(op) for op in rng.choice(ops, size=count, replace=False)]
    class_ops, holes, false_positives, erosion = [], None, None, None
    for op in chosen:
        op_seed = int(rng.integers(2 ** 31))
        if op == "holes":
            holes = (int(rng.integers(1, cfg.holes_max + 1)), op_seed)
        elif op == "false_positives":
            false_positives = (int(rng.integers(1, cfg.fp_blobs_max + 1)), op_seed)
        elif op == "erode":
            erosion = (cfg.erosion_fraction * rng.uniform(0.1, 0.6), op_seed)
        else:
            class_ops.append((op, op_seed))
    return OperatorDraw(tuple(class_ops), holes, false_positives, erosion, _class_radius(gt), cfg)


def _search_strength(gt: np.ndarray, draw: OperatorDraw, band: QualityBand,
                     cfg: DegradeConfig) -> Tuple[Optional[np.ndarray], float, List[float]]:
    """
    Bracket the band between a too-weak and a too-strong strength, then bisect

    Returns:
        (candidate or None, achieved DSC, every DSC measured)
    """
    s_min, s_max = cfg.strength_range
    seen: List[float] = []

    def measure(strength: float) -> Tuple[np.ndarray, float]:
        candidate = draw.apply(gt, strength)
        achieved = dsc(candidate, gt)
        seen.append(achieved)
        return candidate, achieved

    # Start from unit strength
    strength = min(max(1.0, s_min), s_max)
    candidate, achieved = measure(strength)
    if band.contains(achieved):
        return candidate, achieved, seen

    # weak side leaves the DSC above the band, strong side below it
    if achieved >= band.hi:
        weak = strength
        while True:
            if strength >= s_max:
                return None, achieved, seen
            strength = min(strength * cfg.escalate, s_max)
            candidate, achieved = measure(strength)
            if band.contains(achieved):
                return candidate, achieved, seen
            if achieved < band.lo:
                strong = strength
                break
            weak = strength
    else:
        strong = strength
        while True:
            if strength <= s_min:
                return None, achieved, seen
            strength = max(strength / cfg.escalate, s_min)
            candidate, achieved = measure(strength)
            if band.contains(achieved):
                return candidate, achieved, seen
            if achieved >= band.hi:
                weak = strength
                break
            strong = strength

    # Bisect in log space between the bracket ends
    for _ in range(cfg.bisection_steps):
        strength = math.sqrt(weak * strong)
        candidate, achieved = measure(strength)
        if band.contains(achieved):
            return candidate, achieved, seen
        if achieved >= band.hi:
            weak = strength
        else:
            strong = strength
    return None, achieved, seen


def degrade_to_band(image: np.ndarray, gt: np.ndarray, slice_ratio: float, band: QualityBand, seed: int,
                    cfg: Optional[DegradeConfig] = None, subject_id: str = "", slice_index: int = 0) -> DegradedPair:
    """
    Corrupt a GT slice until its DSC to the GT falls inside the band

    Each retry draws a new operator combination; within a draw the strength
    is escalated or backed off until the band is bracketed and then bisected.

    Args:
        image: 2D image slice
        gt: 2D ground-truth label grid
        slice_ratio: Axial position of the slice
        band: Target QualityBand
        seed: Seed of this slice-band case

    Returns:
        DegradedPair
    """
    cfg = cfg or DegradeConfig()
    if not _present_labels(gt):
        raise BandUnreachableError(f"{subject_id}:{slice_index} has an empty GT, band {band.label} is unreachable", 1.0)

    # Track the closest miss for the error report
    center = (band.lo + band.hi) / 2
    closest = float("nan")
    for retry in range(cfg.max_retries):
        draw = draw_operators(gt, cfg, np.random.default_rng([seed, retry]))
        candidate, achieved, seen = _search_strength(gt, draw, band, cfg)
        if candidate is not None:
            return DegradedPair(
                subject_id=subject_id,
                slice_index=slice_index,
                image=image,
                gt_mask=gt,
                degraded_mask=candidate,
                slice_ratio=float(slice_ratio),
                band=band,
                achieved_dsc=achieved,
                seed=seed,
            )
        # Remember the best DSC of this failed draw
        for value in seen:
            if math.isnan(closest) or abs(value - center) < abs(closest - center):
                closest = value
        logger.debug("%s:%s band %s: draw %s missed after %d measurements", subject_id, slice_index, band.label,
                     "+".join(draw.names), len(seen))
    raise BandUnreachableError(
        f"{subject_id}:{slice_index} did not reach band {band.label} after {cfg.max_retries} operator draws "
        f"(closest DSC {closest:.3f})",
        closest,
    )


def derive_seed(seed: int, subject_id: str, slice_index: int, band_index: int) -> int:
    """Seed of one slice-band case, independent of scheduling order"""
    key = f"{seed}:{subject_id}:{slice_index}:{band_index}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little")


def build_corpus(packs: Sequence[SlicePack], bands: Sequence[QualityBand], seed: int,
                 cfg: Optional[DegradeConfig] = None, workers: int = 0) -> Corpus:
    """
    Degrade every slice of every subject once per band

    Args:
        packs: Preprocessed subjects
        bands: Quality bands to target
        seed: Corpus seed
        workers: Thread count; 0 runs serially

    Returns:
        Corpus ordered by (subject, slice, band)
    """
    if not packs:
        raise DataError("cannot build a corpus from no subjects")
    cfg = cfg or DegradeConfig()
    # One job per slice-band case
    jobs = []
    for pack in packs:
        for k, (image, mask, ratio) in enumerate(pack):
            for b, band in enumerate(bands):
                jobs.append((pack.subject_id, k, image, mask, ratio, b, band))

    def run(job):
        subject_id, k, image, mask, ratio, b, band = job
        case_seed = derive_seed(seed, subject_id, k, b)
        try:
            return degrade_to_band(image, mask, ratio, band, case_seed, cfg, subject_id, k)
        except BandUnreachableError as e:
            return {"subject_id": subject_id, "slice_index": k, "band": band.label, "seed": case_seed,
                    "best_dsc": None if math.isnan(e.best_dsc) else e.best_dsc, "reason": str(e)}

    # Results keep job order either way
    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(tqdm(executor.map(run, jobs), total=len(jobs), desc="Degrading", leave=False))
    else:
        results = [run(job) for job in tqdm(jobs, desc="Degrading", leave=False)]

    # Split results into pairs and unreachable cases
    corpus = Corpus()
    for result in results:
        if isinstance(result, DegradedPair):
            corpus.pairs.append(result)
        else:
            corpus.unreachable.append(result)
            logger.debug(result["reason"])
    if corpus.unreachable:
        logger.warning("%d of %d slice-band cases were unreachable and skipped", len(corpus.unreachable), len(jobs))
    logger.info("Corpus built: %d pairs from %d subjects", len(corpus.pairs), len(packs))
    return corpus


def band_histogram(corpus: Corpus) -> Dict[str, int]:
    counts: Dict[str, int] = {}
    for pair in corpus:
        counts[pair.band.label] = counts.get(pair.band.label, 0) + 1
    return counts


def _pair_file(pair: DegradedPair) -> str:
    return f"{pair.subject_id}_{pair.slice_index:04d}_{pair.band.lo:.2f}-{pair.band.hi:.2f}.npz"


def save_corpus(corpus: Corpus, out_dir: Path, provenance: Optional[dict] = None) -> Path:
    """Write one .npz per pair plus index.json"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for pair in corpus:
        name = _pair_file(pair)
        np.savez_compressed(out_dir / name, image=pair.image, gt=pair.gt_mask, degraded=pair.degraded_mask)
        records.append({**pair.record(), "file": name})
    index = {
        "provenance": provenance or {},
        "digest": corpus_digest(corpus),
        "pairs": records,
        "unreachable": corpus.unreachable,
    }
    path = out_dir / CORPUS_INDEX
    path.write_text(json.dumps(index, indent=2), encoding="utf-8")
    return path


def load_corpus(corpus_dir: Path) -> Corpus:
    corpus_dir = Path(corpus_dir)
    index_path = corpus_dir / CORPUS_INDEX
    if not index_path.exists():
        raise DataError(f"no corpus index at {index_path}")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    corpus = Corpus(unreachable=index.get("unreachable", []))
    for record in index["pairs"]:
        with np.load(corpus_dir / record["file"]) as arrays:
            corpus.pairs.append(DegradedPair(
                subject_id=record["subject_id"],
                slice_index=record["slice_index"],
                image=arrays["image"],
                gt_mask=arrays["gt"],
                degraded_mask=arrays["degraded"],
                slice_ratio=record["slice_ratio"],
                band=QualityBand(record["band_lo"], record["band_hi"], record["band_closed"]),
                achieved_dsc=record["achieved_dsc"],
                seed=record["seed"],
            ))
    return corpus


def corpus_digest(corpus: Corpus) -> str:
    """Content digest over every array and index record"""
    h = hashlib.sha256()
    for pair in corpus:
        h.update(json.dumps(pair.record(), sort_keys=True).encode("utf-8"))
        for array in (pair.image, pair.gt_mask, pair.degraded_mask):
            h.update(np.ascontiguousarray(array).tobytes())
    return h.hexdigest()
