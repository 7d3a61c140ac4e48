"""
Metrics Module
Segmentation quality metrics, pseudo-vs-real score statistics and model ranking
"""

import json
import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy import ndimage, stats

from modules.fingerprint import RestoreMeta, postprocess

logger = logging.getLogger(__name__)

METRICS = ("dsc", "hd95")
HIGHER_IS_BETTER = {"dsc": True, "hd95": False}
TTEST_VARIANT = "unpaired-two-sided"
REPORT_COLUMNS = ["subject_id", "model", "slice_index", "band", "metric", "pseudo_score", "real_score", "flagged"]


def _check_shapes(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _foreground_classes(a: np.ndarray, b: np.ndarray) -> List[int]:
    labels = np.union1d(np.unique(a), np.unique(b))
    return [int(c) for c in labels if c > 0]


def dsc(a: np.ndarray, b: np.ndarray) -> float:
    """
    Dice-Sorensen coefficient averaged over foreground classes

    A class absent from both masks is excluded; two empty masks score 1.0.
    """
    a, b = _check_shapes(a, b)
    classes = _foreground_classes(a, b)
    if not classes:
        return 1.0
    scores = []
    for c in classes:
        in_a = a == c
        in_b = b == c
        total = np.count_nonzero(in_a) + np.count_nonzero(in_b)
        scores.append(2.0 * np.count_nonzero(in_a & in_b) / total)
    return float(np.mean(scores))


def boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of a binary mask removed by one 4-connectivity (6 in 3D) erosion"""
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def diagonal_mm(shape: Sequence[int], spacing: Sequence[float]) -> float:
    return float(math.sqrt(sum((n * s) ** 2 for n, s in zip(shape, spacing))))


def _surface_distances(a: np.ndarray, b: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    edge_a = boundary(a)
    edge_b = boundary(b)
    to_b = ndimage.distance_transform_edt(~edge_b, sampling=spacing)
    to_a = ndimage.distance_transform_edt(~edge_a, sampling=spacing)
    return np.concatenate([to_b[edge_a], to_a[edge_b]])


def hd95_flagged(a: np.ndarray, b: np.ndarray, spacing: Optional[Sequence[float]] = None,
                 sentinel: Optional[float] = None) -> Tuple[float, bool]:
    """
    95th percentile Hausdorff distance with the degenerate-case flag

    Args:
        a, b: Label grids of equal shape
        spacing: Voxel size per axis (mm); unit spacing when None
        sentinel: Value for a class present in only one mask; the grid diagonal in mm when None

    Returns:
        (hd95 averaged over foreground classes, True if a sentinel was used)
    """
    a, b = _check_shapes(a, b)
    spacing = (1.0,) * a.ndim if spacing is None else tuple(float(s) for s in spacing)
    if len(spacing) != a.ndim or min(spacing) <= 0:
        raise ValueError(f"spacing {spacing} does not fit a {a.ndim}D grid")
    if sentinel is None:
        sentinel = diagonal_mm(a.shape, spacing)

    classes = _foreground_classes(a, b)
    if not classes:
        return 0.0, False
    values = []
    flagged = False
    for c in classes:
        in_a = a == c
        in_b = b == c
        # Class missing from one side
        if not in_a.any() or not in_b.any():
            values.append(float(sentinel))
            flagged = True
            continue
        values.append(float(np.percentile(_surface_distances(in_a, in_b, spacing), 95)))
    return float(np.mean(values)), flagged


def hd95(a: np.ndarray, b: np.ndarray, spacing: Optional[Sequence[float]] = None,
         sentinel: Optional[float] = None) -> float:
    return hd95_flagged(a, b, spacing, sentinel)[0]


def score(metric: str, candidate: np.ndarray, reference: np.ndarray, spacing: Optional[Sequence[float]] = None,
          sentinel: Optional[float] = None) -> Tuple[float, bool]:
    if metric == "dsc":
        return dsc(candidate, reference), False
    if metric == "hd95":
        return hd95_flagged(candidate, reference, spacing, sentinel)
    raise ValueError(f"unknown metric: {metric}")


@dataclass
class SubjectScores:
    """3D scores of one candidate against its restored pGT (and optionally its GT)"""

    subject_id: str
    pgt: np.ndarray
    pseudo: Dict[str, float] = field(default_factory=dict)
    real: Dict[str, float] = field(default_factory=dict)
    flagged: Dict[str, bool] = field(default_factory=dict)


def aggregate_subject(pgt_slices: Sequence[np.ndarray], meta: RestoreMeta, candidate: np.ndarray,
                      gt: Optional[np.ndarray] = None, metrics: Sequence[str] = METRICS,
                      hd95_sentinel: Optional[float] = None) -> SubjectScores:
    """
    Stack pGT slices into a volume on the original grid and score the candidate in 3D

    Args:
        pgt_slices: Per-slice pGTs in slice order
        meta: RestoreMeta of the subject
        candidate: The segmentation under QC, original grid
        gt: Ground truth, original grid, if known
        metrics: Metric names to compute

    Returns:
        SubjectScores
    """
    # Back to the original grid before scoring
    pgt = postprocess(pgt_slices, meta)
    result = SubjectScores(subject_id=meta.subject_id, pgt=pgt)
    for metric in metrics:
        value, flag = score(metric, candidate, pgt, meta.spacing, hd95_sentinel)
        result.pseudo[metric] = value
        result.flagged[metric] = flag
        if gt is not None:
            real, real_flag = score(metric, candidate, gt, meta.spacing, hd95_sentinel)
            result.real[metric] = real
            result.flagged[metric] = flag or real_flag
    return result


def pearson_r(xs: Sequence[float], ys: Sequence[float]) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape:
        raise ValueError("pearson_r needs sequences of equal length")
    if xs.size < 2:
        raise ValueError("pearson_r needs at least two points")
    if np.ptp(xs) == 0 or np.ptp(ys) == 0:
        raise ValueError("pearson_r is undefined for zero-variance input")
    return float(stats.pearsonr(xs, ys)[0])


def mae(xs: Sequence[float], ys: Sequence[float]) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape:
        raise ValueError("mae needs sequences of equal length")
    if xs.size < 1:
        raise ValueError("mae needs at least one point")
    return float(np.mean(np.abs(xs - ys)))


def kendall_tau(rank_a: Sequence[str], rank_b: Sequence[str]) -> float:
    """
    Kendall's tau between two orderings of the same items

    Computed from concordant/discordant pair counts; a single item gives 1.0.
    """
    rank_a = list(rank_a)
    rank_b = list(rank_b)
    if sorted(rank_a) != sorted(rank_b) or len(set(rank_a)) != len(rank_a):
        raise ValueError("rankings must be permutations of the same items")
    n = len(rank_a)
    if n < 2:
        return 1.0
    position = {item: i for i, item in enumerate(rank_b)}
    concordant = discordant = 0
    # Count concordant pairs
    for i, j in combinations(range(n), 2):
        if position[rank_a[i]] < position[rank_a[j]]:
            concordant += 1
        else:
            discordant += 1
    return (concordant - discordant) / (n * (n - 1) / 2)


class SwapTest(BaseModel):
    model_a: str
    model_b: str
    t_statistic: Optional[float] = None
    p_value: Optional[float] = None


class RankingResult(BaseModel):
    metric: str = "dsc"
    pseudo_ranking: List[str]
    real_ranking: List[str]
    tau: float
    pseudo_means: Dict[str, float]
    real_means: Dict[str, float]
    swaps: List[SwapTest] = Field(default_factory=list)
    ttest_variant: str = TTEST_VARIANT


def _order(means: Dict[str, float], higher_is_better: bool) -> List[str]:
    sign = -1.0 if higher_is_better else 1.0
    return sorted(means, key=lambda name: (sign * means[name], name))


def rank_models(pseudo_scores: Dict[str, Sequence[float]], real_scores: Dict[str, Sequence[float]],
                metric: str = "dsc") -> RankingResult:
    """
    Rank models by mean pseudo score and by mean real score

    Args:
        pseudo_scores: {model: per-subject pseudo scores}
        real_scores: {model: per-subject real scores}
        metric: Decides the sort direction (dsc descending, hd95 ascending)

    Returns:
        RankingResult with Kendall's tau and t-tests for every pair whose order differs
    """
    if set(pseudo_scores) != set(real_scores):
        raise ValueError("pseudo and real scores must cover the same models")
    if not pseudo_scores:
        raise ValueError("no models to rank")
    higher = HIGHER_IS_BETTER.get(metric, True)
    pseudo_means = {m: float(np.mean(v)) for m, v in pseudo_scores.items()}
    real_means = {m: float(np.mean(v)) for m, v in real_scores.items()}
    pseudo_order = _order(pseudo_means, higher)
    real_order = _order(real_means, higher)

    # t-test only for pairs the two rankings disagree on
    swaps = []
    pseudo_pos = {m: i for i, m in enumerate(pseudo_order)}
    real_pos = {m: i for i, m in enumerate(real_order)}
    for a, b in combinations(sorted(pseudo_scores), 2):
        if (pseudo_pos[a] < pseudo_pos[b]) == (real_pos[a] < real_pos[b]):
            continue
        test = SwapTest(model_a=a, model_b=b)
        if len(real_scores[a]) >= 2 and len(real_scores[b]) >= 2:
            result = stats.ttest_ind(real_scores[a], real_scores[b])
            if np.isfinite(result.statistic):
                test.t_statistic = float(result.statistic)
                test.p_value = float(result.pvalue)
        swaps.append(test)

    return RankingResult(
        metric=metric,
        pseudo_ranking=pseudo_order,
        real_ranking=real_order,
        tau=kendall_tau(pseudo_order, real_order),
        pseudo_means=pseudo_means,
        real_means=real_means,
        swaps=swaps,
    )


class ScorePair(BaseModel):
    """One pseudo score M(S, pGT) with its real counterpart M(S, GT) when known"""

    subject_id: str
    metric: str
    pseudo_score: float
    real_score: Optional[float] = None
    model: Optional[str] = None
    band: Optional[str] = None
    slice_index: Optional[int] = None
    flagged: bool = False


class QCReport(BaseModel):
    """Score pairs plus the agreement statistics derived from them"""

    pairs: List[ScorePair] = Field(default_factory=list)
    rankings: List[RankingResult] = Field(default_factory=list)
    provenance: Dict[str, object] = Field(default_factory=dict)

    def metrics(self) -> List[str]:
        return sorted({p.metric for p in self.pairs})

    def bands(self) -> List[str]:
        return sorted({p.band for p in self.pairs if p.band is not None})

    @staticmethod
    def _agreement(pairs: Sequence[ScorePair]) -> Dict[str, Optional[float]]:
        known = [p for p in pairs if p.real_score is not None]
        out: Dict[str, Optional[float]] = {"n": len(pairs), "pearson_r": None, "mae": None}
        if not known:
            return out
        xs = [p.pseudo_score for p in known]
        ys = [p.real_score for p in known]
        out["mae"] = mae(xs, ys)
        # r stays None for constant scores
        try:
            out["pearson_r"] = pearson_r(xs, ys)
        except ValueError:
            pass
        return out

    def summary(self) -> dict:
        """
        Overall and per-band r / MAE for every metric

        Returns:
            {metric: {"n", "pearson_r", "mae", "flagged", "bands": {band: {...}}}}
        """
        result = {}
        for metric in self.metrics():
            pairs = [p for p in self.pairs if p.metric == metric]
            entry = self._agreement(pairs)
            entry["flagged"] = sum(p.flagged for p in pairs)
            entry["mean_pseudo"] = float(np.mean([p.pseudo_score for p in pairs]))
            # Per-band breakdown
            bands = {}
            for band in self.bands():
                in_band = [p for p in pairs if p.band == band]
                if in_band:
                    bands[band] = self._agreement(in_band)
            if bands:
                entry["bands"] = bands
            result[metric] = entry
        return result

    def to_frame(self) -> pd.DataFrame:
        rows = [p.model_dump() for p in self.pairs]
        return pd.DataFrame(rows, columns=REPORT_COLUMNS)

    def save(self, out_dir: Path, stem: str = "report") -> Tuple[Path, Path]:
        """Write <stem>.csv (one row per score pair) and <stem>.json (summary)"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}.csv"
        json_path = out_dir / f"{stem}.json"
        self.to_frame().to_csv(csv_path, index=False)
        payload = {
            "summary": self.summary(),
            "rankings": [r.model_dump() for r in self.rankings],
            "provenance": self.provenance,
        }
        json_path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str), encoding="utf-8")
        logger.info("Report written to %s and %s", csv_path, json_path)
        return csv_path, json_path
