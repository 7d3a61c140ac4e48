"""
QC Pipeline
Orchestrates fingerprinting, the two training stages, pGT inference, evaluation and ranking
"""

import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from tqdm import tqdm

from modules.checkpoints import CheckpointManifest, load_checkpoint, manifest_digest, save_checkpoint
from modules.config import LdmConfig, RunConfig, ToeConfig, VaeConfig, resolve_device
from modules.degrade import (QualityBand, band_histogram, build_corpus, corpus_digest, degrade_to_band, derive_seed,
                             make_bands, save_corpus)
from modules.errors import BandUnreachableError, DataError, FingerprintMismatchError, MissingPrerequisiteError
from modules.fingerprint import (DatasetFingerprint, SlicePack, extract_fingerprint, postprocess, preprocess,
                                preprocess_dataset)
from modules.ldm import ConditionalLDM, NoiseSchedule, QCModel, sample_pgt_batch, train_ldm
from modules.manifold import SegVAE, train_vae_gan
from modules.metrics import METRICS, QCReport, ScorePair, aggregate_subject, rank_models
from modules.phantoms import generate_phantoms, write_synthetic_model_outputs
from modules.toe import TeamOfExperts
from modules.volume_io import (VolumePair, discover_dataset, find_volume, load_dataset, load_label_volume,
                               load_volume_pair, save_label_volume, split_subjects)

logger = logging.getLogger(__name__)

# band index reserved for the initial-noise stream of pGT sampling
NOISE_STREAM = -1

SYNTHETIC_MODELS: Dict[str, Optional[QualityBand]] = {
    "gt_copy": None,
    "light": QualityBand(0.75, 0.95, closed=True),
    "heavy": QualityBand(0.10, 0.25),
}


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def _metric_list(metric: Optional[str]) -> List[str]:
    if metric is None or metric == "all":
        return list(METRICS)
    if metric not in METRICS:
        raise ValueError(f"unknown metric: {metric}")
    return [metric]


class QCPipeline:
    """
    One dataset's QC workspace: fingerprint, checkpoints, corpus and reports

    Args:
        config: Validated RunConfig
        force: Accept fingerprint mismatches with a warning
        show_progress: Show tqdm bars during training
    """

    def __init__(self, config: RunConfig, force: bool = False, show_progress: bool = True):
        self.config = config
        self.force = force
        self.show_progress = show_progress
        self.device = resolve_device(config.device)
        self._model: Optional[QCModel] = None
        self._ldm_manifest: Optional[CheckpointManifest] = None

    # -- workspace layout --------------------------------------------------

    @property
    def workspace(self) -> Path:
        return self.config.workspace

    @property
    def fingerprint_path(self) -> Path:
        return self.workspace / "fingerprint.json"

    @property
    def split_path(self) -> Path:
        return self.workspace / "split.json"

    @property
    def vae_dir(self) -> Path:
        return self.workspace / "vae"

    @property
    def ldm_dir(self) -> Path:
        return self.workspace / "ldm"

    @property
    def corpus_dir(self) -> Path:
        return self.workspace / "corpus" / "train"

    def _provenance(self, command: str, **extra) -> dict:
        return {"command": command, "seed": self.config.seed, "config_digest": self.config.digest(), **extra}

    def load_fingerprint(self) -> DatasetFingerprint:
        if not self.fingerprint_path.exists():
            raise MissingPrerequisiteError(f"no fingerprint at {self.fingerprint_path}; run `nnqc fingerprint` first")
        return DatasetFingerprint.load(self.fingerprint_path)

    def load_split(self) -> Dict[str, List[str]]:
        if not self.split_path.exists():
            raise MissingPrerequisiteError(f"no subject split at {self.split_path}; run `nnqc fingerprint` first")
        return json.loads(self.split_path.read_text(encoding="utf-8"))

    def _preprocess(self, pair: VolumePair, fp: DatasetFingerprint) -> SlicePack:
        overrides = self.config.fingerprint
        return preprocess(pair, fp, overrides.crop_margin, overrides.max_resample_ratio)

    def _train_packs(self, fp: DatasetFingerprint) -> List[SlicePack]:
        self.config.require_paths("dataset_path")
        pairs = load_dataset(self.config.dataset_path, self.load_split()["train"])
        overrides = self.config.fingerprint
        return preprocess_dataset(pairs, fp, overrides.crop_margin, overrides.max_resample_ratio, self.show_progress)

    # -- stage 0: fingerprint ----------------------------------------------

    def cmd_fingerprint(self) -> Path:
        """Split subjects, fingerprint the training subjects and write both to the workspace"""
        cfg = self.config
        cfg.require_paths("dataset_path")
        # Split first; only training subjects are fingerprinted
        subject_ids = list(discover_dataset(cfg.dataset_path))
        train_ids, test_ids = split_subjects(subject_ids, cfg.evaluate.test_fraction, cfg.seed)
        self.split_path.parent.mkdir(parents=True, exist_ok=True)
        split = {"seed": cfg.seed, "test_fraction": cfg.evaluate.test_fraction, "train": train_ids, "test": test_ids}
        self.split_path.write_text(json.dumps(split, indent=2), encoding="utf-8")

        fp = extract_fingerprint(
            load_dataset(cfg.dataset_path, train_ids), cfg.fingerprint.target_size, cfg.fingerprint.orientation
        )
        fp.save(self.fingerprint_path, provenance=self._provenance("fingerprint", n_subjects=len(train_ids)))
        logger.info("Fingerprint %s written to %s (%d train / %d test subjects)",
                    fp.digest()[:12], self.fingerprint_path, len(train_ids), len(test_ids))
        return self.fingerprint_path

    # -- stage 1: VAE-GAN --------------------------------------------------

    def cmd_train_vae(self) -> CheckpointManifest:
        """Train the normative manifold on clean GT slices of the training subjects"""
        cfg = self.config
        fp = self.load_fingerprint()
        # Clean GT slices only
        masks = np.concatenate([pack.masks for pack in self._train_packs(fp)])
        logger.info("Stage 1: %d GT slices of size %s", len(masks), tuple(masks.shape[1:]))
        result = train_vae_gan(masks, fp.num_labels, cfg.vae, cfg.seed, self.device, self.show_progress)
        if result.holdout_dice < 0.95:
            logger.warning("Stage 1 holdout reconstruction Dice %.3f is below 0.95", result.holdout_dice)
        return save_checkpoint(
            self.vae_dir,
            "vae",
            {"vae": result.vae, "discriminator": result.discriminator},
            fp.digest(),
            cfg.model_dump(mode="json"),
            cfg.digest(),
            cfg.seed,
            extras=_json_safe({
                "holdout_dice": result.holdout_dice,
                "first_step_loss": result.first_step_loss,
                "num_slices": int(len(masks)),
                "log": result.log,
            }),
        )

    def _load_vae(self, fp: DatasetFingerprint):
        if not (self.vae_dir / "manifest.json").exists():
            raise MissingPrerequisiteError(f"no stage-1 checkpoint in {self.vae_dir}; run `nnqc train-vae` first")
        manifest, states = load_checkpoint(self.vae_dir, fp.digest(), self.force)
        vae = SegVAE(fp.num_labels + 1, VaeConfig.model_validate(manifest.config_snapshot["vae"]))
        vae.load_state_dict(states["vae"])
        return manifest, vae.eval()

    # -- stage 2: conditional LDM ------------------------------------------

    def cmd_train_ldm(self) -> CheckpointManifest:
        """Build the degraded corpus and train the denoiser plus the positional expert on the frozen VAE"""
        cfg = self.config
        fp = self.load_fingerprint()
        vae_manifest, vae = self._load_vae(fp)
        packs = self._train_packs(fp)

        # Degraded corpus
        corpus = build_corpus(packs, make_bands(cfg.degrade.bands), cfg.seed, cfg.degrade, cfg.workers)
        save_corpus(corpus, self.corpus_dir, provenance=self._provenance("train-ldm", fingerprint_hash=fp.digest()))
        histogram = band_histogram(corpus)
        logger.info("Corpus bands: %s", histogram)

        # Train denoiser and positional expert
        torch.manual_seed(cfg.seed)
        toe = TeamOfExperts(cfg.toe)
        schedule = NoiseSchedule.from_config(cfg.ldm)
        result = train_ldm(vae, corpus, toe, schedule, cfg.ldm, fp.num_labels, cfg.seed, self.device,
                           self.show_progress)
        return save_checkpoint(
            self.ldm_dir,
            "ldm",
            {"denoiser": result.denoiser, "positional": toe.positional, "fusion": toe.fusion},
            fp.digest(),
            cfg.model_dump(mode="json"),
            cfg.digest(),
            cfg.seed,
            parent_digest=manifest_digest(vae_manifest),
            encoder_identity=toe.identity,
            schedule=schedule.to_dict(),
            extras=_json_safe({
                "latent_scale": result.latent_scale,
                "latent_size": fp.target_size[0] // vae.compression_factor,
                "mode": toe.mode,
                "first_step_loss": result.first_step_loss,
                "frozen_digests": result.frozen_digests,
                "corpus_digest": corpus_digest(corpus),
                "band_histogram": histogram,
                "unreachable": len(corpus.unreachable),
                "log": result.log,
            }),
        )

    def load_qc_model(self) -> QCModel:
        """Rebuild the full sampler from both checkpoints, verifying their chain"""
        if self._model is not None:
            return self._model
        fp = self.load_fingerprint()
        vae_manifest, vae = self._load_vae(fp)
        if not (self.ldm_dir / "manifest.json").exists():
            raise MissingPrerequisiteError(f"no stage-2 checkpoint in {self.ldm_dir}; run `nnqc train-ldm` first")
        manifest, states = load_checkpoint(self.ldm_dir, fp.digest(), self.force)
        if manifest.parent_digest != manifest_digest(vae_manifest):
            raise MissingPrerequisiteError(
                f"stage-2 checkpoint in {self.ldm_dir} was trained on a different stage-1 checkpoint; rerun train-ldm"
            )

        # Rebuild networks from the stage-2 snapshot
        snapshot = manifest.config_snapshot
        toe_cfg = ToeConfig.model_validate(snapshot["toe"])
        ldm_cfg = LdmConfig.model_validate(snapshot["ldm"])
        toe = TeamOfExperts(toe_cfg)
        toe.positional.load_state_dict(states["positional"])
        toe.fusion.load_state_dict(states["fusion"])
        if toe.identity != manifest.encoder_identity:
            logger.warning("Vision encoder is %s, checkpoint was trained with %s", toe.identity,
                           manifest.encoder_identity)
        denoiser = ConditionalLDM(manifest.extras["latent_size"], toe_cfg.d_c, ldm_cfg)
        denoiser.load_state_dict(states["denoiser"])

        self._ldm_manifest = manifest
        self._model = QCModel(
            vae=vae.to(self.device),
            toe=toe.to(self.device),
            denoiser=denoiser.to(self.device),
            schedule=NoiseSchedule.from_dict(manifest.schedule),
            num_labels=fp.num_labels,
            latent_scale=float(manifest.extras["latent_scale"]),
            device=self.device,
        ).eval()
        return self._model

    # -- inference ---------------------------------------------------------

    def sample_subject(self, pack: SlicePack, masks: Optional[np.ndarray] = None, steps: Optional[int] = None,
                       desc: str = "Sampling") -> List[np.ndarray]:
        """
        pGT for every slice of a subject, in slice order

        Args:
            pack: Preprocessed subject (images and ratios)
            masks: Candidate slices; pack.masks when None
            steps: DDIM steps; config default when None

        Returns:
            List of (H, W) pGT label grids
        """
        model = self.load_qc_model()
        masks = pack.masks if masks is None else np.asarray(masks)
        steps = steps or self.config.ldm.steps
        batch = self.config.ldm.sample_batch_size
        # Noise seeds depend on the slice, not on the batch it lands in
        seeds = [derive_seed(self.config.seed, pack.subject_id, k, NOISE_STREAM) for k in range(len(pack))]
        out: List[np.ndarray] = []
        starts = range(0, len(pack), batch)
        for start in tqdm(starts, desc=desc, leave=False, disable=not self.show_progress):
            end = start + batch
            out.extend(sample_pgt_batch(masks[start:end], pack.images[start:end], pack.ratios[start:end],
                                        seeds[start:end], model, steps))
        return out

    def _score_pairs(self, subject_id: str, scores, metrics: Sequence[str], **tags) -> List[ScorePair]:
        return [
            ScorePair(
                subject_id=subject_id,
                metric=metric,
                pseudo_score=scores.pseudo[metric],
                real_score=scores.real.get(metric),
                flagged=scores.flagged[metric],
                **tags,
            )
            for metric in metrics
        ]

    def cmd_qc(self, image: Path, mask: Optional[Path] = None, gt: Optional[Path] = None,
               metric: Optional[str] = None, steps: Optional[int] = None, out: Optional[Path] = None,
               preview: bool = False) -> QCReport:
        """
        Score one segmentation against its pGT

        Args:
            image: NIfTI image
            mask: Segmentation under QC; None is treated as an empty segmentation
            gt: Optional ground truth adding real scores to the report
            metric: 'dsc', 'hd95' or 'all'
            out: Output directory; <workspace>/qc/<subject> by default
            preview: Also write a PNG of the mid slice

        Returns:
            QCReport for the subject
        """
        metrics = _metric_list(metric)
        fp = self.load_fingerprint()
        self.load_qc_model()
        pair = load_volume_pair(image, mask)
        gt_mask = None
        if gt is not None:
            gt_mask, _ = load_label_volume(gt)
            if gt_mask.shape != pair.mask.shape:
                raise DataError(f"ground truth {gt_mask.shape} does not match the volume {pair.mask.shape}")

        # Sample pGT and score on the original grid
        pack = self._preprocess(pair, fp)
        pgt_slices = self.sample_subject(pack, steps=steps)
        scores = aggregate_subject(pgt_slices, pack.meta, pair.mask, gt_mask, metrics,
                                   self.config.evaluate.hd95_sentinel)

        report = QCReport(
            pairs=self._score_pairs(pair.subject_id, scores, metrics),
            provenance=self._provenance(
                "qc",
                steps=steps or self.config.ldm.steps,
                subject_id=pair.subject_id,
                fingerprint_hash=fp.digest(),
                ldm_manifest=manifest_digest(self._ldm_manifest),
            ),
        )
        # Save report, pGT and preview
        out_dir = Path(out) if out else self.workspace / "qc" / pair.subject_id
        report.save(out_dir, stem=f"{pair.subject_id}_qc")
        save_label_volume(scores.pgt, pair.affine, out_dir / f"{pair.subject_id}_pgt.nii.gz")
        if preview:
            self.write_preview(pack, pgt_slices, out_dir / f"{pair.subject_id}_preview.png")
        for metric_name in metrics:
            logger.info("%s: pseudo %s = %.4f%s", pair.subject_id, metric_name, scores.pseudo[metric_name],
                        f" (real {scores.real[metric_name]:.4f})" if metric_name in scores.real else "")
        return report

    def write_preview(self, pack: SlicePack, pgt_slices: Sequence[np.ndarray], path: Path) -> Path:
        """Mid slice as three panels side by side: image, candidate, pGT"""
        k = len(pack) // 2
        scale = 255.0 / max(1, int(self._model.num_labels if self._model else 1))
        panels = [
            pack.images[k] * 255.0,
            pack.masks[k].astype(np.float32) * scale,
            np.asarray(pgt_slices[k], dtype=np.float32) * scale,
        ]
        strip = np.concatenate([np.clip(p, 0, 255).astype(np.uint8) for p in panels], axis=1)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(strip).save(path)
        return path

    # -- evaluation --------------------------------------------------------

    def _degrade_pack(self, pack: SlicePack, band: QualityBand, band_index: int) -> Tuple[np.ndarray, List[dict]]:
        """Degrade every non-empty slice into the band; unreachable slices are returned, not filled"""
        degraded = np.zeros_like(pack.masks)
        unreachable = []
        for k, (image, gt, ratio) in enumerate(pack):
            # Empty GT slices stay empty
            if not gt.any():
                continue
            seed = derive_seed(self.config.seed, pack.subject_id, k, band_index)
            try:
                degraded[k] = degrade_to_band(image, gt, ratio, band, seed, self.config.degrade, pack.subject_id,
                                              k).degraded_mask
            except BandUnreachableError as e:
                unreachable.append({"subject_id": pack.subject_id, "slice_index": k, "band": band.label,
                                    "seed": seed, "best_dsc": _json_safe(e.best_dsc), "reason": str(e)})
        return degraded, unreachable

    def _evaluation_pairs(self, fp: DatasetFingerprint, dataset: Optional[Path]) -> List[VolumePair]:
        if dataset is None:
            self.config.require_paths("dataset_path")
            return load_dataset(self.config.dataset_path, self.load_split()["test"])
        pairs = load_dataset(dataset)
        other = extract_fingerprint(pairs, fp.target_size, fp.canonical_orientation)
        if other.digest() != fp.digest():
            message = f"{dataset} has fingerprint {other.digest()[:12]}, the model was trained on {fp.digest()[:12]}"
            if not self.force:
                raise FingerprintMismatchError(message + " (use --force to evaluate anyway)")
            logger.warning("%s; continuing because of --force", message)
        return pairs

    def cmd_evaluate(self, steps: Optional[int] = None, metric: Optional[str] = None,
                     dataset: Optional[Path] = None, out: Optional[Path] = None) -> QCReport:
        """
        Degrade held-out GTs into every band and compare pseudo scores with real scores

        Args:
            steps: DDIM steps
            metric: 'dsc', 'hd95' or 'all'
            dataset: Evaluate on every subject of another dataset instead of the test split
            out: Report directory; <workspace>/reports by default

        Returns:
            QCReport with overall and per-band r / MAE
        """
        metrics = _metric_list(metric)
        fp = self.load_fingerprint()
        self.load_qc_model()
        bands = make_bands(self.config.degrade.bands)
        pairs = self._evaluation_pairs(fp, dataset)

        report_pairs: List[ScorePair] = []
        unreachable: List[dict] = []
        # Degrade each test subject into every band, then score
        for pair in tqdm(pairs, desc="Evaluating", disable=not self.show_progress):
            pack = self._preprocess(pair, fp)
            for b, band in enumerate(bands):
                degraded, missed = self._degrade_pack(pack, band, b)
                unreachable.extend(missed)
                skipped = [m["slice_index"] for m in missed]
                if skipped and len(skipped) == int(np.count_nonzero(pack.masks.any(axis=(1, 2)))):
                    logger.warning("%s: no slice reached band %s; subject skipped for this band",
                                   pair.subject_id, band.label)
                    continue
                reference = pair.mask
                pgt_slices = self.sample_subject(pack, degraded, steps, desc=f"{pair.subject_id} {band.label}")
                if skipped:
                    # unreachable slices are dropped from candidate, pGT and GT alike
                    logger.warning("%s: %d slice(s) could not reach band %s and are excluded",
                                   pair.subject_id, len(skipped), band.label)
                    kept_gt = pack.masks.copy()
                    kept_gt[skipped] = 0
                    reference = postprocess(list(kept_gt), pack.meta)
                    pgt_slices = np.array(pgt_slices, copy=True)
                    pgt_slices[skipped] = 0
                candidate = postprocess(list(degraded), pack.meta)
                scores = aggregate_subject(pgt_slices, pack.meta, candidate, reference, metrics,
                                           self.config.evaluate.hd95_sentinel)
                report_pairs.extend(self._score_pairs(pair.subject_id, scores, metrics, band=band.label))

        report = QCReport(
            pairs=report_pairs,
            provenance=self._provenance(
                "evaluate",
                steps=steps or self.config.ldm.steps,
                dataset=str(dataset or self.config.dataset_path),
                subjects=[p.subject_id for p in pairs],
                fingerprint_hash=fp.digest(),
                ldm_manifest=manifest_digest(self._ldm_manifest),
                unreachable=unreachable,
            ),
        )
        report.save(Path(out) if out else self.workspace / "reports", stem="evaluate")
        for name, entry in report.summary().items():
            logger.info("%s: r=%s MAE=%s over %d pairs", name, entry["pearson_r"], entry["mae"], entry["n"])
        return report

    def cmd_rank(self, model_dirs: Sequence[Path], steps: Optional[int] = None, metric: Optional[str] = "dsc",
                 out: Optional[Path] = None) -> QCReport:
        """
        Rank segmentation models by mean pseudo score and compare with the GT ranking

        Args:
            model_dirs: One directory per model holding <subject_id>.nii.gz for each test subject
            steps: DDIM steps
            metric: 'dsc', 'hd95' or 'all'
            out: Report directory; <workspace>/reports by default

        Returns:
            QCReport with per-subject score pairs and one RankingResult per metric
        """
        if len(model_dirs) < 1:
            raise ValueError("at least one model directory is required")
        metrics = _metric_list(metric)
        fp = self.load_fingerprint()
        self.load_qc_model()
        self.config.require_paths("dataset_path")
        pairs = load_dataset(self.config.dataset_path, self.load_split()["test"])

        # Scores per metric and model
        pseudo = {m: {} for m in metrics}
        real = {m: {} for m in metrics}
        report_pairs: List[ScorePair] = []
        for model_dir in model_dirs:
            model_dir = Path(model_dir)
            name = model_dir.name
            if not model_dir.is_dir():
                raise DataError(f"model directory not found: {model_dir}")
            for pair in tqdm(pairs, desc=f"Ranking {name}", disable=not self.show_progress):
                seg_path = find_volume(model_dir, pair.subject_id)
                if seg_path is None:
                    raise DataError(f"{model_dir} has no segmentation for {pair.subject_id}")
                seg, _ = load_label_volume(seg_path)
                candidate = VolumePair(pair.image, seg, pair.spacing, pair.affine, pair.subject_id)
                pack = self._preprocess(candidate, fp)
                scores = aggregate_subject(self.sample_subject(pack, steps=steps), pack.meta, candidate.mask,
                                           pair.mask, metrics, self.config.evaluate.hd95_sentinel)
                for m in metrics:
                    pseudo[m].setdefault(name, []).append(scores.pseudo[m])
                    real[m].setdefault(name, []).append(scores.real[m])
                report_pairs.extend(self._score_pairs(pair.subject_id, scores, metrics, model=name))

        report = QCReport(
            pairs=report_pairs,
            rankings=[rank_models(pseudo[m], real[m], m) for m in metrics],
            provenance=self._provenance(
                "rank",
                steps=steps or self.config.ldm.steps,
                models=[str(d) for d in model_dirs],
                fingerprint_hash=fp.digest(),
                ldm_manifest=manifest_digest(self._ldm_manifest),
            ),
        )
        report.save(Path(out) if out else self.workspace / "reports", stem="rank")
        for ranking in report.rankings:
            logger.info("%s ranking: pseudo %s vs real %s, tau=%.3f", ranking.metric, ranking.pseudo_ranking,
                        ranking.real_ranking, ranking.tau)
        return report

    # -- data --------------------------------------------------------------

    def cmd_phantom_gen(self, out: Optional[Path] = None, with_models: bool = False) -> Path:
        """Write the phantom dataset, optionally with synthetic model outputs under <out>/models"""
        out_dir = Path(out) if out else Path(self.config.dataset_path)
        generate_phantoms(self.config.phantom, out_dir)
        if with_models:
            subject_ids = list(discover_dataset(out_dir))
            write_synthetic_model_outputs(out_dir, out_dir / "models", subject_ids, SYNTHETIC_MODELS,
                                          self.config.seed, self.config.degrade)
        return out_dir
