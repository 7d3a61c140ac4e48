"""
Comprehensive Test Suite for nnQC
Tests all major components with tiny CPU-sized configurations
"""

import unittest
import sys
import os
import json
import tempfile
from itertools import combinations, permutations, product
from pathlib import Path
from unittest import mock

import nibabel as nib
import numpy as np
import pandas as pd
import torch
import yaml
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Add modules to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from app import COMMANDS, build_parser, main
from modules.checkpoints import load_checkpoint, manifest_digest, read_manifest, save_checkpoint, state_digest
from modules.config import (DegradeConfig, EvaluateConfig, FingerprintOverrides, LdmConfig, PhantomSpec, RunConfig,
                            ToeConfig, VaeConfig, load_config)
from modules.degrade import (QualityBand, add_false_positives, band_for, build_corpus, collapse_classes,
                             corpus_digest, degrade_to_band, derive_seed, draw_operators, erode_iterative, load_corpus,
                             make_bands, punch_holes, save_corpus, swap_classes)
from modules.errors import (BandUnreachableError, ChecksumError, ConfigError, DataError, FingerprintMismatchError,
                            MissingPrerequisiteError)
from modules.fingerprint import (DatasetFingerprint, _invert_transform, extract_fingerprint, postprocess, preprocess,
                                 preprocess_dataset, slice_ratios)
from modules.ldm import (ConditionalLDM, NoiseSchedule, QCModel, downsample_mask, forward_noise, ldm_loss,
                         sample_pgt, sample_pgt_batch, train_ldm)
from modules.manifold import (PatchDiscriminator, PerceptualLoss, SegVAE, generalized_dice_loss, kld_loss, one_hot,
                              reconstruct, reparameterize, train_vae_gan, vae_loss)
from modules.metrics import (REPORT_COLUMNS, QCReport, ScorePair, dsc, hd95, hd95_flagged, kendall_tau, mae,
                             pearson_r, rank_models)
from modules.phantoms import generate_phantoms, phantom_volume
from modules.pipeline import QCPipeline
from modules.toe import CrossAttentionFusion, PositionalExpert, TeamOfExperts, VisionExpert
from modules.volume_io import VolumePair, discover_dataset, load_label_volume, load_volume_pair, split_subjects


def tiny_vae_config(**overrides) -> VaeConfig:
    values = dict(compression_factor=4, channels=(8, 16, 32), norm_groups=8, disc_channels=8, disc_layers=2,
                  epochs=2, batch_size=8, lambda_perc=0.1)
    values.update(overrides)
    return VaeConfig(**values)


def tiny_toe_config(**overrides) -> ToeConfig:
    values = dict(d_e=16, d_c=16, n_heads=4, e1_hidden=(16,), vision_encoder="random_cnn", vision_pretrained=False,
                  random_cnn_channels=8)
    values.update(overrides)
    return ToeConfig(**values)


def tiny_ldm_config(**overrides) -> LdmConfig:
    values = dict(t_train=10, steps=2, unet_channels=(32, 32), epochs=1, batch_size=8, sample_batch_size=8)
    values.update(overrides)
    return LdmConfig(**values)


def tiny_run_config(root: Path, name: str = "tiny") -> RunConfig:
    return RunConfig(
        dataset_name=name,
        dataset_path=root / "data",
        output_dir=root / "runs",
        seed=0,
        device="cpu",
        fingerprint=FingerprintOverrides(target_size=(32, 32), crop_margin=3.0),
        vae=tiny_vae_config(),
        toe=tiny_toe_config(),
        ldm=tiny_ldm_config(),
        degrade=DegradeConfig(max_retries=20),
        evaluate=EvaluateConfig(test_fraction=0.4),
        phantom=PhantomSpec(n_subjects=5, grid_size=32, slice_range=(4, 6), n_classes=2),
    )


def phantom_pair(index: int = 0, affine_signs=(1.0, 1.0, 1.0)) -> VolumePair:
    spec = PhantomSpec(n_subjects=3, grid_size=32, slice_range=(8, 8), n_classes=2)
    image, mask, affine = phantom_volume(spec, index)
    affine = affine.copy()
    for axis, sign in enumerate(affine_signs):
        affine[axis, axis] *= sign
    return VolumePair(image=image, mask=mask, spacing=spec.spacing, affine=affine, subject_id=f"p{index}")


def two_class_disk(size: int = 32) -> np.ndarray:
    rows, cols = np.ogrid[:size, :size]
    r2 = (rows - size // 2) ** 2 + (cols - size // 2) ** 2
    mask = np.zeros((size, size), dtype=np.int16)
    mask[r2 <= 10 ** 2] = 1
    mask[r2 <= 4 ** 2] = 2
    return mask


def tiny_qc_model(num_labels: int = 2) -> QCModel:
    torch.manual_seed(0)
    toe_cfg = tiny_toe_config()
    return QCModel(
        vae=SegVAE(num_labels + 1, tiny_vae_config()),
        toe=TeamOfExperts(toe_cfg),
        denoiser=ConditionalLDM(8, toe_cfg.d_c, tiny_ldm_config()),
        schedule=NoiseSchedule(10),
        num_labels=num_labels,
        latent_scale=1.0,
    )


class TestMetrics(unittest.TestCase):
    """Test overlap, distance and agreement statistics"""

    def setUp(self):
        """Set up test fixtures"""
        self.rng = np.random.default_rng(0)

    def test_01_dsc_basic_cases(self):
        """Test 1: DSC of identical, disjoint and empty masks"""
        a = np.zeros((4, 4), dtype=int)
        a[:2] = 1
        b = np.zeros((4, 4), dtype=int)
        b[2:] = 1
        self.assertEqual(dsc(a, a), 1.0)
        self.assertEqual(dsc(a, b), 0.0)
        self.assertEqual(dsc(np.zeros((4, 4)), np.zeros((4, 4))), 1.0)
        with self.assertRaises(ValueError):
            dsc(a, np.zeros((3, 3)))

    def test_02_dsc_matches_oracle(self):
        """Test 2: DSC equals the direct definition on random binary 4x4 masks"""
        for _ in range(500):
            a = self.rng.integers(0, 2, (4, 4))
            b = self.rng.integers(0, 2, (4, 4))
            total = a.sum() + b.sum()
            expected = 1.0 if total == 0 else 2.0 * np.sum(a * b) / total
            self.assertAlmostEqual(dsc(a, b), expected, places=12)

    def test_03_hd95_single_pixels_and_spacing(self):
        """Test 3: HD95 between two pixels follows the voxel spacing"""
        a = np.zeros((5, 5), dtype=int)
        b = np.zeros((5, 5), dtype=int)
        a[0, 0] = 1
        b[0, 3] = 1
        self.assertAlmostEqual(hd95(a, b), 3.0)
        self.assertAlmostEqual(hd95(a, b, spacing=(1.0, 2.0)), 6.0)

    def test_04_hd95_degenerate_cases(self):
        """Test 4: Two empty masks give 0; one empty mask gives the flagged sentinel"""
        empty = np.zeros((5, 5), dtype=int)
        a = empty.copy()
        a[2, 2] = 1
        self.assertEqual(hd95_flagged(empty, empty), (0.0, False))
        value, flagged = hd95_flagged(a, empty)
        self.assertTrue(flagged)
        self.assertAlmostEqual(value, np.sqrt(50.0))
        self.assertEqual(hd95_flagged(a, empty, sentinel=99.0), (99.0, True))

    def test_05_hd95_matches_oracle(self):
        """Test 5: HD95 equals a brute-force boundary-distance oracle"""

        def edge(mask):
            pixels = []
            for r, c in zip(*np.nonzero(mask)):
                for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    rr, cc = r + dr, c + dc
                    if not (0 <= rr < 4 and 0 <= cc < 4) or not mask[rr, cc]:
                        pixels.append((r, c))
                        break
            return np.array(pixels, dtype=float)

        for _ in range(300):
            a = self.rng.integers(0, 2, (4, 4))
            b = self.rng.integers(0, 2, (4, 4))
            if not a.any() or not b.any():
                continue
            ea, eb = edge(a), edge(b)
            d = np.sqrt(((ea[:, None, :] - eb[None, :, :]) ** 2).sum(-1))
            expected = np.percentile(np.concatenate([d.min(axis=1), d.min(axis=0)]), 95)
            self.assertAlmostEqual(hd95(a, b), expected, delta=1e-9)

    def test_06_correlation_oracles(self):
        """Test 6: pearson_r and mae match their direct definitions"""
        for _ in range(200):
            x = self.rng.normal(size=10)
            y = self.rng.normal(size=10)
            xc, yc = x - x.mean(), y - y.mean()
            expected = (xc * yc).sum() / np.sqrt((xc ** 2).sum() * (yc ** 2).sum())
            self.assertAlmostEqual(pearson_r(x, y), expected, delta=1e-9)
            self.assertAlmostEqual(mae(x, y), np.abs(x - y).mean(), delta=1e-12)
        with self.assertRaises(ValueError):
            pearson_r([1.0, 1.0, 1.0], [0.0, 1.0, 2.0])
        with self.assertRaises(ValueError):
            pearson_r([1.0], [2.0])

    def test_07_metric_invariances(self):
        """Test 7: DSC ignores a shared relabelling; pearson_r ignores affine rescaling"""
        for _ in range(50):
            a = self.rng.integers(0, 4, (8, 8))
            b = self.rng.integers(0, 4, (8, 8))
            permutation = np.concatenate([[0], 1 + self.rng.permutation(3)])
            self.assertAlmostEqual(dsc(permutation[a], permutation[b]), dsc(a, b), places=12)
        x = self.rng.normal(size=12)
        y = x + self.rng.normal(scale=0.5, size=12)
        r = pearson_r(x, y)
        self.assertAlmostEqual(pearson_r(3.0 * x + 7.0, y), r, delta=1e-12)
        self.assertAlmostEqual(pearson_r(x, 0.2 * y - 1.0), r, delta=1e-12)
        self.assertAlmostEqual(pearson_r(-2.0 * x, y), -r, delta=1e-12)

    def test_08_kendall_tau(self):
        """Test 8: Kendall tau is 0.8 for one adjacent swap among five and matches the pair oracle"""
        self.assertEqual(kendall_tau(list("ABCDE"), list("ABDCE")), 0.8)
        self.assertEqual(kendall_tau(["A"], ["A"]), 1.0)
        self.assertEqual(kendall_tau(list("ABC"), list("CBA")), -1.0)
        items = list("ABCDEFG")
        for _ in range(100):
            other = list(self.rng.permutation(items))
            pos = {m: i for i, m in enumerate(other)}
            signs = [np.sign(j - i) * np.sign(pos[items[j]] - pos[items[i]]) for i, j in combinations(range(7), 2)]
            self.assertAlmostEqual(kendall_tau(items, other), sum(signs) / 21, delta=1e-12)
        with self.assertRaises(ValueError):
            kendall_tau(["A", "B"], ["A", "C"])

    def test_09_rank_models_with_swap_test(self):
        """Test 9: Rankings, tau and the t-test on a rank swap"""
        pseudo = {"A": [0.9, 0.8], "B": [0.5, 0.6], "C": [0.7, 0.7]}
        real = {"A": [0.9, 0.85], "B": [0.72, 0.74], "C": [0.6, 0.65]}
        result = rank_models(pseudo, real, "dsc")
        self.assertEqual(result.pseudo_ranking, ["A", "C", "B"])
        self.assertEqual(result.real_ranking, ["A", "B", "C"])
        self.assertAlmostEqual(result.tau, 1.0 / 3.0)
        self.assertEqual(len(result.swaps), 1)
        self.assertEqual((result.swaps[0].model_a, result.swaps[0].model_b), ("B", "C"))
        self.assertIsNotNone(result.swaps[0].p_value)
        self.assertEqual(result.ttest_variant, "unpaired-two-sided")

        distances = rank_models({"A": [1.0], "B": [3.0]}, {"A": [2.0], "B": [4.0]}, "hd95")
        self.assertEqual(distances.pseudo_ranking, ["A", "B"])
        self.assertEqual(distances.tau, 1.0)

    def test_10_report_summary_and_files(self):
        """Test 10: QCReport per-band agreement and CSV/JSON output"""
        pairs = []
        for i, band in enumerate(["[0.05,0.10)", "[0.75,0.95]"]):
            for j in range(3):
                pseudo = 0.1 + 0.3 * i + 0.05 * j
                pairs.append(ScorePair(subject_id=f"s{j}", metric="dsc", pseudo_score=pseudo,
                                       real_score=pseudo + 0.02, band=band))
        report = QCReport(pairs=pairs, provenance={"seed": 0})
        summary = report.summary()
        self.assertAlmostEqual(summary["dsc"]["mae"], 0.02)
        self.assertAlmostEqual(summary["dsc"]["pearson_r"], 1.0)
        self.assertEqual(set(summary["dsc"]["bands"]), {"[0.05,0.10)", "[0.75,0.95]"})

        with tempfile.TemporaryDirectory() as tmp:
            csv_path, json_path = report.save(Path(tmp), stem="unit")
            frame = pd.read_csv(csv_path)
            self.assertEqual(list(frame.columns), REPORT_COLUMNS)
            self.assertEqual(len(frame), 6)
            payload = json.loads(json_path.read_text())
            self.assertEqual(payload["provenance"]["seed"], 0)

        pseudo_only = QCReport(pairs=[ScorePair(subject_id="x", metric="hd95", pseudo_score=3.0)])
        self.assertIsNone(pseudo_only.summary()["hd95"]["mae"])


class TestDegrade(unittest.TestCase):
    """Test quality bands, corruption operators and the corpus builder"""

    def setUp(self):
        """Set up test fixtures"""
        self.mask = two_class_disk()

    def test_11_band_membership(self):
        """Test 11: Half-open bands with a closed top band"""
        bands = make_bands()
        self.assertEqual(len(bands), 5)
        self.assertTrue(bands[-1].closed)
        self.assertEqual(band_for(0.10, bands).label, "[0.10,0.25)")
        self.assertEqual(band_for(0.05, bands).label, "[0.05,0.10)")
        self.assertEqual(band_for(0.95, bands), bands[-1])
        self.assertIsNone(band_for(0.96, bands))
        self.assertIsNone(band_for(0.01, bands))
        with self.assertRaises(ValueError):
            QualityBand(0.5, 0.4)

    def test_12_removal_operators(self):
        """Test 12: Holes and erosion only remove foreground"""
        holes = punch_holes(self.mask, 2, (2.0, 3.0), seed=1)
        self.assertLess(np.count_nonzero(holes), np.count_nonzero(self.mask))
        self.assertTrue(np.all((holes == 0) | (holes == self.mask)))
        eroded = erode_iterative(self.mask, 1)
        self.assertLess(np.count_nonzero(eroded), np.count_nonzero(self.mask))
        self.assertTrue(np.array_equal(erode_iterative(self.mask, 0), self.mask))
        # the seed picks the square or the cross element; the cross removes less
        outcomes = {np.count_nonzero(erode_iterative(self.mask, 2, seed=s)) for s in range(20)}
        self.assertEqual(len(outcomes), 2)
        self.assertTrue(np.array_equal(erode_iterative(self.mask, 2, seed=4), erode_iterative(self.mask, 2, seed=4)))
        with self.assertRaises(ValueError):
            punch_holes(self.mask, -1, (1.0, 2.0), seed=0)

    def test_13_label_operators(self):
        """Test 13: False positives, collapse and swap"""
        added = add_false_positives(self.mask, 3, (2.0, 4.0), seed=2)
        self.assertTrue(np.array_equal(added[self.mask > 0], self.mask[self.mask > 0]))
        self.assertGreater(np.count_nonzero(added), np.count_nonzero(self.mask))
        self.assertEqual(set(np.unique(collapse_classes(self.mask))), {0, 1})
        swapped = swap_classes(self.mask, seed=3)
        expected = np.where(self.mask == 1, 2, np.where(self.mask == 2, 1, 0))
        self.assertTrue(np.array_equal(swapped, expected))
        single = (self.mask > 0).astype(np.int16)
        self.assertTrue(np.array_equal(swap_classes(single, seed=3), single))

    def test_14_degrade_to_band(self):
        """Test 14: Degradation lands inside the requested band and is seed-deterministic"""
        image = np.zeros(self.mask.shape, dtype=np.float32)
        reached = 0
        for b, band in enumerate(make_bands()):
            try:
                pair = degrade_to_band(image, self.mask, 0.5, band, seed=11 + b)
            except BandUnreachableError:
                continue
            reached += 1
            self.assertTrue(band.contains(pair.achieved_dsc))
            self.assertAlmostEqual(dsc(pair.degraded_mask, self.mask), pair.achieved_dsc)
            again = degrade_to_band(image, self.mask, 0.5, band, seed=11 + b)
            self.assertTrue(np.array_equal(pair.degraded_mask, again.degraded_mask))
        self.assertGreaterEqual(reached, 4)

    def test_15_band_yield_on_phantom_slices(self):
        """Test 15: At least 95% of non-empty phantom slices reach every band"""
        spec = PhantomSpec(n_subjects=2, grid_size=64, slice_range=(8, 8), n_classes=2)
        slices = []
        for index in range(spec.n_subjects):
            _, mask, _ = phantom_volume(spec, index)
            slices.extend((f"p{index}", k, mask[..., k]) for k in range(mask.shape[2]) if mask[..., k].any())
        cfg = DegradeConfig()
        for b, band in enumerate(make_bands()):
            reached = 0
            for subject_id, k, gt in slices:
                try:
                    pair = degrade_to_band(gt.astype(np.float32), gt, 0.5, band, derive_seed(0, subject_id, k, b),
                                           cfg, subject_id, k)
                except BandUnreachableError:
                    continue
                self.assertTrue(band.contains(pair.achieved_dsc))
                reached += 1
            self.assertGreaterEqual(reached / len(slices), 0.95, f"band {band.label}")

    def test_16_operator_draw_scales_with_strength(self):
        """Test 16: A fixed draw barely corrupts at minimum strength and wipes the mask at maximum"""
        cfg = DegradeConfig(ops_per_trial=(1, 1), strength_range=(0.05, 40.0))
        rng = np.random.default_rng(0)
        draw = draw_operators(self.mask, cfg, rng)
        while draw.names != ["holes"]:
            draw = draw_operators(self.mask, cfg, rng)
        weak = dsc(draw.apply(self.mask, cfg.strength_range[0]), self.mask)
        strong = dsc(draw.apply(self.mask, cfg.strength_range[1]), self.mask)
        self.assertGreater(weak, 0.9)
        self.assertLess(strong, 0.1)
        self.assertTrue(np.array_equal(draw.apply(self.mask, 1.0), draw.apply(self.mask, 1.0)))

    def test_17_empty_ground_truth_is_unreachable(self):
        """Test 17: An empty GT slice cannot be degraded into a band"""
        empty = np.zeros((16, 16), dtype=np.int16)
        with self.assertRaises(BandUnreachableError) as ctx:
            degrade_to_band(empty.astype(np.float32), empty, 0.0, make_bands()[0], seed=0)
        self.assertEqual(ctx.exception.exit_code, 5)

    def test_18_corpus_determinism_and_persistence(self):
        """Test 18: Corpus digests are stable across runs, thread counts and a save/load cycle"""
        pair = phantom_pair(0)
        fp = extract_fingerprint([pair], target_size=(32, 32))
        packs = [preprocess(pair, fp, crop_margin=3.0)]
        bands = make_bands()[2:4]
        first = build_corpus(packs, bands, seed=3)
        second = build_corpus(packs, bands, seed=3, workers=2)
        self.assertGreater(len(first), 0)
        self.assertEqual(corpus_digest(first), corpus_digest(second))
        self.assertTrue(all(p.band.contains(p.achieved_dsc) for p in first))
        self.assertNotEqual(derive_seed(3, "p0", 0, 0), derive_seed(3, "p0", 0, 1))
        with tempfile.TemporaryDirectory() as tmp:
            save_corpus(first, Path(tmp), provenance={"seed": 3})
            self.assertEqual(corpus_digest(load_corpus(Path(tmp))), corpus_digest(first))


class TestFingerprint(unittest.TestCase):
    """Test dataset fingerprinting and the pre/post-processing round trip"""

    def setUp(self):
        """Set up test fixtures"""
        self.pair = phantom_pair(0)
        self.fp = extract_fingerprint([self.pair, phantom_pair(1)], target_size=(32, 32))

    def test_19_fingerprint_fields(self):
        """Test 19: Fingerprint statistics of the phantoms"""
        self.assertEqual(self.fp.num_labels, 2)
        self.assertEqual(self.fp.canonical_orientation, "RAS")
        self.assertEqual(self.fp.median_spacing, (1.0, 1.0, 2.0))
        self.assertLess(self.fp.intensity_lo, self.fp.intensity_hi)
        self.assertEqual(self.fp.axial_axis, 2)

    def test_20_preprocess_shapes_and_ranges(self):
        """Test 20: Standardized slices have the target size, [0,1] images and valid labels"""
        pack = preprocess(self.pair, self.fp, crop_margin=3.0)
        self.assertEqual(pack.images.shape, (8, 32, 32))
        self.assertEqual(pack.masks.shape, (8, 32, 32))
        self.assertGreaterEqual(pack.images.min(), 0.0)
        self.assertLessEqual(pack.images.max(), 1.0)
        self.assertTrue(set(np.unique(pack.masks)) <= {0, 1, 2})
        self.assertEqual(pack.ratios[0], 0.0)
        self.assertEqual(pack.ratios[-1], 1.0)

    def test_21_postprocess_inverts_preprocess(self):
        """Test 21: Masks map back exactly onto the source grid, including a flipped orientation"""
        for signs in ((1.0, 1.0, 1.0), (-1.0, 1.0, 1.0)):
            pair = phantom_pair(0, signs)
            pack = preprocess(pair, self.fp, crop_margin=3.0)
            restored = postprocess(list(pack.masks), pack.meta)
            self.assertEqual(restored.shape, pair.mask.shape)
            self.assertTrue(np.array_equal(restored, pair.mask))
        with self.assertRaises(ValueError):
            postprocess(list(pack.masks[:-1]), pack.meta)

    def test_22_round_trip_with_resampling(self):
        """Test 22: A subject off the median spacing maps back with Dice >= 0.9"""
        spec = PhantomSpec(n_subjects=3, grid_size=64, slice_range=(8, 8), n_classes=2)
        reference = []
        for index in range(2):
            image, mask, affine = phantom_volume(spec, index)
            reference.append(VolumePair(image=image, mask=mask, spacing=spec.spacing, affine=affine,
                                        subject_id=f"r{index}"))
        fp = extract_fingerprint(reference, target_size=(64, 64))
        self.assertEqual(fp.median_spacing, (1.0, 1.0, 2.0))

        image, mask, _ = phantom_volume(spec, 2)
        spacing = (0.8, 0.8, 2.5)
        pair = VolumePair(image=image, mask=mask, spacing=spacing, affine=np.diag([*spacing, 1.0]),
                          subject_id="off_grid")
        pack = preprocess(pair, fp, crop_margin=3.0)
        self.assertEqual(pack.meta.n_slices, 10)
        restored = postprocess(list(pack.masks), pack.meta)
        self.assertEqual(restored.shape, pair.mask.shape)
        self.assertGreaterEqual(dsc(restored, pair.mask), 0.9)

    def test_23_orientation_inverse_and_batch_preprocessing(self):
        """Test 23: Every axis permutation and flip is undone; batch preprocessing keeps subject order"""
        volume = np.arange(24).reshape(2, 3, 4)
        for order in permutations(range(3)):
            for flips in product((1, -1), repeat=3):
                transform = np.column_stack([order, flips]).astype(np.float64)
                moved = nib.orientations.apply_orientation(volume, transform)
                back = nib.orientations.apply_orientation(moved, _invert_transform(transform))
                self.assertTrue(np.array_equal(back, volume))
        packs = preprocess_dataset([phantom_pair(1), self.pair], self.fp, crop_margin=3.0)
        self.assertEqual([p.subject_id for p in packs], ["p1", "p0"])
        self.assertTrue(np.array_equal(packs[1].masks, preprocess(self.pair, self.fp, crop_margin=3.0).masks))

    def test_24_guards_and_persistence(self):
        """Test 24: Slice ratios, resampling guard and fingerprint save/load"""
        self.assertTrue(np.array_equal(slice_ratios(1), [0.5]))
        corrupt = self.fp.model_copy(update={"median_spacing": (0.001, 1.0, 2.0)})
        with self.assertRaises(DataError):
            preprocess(self.pair, corrupt)
        with tempfile.TemporaryDirectory() as tmp:
            path = self.fp.save(Path(tmp) / "fingerprint.json", provenance={"seed": 0})
            self.assertIn("provenance", json.loads(path.read_text()))
            self.assertEqual(DatasetFingerprint.load(path).digest(), self.fp.digest())


class TestVolumesAndPhantoms(unittest.TestCase):
    """Test NIfTI I/O, subject splitting and the phantom generator"""

    def test_25_phantom_geometry(self):
        """Test 25: Labels are valid and the mid slice is larger than the end slices"""
        spec = PhantomSpec(n_subjects=2, grid_size=32, slice_range=(9, 9), n_classes=2)
        image, mask, _ = phantom_volume(spec, 0)
        self.assertTrue(set(np.unique(mask)) <= {0, 1, 2})
        self.assertGreater(np.count_nonzero(mask[..., 4]), np.count_nonzero(mask[..., 0]))
        again_image, again_mask, _ = phantom_volume(spec, 0)
        self.assertTrue(np.array_equal(mask, again_mask))
        self.assertTrue(np.array_equal(image, again_image))

    def test_26_dataset_layout(self):
        """Test 26: Generated phantoms are discoverable and loadable"""
        spec = PhantomSpec(n_subjects=3, grid_size=16, slice_range=(4, 5), n_classes=1)
        with tempfile.TemporaryDirectory() as tmp:
            generate_phantoms(spec, Path(tmp))
            entries = discover_dataset(Path(tmp))
            self.assertEqual(len(entries), 3)
            image_path, label_path = entries["phantom_000"]
            pair = load_volume_pair(image_path, label_path)
            self.assertEqual(pair.spacing, (1.0, 1.0, 2.0))
            self.assertEqual(pair.orientation, "RAS")
            no_mask = load_volume_pair(image_path)
            self.assertFalse(no_mask.mask.any())
            labels, _ = load_label_volume(label_path)
            self.assertEqual(labels.dtype, np.int16)

    def test_27_volume_validation(self):
        """Test 27: Mismatched shapes and fractional labels are rejected"""
        with self.assertRaises(DataError):
            VolumePair(np.zeros((4, 4, 4)), np.zeros((4, 4, 3)), (1, 1, 1), np.eye(4), "bad")
        with self.assertRaises(DataError):
            VolumePair(np.zeros((4, 4, 4)), np.full((4, 4, 4), 0.5), (1, 1, 1), np.eye(4), "bad")

    def test_28_subject_split(self):
        """Test 28: Split is deterministic, disjoint and complete"""
        ids = [f"s{i:02d}" for i in range(10)]
        train, test = split_subjects(ids, 0.2, seed=4)
        self.assertEqual((train, test), split_subjects(ids, 0.2, seed=4))
        self.assertEqual(len(test), 2)
        self.assertFalse(set(train) & set(test))
        self.assertEqual(sorted(train + test), ids)
        with self.assertRaises(DataError):
            split_subjects(["only"], 0.2, seed=0)


class TestConfigAndCheckpoints(unittest.TestCase):
    """Test configuration validation and checkpoint integrity"""

    def test_29_config_validation(self):
        """Test 29: Defaults load; unknown keys and bad values are rejected"""
        self.assertEqual(load_config(None).version, 1)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bad.yaml"
            path.write_text("version: 1\nunknown_key: 3\n")
            with self.assertRaises(ConfigError) as ctx:
                load_config(path)
            self.assertEqual(ctx.exception.exit_code, 2)
            with self.assertRaises(ConfigError):
                load_config(Path(tmp) / "missing.yaml")
        with self.assertRaises(ValueError):
            VaeConfig(compression_factor=3)
        with self.assertRaises(ValueError):
            LdmConfig(t_train=10, steps=20)
        with self.assertRaises(ConfigError):
            RunConfig(dataset_path=Path("/nonexistent/dataset")).require_paths("dataset_path")

    def test_30_environment_overrides(self):
        """Test 30: Environment variables override the YAML values"""
        with mock.patch.dict(os.environ, {"NNQC_DEVICE": "cpu", "NNQC_WORKERS": "2"}):
            config = load_config(None)
        self.assertEqual(config.device, "cpu")
        self.assertEqual(config.workers, 2)

    def test_31_checkpoint_round_trip_and_checks(self):
        """Test 31: Digest verification, fingerprint check and missing manifests"""
        torch.manual_seed(0)
        net = torch.nn.Linear(3, 2)
        with tempfile.TemporaryDirectory() as tmp:
            a, b = Path(tmp) / "a", Path(tmp) / "b"
            first = save_checkpoint(a, "vae", {"net": net}, "fp1", {"k": 1}, "cfg", 0)
            second = save_checkpoint(b, "vae", {"net": net}, "fp1", {"k": 1}, "cfg", 0)
            self.assertEqual(manifest_digest(first), manifest_digest(second))

            manifest, states = load_checkpoint(a, "fp1")
            self.assertEqual(state_digest(states["net"]), state_digest(net))
            with self.assertRaises(FingerprintMismatchError):
                load_checkpoint(a, "fp2")
            load_checkpoint(a, "fp2", force=True)

            torch.save({k: v + 1 for k, v in net.state_dict().items()}, a / "net.pt")
            with self.assertRaises(ChecksumError):
                load_checkpoint(a)
            with self.assertRaises(MissingPrerequisiteError):
                read_manifest(Path(tmp) / "none")


class TestManifold(unittest.TestCase):
    """Test the VAE-GAN and its losses"""

    def setUp(self):
        """Set up test fixtures"""
        torch.manual_seed(0)
        self.cfg = tiny_vae_config()
        self.vae = SegVAE(3, self.cfg)
        self.masks = torch.as_tensor(np.stack([two_class_disk(), np.zeros((32, 32), dtype=np.int16)]))

    def test_32_vae_shapes_and_validation(self):
        """Test 32: Latent grid is H/f x W/f with two channels"""
        target = one_hot(self.masks, 3)
        logits, mu, logvar = self.vae(target)
        self.assertEqual(tuple(mu.shape), (2, 2, 8, 8))
        self.assertEqual(tuple(logvar.shape), (2, 2, 8, 8))
        self.assertEqual(tuple(logits.shape), (2, 3, 32, 32))
        with self.assertRaises(ValueError):
            self.vae.encode(target[:, :2])
        with self.assertRaises(ValueError):
            self.vae.encode(target[..., :30, :30])

    def test_33_loss_terms(self):
        """Test 33: KL, generalized Dice and perceptual losses vanish at their optimum"""
        self.assertEqual(float(kld_loss(torch.zeros(2, 2, 4, 4), torch.zeros(2, 2, 4, 4))), 0.0)
        target = one_hot(self.masks, 3)
        self.assertLess(float(generalized_dice_loss(target * 30.0, target)), 1e-3)
        self.assertGreater(float(generalized_dice_loss(torch.zeros_like(target), target)), 0.1)
        perceptual = PerceptualLoss(3, depth=16, pretrained=False, seed=0)
        self.assertEqual(float(perceptual(target, target)), 0.0)
        self.assertFalse(any(p.requires_grad for p in perceptual.parameters()))

    def test_34_reparameterize_is_seeded(self):
        """Test 34: Same seed gives the same posterior sample"""
        mu = torch.zeros(1, 2, 4, 4)
        logvar = torch.zeros(1, 2, 4, 4)
        self.assertTrue(torch.equal(reparameterize(mu, logvar, seed=5), reparameterize(mu, logvar, seed=5)))
        self.assertFalse(torch.equal(reparameterize(mu, logvar, seed=5), reparameterize(mu, logvar, seed=6)))

    def test_35_train_vae_gan(self):
        """Test 35: A short training run logs finite losses and reconstructs"""
        masks = np.stack([two_class_disk()] * 6 + [np.zeros((32, 32), dtype=np.int16)] * 2)
        result = train_vae_gan(masks, 2, self.cfg, seed=0, show_progress=False)
        self.assertEqual(len(result.log), self.cfg.epochs)
        self.assertTrue(np.isfinite(result.first_step_loss))
        self.assertEqual(reconstruct(result.vae, masks).shape, masks.shape)
        with self.assertRaises(ValueError):
            train_vae_gan(np.zeros((0, 32, 32)), 2, self.cfg, seed=0, show_progress=False)

    def test_36_weighted_objective(self):
        """Test 36: KL of N(1,1) against N(0,1) is 0.5 and the total is the weighted sum of its terms"""
        self.assertAlmostEqual(float(kld_loss(torch.ones(1, 1), torch.zeros(1, 1))), 0.5, places=6)
        self.assertAlmostEqual(float(kld_loss(torch.ones(3, 2), torch.zeros(3, 2))), 1.0, places=6)

        cfg = tiny_vae_config(lambda_kld=0.3, lambda_perc=0.7, lambda_adv=0.2, lambda_dice=1.5)
        target = one_hot(self.masks, 3)
        logits, mu, logvar = self.vae(target)
        disc_scores = torch.randn(2, 1, 6, 6)
        perceptual = PerceptualLoss(3, depth=16, pretrained=False, seed=0)
        losses = vae_loss(target, logits, mu, logvar, disc_scores, cfg, perceptual)
        expected = 0.3 * losses.kld + 0.7 * losses.perc + 0.2 * losses.adv + 1.5 * losses.dice
        self.assertTrue(torch.allclose(losses.total, expected, atol=1e-6))
        self.assertGreater(float(losses.adv), 0.0)

        no_adv = vae_loss(target, logits, mu, logvar, disc_scores, tiny_vae_config(lambda_adv=0.0), perceptual)
        self.assertEqual(float(no_adv.adv), 0.0)
        no_perc = vae_loss(target, logits, mu, logvar, None, cfg)
        self.assertEqual(float(no_perc.perc), 0.0)

    def test_37_posterior_sample_moments(self):
        """Test 37: Posterior samples have mean mu and variance exp(logvar)"""
        mu = torch.full((20000,), 0.5)
        logvar = torch.full((20000,), float(np.log(4.0)))
        z = reparameterize(mu, logvar, seed=0)
        self.assertLess(abs(float(z.mean()) - 0.5), 0.05)
        self.assertLess(abs(float(z.var()) / 4.0 - 1.0), 0.05)

    def test_38_discriminator_idle_without_adversarial_weight(self):
        """Test 38: With lambda_adv = 0 the discriminator keeps its initial weights"""
        masks = np.stack([two_class_disk()] * 6 + [np.zeros((32, 32), dtype=np.int16)] * 2)
        cfg = tiny_vae_config(lambda_adv=0.0, lambda_perc=0.0)
        torch.manual_seed(0)
        SegVAE(3, cfg)
        initial = state_digest(PatchDiscriminator(3, cfg.disc_channels, cfg.disc_layers))

        idle = train_vae_gan(masks, 2, cfg, seed=0, show_progress=False)
        self.assertEqual(state_digest(idle.discriminator), initial)
        self.assertTrue(all(entry["disc"] == 0.0 for entry in idle.log))

        active = train_vae_gan(masks, 2, tiny_vae_config(lambda_perc=0.0), seed=0, show_progress=False)
        self.assertNotEqual(state_digest(active.discriminator), initial)
        self.assertTrue(all(entry["disc"] > 0.0 for entry in active.log))


class TestTeamOfExperts(unittest.TestCase):
    """Test positional/vision experts and cross-attention fusion"""

    def setUp(self):
        """Set up test fixtures"""
        torch.manual_seed(0)
        self.fusion = CrossAttentionFusion(d_q=8, d_kv=6, d_c=12, n_heads=3)

    def test_39_fusion_matches_oracle(self):
        """Test 39: Fusion equals per-head softmax(QK^T/sqrt(d_k))V and rows sum to one"""
        o1 = torch.randn(2, 8)
        o2 = torch.randn(2, 5, 6)
        c, weights = self.fusion(o1, o2)
        self.assertEqual(tuple(c.shape), (2, 1, 12))
        self.assertTrue(torch.allclose(weights.sum(-1), torch.ones(2, 3, 1), atol=1e-6))
        q = self.fusion.f_q(o1)
        k = self.fusion.f_k(o2)
        v = self.fusion.f_v(o2)
        for b in range(2):
            heads = []
            for h in range(3):
                cols = slice(4 * h, 4 * (h + 1))
                scores = k[b, :, cols] @ q[b, cols] / 2.0
                heads.append(torch.softmax(scores, dim=0) @ v[b, :, cols])
            self.assertTrue(torch.allclose(c[b, 0], torch.cat(heads), atol=1e-6))

    def test_40_singleton_key_returns_values(self):
        """Test 40: A single key/value token returns F_V(o2) exactly"""
        o1 = torch.randn(2, 8)
        o2 = torch.randn(2, 1, 6)
        c, _ = self.fusion(o1, o2)
        self.assertTrue(torch.equal(c, self.fusion.f_v(o2)))
        with self.assertRaises(ValueError):
            self.fusion(torch.randn(2, 7), o2)

    def test_41_fusion_is_convex_combination_of_values(self):
        """Test 41: Each fused channel lies between the smallest and largest value row"""
        o1 = torch.randn(4, 8)
        o2 = torch.randn(4, 7, 6)
        c, weights = self.fusion(o1, o2)
        self.assertTrue(torch.all(weights >= 0))
        v = self.fusion.f_v(o2)
        lower = v.min(dim=1, keepdim=True).values
        upper = v.max(dim=1, keepdim=True).values
        self.assertTrue(torch.all(c >= lower - 1e-6))
        self.assertTrue(torch.all(c <= upper + 1e-6))

    def test_42_experts(self):
        """Test 42: Positional range check and a frozen, seeded vision expert"""
        expert = PositionalExpert((8,), 16)
        self.assertEqual(tuple(expert(torch.tensor([0.0, 0.5, 1.0])).shape), (3, 16))
        with self.assertRaises(ValueError):
            expert(torch.tensor([1.5]))

        vision = VisionExpert("random_cnn", pretrained=False, seed=1, channels=8)
        vision.train()
        self.assertFalse(vision.backbone.training)
        self.assertFalse(any(p.requires_grad for p in vision.parameters()))
        images = torch.rand(2, 32, 32)
        tokens = vision(images)
        self.assertEqual(tuple(tokens.shape), (2, 16, 8))
        twin = VisionExpert("random_cnn", pretrained=False, seed=1, channels=8)
        self.assertTrue(torch.equal(tokens, twin(images)))
        with self.assertRaises(ValueError):
            vision(images + 2.0)

    def test_43_conditioning_modes(self):
        """Test 43: Full, positional and image modes produce the expected condition tokens"""
        ratios = torch.tensor([0.2, 0.8])
        images = torch.rand(2, 32, 32)
        shapes = {"full": (2, 1, 16), "positional": (2, 1, 16), "image": (2, 16, 16)}
        for mode, shape in shapes.items():
            toe = TeamOfExperts(tiny_toe_config(mode=mode))
            self.assertEqual(tuple(toe(ratios, images=images).shape), shape)
            self.assertIn(f"mode={mode}", toe.identity)
        with self.assertRaises(ValueError):
            TeamOfExperts(tiny_toe_config())(ratios)
        self.assertEqual(tuple(TeamOfExperts(tiny_toe_config(mode="positional"))(ratios).shape), (2, 1, 16))


class TestLatentDiffusion(unittest.TestCase):
    """Test noising, the conditional denoiser, sampling and stage-2 training"""

    def setUp(self):
        """Set up test fixtures"""
        self.schedule = NoiseSchedule(10)

    def test_44_forward_noise_closed_form(self):
        """Test 44: z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps"""
        z0 = torch.randn(2, 2, 4, 4)
        eps = torch.randn(2, 2, 4, 4)
        t = torch.tensor([0, 9])
        abar = self.schedule.alphas_cumprod[t].view(-1, 1, 1, 1)
        expected = abar.sqrt() * z0 + (1 - abar).sqrt() * eps
        self.assertTrue(torch.allclose(forward_noise(z0, t, eps, self.schedule), expected, atol=1e-6))
        with self.assertRaises(ValueError):
            forward_noise(z0, 10, eps, self.schedule)
        with self.assertRaises(ValueError):
            forward_noise(z0, 0, eps[:1], self.schedule)

    def test_45_noising_moments(self):
        """Test 45: Noised latents have mean sqrt(abar_t) z0 and variance 1 - abar_t"""
        z0 = torch.full((4000, 2, 2, 2), 1.5)
        eps = torch.randn(z0.shape, generator=torch.Generator().manual_seed(0))
        z_t = forward_noise(z0, 9, eps, self.schedule)
        abar = float(self.schedule.alphas_cumprod[9])
        self.assertLess(abs(float(z_t.mean()) - 1.5 * np.sqrt(abar)), 0.03)
        self.assertLess(abs(float(z_t.var()) / (1.0 - abar) - 1.0), 0.05)

    def test_46_noise_prediction_error(self):
        """Test 46: Perfect noise prediction costs nothing; a constant offset d costs d^2"""
        z0 = torch.randn(2, 2, 8, 8)
        eps = torch.randn(2, 2, 8, 8)
        s_d = torch.zeros(2, 1, 8, 8)
        c = torch.randn(2, 1, 16)
        exact = ldm_loss(z0, s_d, 5, eps, c, lambda x, t, cond: eps, self.schedule)
        self.assertEqual(float(exact), 0.0)
        offset = ldm_loss(z0, s_d, 5, eps, c, lambda x, t, cond: eps + 0.3, self.schedule)
        self.assertAlmostEqual(float(offset), 0.09, places=5)

    def test_47_mask_channel(self):
        """Test 47: Downsampled masks lie in [0,1] and must match the latent grid"""
        masks = torch.full((1, 32, 32), 2, dtype=torch.int16)
        s_d = downsample_mask(masks, num_labels=2, factor=4)
        self.assertEqual(tuple(s_d.shape), (1, 1, 8, 8))
        self.assertTrue(torch.all(s_d == 1.0))
        z0 = torch.randn(1, 2, 8, 8)
        with self.assertRaises(ValueError):
            ldm_loss(z0, s_d[..., :4, :4], 0, torch.randn_like(z0), torch.randn(1, 1, 16),
                     lambda x, t, c: x[:, :2], self.schedule)

    def test_48_ddim_sampling_is_deterministic(self):
        """Test 48: Same seeds give identical pGTs and the mask channel never changes"""
        model = tiny_qc_model()
        masks = np.stack([two_class_disk(), np.zeros((32, 32), dtype=np.int16)])
        images = np.random.default_rng(0).random((2, 32, 32)).astype(np.float32)
        seen = []
        first = sample_pgt_batch(masks, images, [0.3, 0.7], [1, 2], model, steps=2,
                                 callback=lambda i, t, x: seen.append(x[:, 2:].clone()))
        second = sample_pgt_batch(masks, images, [0.3, 0.7], [1, 2], model, steps=2)
        self.assertTrue(np.array_equal(first, second))
        self.assertEqual(first.shape, (2, 32, 32))
        self.assertTrue(set(np.unique(first)) <= {0, 1, 2})
        self.assertEqual(len(seen), 2)
        self.assertTrue(all(torch.equal(seen[0], s) for s in seen))
        single = sample_pgt(masks[1], images[1], 0.7, 2, model, steps=2)
        self.assertEqual(single.shape, (32, 32))
        self.assertTrue(np.array_equal(single, sample_pgt(masks[1], images[1], 0.7, 2, model, steps=2)))
        with self.assertRaises(ValueError):
            sample_pgt_batch(masks, images, [0.3, 0.7], [1, 2], model, steps=11)

    def test_49_stage_two_freeze_contract(self):
        """Test 49: VAE and vision digests are unchanged, positional expert digest changes"""
        pair = phantom_pair(0)
        fp = extract_fingerprint([pair], target_size=(32, 32))
        corpus = build_corpus([preprocess(pair, fp, crop_margin=3.0)], make_bands()[2:4], seed=0,
                              cfg=DegradeConfig(max_retries=20))
        torch.manual_seed(0)
        vae = SegVAE(3, tiny_vae_config())
        toe = TeamOfExperts(tiny_toe_config())
        vae_before = state_digest(vae)
        vision_before = state_digest(toe.vision)
        positional_before = state_digest(toe.positional)
        result = train_ldm(vae, corpus, toe, self.schedule, tiny_ldm_config(), 2, seed=0, show_progress=False)
        self.assertEqual(result.frozen_digests["vae"], vae_before)
        self.assertEqual(result.frozen_digests["vision"], vision_before)
        self.assertNotEqual(state_digest(toe.positional), positional_before)
        self.assertGreater(result.first_step_loss, 0.0)
        self.assertGreater(result.latent_scale, 0.0)


class TestPipeline(unittest.TestCase):
    """End-to-end run on a tiny phantom dataset"""

    @classmethod
    def setUpClass(cls):
        """Generate phantoms and train both stages once"""
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls.config = tiny_run_config(cls.root)
        cls.pipeline = QCPipeline(cls.config, show_progress=False)
        cls.pipeline.cmd_phantom_gen(with_models=True)
        cls.pipeline.cmd_fingerprint()
        cls.vae_manifest = cls.pipeline.cmd_train_vae()
        cls.ldm_manifest = cls.pipeline.cmd_train_ldm()
        cls.test_ids = cls.pipeline.load_split()["test"]

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_50_artifacts_and_manifest_chain(self):
        """Test 50: Stage-2 manifest references the stage-1 digest and records provenance"""
        self.assertEqual(self.ldm_manifest.parent_digest, manifest_digest(self.vae_manifest))
        self.assertEqual(self.ldm_manifest.extras["mode"], "full")
        self.assertEqual(self.ldm_manifest.seed, 0)
        self.assertEqual(self.ldm_manifest.config_digest, self.config.digest())
        self.assertTrue((self.pipeline.corpus_dir / "index.json").exists())
        self.assertEqual(len(self.test_ids), 2)
        self.assertEqual(sorted(p.name for p in (self.config.dataset_path / "models").iterdir()),
                         ["gt_copy", "heavy", "light"])

    def test_51_missing_prerequisite(self):
        """Test 51: Stage 2 without stage 1 fails with the prerequisite exit code"""
        fresh = QCPipeline(tiny_run_config(self.root, name="fresh"), show_progress=False)
        fresh.cmd_fingerprint()
        with self.assertRaises(MissingPrerequisiteError):
            fresh.cmd_train_ldm()
        config_path = self.root / "fresh.yaml"
        snapshot = tiny_run_config(self.root, name="fresh").model_dump(mode="json")
        config_path.write_text(yaml.safe_dump(snapshot))
        self.assertEqual(main(["train-ldm", "--config", str(config_path), "--no-progress"]), 3)
        self.assertEqual(main(["qc", "--config", str(config_path), "--image", "missing.nii.gz"]), 3)

    def test_52_qc_with_ground_truth(self):
        """Test 52: QC of a GT copy reports pseudo and real scores and writes the pGT"""
        subject = self.test_ids[0]
        data = self.config.dataset_path
        image = data / "imagesTr" / f"{subject}.nii.gz"
        label = data / "labelsTr" / f"{subject}.nii.gz"
        out = self.root / "qc_gt"
        report = self.pipeline.cmd_qc(image, label, label, "all", out=out, preview=True)
        by_metric = {p.metric: p for p in report.pairs}
        self.assertEqual(set(by_metric), {"dsc", "hd95"})
        self.assertEqual(by_metric["dsc"].real_score, 1.0)
        self.assertEqual(by_metric["hd95"].real_score, 0.0)
        self.assertTrue(0.0 <= by_metric["dsc"].pseudo_score <= 1.0)
        pgt, _ = load_label_volume(out / f"{subject}_pgt.nii.gz")
        self.assertEqual(pgt.shape, load_label_volume(label)[0].shape)
        self.assertTrue((out / f"{subject}_preview.png").exists())
        self.assertTrue((out / f"{subject}_qc.csv").exists())

    def test_53_qc_of_empty_segmentation(self):
        """Test 53: A missing segmentation yields a pseudo-only report, never a crash"""
        subject = self.test_ids[1]
        image = self.config.dataset_path / "imagesTr" / f"{subject}.nii.gz"
        report = self.pipeline.cmd_qc(image, None, None, "dsc", out=self.root / "qc_empty")
        self.assertEqual(len(report.pairs), 1)
        self.assertIsNone(report.pairs[0].real_score)
        self.assertTrue(0.0 <= report.pairs[0].pseudo_score <= 1.0)

    def test_54_evaluate_covers_all_bands(self):
        """Test 54: Evaluation reports all five bands and is deterministic"""
        first = self.pipeline.cmd_evaluate(metric="dsc", out=self.root / "eval_a")
        second = self.pipeline.cmd_evaluate(metric="dsc", out=self.root / "eval_b")
        self.assertEqual(len(first.bands()), 5)
        self.assertEqual([p.pseudo_score for p in first.pairs], [p.pseudo_score for p in second.pairs])
        self.assertEqual(len(first.pairs), 5 * len(self.test_ids))
        summary = first.summary()["dsc"]
        self.assertIsNotNone(summary["mae"])
        self.assertEqual(set(summary["bands"]), set(first.bands()))
        self.assertTrue((self.root / "eval_a" / "evaluate.json").exists())

    def test_55_unreachable_slices_are_excluded_and_recorded(self):
        """Test 55: Slices that miss their band are left out of scoring and listed in provenance"""
        real = degrade_to_band
        lowest = make_bands()[0]
        first_hit = {}

        def miss_first_slice(image, gt, ratio, band, seed, cfg=None, subject_id="", slice_index=0):
            if band == lowest and first_hit.setdefault(subject_id, slice_index) == slice_index:
                raise BandUnreachableError(f"{subject_id} slice {slice_index} missed {band.label}", 0.2)
            return real(image, gt, ratio, band, seed, cfg, subject_id, slice_index)

        with mock.patch("modules.pipeline.degrade_to_band", side_effect=miss_first_slice):
            report = self.pipeline.cmd_evaluate(metric="dsc", out=self.root / "eval_partial")
        self.assertEqual(len(report.pairs), 5 * len(self.test_ids))
        injected = [m for m in report.provenance["unreachable"] if m["reason"].endswith(f"missed {lowest.label}")]
        self.assertEqual(sorted(m["subject_id"] for m in injected), sorted(self.test_ids))
        self.assertTrue(all(m["slice_index"] == first_hit[m["subject_id"]] and m["best_dsc"] == 0.2 for m in injected))

        def miss_lowest_band(image, gt, ratio, band, seed, cfg=None, subject_id="", slice_index=0):
            if band == lowest:
                raise BandUnreachableError(f"{subject_id} missed {band.label}", 0.2)
            return real(image, gt, ratio, band, seed, cfg, subject_id, slice_index)

        with mock.patch("modules.pipeline.degrade_to_band", side_effect=miss_lowest_band):
            report = self.pipeline.cmd_evaluate(metric="dsc", out=self.root / "eval_no_lowest")
        self.assertEqual(len(report.bands()), 4)
        self.assertNotIn(lowest.label, report.bands())
        self.assertEqual(len(report.pairs), 4 * len(self.test_ids))

    def test_56_cross_dataset_needs_force(self):
        """Test 56: Evaluating another dataset requires --force on fingerprint mismatch"""
        with self.assertRaises(FingerprintMismatchError):
            self.pipeline.cmd_evaluate(metric="dsc", dataset=self.config.dataset_path, out=self.root / "ood")

    def test_57_rank_synthetic_models(self):
        """Test 57: Real ranking of GT copy, light and heavy models is recovered"""
        models = self.config.dataset_path / "models"
        report = self.pipeline.cmd_rank([models / "gt_copy", models / "light", models / "heavy"], metric="dsc",
                                        out=self.root / "rank")
        ranking = report.rankings[0]
        self.assertEqual(ranking.real_ranking, ["gt_copy", "light", "heavy"])
        self.assertEqual(sorted(ranking.pseudo_ranking), ["gt_copy", "heavy", "light"])
        self.assertTrue(-1.0 <= ranking.tau <= 1.0)
        self.assertEqual({p.model for p in report.pairs}, {"gt_copy", "light", "heavy"})

    def test_58_cli_surface(self):
        """Test 58: Every command is exposed by the parser"""
        parser = build_parser()
        for command in COMMANDS:
            extra = ["--image", "x.nii.gz"] if command == "qc" else ["seg_dir"] if command == "rank" else []
            self.assertEqual(parser.parse_args([command, *extra]).command, command)

    def test_59_stage_one_rerun_is_reproducible(self):
        """Test 59: Rerunning stage 1 with the same seed reproduces the manifest digest"""
        rerun = self.pipeline.cmd_train_vae()
        self.assertEqual(manifest_digest(rerun), manifest_digest(self.vae_manifest))


def run_tests_with_report():
    """Run all tests and generate detailed report"""

    # Create test suite
    loader = unittest.TestLoader()
    suite = unittest.TestSuite()

    # Add all test classes
    suite.addTests(loader.loadTestsFromTestCase(TestMetrics))
    suite.addTests(loader.loadTestsFromTestCase(TestDegrade))
    suite.addTests(loader.loadTestsFromTestCase(TestFingerprint))
    suite.addTests(loader.loadTestsFromTestCase(TestVolumesAndPhantoms))
    suite.addTests(loader.loadTestsFromTestCase(TestConfigAndCheckpoints))
    suite.addTests(loader.loadTestsFromTestCase(TestManifold))
    suite.addTests(loader.loadTestsFromTestCase(TestTeamOfExperts))
    suite.addTests(loader.loadTestsFromTestCase(TestLatentDiffusion))
    suite.addTests(loader.loadTestsFromTestCase(TestPipeline))

    # Run tests with custom result
    runner = unittest.TextTestRunner(verbosity=2)
    result = runner.run(suite)

    return result


if __name__ == '__main__':
    print("=" * 70)
    print("nnQC - COMPREHENSIVE TEST SUITE")
    print("=" * 70)
    print()

    result = run_tests_with_report()

    print()
    print("=" * 70)
    print("TEST SUMMARY")
    print("=" * 70)
    print(f"Tests Run: {result.testsRun}")
    print(f"Successes: {result.testsRun - len(result.failures) - len(result.errors) - len(result.skipped)}")
    print(f"Failures: {len(result.failures)}")
    print(f"Errors: {len(result.errors)}")
    print(f"Skipped: {len(result.skipped)}")
    print("=" * 70)
    sys.exit(0 if result.wasSuccessful() else 1)
