"""
Manifold Module
Spatial VAE-GAN learning the latent manifold of clean segmentations
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision import models
from torchvision.models.vgg import cfgs as vgg_cfgs, make_layers as vgg_make_layers
from tqdm import tqdm

from modules.config import VaeConfig
from modules.errors import NonFiniteLossError, TrainingDivergenceError
from modules.metrics import dsc

logger = logging.getLogger(__name__)

LOGVAR_RANGE = (-30.0, 20.0)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def one_hot(masks: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(B, H, W) integer labels -> (B, C, H, W) float one-hot"""
    return F.one_hot(masks.long().clamp(0, num_classes - 1), num_classes).permute(0, 3, 1, 2).float()


class ResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, groups: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.GroupNorm(min(groups, in_channels), in_channels),
            nn.SiLU(),
            nn.Conv2d(in_channels, out_channels, 3, padding=1),
            nn.GroupNorm(min(groups, out_channels), out_channels),
            nn.SiLU(),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
        )
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x):
        return self.block(x) + self.skip(x)


class SegVAE(nn.Module):
    """
    Spatial VAE over one-hot masks

    Args:
        num_classes: L+1 (background included)
        cfg: VaeConfig; len(cfg.channels) = log2(f) + 1
    """

    def __init__(self, num_classes: int, cfg: VaeConfig):
        super().__init__()
        self.num_classes = num_classes
        self.compression_factor = cfg.compression_factor
        self.latent_channels = cfg.latent_channels
        ch = list(cfg.channels)
        groups = cfg.norm_groups

        # Encoder halves the grid log2(f) times and ends in mu and logvar
        encoder: List[nn.Module] = [nn.Conv2d(num_classes, ch[0], 3, padding=1)]
        for i in range(len(ch) - 1):
            encoder += [ResBlock(ch[i], ch[i], groups), nn.Conv2d(ch[i], ch[i + 1], 3, stride=2, padding=1)]
        encoder += [
            ResBlock(ch[-1], ch[-1], groups),
            nn.GroupNorm(min(groups, ch[-1]), ch[-1]),
            nn.SiLU(),
            nn.Conv2d(ch[-1], 2 * cfg.latent_channels, 3, padding=1),
        ]
        self.encoder = nn.Sequential(*encoder)

        # Decoder mirrors the encoder
        decoder: List[nn.Module] = [nn.Conv2d(cfg.latent_channels, ch[-1], 3, padding=1), ResBlock(ch[-1], ch[-1], groups)]
        for i in reversed(range(len(ch) - 1)):
            decoder += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(ch[i + 1], ch[i], 3, padding=1),
                ResBlock(ch[i], ch[i], groups),
            ]
        decoder += [nn.GroupNorm(min(groups, ch[0]), ch[0]), nn.SiLU(), nn.Conv2d(ch[0], num_classes, 3, padding=1)]
        self.decoder = nn.Sequential(*decoder)

    def encode(self, mask_onehot: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if mask_onehot.shape[1] != self.num_classes:
            raise ValueError(f"expected {self.num_classes} one-hot channels, got {mask_onehot.shape[1]}")
        if mask_onehot.shape[-1] % self.compression_factor or mask_onehot.shape[-2] % self.compression_factor:
            raise ValueError(f"spatial size {tuple(mask_onehot.shape[-2:])} is not divisible by {self.compression_factor}")
        mu, logvar = self.encoder(mask_onehot).chunk(2, dim=1)
        return mu, logvar.clamp(*LOGVAR_RANGE)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != self.latent_channels:
            raise ValueError(f"expected {self.latent_channels} latent channels, got {z.shape[1]}")
        return self.decoder(z)

    def forward(self, mask_onehot: torch.Tensor, generator: Optional[torch.Generator] = None):
        mu, logvar = self.encode(mask_onehot)
        z = reparameterize(mu, logvar, generator=generator)
        return self.decode(z), mu, logvar


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, seed: Optional[int] = None,
                   generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """z = mu + exp(logvar / 2) * eps with eps ~ N(0, 1)"""
    if generator is None and seed is not None:
        generator = torch.Generator(device=mu.device).manual_seed(seed)
    eps = torch.randn(mu.shape, generator=generator, device=mu.device, dtype=mu.dtype)
    return mu + torch.exp(0.5 * logvar) * eps


class PatchDiscriminator(nn.Module):
    """PatchGAN discriminator; three stride-2 layers give a 70x70 receptive field"""

    def __init__(self, in_channels: int, ndf: int = 64, n_layers: int = 3):
        super().__init__()
        layers: List[nn.Module] = [nn.Conv2d(in_channels, ndf, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True)]
        mult = 1
        for n in range(1, n_layers):
            prev, mult = mult, min(2 ** n, 8)
            layers += [
                nn.Conv2d(ndf * prev, ndf * mult, 4, stride=2, padding=1),
                nn.InstanceNorm2d(ndf * mult),
                nn.LeakyReLU(0.2, True),
            ]
        prev, mult = mult, min(2 ** n_layers, 8)
        layers += [
            nn.Conv2d(ndf * prev, ndf * mult, 4, stride=1, padding=1),
            nn.InstanceNorm2d(ndf * mult),
            nn.LeakyReLU(0.2, True),
            nn.Conv2d(ndf * mult, 1, 4, stride=1, padding=1),
        ]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


def _palette(num_classes: int) -> torch.Tensor:
    """Fixed RGB colour per class, background black"""
    colours = [(0.0, 0.0, 0.0)]
    for c in range(1, num_classes):
        hue = (c - 1) / max(1, num_classes - 1)
        colours.append(tuple(0.5 + 0.5 * math.cos(2 * math.pi * (hue + shift)) for shift in (0.0, 1 / 3, 2 / 3)))
    return torch.tensor(colours, dtype=torch.float32)


class PerceptualLoss(nn.Module):
    """
    Feature-space distance from a frozen VGG16 prefix

    Masks are rendered to RGB through a fixed class palette before feature extraction.
    """

    def __init__(self, num_classes: int, depth: int = 16, pretrained: bool = False, seed: int = 0):
        super().__init__()
        features = None
        if pretrained:
            try:
                features = models.vgg16(weights=models.VGG16_Weights.DEFAULT).features
            except Exception as e:
                logger.warning("Pretrained VGG16 unavailable (%s), using a fixed-seed random VGG16", e)
        if features is None:
            # random VGG16 convolution stack only; the classifier head is never used
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                features = vgg_make_layers(vgg_cfgs["D"])
        self.features = features[:depth].eval()
        for p in self.features.parameters():
            p.requires_grad_(False)
        self.register_buffer("palette", _palette(num_classes))
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def train(self, mode: bool = True):
        super().train(mode)
        self.features.eval()
        return self

    def render(self, probs: torch.Tensor) -> torch.Tensor:
        rgb = torch.einsum("bchw,cd->bdhw", probs, self.palette)
        return (rgb - self.mean) / self.std

    def forward(self, pred_probs: torch.Tensor, target_onehot: torch.Tensor) -> torch.Tensor:
        return F.mse_loss(self.features(self.render(pred_probs)), self.features(self.render(target_onehot)))


def kld_loss(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Closed-form KL(N(mu, exp(logvar)) || N(0, 1)), summed per sample, averaged over the batch"""
    per_sample = 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar)
    return per_sample.flatten(1).sum(dim=1).mean()


def generalized_dice_loss(logits: torch.Tensor, target_onehot: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Generalized Dice loss with inverse squared class-volume weights; lies in [0, 1]"""
    probs = logits.softmax(dim=1)
    dims = (2, 3)
    volume = target_onehot.sum(dim=dims)
    weights = 1.0 / volume.pow(2)
    infinite = torch.isinf(weights)
    weights = weights.masked_fill(infinite, 0.0)
    max_weight = weights.max(dim=1, keepdim=True).values
    weights = torch.where(infinite, max_weight.expand_as(weights), weights)
    intersection = (probs * target_onehot).sum(dim=dims)
    denominator = (probs + target_onehot).sum(dim=dims)
    numerator = 2.0 * (weights * intersection).sum(dim=1)
    denominator = (weights * denominator).sum(dim=1)
    return (1.0 - (numerator + eps) / (denominator + eps)).mean()


def adversarial_generator_loss(disc_scores: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(disc_scores, torch.ones_like(disc_scores))


def discriminator_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    real = F.binary_cross_entropy_with_logits(real_scores, torch.ones_like(real_scores))
    fake = F.binary_cross_entropy_with_logits(fake_scores, torch.zeros_like(fake_scores))
    return 0.5 * (real + fake)


@dataclass
class VaeLoss:
    total: torch.Tensor
    kld: torch.Tensor
    perc: torch.Tensor
    adv: torch.Tensor
    dice: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in ("total", "kld", "perc", "adv", "dice")}


def vae_loss(target_onehot: torch.Tensor, logits: torch.Tensor, mu: torch.Tensor, logvar: torch.Tensor,
             disc_scores: Optional[torch.Tensor], cfg: VaeConfig,
             perceptual: Optional[PerceptualLoss] = None) -> VaeLoss:
    """
    Weighted VAE-GAN objective

    Args:
        target_onehot: (B, L+1, H, W) GT
        logits: (B, L+1, H, W) decoder output
        mu, logvar: Posterior parameters
        disc_scores: Discriminator logits on the reconstruction, None when adversarial loss is off
        cfg: VaeConfig with the lambda weights
        perceptual: Frozen feature network, None when lambda_perc is 0

    Returns:
        VaeLoss where total = sum of lambda * component
    """
    if logits.shape != target_onehot.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and target {tuple(target_onehot.shape)} differ in shape")
    zero = logits.new_zeros(())
    kld = kld_loss(mu, logvar)
    dice = generalized_dice_loss(logits, target_onehot)
    # Optional terms are zero when their weight or network is missing
    perc = perceptual(logits.softmax(dim=1), target_onehot) if perceptual is not None and cfg.lambda_perc > 0 else zero
    adv = adversarial_generator_loss(disc_scores) if disc_scores is not None and cfg.lambda_adv > 0 else zero

    for name, value in (("kld", kld), ("dice", dice), ("perc", perc), ("adv", adv)):
        if not torch.isfinite(value):
            raise NonFiniteLossError(f"VAE loss component {name} is not finite")
    total = cfg.lambda_kld * kld + cfg.lambda_perc * perc + cfg.lambda_adv * adv + cfg.lambda_dice * dice
    return VaeLoss(total=total, kld=kld, perc=perc, adv=adv, dice=dice)


@torch.no_grad()
def reconstruct(vae: SegVAE, masks: np.ndarray, batch_size: int = 32,
                device: torch.device = torch.device("cpu")) -> np.ndarray:
    """Deterministic decode(encode-mean(mask)) label grids"""
    vae.eval()
    out = []
    for start in range(0, len(masks), batch_size):
        batch = torch.as_tensor(masks[start:start + batch_size], device=device)
        mu, _ = vae.encode(one_hot(batch, vae.num_classes))
        out.append(vae.decode(mu).argmax(dim=1).cpu().numpy())
    return np.concatenate(out).astype(np.int16) if out else np.zeros((0,) + masks.shape[1:], dtype=np.int16)


def reconstruction_dice(vae: SegVAE, masks: np.ndarray, batch_size: int = 32,
                        device: torch.device = torch.device("cpu")) -> float:
    if len(masks) == 0:
        return float("nan")
    recon = reconstruct(vae, masks, batch_size, device)
    return float(np.mean([dsc(r, m) for r, m in zip(recon, masks)]))


@dataclass
class VaeTrainingResult:
    vae: SegVAE
    discriminator: PatchDiscriminator
    log: List[Dict[str, float]] = field(default_factory=list)
    holdout_dice: float = float("nan")
    first_step_loss: float = float("nan")


def holdout_split(n: int, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    n_hold = int(round(n * fraction)) if fraction > 0 and n > 1 else 0
    n_hold = min(max(n_hold, 1 if fraction > 0 and n > 1 else 0), n - 1)
    return np.sort(order[n_hold:]), np.sort(order[:n_hold])


def train_vae_gan(gt_masks: np.ndarray, num_labels: int, cfg: VaeConfig, seed: int,
                  device: torch.device = torch.device("cpu"), show_progress: bool = True) -> VaeTrainingResult:
    """
    Train the VAE-GAN on clean GT slices

    Args:
        gt_masks: (N, H, W) integer GT slices, no degraded masks
        num_labels: L, the fingerprint label count
        cfg: VaeConfig
        seed: Training seed
        device: Torch device

    Returns:
        VaeTrainingResult with the trained networks and a per-epoch log
    """
    gt_masks = np.asarray(gt_masks)
    if gt_masks.ndim != 3 or len(gt_masks) == 0:
        raise ValueError("gt_masks must be a non-empty (N, H, W) array")
    torch.manual_seed(seed)
    num_classes = num_labels + 1

    vae = SegVAE(num_classes, cfg).to(device)
    disc = PatchDiscriminator(num_classes, cfg.disc_channels, cfg.disc_layers).to(device)
    perceptual = None
    if cfg.lambda_perc > 0:
        perceptual = PerceptualLoss(num_classes, cfg.perceptual_depth, cfg.perceptual_pretrained, seed).to(device)
    # Separate optimizers for generator and discriminator
    opt_g = torch.optim.Adam(vae.parameters(), lr=cfg.lr, betas=cfg.betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.disc_lr, betas=cfg.betas)

    train_idx, hold_idx = holdout_split(len(gt_masks), cfg.holdout_fraction, seed)
    train_masks = torch.as_tensor(gt_masks[train_idx].astype(np.int64))
    shuffler = torch.Generator().manual_seed(seed)
    noise = torch.Generator(device=device).manual_seed(seed + 1)
    result = VaeTrainingResult(vae=vae, discriminator=disc)
    bad_steps = 0

    epochs = tqdm(range(cfg.epochs), desc="Stage 1 (VAE-GAN)", disable=not show_progress)
    for epoch in epochs:
        vae.train()
        disc.train()
        use_adv = cfg.lambda_adv > 0 and epoch >= cfg.adv_start_epoch
        sums = {"total": 0.0, "kld": 0.0, "perc": 0.0, "adv": 0.0, "dice": 0.0, "disc": 0.0}
        steps = 0
        order = torch.randperm(len(train_masks), generator=shuffler)
        for start in range(0, len(order), cfg.batch_size):
            batch = train_masks[order[start:start + cfg.batch_size]].to(device)
            target = one_hot(batch, num_classes)
            logits, mu, logvar = vae(target, generator=noise)
            disc_scores = disc(logits.softmax(dim=1)) if use_adv else None
            try:
                losses = vae_loss(target, logits, mu, logvar, disc_scores, cfg, perceptual)
            except NonFiniteLossError as e:
                bad_steps += 1
                logger.warning("Epoch %d: %s (%d consecutive)", epoch, e, bad_steps)
                if bad_steps >= cfg.divergence_patience:
                    raise TrainingDivergenceError(f"VAE loss non-finite for {bad_steps} consecutive steps") from e
                continue
            bad_steps = 0
            opt_g.zero_grad(set_to_none=True)
            losses.total.backward()
            opt_g.step()

            # Discriminator step on real vs reconstructed masks
            if use_adv:
                d_loss = discriminator_loss(disc(target), disc(logits.detach().softmax(dim=1)))
                opt_d.zero_grad(set_to_none=True)
                d_loss.backward()
                opt_d.step()
                sums["disc"] += float(d_loss.detach())

            values = losses.as_floats()
            if math.isnan(result.first_step_loss):
                result.first_step_loss = values["total"]
            for key, value in values.items():
                sums[key] += value
            steps += 1

        # Epoch means plus holdout reconstruction Dice
        entry = {key: value / max(1, steps) for key, value in sums.items()}
        entry["epoch"] = epoch
        entry["holdout_dice"] = reconstruction_dice(vae, gt_masks[hold_idx], cfg.batch_size, device)
        result.log.append(entry)
        epochs.set_postfix(loss=f"{entry['total']:.4f}", dice=f"{entry['holdout_dice']:.3f}")
        logger.info("Stage 1 epoch %d: loss=%.4f dice_loss=%.4f holdout_dice=%.4f",
                    epoch, entry["total"], entry["dice"], entry["holdout_dice"])

    result.holdout_dice = result.log[-1]["holdout_dice"] if result.log else float("nan")
    vae.eval()
    return result
