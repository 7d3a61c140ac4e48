"""
Latent Diffusion Module
Conditional latent diffusion that restores a clean mask latent from a corrupted mask
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from diffusers import DDIMScheduler, UNet2DConditionModel
from tqdm import tqdm

from modules.checkpoints import state_digest
from modules.config import LdmConfig
from modules.degrade import Corpus
from modules.errors import ChecksumError, DataError, NonFiniteLossError, TrainingDivergenceError
from modules.manifold import SegVAE, one_hot
from modules.toe import TeamOfExperts

logger = logging.getLogger(__name__)

LATENT_CHANNELS = 2


class NoiseSchedule:
    """
    Discrete beta schedule over T training steps, indexed t = 0..T-1

    Args:
        t_train: Number of training timesteps
        family: 'linear' or 'scaled_linear'
    """

    def __init__(self, t_train: int = 1000, family: str = "linear", beta_start: float = 1e-4,
                 beta_end: float = 0.02):
        self.t_train = t_train
        self.family = family
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.scheduler = self.make_scheduler()

    @classmethod
    def from_config(cls, cfg: LdmConfig) -> "NoiseSchedule":
        return cls(cfg.t_train, cfg.schedule, cfg.beta_start, cfg.beta_end)

    @classmethod
    def from_dict(cls, data: Dict) -> "NoiseSchedule":
        return cls(data["t_train"], data["family"], data["beta_start"], data["beta_end"])

    def make_scheduler(self) -> DDIMScheduler:
        """A fresh DDIM scheduler; sampling keeps per-call timestep state on it"""
        return DDIMScheduler(
            num_train_timesteps=self.t_train,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
            beta_schedule=self.family,
            clip_sample=False,
            set_alpha_to_one=True,
            prediction_type="epsilon",
        )

    @property
    def alphas_cumprod(self) -> torch.Tensor:
        return self.scheduler.alphas_cumprod

    def to_dict(self) -> Dict:
        return {"t_train": self.t_train, "family": self.family, "beta_start": self.beta_start, "beta_end": self.beta_end}


def _timesteps(t, batch: int, schedule: NoiseSchedule, device: torch.device) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long, device=device)
    if t.dim() == 0:
        t = t.expand(batch)
    if t.numel() and (t.min() < 0 or t.max() >= schedule.t_train):
        raise ValueError(f"timesteps must lie in [0, {schedule.t_train - 1}]")
    return t


def forward_noise(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps"""
    if z0.shape != eps.shape:
        raise ValueError("z0 and eps must have the same shape")
    return schedule.scheduler.add_noise(z0, eps, _timesteps(t, z0.shape[0], schedule, z0.device))


def downsample_mask(masks: torch.Tensor, num_labels: int, factor: int) -> torch.Tensor:
    """(B, H, W) labels -> (B, 1, H/f, W/f) in [0, 1]: label / L, average-pooled"""
    scaled = masks.float().unsqueeze(1) / max(1, num_labels)
    return F.avg_pool2d(scaled, kernel_size=factor).clamp(0.0, 1.0)


class ConditionalLDM(nn.Module):
    """
    Noise predictor eps_theta over [z_t, S_d] with cross-attention on the condition at every level

    Args:
        latent_size: Spatial side of the latent grid
        d_c: Condition token width
        cfg: LdmConfig
    """

    def __init__(self, latent_size: int, d_c: int, cfg: LdmConfig):
        super().__init__()
        levels = len(cfg.unet_channels)
        self.unet = UNet2DConditionModel(
            sample_size=latent_size,
            in_channels=LATENT_CHANNELS + 1,
            out_channels=LATENT_CHANNELS,
            down_block_types=("CrossAttnDownBlock2D",) * levels,
            up_block_types=("CrossAttnUpBlock2D",) * levels,
            mid_block_type="UNetMidBlock2DCrossAttn",
            block_out_channels=tuple(cfg.unet_channels),
            layers_per_block=cfg.layers_per_block,
            cross_attention_dim=d_c,
            attention_head_dim=cfg.attention_heads,
            norm_num_groups=cfg.norm_groups,
        )

    def forward(self, x: torch.Tensor, t: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        return self.unet(x, t, encoder_hidden_states=c).sample


def ldm_loss(z0: torch.Tensor, s_d: torch.Tensor, t, eps: torch.Tensor, c: torch.Tensor,
             denoiser: Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor],
             schedule: NoiseSchedule) -> torch.Tensor:
    """
    Noise-prediction MSE over the latent channels

    Args:
        z0: (B, 2, h, w) clean latents
        s_d: (B, 1, h, w) downsampled corrupted mask
        t: Timesteps, scalar or (B,)
        eps: (B, 2, h, w) true noise
        c: (B, n, d_c) condition
        denoiser: eps_theta(x, t, c)

    Returns:
        Scalar loss
    """
    if s_d.shape[0] != z0.shape[0] or s_d.shape[-2:] != z0.shape[-2:] or s_d.shape[1] != 1:
        raise ValueError(f"mask channel {tuple(s_d.shape)} does not match latents {tuple(z0.shape)}")
    t = _timesteps(t, z0.shape[0], schedule, z0.device)
    z_t = forward_noise(z0, t, eps, schedule)
    pred = denoiser(torch.cat([z_t, s_d], dim=1), t, c)
    if pred.shape != eps.shape:
        raise ValueError(f"denoiser output {tuple(pred.shape)} does not match noise {tuple(eps.shape)}")
    loss = F.mse_loss(pred, eps)
    if not torch.isfinite(loss):
        raise NonFiniteLossError("LDM loss is not finite")
    return loss


@dataclass
class QCModel:
    """Everything needed to sample a pGT: frozen VAE, experts, denoiser and schedule"""

    vae: SegVAE
    toe: TeamOfExperts
    denoiser: ConditionalLDM
    schedule: NoiseSchedule
    num_labels: int
    latent_scale: float
    device: torch.device = torch.device("cpu")

    @property
    def compression_factor(self) -> int:
        return self.vae.compression_factor

    def eval(self) -> "QCModel":
        for module in (self.vae, self.toe, self.denoiser):
            module.eval()
        return self


TrajectoryCallback = Callable[[int, int, torch.Tensor], None]


@torch.no_grad()
def sample_pgt_batch(masks: np.ndarray, images: np.ndarray, ratios: Sequence[float], seeds: Sequence[int],
                     model: QCModel, steps: int = 20,
                     callback: Optional[TrajectoryCallback] = None) -> np.ndarray:
    """
    Deterministic DDIM (eta = 0) pGT sampling for a batch of slices

    Args:
        masks: (B, H, W) candidate masks, possibly empty
        images: (B, H, W) image slices in [0, 1]
        ratios: Slice ratios
        seeds: One initial-noise seed per slice
        model: QCModel
        steps: Reverse steps, 1..T
        callback: Called as callback(step_index, t, x) with the UNet input at every step

    Returns:
        (B, H, W) pGT label grids
    """
    if steps < 1 or steps > model.schedule.t_train:
        raise ValueError(f"steps must lie in [1, {model.schedule.t_train}]")
    masks = np.asarray(masks)
    images = np.asarray(images)
    if masks.shape != images.shape or masks.ndim != 3:
        raise ValueError(f"mask batch {masks.shape} and image batch {images.shape} must match as (B, H, W)")
    if len(ratios) != len(masks) or len(seeds) != len(masks):
        raise ValueError("one ratio and one seed are needed per slice")
    f = model.compression_factor
    if masks.shape[1] % f or masks.shape[2] % f:
        raise ValueError(f"slice size {masks.shape[1:]} is not divisible by the compression factor {f}")

    model.eval()
    device = model.device
    batch = len(masks)
    # Initial noise, one seeded stream per slice
    latent_shape = (LATENT_CHANNELS, masks.shape[1] // f, masks.shape[2] // f)
    z = torch.stack([
        torch.randn(latent_shape, generator=torch.Generator().manual_seed(int(s))) for s in seeds
    ]).to(device)
    s_d = downsample_mask(torch.as_tensor(masks, device=device), model.num_labels, f)
    c = model.toe(torch.as_tensor(np.asarray(ratios), dtype=torch.float32, device=device),
                  images=torch.as_tensor(images, dtype=torch.float32, device=device))

    # Reverse DDIM chain; the mask channel is concatenated unchanged at every step
    scheduler = model.schedule.make_scheduler()
    scheduler.set_timesteps(steps, device=device)
    for i, t in enumerate(scheduler.timesteps):
        x = torch.cat([z, s_d], dim=1)
        if callback is not None:
            callback(i, int(t), x)
        eps = model.denoiser(x, t.expand(batch).to(device), c)
        z = scheduler.step(eps, t, z, eta=0.0).prev_sample

    # Undo the latent scaling before decoding
    logits = model.vae.decode(z / model.latent_scale)
    return logits.argmax(dim=1).cpu().numpy().astype(np.int16)


def sample_pgt(mask: np.ndarray, image: np.ndarray, slice_ratio: float, seed: int, model: QCModel,
               steps: int = 20, callback: Optional[TrajectoryCallback] = None) -> np.ndarray:
    """Single-slice convenience wrapper around sample_pgt_batch"""
    return sample_pgt_batch(mask[None], image[None], [slice_ratio], [seed], model, steps, callback)[0]


@dataclass
class LdmTrainingResult:
    denoiser: ConditionalLDM
    toe: TeamOfExperts
    latent_scale: float
    log: List[Dict[str, float]] = field(default_factory=list)
    first_step_loss: float = float("nan")
    frozen_digests: Dict[str, str] = field(default_factory=dict)


@torch.no_grad()
def encode_means(vae: SegVAE, masks: np.ndarray, num_labels: int, batch_size: int,
                 device: torch.device) -> torch.Tensor:
    vae.eval()
    out = []
    for start in range(0, len(masks), batch_size):
        batch = torch.as_tensor(masks[start:start + batch_size].astype(np.int64), device=device)
        out.append(vae.encode(one_hot(batch, num_labels + 1))[0])
    return torch.cat(out)


def _group_slices(corpus: Corpus) -> "OrderedDict[tuple, list]":
    groups: "OrderedDict[tuple, list]" = OrderedDict()
    for pair in corpus:
        groups.setdefault((pair.subject_id, pair.slice_index), []).append(pair)
    return groups


def train_ldm(vae: SegVAE, corpus: Corpus, toe: TeamOfExperts, schedule: NoiseSchedule, cfg: LdmConfig,
              num_labels: int, seed: int, device: torch.device = torch.device("cpu"),
              show_progress: bool = True) -> LdmTrainingResult:
    """
    Stage-2 training: UNet and positional expert learn to predict the noise on GT latents

    Args:
        vae: Frozen stage-1 VAE
        corpus: Degraded pairs (several bands per slice)
        toe: Team of Experts; its vision expert stays frozen
        schedule: NoiseSchedule
        cfg: LdmConfig
        num_labels: L
        seed: Training seed

    Returns:
        LdmTrainingResult
    """
    if len(corpus) == 0:
        raise DataError("cannot train the diffusion model on an empty corpus")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    # Freeze the VAE
    vae = vae.to(device).eval()
    for p in vae.parameters():
        p.requires_grad_(False)
    toe = toe.to(device)
    frozen_before = {"vae": state_digest(vae), "vision": state_digest(toe.vision)}

    # One training item per slice; its degraded versions are picked per epoch
    groups = _group_slices(corpus)
    slices = list(groups.values())
    gts = np.stack([g[0].gt_mask for g in slices])
    images = torch.as_tensor(np.stack([g[0].image for g in slices]), dtype=torch.float32)
    ratios = torch.as_tensor([g[0].slice_ratio for g in slices], dtype=torch.float32)
    f = vae.compression_factor

    # GT latents, scaled to unit std
    z0 = encode_means(vae, gts, num_labels, cfg.batch_size, device).cpu()
    std = float(z0.std())
    latent_scale = 1.0 / std if std > 0 and math.isfinite(std) else 1.0
    z0 = z0 * latent_scale
    # Vision tokens are computed once
    with torch.no_grad():
        tokens = torch.cat([
            toe.image_opinion(images[s:s + cfg.batch_size].to(device)).cpu()
            for s in range(0, len(images), cfg.batch_size)
        ])
    s_d = [downsample_mask(torch.as_tensor(np.stack([p.degraded_mask for p in g])), num_labels, f) for g in slices]

    denoiser = ConditionalLDM(z0.shape[-1], toe.fusion.d_c, cfg).to(device)
    optimizer = torch.optim.Adam(list(denoiser.parameters()) + list(toe.trainable_parameters()), lr=cfg.lr)
    generator = torch.Generator().manual_seed(seed)
    result = LdmTrainingResult(denoiser=denoiser, toe=toe, latent_scale=latent_scale)
    bad_steps = 0

    epochs = tqdm(range(cfg.epochs), desc="Stage 2 (LDM)", disable=not show_progress)
    for epoch in epochs:
        denoiser.train()
        toe.train()
        # One random band per slice this epoch
        band_pick = [int(rng.integers(len(g))) for g in slices]
        order = torch.randperm(len(slices), generator=generator)
        total, steps = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            z0_b = z0[idx].to(device)
            s_d_b = torch.cat([s_d[i][band_pick[i]:band_pick[i] + 1] for i in idx.tolist()]).to(device)
            t = torch.randint(0, schedule.t_train, (len(idx),), generator=generator).to(device)
            eps = torch.randn(z0_b.shape, generator=generator).to(device)
            c = toe(ratios[idx].to(device), image_tokens=tokens[idx].to(device))
            try:
                loss = ldm_loss(z0_b, s_d_b, t, eps, c, denoiser, schedule)
            except NonFiniteLossError as e:
                bad_steps += 1
                logger.warning("Epoch %d: %s (%d consecutive)", epoch, e, bad_steps)
                if bad_steps >= cfg.divergence_patience:
                    raise TrainingDivergenceError(f"LDM loss non-finite for {bad_steps} consecutive steps") from e
                continue
            bad_steps = 0
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            value = float(loss.detach())
            if math.isnan(result.first_step_loss):
                result.first_step_loss = value
            total += value
            steps += 1
        entry = {"epoch": epoch, "loss": total / max(1, steps)}
        result.log.append(entry)
        epochs.set_postfix(loss=f"{entry['loss']:.4f}")
        logger.info("Stage 2 epoch %d: loss=%.5f", epoch, entry["loss"])

    # Frozen parts must be bit-identical after training
    frozen_after = {"vae": state_digest(vae), "vision": state_digest(toe.vision)}
    for name, digest in frozen_before.items():
        if frozen_after[name] != digest:
            raise ChecksumError(f"frozen {name} parameters changed during stage-2 training")
    result.frozen_digests = frozen_after
    denoiser.eval()
    toe.eval()
    return result
