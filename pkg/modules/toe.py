"""
Team of Experts Module
Positional and vision experts whose opinions are fused into the diffusion condition
"""

import logging
from typing import Iterator, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision import models

from modules.config import ToeConfig

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
MIN_RESNET_SIDE = 64
RANDOM_CNN_GRID = 4


class PositionalExpert(nn.Module):
    """E1: lightweight MLP embedding the slice ratio"""

    def __init__(self, hidden: Sequence[int] = (64, 128), d_e: int = 256):
        super().__init__()
        widths = [1, *hidden]
        layers = []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            layers += [nn.Linear(w_in, w_out), nn.SiLU()]
        layers.append(nn.Linear(widths[-1], d_e))
        self.mlp = nn.Sequential(*layers)
        self.d_e = d_e

    def forward(self, ratios: torch.Tensor) -> torch.Tensor:
        """(B,) ratios in [0,1] -> (B, d_e) opinions"""
        ratios = torch.as_tensor(ratios, dtype=torch.float32, device=self.mlp[0].weight.device).reshape(-1, 1)
        if ratios.numel() and (ratios.min() < 0 or ratios.max() > 1):
            raise ValueError("slice ratio must lie in [0, 1]")
        return self.mlp(ratios)


class RandomCNNEncoder(nn.Module):
    """Fixed-seed random conv encoder producing a 4x4 grid of tokens"""

    def __init__(self, channels: int = 64, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.body = nn.Sequential(
                nn.Conv2d(3, channels, 3, stride=2, padding=1),
                nn.ReLU(),
                nn.Conv2d(channels, channels, 3, stride=2, padding=1),
                nn.ReLU(),
                nn.Conv2d(channels, channels, 3, padding=1),
            )
        self.out_dim = channels

    def forward(self, x):
        return F.adaptive_avg_pool2d(self.body(x), RANDOM_CNN_GRID)


def _resnet18_trunk(pretrained: bool, seed: int) -> nn.Module:
    if pretrained:
        net = models.resnet18(weights=models.ResNet18_Weights.DEFAULT)
    else:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            net = models.resnet18(weights=None)
    return nn.Sequential(*list(net.children())[:-2])


class VisionExpert(nn.Module):
    """
    E2: frozen 2D image encoder returning patch tokens

    Args:
        encoder: 'resnet18' or 'random_cnn'
        pretrained: Load ImageNet weights for resnet18
        substitute: Encoder used when the requested one cannot be built
        seed: Initialization seed of randomly initialized encoders
        channels: Width of the random CNN
    """

    def __init__(self, encoder: str = "resnet18", pretrained: bool = True, substitute: str = "random_cnn",
                 seed: int = 0, channels: int = 64):
        super().__init__()
        self.backbone, self.identity, self.out_dim = self._build(encoder, pretrained, seed, channels)
        if self.backbone is None:
            logger.warning("Vision encoder %s unavailable, falling back to %s", encoder, substitute)
            self.backbone, self.identity, self.out_dim = self._build(substitute, False, seed, channels)
        self.backbone.eval()
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    @staticmethod
    def _build(encoder: str, pretrained: bool, seed: int, channels: int):
        try:
            if encoder == "resnet18":
                source = "imagenet" if pretrained else f"random-seed{seed}"
                return _resnet18_trunk(pretrained, seed), f"resnet18:{source}", 512
            if encoder == "random_cnn":
                return RandomCNNEncoder(channels, seed), f"random_cnn:seed{seed}:c{channels}", channels
        except Exception as e:
            logger.warning("Could not build %s: %s", encoder, e)
            return None, None, None
        raise ValueError(f"unknown vision encoder: {encoder}")

    def train(self, mode: bool = True):
        # frozen: batch-norm statistics must never update
        super().train(False)
        return self

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W) or (B, 1, H, W) images in [0,1] -> (B, n_tokens, out_dim)"""
        if images.dim() == 3:
            images = images.unsqueeze(1)
        if images.dim() != 4 or images.shape[1] != 1:
            raise ValueError(f"expected single-channel images, got shape {tuple(images.shape)}")
        if images.min() < -1e-4 or images.max() > 1 + 1e-4:
            raise ValueError("vision expert expects images scaled to [0, 1]")
        # Grey to RGB, ImageNet normalization
        x = images.float().expand(-1, 3, -1, -1)
        if self.identity.startswith("resnet18") and min(x.shape[-2:]) < MIN_RESNET_SIDE:
            x = F.interpolate(x, size=(MIN_RESNET_SIDE, MIN_RESNET_SIDE), mode="bilinear", align_corners=False)
        x = (x - self.mean) / self.std
        features = self.backbone(x)
        return features.flatten(2).transpose(1, 2).contiguous()


class CrossAttentionFusion(nn.Module):
    """
    Multi-head cross-attention c = softmax(Q K^T / sqrt(d_k)) V

    Q = F_Q(o1), K = F_K(o2), V = F_V(o2); heads are concatenated without an output projection.
    """

    def __init__(self, d_q: int, d_kv: int, d_c: int, n_heads: int):
        super().__init__()
        if d_c % n_heads:
            raise ValueError("n_heads must divide d_c")
        self.d_q = d_q
        self.d_kv = d_kv
        self.d_c = d_c
        self.n_heads = n_heads
        self.d_k = d_c // n_heads
        self.f_q = nn.Linear(d_q, d_c)
        self.f_k = nn.Linear(d_kv, d_c)
        self.f_v = nn.Linear(d_kv, d_c)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, self.d_k).transpose(1, 2)

    def forward(self, o1: torch.Tensor, o2: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            o1: (B, d_q) or (B, n_q, d_q) query opinions
            o2: (B, n_kv, d_kv) key/value opinions

        Returns:
            (c of shape (B, n_q, d_c), attention weights of shape (B, heads, n_q, n_kv))
        """
        if o1.dim() == 2:
            o1 = o1.unsqueeze(1)
        if o2.dim() == 2:
            o2 = o2.unsqueeze(1)
        if o1.shape[-1] != self.d_q or o2.shape[-1] != self.d_kv:
            raise ValueError(
                f"opinion widths {o1.shape[-1]}/{o2.shape[-1]} do not match projections {self.d_q}/{self.d_kv}"
            )
        if o1.shape[0] != o2.shape[0]:
            raise ValueError("opinions must share the batch dimension")
        q = self._heads(self.f_q(o1))
        k = self._heads(self.f_k(o2))
        v = self._heads(self.f_v(o2))
        # Scaled dot-product attention per head
        weights = torch.softmax(q @ k.transpose(-2, -1) / self.d_k ** 0.5, dim=-1)
        # Concatenate heads
        c = (weights @ v).transpose(1, 2).reshape(o1.shape[0], o1.shape[1], self.d_c)
        return c, weights


class TeamOfExperts(nn.Module):
    """Builds the condition c from slice ratio and image, per the configured mode"""

    def __init__(self, cfg: ToeConfig):
        super().__init__()
        self.mode = cfg.mode
        self.positional = PositionalExpert(cfg.e1_hidden, cfg.d_e)
        self.vision = VisionExpert(
            cfg.vision_encoder, cfg.vision_pretrained, cfg.substitute_encoder, cfg.vision_seed, cfg.random_cnn_channels
        )
        self.fusion = CrossAttentionFusion(cfg.d_e, self.vision.out_dim, cfg.d_c, cfg.n_heads)

    @property
    def identity(self) -> str:
        return f"{self.vision.identity}|mode={self.mode}"

    def trainable_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.positional.parameters()
        yield from self.fusion.parameters()

    def image_opinion(self, images: torch.Tensor) -> torch.Tensor:
        return self.vision(images)

    def forward(self, ratios: torch.Tensor, images: Optional[torch.Tensor] = None,
                image_tokens: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Args:
            ratios: (B,) slice ratios
            images: (B, H, W) slices, unless image_tokens is given
            image_tokens: Precomputed vision opinions (B, n, d)

        Returns:
            Condition tokens (B, n_tokens, d_c)
        """
        if self.mode == "positional":
            return self.fusion.f_q(self.positional(ratios)).unsqueeze(1)
        if image_tokens is None:
            if images is None:
                raise ValueError(f"mode {self.mode} needs an image or precomputed image tokens")
            image_tokens = self.vision(images)
        if self.mode == "image":
            return self.fusion.f_v(image_tokens)
        # Full mode: positional query attends to image tokens
        c, _ = self.fusion(self.positional(ratios), image_tokens)
        return c
