"""Networks that split an image into a binary anatomy map and a Gaussian modality code.

Tensors follow the torch NCHW convention throughout: an image batch is
``(N, 1, H, W)``, an anatomy factor ``(N, C, H, W)`` and a modality code ``(N, n_z)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


class NumericFailure(RuntimeError):
    """Raised when a forward pass or loss produces non-finite values."""


@dataclass(frozen=True)
class ModelConfig:
    height: int = 64
    width: int = 64
    channels: int = 8
    latent_dims: int = 8
    num_classes: int = 3
    encoder_depth: int = 3
    base_filters: int = 32
    decoder_filters: int = 16
    film_stages: int = 4
    seed: int = 0

    def __post_init__(self):
        stride = 2**self.encoder_depth
        if self.height % stride or self.width % stride:
            raise ValueError(
                f"height/width must be divisible by 2**encoder_depth={stride}, "
                f"got {self.height}x{self.width}"
            )
        if self.height % 16 or self.width % 16:
            raise ValueError("height/width must be divisible by 16 (modality encoder)")
        if self.channels < self.num_classes:
            raise ValueError("channels must be >= num_classes")
        if self.latent_dims < 1:
            raise ValueError("latent_dims must be >= 1")
        if self.film_stages < 1:
            raise ValueError("film_stages must be >= 1")
        if self.num_classes < 1 or self.base_filters < 1 or self.decoder_filters < 1:
            raise ValueError("num_classes, base_filters and decoder_filters must be >= 1")

    def to_dict(self) -> dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        return cls(**{k: int(v) for k, v in values.items() if k in known})


def _check_finite(t: Tensor, what: str) -> Tensor:
    if not torch.isfinite(t).all():
        raise NumericFailure(f"non-finite values in {what}")
    return t


def _check_shape(t: Tensor, expected: tuple, what: str) -> None:
    if tuple(t.shape[1:]) != tuple(expected):
        raise ValueError(f"{what}: expected shape (N, {', '.join(map(str, expected))}), got {tuple(t.shape)}")


def init_weights(module: nn.Module, std: float | None = None) -> None:
    """Truncated-normal init scaled by fan-in, or a fixed ``std`` when given."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            s = std if std is not None else math.sqrt(2.0 / fan_in)
            nn.init.trunc_normal_(m.weight, std=s, a=-2 * s, b=2 * s)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


# -- straight-through binarization ------------------------------------------


class _ArgmaxOneHotSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, soft):
        idx = soft.argmax(dim=1, keepdim=True)
        return torch.zeros_like(soft).scatter_(1, idx, 1.0)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output


def binarize(soft: Tensor) -> Tensor:
    """Per-pixel one-hot of the channel argmax; gradients pass through unchanged.

    Equal to ``floor(soft + 0.5)`` wherever a channel exceeds 0.5. Where none does
    (or on exact ties) the lowest-index maximal channel wins, so every pixel stays
    one-hot.
    """
    return _ArgmaxOneHotSTE.apply(soft)


# -- modality sampling and FiLM ---------------------------------------------


def sample_posterior(
    mean: Tensor,
    log_variance: Tensor,
    generator: torch.Generator | int | None = None,
    inference: bool = False,
) -> Tensor:
    """Reparameterised draw ``mean + exp(logvar / 2) * eps``; ``inference`` returns the mean."""
    if inference:
        return mean
    if isinstance(generator, int):
        generator = torch.Generator().manual_seed(generator)
    log_variance = log_variance.clamp(LOGVAR_MIN, LOGVAR_MAX)
    eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    return mean + torch.exp(0.5 * log_variance) * eps


def film_modulate(feature_map: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """``gamma[k] * F[..., k, h, w] + beta[k]``, broadcast over space.

    ``feature_map`` is ``(N, K, H, W)`` (or ``(K, H, W)``); ``gamma`` and ``beta``
    are ``(N, K)`` (or ``(K,)``).
    """
    k = feature_map.shape[-3]
    if gamma.shape[-1] != k or beta.shape[-1] != k:
        raise ValueError(f"FiLM parameters must have length {k}, got {gamma.shape[-1]} and {beta.shape[-1]}")
    return gamma[..., None, None] * feature_map + beta[..., None, None]


# -- building blocks --------------------------------------------------------


def conv_block(in_ch: int, out_ch: int, norm: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=not norm)]
    if norm:
        layers.append(nn.BatchNorm2d(out_ch))
    layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


def double_conv(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(conv_block(in_ch, out_ch), conv_block(out_ch, out_ch))


class AnatomyEncoder(nn.Module):
    """U-Net with a channel-wise softmax head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = [cfg.base_filters * 2**i for i in range(cfg.encoder_depth + 1)]
        self.down = nn.ModuleList()
        in_ch = 1
        for w in widths[:-1]:
            self.down.append(double_conv(in_ch, w))
            in_ch = w
        self.bottleneck = double_conv(widths[-2], widths[-1])
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        for w_skip, w_in in zip(reversed(widths[:-1]), reversed(widths[1:])):
            self.up.append(nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), conv_block(w_in, w_skip)))
            self.merge.append(double_conv(2 * w_skip, w_skip))
        self.head = nn.Conv2d(widths[0], cfg.channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, merge, skip in zip(self.up, self.merge, reversed(skips)):
            x = merge(torch.cat([up(x), skip], dim=1))
        return torch.softmax(self.head(x), dim=1)


class ModalityEncoder(nn.Module):
    """Strided convolutions over ``[image, anatomy]`` then fully connected Gaussian heads."""

    def __init__(self, cfg: ModelConfig, widths=(16, 32, 64, 64), hidden: int = 32):
        super().__init__()
        layers: list[nn.Module] = []
        in_ch = 1 + cfg.channels
        for w in widths:
            layers += [nn.Conv2d(in_ch, w, 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(w), nn.LeakyReLU(0.2, inplace=True)]
            in_ch = w
        self.body = nn.Sequential(*layers)
        reduce = 2 ** len(widths)
        flat = in_ch * (cfg.height // reduce) * (cfg.width // reduce)
        self.fc = nn.Sequential(nn.Flatten(), nn.Linear(flat, hidden), nn.LeakyReLU(0.2, inplace=True))
        self.mean = nn.Linear(hidden, cfg.latent_dims)
        self.log_variance = nn.Linear(hidden, cfg.latent_dims)

    def forward(self, x: Tensor, s: Tensor) -> tuple[Tensor, Tensor]:
        h = self.fc(self.body(torch.cat([x, s], dim=1)))
        return self.mean(h), self.log_variance(h).clamp(LOGVAR_MIN, LOGVAR_MAX)


class Segmentor(nn.Module):
    """Two conv blocks and a 1x1 convolution to ``L + 1`` softmax channels (last is background)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.base_filters
        self.body = nn.Sequential(conv_block(cfg.channels, w), conv_block(w, w))
        self.head = nn.Conv2d(w, cfg.num_classes + 1, 1)

    def forward(self, s: Tensor) -> Tensor:
        return torch.softmax(self.head(self.body(s)), dim=1)


class FiLMHead(nn.Module):
    """Two fully connected layers mapping z to (gamma, beta) for every decoder stage."""

    def __init__(self, cfg: ModelConfig, hidden: int = 32):
        super().__init__()
        self.stages = cfg.film_stages
        self.k = cfg.decoder_filters
        self.net = nn.Sequential(
            nn.Linear(cfg.latent_dims, hidden),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Linear(hidden, 2 * self.stages * self.k),
        )

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        """Returns gamma and beta, each ``(N, stages, K)``; gamma is centred on 1."""
        out = self.net(z).view(-1, self.stages, 2, self.k)
        return 1.0 + out[:, :, 0], out[:, :, 1]


class Decoder(nn.Module):
    """Full-resolution conv stack over the anatomy map with FiLM-modulated residual stages.

    z enters only through per-channel affine parameters, never spatially.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        k = cfg.decoder_filters
        self.film = FiLMHead(cfg)
        self.stem = nn.Sequential(nn.Conv2d(cfg.channels, k, 3, padding=1), nn.LeakyReLU(0.2, inplace=True))
        self.convs = nn.ModuleList(nn.Conv2d(k, k, 3, padding=1, bias=False) for _ in range(cfg.film_stages))
        self.norms = nn.ModuleList(nn.BatchNorm2d(k, affine=False) for _ in range(cfg.film_stages))
        self.out = nn.Conv2d(k, 1, 3, padding=1)

    def forward(self, s: Tensor, z: Tensor | None = None, film_params: tuple[Tensor, Tensor] | None = None) -> Tensor:
        gamma, beta = film_params if film_params is not None else self.film(z)
        h = self.stem(s)
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            f = film_modulate(norm(conv(h)), gamma[:, i], beta[:, i])
            h = h + F.leaky_relu(f, 0.2)
        return torch.tanh(self.out(h))


class MaskDiscriminator(nn.Module):
    """DCGAN-style strided conv critic without batch normalization; unbounded scalar output."""

    def __init__(self, cfg: ModelConfig, widths=(32, 64, 128, 128)):
        super().__init__()
        layers: list[nn.Module] = []
        in_ch = cfg.num_classes
        for w in widths:
            layers += [nn.Conv2d(in_ch, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
            in_ch = w
        reduce = 2 ** len(widths)
        self.body = nn.Sequential(*layers, nn.Flatten())
        self.head = nn.Linear(in_ch * (cfg.height // reduce) * (cfg.width // reduce), 1)

    def forward(self, masks: Tensor) -> Tensor:
        return self.head(self.body(masks)).squeeze(1)


class LVVRegressor(nn.Module):
    """Predicts the fraction of image pixels occupied by the LV cavity from the anatomy map.

    Two 3x3x16 ReLU convs, a global average (which makes the head a learned
    pixel counter), then fully connected layers of 16 and 1 units, both rectified.
    """

    def __init__(self, cfg: ModelConfig, filters: int = 16, hidden: int = 16):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cfg.channels, filters, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(filters, filters, 3, padding=1), nn.ReLU(inplace=True),
        )
        self.fc = nn.Sequential(nn.Linear(filters, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, 1), nn.ReLU())

    def forward(self, s: Tensor) -> Tensor:
        return self.fc(self.body(s).mean(dim=(2, 3))).squeeze(1)


# -- the assembled model ----------------------------------------------------


class FactorModel(nn.Module):
    """Anatomy encoder, modality encoder, segmentor, decoder and mask discriminator.

    ``generator_parameters()`` and ``discriminator.parameters()`` are disjoint so the
    two adversaries can be optimised separately.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.lvv_regressor: LVVRegressor | None = None
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.anatomy_encoder = AnatomyEncoder(cfg)
            self.modality_encoder = ModalityEncoder(cfg)
            self.segmentor = Segmentor(cfg)
            self.decoder = Decoder(cfg)
            self.discriminator = MaskDiscriminator(cfg)
            for net in (self.anatomy_encoder, self.modality_encoder, self.segmentor, self.decoder):
                init_weights(net)
            init_weights(self.discriminator, std=0.02)

    def add_lvv_regressor(self) -> LVVRegressor:
        if self.lvv_regressor is None:
            with torch.random.fork_rng():
                torch.manual_seed(self.cfg.seed + 1)
                self.lvv_regressor = LVVRegressor(self.cfg)
                init_weights(self.lvv_regressor)
            # zero weights and a positive bias: the rectified output starts alive for every input
            nn.init.zeros_(self.lvv_regressor.fc[2].weight)
            nn.init.constant_(self.lvv_regressor.fc[2].bias, 0.05)
        return self.lvv_regressor

    def generator_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("discriminator."):
                yield p

    # shape-checked operations

    def encode_anatomy(self, x: Tensor) -> Tensor:
        _check_shape(x, (1, self.cfg.height, self.cfg.width), "image")
        return _check_finite(self.anatomy_encoder(x), "anatomy factor")

    def encode_modality(self, x: Tensor, hard_s: Tensor) -> tuple[Tensor, Tensor]:
        _check_shape(x, (1, self.cfg.height, self.cfg.width), "image")
        _check_shape(hard_s, (self.cfg.channels, self.cfg.height, self.cfg.width), "anatomy factor")
        if x.shape[0] != hard_s.shape[0]:
            raise ValueError("image and anatomy batch sizes differ")
        mean, logvar = self.modality_encoder(x, hard_s)
        return _check_finite(mean, "posterior mean"), _check_finite(logvar, "posterior log-variance")

    def decode(self, hard_s: Tensor, z: Tensor | None = None, film_params: tuple[Tensor, Tensor] | None = None) -> Tensor:
        _check_shape(hard_s, (self.cfg.channels, self.cfg.height, self.cfg.width), "anatomy factor")
        if film_params is None:
            if z is None:
                raise ValueError("decode needs z or film_params")
            _check_shape(z, (self.cfg.latent_dims,), "modality factor")
        return self.decoder(hard_s, z, film_params)

    def segment(self, hard_s: Tensor) -> Tensor:
        _check_shape(hard_s, (self.cfg.channels, self.cfg.height, self.cfg.width), "anatomy factor")
        return self.segmentor(hard_s)

    def discriminate(self, masks: Tensor) -> Tensor:
        _check_shape(masks, (self.cfg.num_classes, self.cfg.height, self.cfg.width), "mask")
        return self.discriminator(masks)

    def predict_lvv_fraction(self, hard_s: Tensor) -> Tensor:
        if self.lvv_regressor is None:
            raise ValueError("model has no LVV regressor; run finetune_multitask first")
        return self.lvv_regressor(hard_s)

    @torch.no_grad()
    def factorize(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Inference-mode ``(hard_s, z_mean, log_variance)`` for a batch of images."""
        s = binarize(self.encode_anatomy(x))
        mean, logvar = self.encode_modality(x, s)
        return s, mean, logvar
