"""Multi-scale 3D Glow: actnorm, LU 1x1x1 convolution and affine coupling.

Every layer maps ``x -> (y, logdet)`` where ``logdet`` has one entry per
batch element, and has an exact ``inverse``. Tensors are laid out as
``(N, C, D, H, W)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

LOG_2PI = math.log(2.0 * math.pi)


class StructureError(ValueError):
    """Shapes or channel counts incompatible with the flow topology."""


class ActNormInitError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class FlowConfig:
    levels: int = 4
    flows_per_level: int = 64
    patch_edge: int = 48
    in_channels: int = 1
    coupling_hidden: int = 32
    scale_clamp: float = 2.0

    def __post_init__(self):
        for name in ("levels", "flows_per_level", "patch_edge", "in_channels", "coupling_hidden"):
            if getattr(self, name) < 1:
                raise StructureError(f"{name} must be a positive integer")
        if self.scale_clamp <= 0:
            raise StructureError("scale_clamp must be positive")
        if self.patch_edge % (2**self.levels):
            raise StructureError(
                f"patch edge {self.patch_edge} is not divisible by 2**levels = {2**self.levels}"
            )

    @property
    def n_dims(self) -> int:
        return self.in_channels * self.patch_edge**3


@dataclass(frozen=True)
class LogDensity:
    nats: float
    per_dim_nats: float
    bits_per_dim: float

    @classmethod
    def from_nats(cls, nats: float, n_dims: int) -> "LogDensity":
        per_dim = nats / n_dims
        return cls(nats, per_dim, -per_dim / math.log(2.0))


def _spatial_size(x: torch.Tensor) -> int:
    return x.shape[2] * x.shape[3] * x.shape[4]


class ActNorm(nn.Module):
    """Per-channel affine map ``y = exp(log_scale) * x + bias``."""

    def __init__(self, channels: int):
        super().__init__()
        self.log_scale = nn.Parameter(torch.zeros(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.uint8))

    def _view(self, p: torch.Tensor) -> torch.Tensor:
        return p.view(1, -1, 1, 1, 1)

    @torch.no_grad()
    def initialize(self, x: torch.Tensor) -> None:
        """Data-dependent init: zero mean, unit (population) variance per channel."""
        if x.shape[0] < 2:
            raise ActNormInitError("actnorm init needs at least 2 samples")
        xd = x.double().transpose(0, 1).reshape(x.shape[1], -1)
        mean = xd.mean(dim=1)
        std = xd.var(dim=1, unbiased=False).sqrt()
        if torch.any(std <= 0):
            bad = torch.nonzero(std <= 0).flatten().tolist()
            raise ActNormInitError(f"zero variance in channels {bad}; data looks degenerate")
        self.log_scale.copy_(-torch.log(std))
        self.bias.copy_(-mean / std)
        self.initialized.fill_(1)

    def forward(self, x):
        y = x * torch.exp(self._view(self.log_scale)) + self._view(self.bias)
        logdet = _spatial_size(x) * self.log_scale.sum()
        return y, logdet.expand(x.shape[0])

    def inverse(self, y):
        return (y - self._view(self.bias)) * torch.exp(-self._view(self.log_scale))


class InvConv1x1x1(nn.Module):
    """Channel mixing ``W = P L (U + diag(sign * exp(log_s)))`` at every voxel.

    ``P`` and ``sign`` are frozen buffers; ``L`` is unit lower triangular.
    """

    def __init__(self, channels: int, generator: torch.Generator | None = None,
                 identity: bool = False):
        super().__init__()
        c = channels
        if identity:
            p, lower, upper = torch.eye(c), torch.eye(c), torch.eye(c)
        else:
            q, _ = torch.linalg.qr(torch.randn(c, c, generator=generator, dtype=torch.float64))
            p, lower, upper = torch.linalg.lu(q)
        s = torch.diagonal(upper)
        self.register_buffer("perm", p.float())
        self.register_buffer("sign_s", torch.sign(s).float())
        self.lower = nn.Parameter(torch.tril(lower, -1).float())
        self.upper = nn.Parameter(torch.triu(upper, 1).float())
        self.log_s = nn.Parameter(torch.log(torch.abs(s)).float())
        self.register_buffer("l_mask", torch.tril(torch.ones(c, c), -1))
        self.register_buffer("u_mask", torch.triu(torch.ones(c, c), 1))

    def _factors(self):
        eye = torch.eye(self.log_s.shape[0], dtype=self.log_s.dtype, device=self.log_s.device)
        lower = self.lower * self.l_mask + eye
        upper = self.upper * self.u_mask + torch.diag(self.sign_s * torch.exp(self.log_s))
        return lower, upper

    def weight(self) -> torch.Tensor:
        lower, upper = self._factors()
        return self.perm @ lower @ upper

    def forward(self, x):
        c = x.shape[1]
        y = F.conv3d(x, self.weight().view(c, c, 1, 1, 1))
        logdet = _spatial_size(x) * self.log_s.sum()
        return y, logdet.expand(x.shape[0])

    def inverse(self, y):
        n, c, d, h, w = y.shape
        lower, upper = self._factors()
        cols = y.transpose(0, 1).reshape(c, -1)
        cols = self.perm.transpose(0, 1) @ cols
        cols = torch.linalg.solve_triangular(lower, cols, upper=False, unitriangular=True)
        cols = torch.linalg.solve_triangular(upper, cols, upper=True)
        return cols.reshape(c, n, d, h, w).transpose(0, 1)


def _uniform_init_(conv: nn.Conv3d, generator: torch.Generator | None) -> None:
    fan_in = conv.in_channels * math.prod(conv.kernel_size)
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        conv.weight.copy_(torch.rand(conv.weight.shape, generator=generator) * 2 * bound - bound)
        conv.bias.copy_(torch.rand(conv.bias.shape, generator=generator) * 2 * bound - bound)


class AffineCoupling(nn.Module):
    """Scale and shift the second channel half, conditioned on the first.

    The log-scale is soft-clamped as ``clamp * tanh(raw / clamp)``; the last
    subnet layer starts at zero so the layer is the identity at init.
    """

    def __init__(self, channels: int, hidden: int = 32, clamp: float = 2.0,
                 generator: torch.Generator | None = None):
        super().__init__()
        if channels % 2:
            raise StructureError(f"coupling needs an even channel count, got {channels}")
        half = channels // 2
        self.clamp = float(clamp)
        self.net = nn.Sequential(
            nn.Conv3d(half, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv3d(hidden, hidden, 1),
            nn.ReLU(),
            nn.Conv3d(hidden, channels, 3, padding=1),
        )
        _uniform_init_(self.net[0], generator)
        _uniform_init_(self.net[2], generator)
        nn.init.zeros_(self.net[4].weight)
        nn.init.zeros_(self.net[4].bias)

    def _scale_shift(self, xa):
        h = self.net(xa)
        half = xa.shape[1]
        raw_s, t = h[:, :half], h[:, half:]
        log_s = self.clamp * torch.tanh(raw_s / self.clamp)
        return log_s, t

    def forward(self, x):
        xa, xb = x.chunk(2, dim=1)
        log_s, t = self._scale_shift(xa)
        yb = torch.exp(log_s) * xb + t
        return torch.cat([xa, yb], dim=1), log_s.flatten(1).sum(1)

    def inverse(self, y):
        ya, yb = y.chunk(2, dim=1)
        log_s, t = self._scale_shift(ya)
        return torch.cat([ya, (yb - t) * torch.exp(-log_s)], dim=1)


def squeeze(x: torch.Tensor) -> torch.Tensor:
    """Fold each 2x2x2 block into channels: ``(C, D, H, W) -> (8C, D/2, H/2, W/2)``.

    Output channel ``8c + 4dz + 2dy + dx`` holds input channel ``c`` at
    offset ``(dz, dy, dx)`` of the block.
    """
    n, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise StructureError(f"squeeze needs even spatial dims, got {(d, h, w)}")
    x = x.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
    x = x.permute(0, 1, 3, 5, 7, 2, 4, 6)
    return x.reshape(n, c * 8, d // 2, h // 2, w // 2)


def unsqueeze(x: torch.Tensor) -> torch.Tensor:
    n, c8, d, h, w = x.shape
    if c8 % 8:
        raise StructureError(f"unsqueeze needs a channel count divisible by 8, got {c8}")
    c = c8 // 8
    x = x.reshape(n, c, 2, 2, 2, d, h, w)
    x = x.permute(0, 1, 5, 2, 6, 3, 7, 4)
    return x.reshape(n, c, d * 2, h * 2, w * 2)


def split(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Channel halving: returns ``(kept, emitted)``."""
    if x.shape[1] % 2:
        raise StructureError(f"split needs an even channel count, got {x.shape[1]}")
    kept, emitted = x.chunk(2, dim=1)
    return kept, emitted


class FlowStep(nn.Module):
    def __init__(self, channels: int, cfg: FlowConfig, generator=None, identity_conv=False):
        super().__init__()
        self.actnorm = ActNorm(channels)
        self.invconv = InvConv1x1x1(channels, generator, identity=identity_conv)
        self.coupling = AffineCoupling(channels, cfg.coupling_hidden, cfg.scale_clamp, generator)

    def layers(self):
        return (self.actnorm, self.invconv, self.coupling)

    def forward(self, x):
        total = 0
        for layer in self.layers():
            x, ld = layer(x)
            total = total + ld
        return x, total

    def inverse(self, y):
        for layer in reversed(self.layers()):
            y = layer.inverse(y)
        return y


class Glow3D(nn.Module):
    """Per level: squeeze, ``flows_per_level`` flow steps, then split (except the last)."""

    def __init__(self, cfg: FlowConfig, seed: int = 0, identity_conv: bool = False):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        levels = []
        c = cfg.in_channels
        for _ in range(cfg.levels):
            c *= 8
            levels.append(nn.ModuleList(
                FlowStep(c, cfg, gen, identity_conv) for _ in range(cfg.flows_per_level)
            ))
            c //= 2
        self.levels = nn.ModuleList(levels)

    def latent_shapes(self) -> list[tuple[int, int, int, int]]:
        shapes = []
        c, e = self.cfg.in_channels, self.cfg.patch_edge
        for lvl in range(self.cfg.levels):
            c, e = c * 8, e // 2
            if lvl < self.cfg.levels - 1:
                c //= 2
            shapes.append((c, e, e, e))
        return shapes

    def _check_input(self, x):
        e, ch = self.cfg.patch_edge, self.cfg.in_channels
        if x.dim() != 5 or tuple(x.shape[1:]) != (ch, e, e, e):
            raise StructureError(f"expected input of shape (N, {ch}, {e}, {e}, {e}), got {tuple(x.shape)}")

    def forward(self, x):
        """Returns ``(latents, logdet)``; latents[i] is emitted at level i+1."""
        self._check_input(x)
        latents = []
        logdet = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
        h = x
        for lvl, steps in enumerate(self.levels):
            h = squeeze(h)
            for step in steps:
                h, ld = step(h)
                logdet = logdet + ld
            if lvl < len(self.levels) - 1:
                h, z = split(h)
                latents.append(z)
        latents.append(h)
        return latents, logdet

    def inverse(self, latents):
        shapes = self.latent_shapes()
        if len(latents) != len(shapes):
            raise StructureError(f"expected {len(shapes)} latents, got {len(latents)}")
        for z, s in zip(latents, shapes):
            if tuple(z.shape[1:]) != s:
                raise StructureError(f"latent shape {tuple(z.shape[1:])} does not match {s}")
        h = latents[-1]
        for lvl in reversed(range(len(self.levels))):
            if lvl < len(self.levels) - 1:
                h = torch.cat([h, latents[lvl]], dim=1)
            for step in reversed(self.levels[lvl]):
                h = step.inverse(h)
            h = unsqueeze(h)
        return h

    def log_prob(self, x) -> torch.Tensor:
        """Exact log-likelihood in nats, one value per batch element."""
        latents, logdet = self(x)
        prior = sum(prior_log_prob(z) for z in latents)
        return prior + logdet

    def log_density(self, x) -> list[LogDensity]:
        nats = self.log_prob(x)
        return [LogDensity.from_nats(float(v), self.cfg.n_dims) for v in nats]

    def actnorms(self):
        return [m for m in self.modules() if isinstance(m, ActNorm)]

    @torch.no_grad()
    def initialize(self, x) -> None:
        """Data-dependent actnorm init, layer by layer, on ``x``."""
        self._check_input(x)
        h = x
        for lvl, steps in enumerate(self.levels):
            h = squeeze(h)
            for step in steps:
                step.actnorm.initialize(h)
                h, _ = step(h)
            if lvl < len(self.levels) - 1:
                h, _ = split(h)

    @torch.no_grad()
    def sample(self, n: int = 1, temperature: float = 1.0, seed: int = 0) -> torch.Tensor:
        gen = torch.Generator().manual_seed(seed)
        dtype = next(self.parameters()).dtype
        latents = [
            torch.randn((n, *s), generator=gen, dtype=torch.float64).to(dtype) * temperature
            for s in self.latent_shapes()
        ]
        return self.inverse(latents)


def prior_log_prob(z: torch.Tensor) -> torch.Tensor:
    """Standard-normal log-density summed over all but the batch axis."""
    return (-0.5 * z.pow(2) - 0.5 * LOG_2PI).flatten(1).sum(1)


def flatten_latents(latents) -> torch.Tensor:
    return torch.cat([z.flatten(1) for z in latents], dim=1)


def unflatten_latents(flat: torch.Tensor, shapes) -> list[torch.Tensor]:
    out, i = [], 0
    for s in shapes:
        k = math.prod(s)
        out.append(flat[:, i:i + k].reshape(flat.shape[0], *s))
        i += k
    return out


@torch.no_grad()
def randomize_(model: nn.Module, scale: float = 0.05, seed: int = 0) -> nn.Module:
    """Perturb every trainable parameter with seeded Gaussian noise (for tests and checks)."""
    gen = torch.Generator().manual_seed(seed)
    for p in model.parameters():
        noise = torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype)
        p.add_(scale * noise)
    return model
