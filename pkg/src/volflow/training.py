"""Maximum-likelihood training with dequantization and AdamW."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .flow import Glow3D, NumericError
from .patching import extract, valid_origins
from .reference import ReferenceFlow
from .volume import Mask, Volume

log = logging.getLogger(__name__)

LOG2 = math.log(2.0)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 10
    lr: float = 1e-4
    weight_decay: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    dequant_bin: float = 1.0 / 1220.0
    grad_clip_norm: float = 50.0
    min_mask_fraction: float = 0.5
    log_every: int = 50
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        for name in ("batch_size", "lr", "grad_clip_norm", "adam_eps", "log_every", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.dequant_bin < 0:
            raise ValueError("weight_decay and dequant_bin must be non-negative")


def parse_key_values(text: str) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def coerce_fields(cls, values: dict[str, str], strict: bool = True) -> dict:
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for k, v in values.items():
        if k not in known:
            if strict:
                raise ValueError(f"unknown {cls.__name__} key {k!r}")
            continue
        typ = known[k].type
        if typ in ("int", int):
            kwargs[k] = int(v)
        elif typ in ("float", float):
            kwargs[k] = float(Fraction(v))
        else:
            kwargs[k] = v
    return kwargs


def load_train_config(path) -> TrainConfig:
    return TrainConfig(**coerce_fields(TrainConfig, parse_key_values(Path(path).read_text()), strict=False))


@dataclass
class TrainState:
    model: Glow3D
    optimizer: torch.optim.Optimizer
    step: int = 0
    history: list[float] = field(default_factory=list)


def make_state(model: Glow3D, cfg: TrainConfig) -> TrainState:
    opt = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps, weight_decay=cfg.weight_decay, foreach=False,
    )
    return TrainState(model, opt)


def dequantize(x: torch.Tensor, bin_width: float, generator: torch.Generator | None) -> torch.Tensor:
    if bin_width == 0:
        return x
    u = torch.rand(x.shape, generator=generator, dtype=torch.float64).to(x.dtype)
    return x + bin_width * u


def nll_loss(model: Glow3D, batch: torch.Tensor, dequant_bin: float = 0.0,
             generator: torch.Generator | None = None) -> torch.Tensor:
    """Mean negative log-likelihood of ``batch`` in bits per dimension."""
    x = dequantize(batch, dequant_bin, generator)
    nats = model.log_prob(x)
    return -(nats.mean()) / (model.cfg.n_dims * LOG2)


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_kink_skipped: int
    worst_parameter: str | None = None


def _same(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check_report(model: Glow3D, x: torch.Tensor, n_params: int = 200, seed: int = 0,
                      step_scale: float = 1e-5) -> GradCheckReport:
    """Compare autograd gradients of :func:`nll_loss` with central differences.

    The analytic side is autograd on a 64-bit copy of ``model``. The numeric
    side differences an extended-precision numpy re-evaluation of the same
    loss (:class:`~volflow.reference.ReferenceFlow`), with step
    ``step_scale * (|v| + 1)`` for a parameter of value ``v``. No
    dequantization noise is applied. A parameter whose step flips any ReLU
    (so the loss is not differentiable on the interval) is replaced by the
    next random draw and counted in ``n_kink_skipped``.
    """
    m = Glow3D(model.cfg).double()
    m.load_state_dict(model.state_dict())
    x = x.double()
    named = list(m.named_parameters())
    m.zero_grad()
    nll_loss(m, x).backward()
    analytic = torch.cat([p.grad.flatten() for _, p in named]).numpy()
    sizes = [p.numel() for _, p in named]
    offsets = np.cumsum([0] + sizes)
    order = np.random.default_rng(seed).permutation(int(offsets[-1]))

    ref = ReferenceFlow(m.cfg, m.state_dict())
    xr = x.numpy()
    cache: dict = {}
    _, base = ref.nll_bits_per_dim(xr, cache=cache)
    worst, worst_name, checked, skipped = 0.0, None, 0, 0
    for idx in order:
        if checked >= n_params:
            break
        which = int(np.searchsorted(offsets, idx, side="right") - 1)
        name, j = named[which][0], int(idx - offsets[which])
        step = ".".join(name.split(".")[:3])  # "levels.<l>.<k>"
        orig = ref.p[name].reshape(-1)[j]
        h = step_scale * (abs(orig) + 1)
        ref.set(name, j, orig + h)
        up, up_pattern = ref.nll_bits_per_dim(xr, step, cache)
        ref.set(name, j, orig - h)
        down, down_pattern = ref.nll_bits_per_dim(xr, step, cache)
        ref.set(name, j, orig)
        if not (_same(base, up_pattern) and _same(base, down_pattern)):
            skipped += 1
            continue
        numeric = float((up - down) / (2 * h))
        a = float(analytic[idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        checked += 1
        if rel > worst:
            worst, worst_name = rel, f"{name}[{j}]"
    if skipped:
        log.info("grad check: %d parameters skipped for ReLU kinks", skipped)
    return GradCheckReport(worst, checked, skipped, worst_name)


def grad_check(model: Glow3D, x: torch.Tensor, n_params: int = 200, seed: int = 0,
               step_scale: float = 1e-5) -> float:
    """Max relative error between autograd and central-difference gradients."""
    return grad_check_report(model, x, n_params, seed, step_scale).max_rel_error


def adam_step(state: TrainState, gradients: Sequence[torch.Tensor] | None, cfg: TrainConfig) -> float:
    """One clipped AdamW update. Returns the pre-clipping global gradient norm.

    ``gradients`` defaults to the ``.grad`` fields already on the parameters.
    Non-finite gradients raise :class:`NumericError` and leave the state untouched.
    """
    params = [p for g in state.optimizer.param_groups for p in g["params"]]
    if gradients is not None:
        for p, g in zip(params, gradients, strict=True):
            p.grad = g.detach().clone().to(p.dtype)
    grads = [p.grad for p in params if p.grad is not None]
    norm = torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads]))
    if not torch.isfinite(norm):
        raise NumericError(f"non-finite gradient at step {state.step + 1}")
    if norm > cfg.grad_clip_norm:
        scale = cfg.grad_clip_norm / (norm + 1e-6)
        for g in grads:
            g.mul_(scale)
    state.optimizer.step()
    state.step += 1
    return float(norm)


class PatchSource:
    """Draws normalized training patches on the fly from volume/mask pairs.

    A volume is picked uniformly, then a window origin uniformly among
    those with enough lung coverage.
    """

    def __init__(self, pairs: Sequence[tuple[Volume, Mask]], edge: int,
                 min_mask_fraction: float = 0.5):
        self.edge = edge
        self.volumes = []
        self.origins = []
        for v, m in pairs:
            o = valid_origins(m, edge, min_mask_fraction)
            if len(o):
                self.volumes.append(v.voxels)
                self.origins.append(o)
        if not self.volumes:
            raise ValueError(f"no volume has a window with mask fraction >= {min_mask_fraction}")

    def __call__(self, n: int, rng: np.random.Generator) -> np.ndarray:
        out = np.empty((n, 1, self.edge, self.edge, self.edge), dtype=np.float32)
        for i in range(n):
            k = rng.integers(len(self.volumes))
            o = self.origins[k][rng.integers(len(self.origins[k]))]
            out[i, 0] = extract(self.volumes[k], o, self.edge)
        return out


class ArraySource:
    """Samples with replacement from a fixed stack of patches ``(M, E, E, E)``."""

    def __init__(self, patches: np.ndarray):
        self.patches = np.asarray(patches, dtype=np.float32)

    def __call__(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.integers(len(self.patches), size=n)
        return self.patches[idx][:, None]


def _atomic_save(model: Glow3D, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    save_checkpoint(model, tmp)
    os.replace(tmp, path)


def train(model: Glow3D, source: Callable[[int, np.random.Generator], np.ndarray],
          cfg: TrainConfig, out: str | os.PathLike | None = None,
          log_csv: str | os.PathLike | None = None) -> TrainState:
    """ActNorm init on the first batch, then ``cfg.iterations`` AdamW steps."""
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    dtype = next(model.parameters()).dtype
    out = Path(out) if out is not None else None

    def next_batch():
        return torch.from_numpy(source(cfg.batch_size, rng)).to(dtype)

    model.initialize(dequantize(next_batch(), cfg.dequant_bin, gen))
    state = make_state(model, cfg)
    if out is not None:
        _atomic_save(model, out)

    writer, fh = None, None
    if log_csv is not None:
        fh = open(log_csv, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "bits_per_dim", "grad_norm", "wallclock_s"])
    t0 = time.perf_counter()
    try:
        for _ in range(cfg.iterations):
            batch = next_batch()
            state.optimizer.zero_grad(set_to_none=True)
            loss = nll_loss(model, batch, cfg.dequant_bin, gen)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at step {state.step + 1}")
            loss.backward()
            gnorm = adam_step(state, None, cfg)
            bpd = loss.item()
            state.history.append(bpd)
            if writer is not None:
                writer.writerow([state.step, repr(bpd), repr(gnorm), f"{time.perf_counter() - t0:.3f}"])
            if state.step % cfg.log_every == 0:
                log.info("step %d  bits/dim %.4f  grad-norm %.3g", state.step, bpd, gnorm)
            if out is not None and state.step % cfg.checkpoint_every == 0:
                _atomic_save(model, out)
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        _atomic_save(model, out)
    return state
