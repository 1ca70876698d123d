"""Extended-precision numpy re-evaluation of the flow log-density.

Used as the numeric side of the gradient check. It reads parameters from a
``state_dict`` and recomputes the forward pass in ``np.longdouble`` without
touching any torch layer, so a finite difference of it is both independent
of autograd and far less affected by roundoff than a float64 one.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .flow import FlowConfig

LD = np.longdouble
LOG_2PI = np.log(LD(2) * LD("3.14159265358979323846264338327950288"))
LN2 = np.log(LD(2))


def _squeeze(x):
    n, c, d, h, w = x.shape
    out = np.empty((n, 8 * c, d // 2, h // 2, w // 2), dtype=x.dtype)
    for ch in range(c):
        for dz in range(2):
            for dy in range(2):
                for dx in range(2):
                    out[:, 8 * ch + 4 * dz + 2 * dy + dx] = x[:, ch, dz::2, dy::2, dx::2]
    return out


def _conv3d(x, weight, bias):
    n, c = x.shape[:2]
    o, k = weight.shape[0], weight.shape[2]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))  # n c d h w i j l
    spatial = win.shape[2:5]
    cols = win.transpose(1, 5, 6, 7, 0, 2, 3, 4).reshape(c * k**3, -1)
    out = weight.reshape(o, -1) @ cols + bias[:, None]
    return out.reshape(o, n, *spatial).transpose(1, 0, 2, 3, 4)


class ReferenceFlow:
    """Forward pass of :class:`~volflow.flow.Glow3D` from a state dict."""

    def __init__(self, cfg: FlowConfig, state: dict):
        self.cfg = cfg
        self.p = {k: np.asarray(v.detach().cpu().double().numpy(), dtype=LD) for k, v in state.items()}

    def set(self, name: str, flat_index: int, value) -> None:
        self.p[name].reshape(-1)[flat_index] = LD(value)

    def _get(self, prefix: str, name: str):
        return self.p[f"{prefix}.{name}"]

    def _step(self, pre: str, h, total, patterns):
        n, c = h.shape[:2]
        vox = h.shape[2] * h.shape[3] * h.shape[4]
        ls = self._get(pre, "actnorm.log_scale")
        h = h * np.exp(ls)[None, :, None, None, None] + self._get(pre, "actnorm.bias")[None, :, None, None, None]
        total = total + vox * ls.sum()

        log_s = self._get(pre, "invconv.log_s")
        lower = np.tril(self._get(pre, "invconv.lower"), -1) + np.eye(c, dtype=LD)
        upper = np.triu(self._get(pre, "invconv.upper"), 1) + np.diag(
            self._get(pre, "invconv.sign_s") * np.exp(log_s))
        w = self._get(pre, "invconv.perm") @ lower @ upper
        h = np.einsum("oc,ncdhw->nodhw", w, h)
        total = total + vox * log_s.sum()

        half = c // 2
        xa, xb = h[:, :half], h[:, half:]
        a = _conv3d(xa, self._get(pre, "coupling.net.0.weight"), self._get(pre, "coupling.net.0.bias"))
        patterns.append(a > 0)
        a = np.maximum(a, 0)
        a = _conv3d(a, self._get(pre, "coupling.net.2.weight"), self._get(pre, "coupling.net.2.bias"))
        patterns.append(a > 0)
        a = np.maximum(a, 0)
        a = _conv3d(a, self._get(pre, "coupling.net.4.weight"), self._get(pre, "coupling.net.4.bias"))
        clamp = LD(self.cfg.scale_clamp)
        s = clamp * np.tanh(a[:, :half] / clamp)
        h = np.concatenate([xa, np.exp(s) * xb + a[:, half:]], axis=1)
        return h, total + s.reshape(n, -1).sum(1)

    def log_prob(self, x, resume_from: str | None = None, cache: dict | None = None):
        """Per-sample log-density in nats and the ReLU sign patterns seen on the way.

        If ``cache`` is a dict, the state entering every flow step is stored in
        it; a later call with the same ``cache`` and ``resume_from`` set to a
        step prefix such as ``"levels.1.0"`` restarts from that step, which is
        valid when only parameters of that step or later ones changed.
        """
        cfg = self.cfg
        h = np.asarray(x, dtype=LD)
        n = h.shape[0]
        total = np.zeros(n, dtype=LD)
        patterns: list[np.ndarray] = []
        skipping = resume_from is not None
        for lvl in range(cfg.levels):
            if not skipping:
                h = _squeeze(h)
            for k in range(cfg.flows_per_level):
                pre = f"levels.{lvl}.{k}"
                if skipping:
                    if pre != resume_from:
                        continue
                    h, total, prior = cache[pre]
                    patterns = list(prior)
                    skipping = False
                elif cache is not None and resume_from is None:
                    cache[pre] = (h, total, tuple(patterns))
                h, total = self._step(pre, h, total, patterns)
            if skipping:
                continue
            if lvl < cfg.levels - 1:
                half = h.shape[1] // 2
                z, h = h[:, half:], h[:, :half]
                total = total + (-0.5 * z * z - 0.5 * LOG_2PI).reshape(n, -1).sum(1)
        total = total + (-0.5 * h * h - 0.5 * LOG_2PI).reshape(n, -1).sum(1)
        return total, patterns

    def nll_bits_per_dim(self, x, resume_from: str | None = None, cache: dict | None = None):
        nats, patterns = self.log_prob(x, resume_from, cache)
        return -nats.mean() / (self.cfg.n_dims * LN2), patterns
