"""Affine coupling bijections over a flattened ``D x M`` latent."""

from dataclasses import dataclass

import torch
import torch.nn as nn

from ..errors import NumericalError


@dataclass
class LatentPoint:
    z: torch.Tensor
    log_det_accum: torch.Tensor


def mlp(in_dim, out_dim, hidden=64, n_hidden=2, zero_last=False):
    layers = []
    width = in_dim
    for _ in range(n_hidden):
        layers += [nn.Linear(width, hidden), nn.Tanh()]
        width = hidden
    last = nn.Linear(width, out_dim)
    if zero_last:
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
    layers.append(last)
    return nn.Sequential(*layers)


class AffineCoupling(nn.Module):
    """``y_b = z_b * exp(s(z_a, c)) + t(z_a, c)`` on the coordinates outside ``mask``.

    The log-scale is squashed with ``scale_bound * tanh(. / scale_bound)`` so a
    single layer can never blow up the volume by more than ``exp(scale_bound)``
    per coordinate.
    """

    def __init__(self, mask, hidden=64, n_hidden=2, context_dim=0, identity_init=True, scale_bound=3.0):
        super().__init__()
        mask = torch.as_tensor(mask, dtype=torch.bool)
        self.register_buffer("mask", mask)
        dim = mask.numel()
        self.scale_bound = scale_bound
        self.net = mlp(dim + context_dim, 2 * dim, hidden, n_hidden, zero_last=identity_init)

    def _params(self, z, context):
        keep = self.mask.to(z.dtype)
        h = z * keep
        if context is not None:
            h = torch.cat([h, context], dim=-1)
        raw_s, t = self.net(h).chunk(2, dim=-1)
        s = self.scale_bound * torch.tanh(raw_s / self.scale_bound)
        free = 1.0 - keep
        return s * free, t * free

    def forward(self, z, context=None):
        s, t = self._params(z, context)
        return z * torch.exp(s) + t, s.sum(-1)

    def inverse(self, y, context=None):
        # the conditioning half is untouched, so it can be read from y directly
        s, t = self._params(y, context)
        return (y - t) * torch.exp(-s), -s.sum(-1)


def parity_masks(dim, n_layers):
    even = torch.arange(dim) % 2 == 0
    return [even if k % 2 == 0 else ~even for k in range(n_layers)]


class CouplingFlow(nn.Module):
    """A stack of affine couplings with alternating parity masks."""

    def __init__(self, dim, n_layers=4, hidden=64, n_hidden=2, context_dim=0, identity_init=True):
        super().__init__()
        self.dim = dim
        self.layers = nn.ModuleList(
            AffineCoupling(m, hidden, n_hidden, context_dim, identity_init) for m in parity_masks(dim, n_layers)
        )

    def forward(self, z, context=None):
        """Push ``z`` (``[B, dim]``) through every layer; returns a :class:`LatentPoint`."""
        log_det = torch.zeros(z.shape[:-1], dtype=z.dtype, device=z.device)
        for k, layer in enumerate(self.layers):
            z, ld = layer(z, context)
            if not torch.isfinite(z).all() or not torch.isfinite(ld).all():
                raise NumericalError(f"non-finite output in forward coupling layer {k}")
            log_det = log_det + ld
        return LatentPoint(z, log_det)

    def inverse(self, z, context=None):
        log_det = torch.zeros(z.shape[:-1], dtype=z.dtype, device=z.device)
        for k in reversed(range(len(self.layers))):
            z, ld = self.layers[k].inverse(z, context)
            if not torch.isfinite(z).all() or not torch.isfinite(ld).all():
                raise NumericalError(f"non-finite output in inverse coupling layer {k}")
            log_det = log_det + ld
        return LatentPoint(z, log_det)
