"""One-level orthonormal 2D Haar transform and the high-frequency loss.

For each 2x2 block ``[[a, b], [c, d]]``::

    ll = (a + b + c + d) / 2
    lh = (a - b + c - d) / 2    # responds to vertical edges
    hl = (a + b - c - d) / 2    # responds to horizontal edges
    hh = (a - b - c + d) / 2

Works on any tensor whose last two dimensions are (H, W).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ShapeError, check_same_shape


@dataclass
class SubbandSet:
    ll: torch.Tensor
    lh: torch.Tensor
    hl: torch.Tensor
    hh: torch.Tensor

    def high(self) -> torch.Tensor:
        return torch.cat([self.lh, self.hl, self.hh], dim=-1)

    def energy(self) -> torch.Tensor:
        return sum(band.pow(2).sum() for band in (self.ll, self.lh, self.hl, self.hh))


def _as_tensor(image) -> torch.Tensor:
    return image if isinstance(image, torch.Tensor) else torch.as_tensor(image)


def dwt2(image) -> SubbandSet:
    x = _as_tensor(image)
    if x.dim() < 2:
        raise ShapeError("dwt2 needs at least a 2D input")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"dwt2 needs even dimensions, got {h}x{w}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return SubbandSet(
        ll=(a + b + c + d) / 2,
        lh=(a - b + c - d) / 2,
        hl=(a + b - c - d) / 2,
        hh=(a - b - c + d) / 2,
    )


def idwt2(sub: SubbandSet) -> torch.Tensor:
    shape = sub.ll.shape
    for band in (sub.lh, sub.hl, sub.hh):
        check_same_shape(shape, band.shape, "subbands")
    ll, lh, hl, hh = sub.ll, sub.lh, sub.hl, sub.hh
    out = ll.new_empty(*shape[:-2], shape[-2] * 2, shape[-1] * 2)
    out[..., 0::2, 0::2] = (ll + lh + hl + hh) / 2
    out[..., 0::2, 1::2] = (ll - lh + hl - hh) / 2
    out[..., 1::2, 0::2] = (ll + lh - hl - hh) / 2
    out[..., 1::2, 1::2] = (ll - lh - hl + hh) / 2
    return out


def dwt_loss(pred, target, include_ll: bool = False) -> torch.Tensor:
    """Mean squared error over the LH, HL and HH subbands (plus LL if asked)."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    check_same_shape(pred.shape, target.shape, "dwt_loss inputs")
    p, t = dwt2(pred), dwt2(target)
    bands = ["lh", "hl", "hh"] + (["ll"] if include_ll else [])
    diff = torch.cat([getattr(p, name) - getattr(t, name) for name in bands], dim=-1)
    return diff.pow(2).mean()


def high_frequency_energy(image) -> float:
    """Mean squared magnitude of the LH/HL/HH subbands."""
    return float(dwt2(_as_tensor(image)).high().pow(2).mean())
