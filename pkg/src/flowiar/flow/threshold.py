"""Argmax surjection and the soft threshold that inverts it stochastically."""

import torch
import torch.nn.functional as F


def argmax_decode(z):
    """Per-row argmax of a ``[..., D, M]`` latent. Exact ties go to the lowest index."""
    if not torch.isfinite(z).all():
        raise ValueError("argmax_decode received non-finite latent values")
    # torch.argmax returns the first maximal index on ties.
    return torch.argmax(z, dim=-1)


def soft_threshold(u, target):
    """Map ``u`` into the region where ``target`` is the strict argmax.

    The target coordinate is kept, every other one becomes
    ``u_i - softplus(u_i - u_j)`` which is always strictly below ``u_i``.

    Args:
        u: real tensor ``[..., M]``.
        target: long tensor ``[...]`` with entries in ``[0, M)``.

    Returns:
        ``(v, log_det)`` where ``log_det`` is ``sum_{j != i} log sigmoid(u_i - u_j)``.
    """
    m = u.shape[-1]
    target = target.long()
    if target.shape != u.shape[:-1]:
        raise ValueError(f"target shape {tuple(target.shape)} does not match u batch shape {tuple(u.shape[:-1])}")
    if (target < 0).any() or (target >= m).any():
        raise ValueError(f"target index outside [0, {m})")
    is_target = F.one_hot(target, m).bool()
    u_top = u.gather(-1, target.unsqueeze(-1))
    diff = u_top - u
    v = u_top - F.softplus(diff)
    # softplus underflows for very negative diff; keep the gap strictly positive.
    v = torch.minimum(v, torch.nextafter(u_top, torch.full_like(u_top, -float("inf"))))
    v = torch.where(is_target, u_top.expand_as(u), v)
    log_det = F.logsigmoid(diff).masked_fill(is_target, 0.0).sum(-1)
    return v, log_det


def _log_expm1(x):
    # log(exp(x) - 1) for x > 0, stable at both ends
    small = torch.log(torch.expm1(torch.clamp(x, max=1.0)))
    large = x + torch.log1p(-torch.exp(-torch.clamp(x, min=1.0)))
    return torch.where(x > 1.0, large, small)


def inverse_soft_threshold(v, target):
    """Invert :func:`soft_threshold`; ``v`` must have ``target`` as its strict argmax.

    Returns ``(u, log_det)`` with ``log_det`` the forward log-determinant at ``u``,
    so the caller can write ``log q(v) = log q(u) - log_det``.
    """
    m = v.shape[-1]
    target = target.long()
    is_target = F.one_hot(target, m).bool()
    v_top = v.gather(-1, target.unsqueeze(-1))
    gap = v_top - v
    if not (gap.masked_fill(is_target, 1.0) > 0).all():
        raise ValueError("inverse_soft_threshold: target is not the strict argmax of v")
    gap = gap.masked_fill(is_target, 1.0)
    diff = _log_expm1(gap)
    u = torch.where(is_target, v_top.expand_as(v), v_top - diff)
    log_det = F.logsigmoid(diff).masked_fill(is_target, 0.0).sum(-1)
    return u, log_det
