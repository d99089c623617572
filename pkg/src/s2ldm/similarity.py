"""Latent-space similarity: per-location cosine maps, the focal-style
similarity loss, the epoch-annealed similarity mask and its application.

Latents are (C, H, W) or batched (N, C, H, W); the channel axis is always
``-3`` and "feature-wise" means one cosine per spatial location.
"""
import numpy as np


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ValueError(f"latent shapes differ: {a.shape} vs {b.shape}")
    if a.ndim < 3 or a.shape[-3] < 1:
        raise ValueError(f"expected (..., C, H, W) latents, got {a.shape}")


def _cosine_parts(ea, eb, eps):
    dot = np.sum(ea * eb, axis=-3)
    na = np.maximum(np.sqrt(np.sum(ea * ea, axis=-3)), eps)
    nb = np.maximum(np.sqrt(np.sum(eb * eb, axis=-3)), eps)
    return dot, na, nb


def cosine_map(ea, eb, eps=1e-8):
    """Cosine similarity of channel vectors at each spatial location, clamped to [-1, 1]."""
    ea = np.asarray(ea, dtype=np.float64)
    eb = np.asarray(eb, dtype=np.float64)
    _check_pair(ea, eb)
    dot, na, nb = _cosine_parts(ea, eb, eps)
    return np.clip(dot / (na * nb), -1.0, 1.0)


def cosine_map_backward(ea, eb, dsim, eps=1e-8):
    """Gradients of ``sum(dsim * cosine_map(ea, eb))`` wrt ``ea`` and ``eb``.

    The clamp only absorbs rounding, so it is treated as the identity. Below
    the norm floor ``eps`` the normalizer is constant.
    """
    dot, na, nb = _cosine_parts(ea, eb, eps)
    s = dot / (na * nb)
    ga = np.sqrt(np.sum(ea * ea, axis=-3)) > eps
    gb = np.sqrt(np.sum(eb * eb, axis=-3)) > eps
    d = np.expand_dims(dsim, -3)
    dea = d * (eb / np.expand_dims(na * nb, -3)
               - np.expand_dims(ga * s / (na * na), -3) * ea)
    deb = d * (ea / np.expand_dims(na * nb, -3)
               - np.expand_dims(gb * s / (nb * nb), -3) * eb)
    return dea, deb


def sim_loss_terms(s, gamma=1.0, floor=1e-7):
    """Per-location terms ``-((1 - s)/2)**gamma * log(max((1 + s)/2, floor))``
    and their derivative wrt ``s``."""
    s = np.asarray(s, dtype=np.float64)
    weight = ((1.0 - s) / 2.0) ** gamma
    p_raw = (1.0 + s) / 2.0
    p = np.maximum(p_raw, floor)
    logp = np.log(p)
    terms = -weight * logp
    if gamma == 1:
        dweight = np.full_like(s, -0.5)
    else:
        dweight = -0.5 * gamma * ((1.0 - s) / 2.0) ** (gamma - 1.0)
    dp = np.where(p_raw > floor, 0.5, 0.0)
    dterms = -(dweight * logp + weight * dp / p)
    return terms, dterms


def adaptive_sim_loss(e_n, e_c, gamma=1.0, floor=1e-7, eps=1e-8):
    """Focal-weighted negative log similarity, averaged over latent locations.

    Locations where the two embeddings disagree get weight ``((1 - s)/2)**gamma``
    so the loss concentrates on dissimilar (contrast-enhanced) regions.

    Returns ``(loss, grad_e_n, grad_e_c)``.
    """
    e_n = np.asarray(e_n, dtype=np.float64)
    e_c = np.asarray(e_c, dtype=np.float64)
    _check_pair(e_n, e_c)
    s = cosine_map(e_n, e_c, eps)
    terms, dterms = sim_loss_terms(s, gamma, floor)
    loss = float(terms.mean())
    g_n, g_c = cosine_map_backward(e_n, e_c, dterms / terms.size, eps)
    return loss, g_n, g_c


def dynamic_mask(sim, tau, total, alpha=2.0):
    """Epoch-annealed mask ``min(alpha * tau / total + (1 + s)/2, 1)``.

    Saturates to exactly 1.0 once ``alpha * tau >= total``; treated as a
    constant (no gradient) by the diffusion objective.
    """
    if total < 1:
        raise ValueError("total epochs must be >= 1")
    if tau < 0 or tau > total:
        raise ValueError(f"epoch {tau} outside [0, {total}]")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    sim = np.asarray(sim, dtype=np.float64)
    ramp = (alpha * tau) / total
    return np.minimum(ramp + (1.0 + sim) / 2.0, 1.0)


def apply_mask(e, mask):
    """Scale every channel of ``e`` by the spatial ``mask``."""
    e = np.asarray(e, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if e.ndim < 3 or e.shape[-2:] != mask.shape[-2:] or mask.shape[:-2] != e.shape[:-3]:
        raise ValueError(f"mask shape {mask.shape} does not match latent {e.shape}")
    return e * np.expand_dims(mask, -3)
