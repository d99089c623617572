"""Stage 2: DDPM schedule, time-conditioned U-Net denoiser, the
similarity-masked training objective, ancestral sampling and
non-contrast-only translation.
"""
from dataclasses import dataclass

import numpy as np

from .autoencoder import decode, encode, quantize
from .diffnet import layers as L
from .diffnet.network import Module
from .diffnet.rng import RngStream, gaussian
from .errors import DivergenceError
from .similarity import apply_mask, cosine_map, dynamic_mask


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step arrays indexed by ``t - 1`` for ``t`` in 1..T."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def at(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep outside [1, {self.T}]: {t}")
        return t - 1


def make_schedule(T=1000, beta_1=1e-4, beta_T=0.02):
    """Linear beta schedule from ``beta_1`` to ``beta_T`` over ``T`` steps."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_1 < beta_T < 1:
        raise ValueError("need 0 < beta_1 < beta_T < 1")
    beta = np.linspace(beta_1, beta_T, T) if T > 1 else np.array([beta_1])
    alpha = 1.0 - beta
    return NoiseSchedule(int(T), beta, alpha, np.cumprod(alpha))


def _per_sample(values, ndim):
    values = np.asarray(values, dtype=np.float64)
    return values.reshape(values.shape + (1,) * (ndim - values.ndim))


def q_sample(z0, t, eps, sched):
    """Closed-form forward noising ``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``.

    ``t`` may be a scalar or one timestep per leading batch element.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != latent shape {z0.shape}")
    ab = _per_sample(sched.alpha_bar[sched.at(t)], z0.ndim)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def posterior_mean(z_t, z0, t, sched):
    """Mean of q(z_{t-1} | z_t, z0)."""
    i = int(sched.at(t))
    ab = sched.alpha_bar[i]
    ab_prev = sched.alpha_bar[i - 1] if i > 0 else 1.0
    beta = sched.beta[i]
    return (np.sqrt(ab_prev) * beta / (1.0 - ab) * z0
            + np.sqrt(sched.alpha[i]) * (1.0 - ab_prev) / (1.0 - ab) * z_t)


def ddpm_reverse_step(z_t, t, eps_hat, sched, noise=None):
    """Ancestral step ``(z_t - beta_t / sqrt(1 - ab_t) * eps_hat) / sqrt(alpha_t) + sqrt(beta_t) * noise``.

    ``noise`` may be omitted only at ``t = 1``, where it is never added.
    """
    i = int(sched.at(t))
    if noise is None and t != 1:
        raise ValueError("noise is required for t > 1")
    z_t = np.asarray(z_t, dtype=np.float64)
    mean = (z_t - sched.beta[i] / np.sqrt(1.0 - sched.alpha_bar[i]) * eps_hat) / np.sqrt(sched.alpha[i])
    if t == 1 or noise is None:
        return mean
    return mean + np.sqrt(sched.beta[i]) * noise


class Denoiser(Module):
    """Two-level U-Net over (N, C, h, w) latents predicting the added noise.

    A sinusoidal timestep embedding, passed through a two-layer MLP, is
    projected into every residual block.
    """

    def __init__(self, seed=0, latent_channels=4, widths=(16, 32, 64), temb_dim=32,
                 groups=8, dtype=np.float32):
        super().__init__(dtype)
        w0, w1, w2 = widths
        s = RngStream(seed, 21)
        hid = 2 * w1
        self.latent_channels = latent_channels
        self.temb_dim = temb_dim
        self.groups = groups
        self.add_params("t_mlp1", L.init_linear(s, temb_dim, hid))
        self.add_params("t_mlp2", L.init_linear(s, hid, hid))
        self.add_params("conv_in", L.init_conv(s, latent_channels, w0))
        self.add_params("res0", L.init_resblock(s, w0, w0, hid))
        self.add_params("down1", L.init_conv(s, w0, w1))
        self.add_params("res1", L.init_resblock(s, w1, w1, hid))
        self.add_params("down2", L.init_conv(s, w1, w2))
        self.add_params("mid1", L.init_resblock(s, w2, w2, hid))
        self.add_params("mid2", L.init_resblock(s, w2, w2, hid))
        self.add_params("up2", L.init_conv(s, w2, w1))
        self.add_params("res_u2", L.init_resblock(s, 2 * w1, w1, hid))
        self.add_params("up1", L.init_conv(s, w1, w0))
        self.add_params("res_u1", L.init_resblock(s, 2 * w0, w0, hid))
        self.add_params("norm_out", {"gamma": np.ones(w0), "beta": np.zeros(w0)})
        self.add_params("conv_out", L.init_conv(s, w0, latent_channels, scale=0.1))

    def forward(self, z, t):
        z = np.asarray(z, dtype=self.dtype)
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ValueError(f"expected (N, {self.latent_channels}, h, w) latents, got {z.shape}")
        if z.shape[2] % 4 or z.shape[3] % 4:
            raise ValueError(f"latent spatial dims {z.shape[2:]} must be divisible by 4")
        p = self._layer_arrays
        g = self.groups
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (z.shape[0],))
        c = {}
        e, c["temb"] = L.time_embed_forward(t, self.temb_dim)
        e = e.astype(self.dtype)
        e, c["mlp1"] = L.linear_forward(e, p("t_mlp1")["w"], p("t_mlp1")["b"])
        e, c["mlp_act"] = L.silu_forward(e)
        temb, c["mlp2"] = L.linear_forward(e, p("t_mlp2")["w"], p("t_mlp2")["b"])

        x = np.ascontiguousarray(z.transpose(0, 2, 3, 1))
        h, c["conv_in"] = L.conv_forward(x, p("conv_in")["w"], p("conv_in")["b"])
        h1, c["res0"] = L.resblock_forward(p("res0"), h, temb, g)
        h, c["down1"] = L.conv_forward(h1, p("down1")["w"], p("down1")["b"], 2)
        h2, c["res1"] = L.resblock_forward(p("res1"), h, temb, g)
        h, c["down2"] = L.conv_forward(h2, p("down2")["w"], p("down2")["b"], 2)
        h, c["mid1"] = L.resblock_forward(p("mid1"), h, temb, g)
        h, c["mid2"] = L.resblock_forward(p("mid2"), h, temb, g)
        h, c["up2"] = L.upconv_forward(h, p("up2")["w"], p("up2")["b"])
        h = np.concatenate([h, h2], axis=3)
        h, c["res_u2"] = L.resblock_forward(p("res_u2"), h, temb, g)
        h, c["up1"] = L.upconv_forward(h, p("up1")["w"], p("up1")["b"])
        h = np.concatenate([h, h1], axis=3)
        h, c["res_u1"] = L.resblock_forward(p("res_u1"), h, temb, g)
        h, c["norm_out"] = L.group_norm_forward(h, p("norm_out")["gamma"], p("norm_out")["beta"], g)
        h, c["act_out"] = L.silu_forward(h)
        h, c["conv_out"] = L.conv_forward(h, p("conv_out")["w"], p("conv_out")["b"])
        c["split"] = (h2.shape[3], h1.shape[3])
        return np.ascontiguousarray(h.transpose(0, 3, 1, 2)), c

    def backward(self, c, dout):
        """Accumulate parameter gradients; returns the gradient wrt the input latent."""
        acc = self._accumulate
        dout = np.asarray(dout, dtype=self.dtype)
        dh = np.ascontiguousarray(dout.transpose(0, 2, 3, 1))
        dtemb = 0.0

        def res(name, d):
            nonlocal dtemb
            dx, grads, dt = L.resblock_backward(c[name], d)
            acc(name, grads)
            dtemb = dtemb + dt
            return dx

        dh, gr = L.conv_backward(c["conv_out"], dh)
        acc("conv_out", gr)
        dh, _ = L.silu_backward(c["act_out"], dh)
        dh, gr = L.group_norm_backward(c["norm_out"], dh)
        acc("norm_out", gr)
        c2, c1 = c["split"]
        dh = res("res_u1", dh)
        dh1_skip = dh[..., -c1:]
        dh, gr = L.upconv_backward(c["up1"], np.ascontiguousarray(dh[..., :-c1]))
        acc("up1", gr)
        dh = res("res_u2", dh)
        dh2_skip = dh[..., -c2:]
        dh, gr = L.upconv_backward(c["up2"], np.ascontiguousarray(dh[..., :-c2]))
        acc("up2", gr)
        dh = res("mid2", dh)
        dh = res("mid1", dh)
        dh, gr = L.conv_backward(c["down2"], dh)
        acc("down2", gr)
        dh = res("res1", dh + dh2_skip)
        dh, gr = L.conv_backward(c["down1"], dh)
        acc("down1", gr)
        dh = res("res0", dh + dh1_skip)
        dh, gr = L.conv_backward(c["conv_in"], dh)
        acc("conv_in", gr)

        de, gr = L.linear_backward(c["mlp2"], dtemb)
        acc("t_mlp2", gr)
        de, _ = L.silu_backward(c["mlp_act"], de)
        _, gr = L.linear_backward(c["mlp1"], de)
        acc("t_mlp1", gr)
        return dh.transpose(0, 3, 1, 2)


def sample_timesteps(stream, n, T):
    """``n`` timesteps uniform on {1, ..., T}."""
    return stream.integers(1, T + 1, n)


def diff_loss(e_n, e_c, tau, total_epochs, denoiser, sched, stream, alpha=2.0,
              latent_scale=1.0, backward=True):
    """Noise-prediction loss on the similarity-masked non-contrast latent.

    The mask ``dynamic_mask(cosine_map(e_n, e_c), tau, total_epochs, alpha)``
    is a constant; ``z0 = latent_scale * e_n * mask`` is noised at a uniform
    timestep and the denoiser regresses the noise with a mean squared error.
    Parameter gradients accumulate into ``denoiser`` when ``backward``.

    Returns ``(loss, info)`` with the sampled timesteps, noise and mask.
    """
    e_n = np.asarray(e_n, dtype=np.float64)
    e_c = np.asarray(e_c, dtype=np.float64)
    if e_n.ndim == 3:
        e_n, e_c = e_n[None], e_c[None]
    if e_n.shape != e_c.shape:
        raise ValueError(f"latent shapes differ: {e_n.shape} vs {e_c.shape}")
    mask = dynamic_mask(cosine_map(e_n, e_c), tau, total_epochs, alpha)
    z0 = latent_scale * apply_mask(e_n, mask)
    t = sample_timesteps(stream, z0.shape[0], sched.T)
    eps = gaussian(stream, z0.shape)
    z_t = q_sample(z0, t, eps, sched)
    eps_hat, cache = denoiser.forward(z_t, t)
    resid = eps_hat - eps
    loss = float(np.mean(resid * resid))
    if not np.isfinite(loss):
        raise DivergenceError("non-finite diffusion loss")
    if backward:
        denoiser.backward(cache, 2.0 * resid / resid.size)
    return loss, {"t": t, "eps": eps, "mask": mask, "z0": z0}


@dataclass(frozen=True)
class SamplerConfig:
    t_start: int = 500
    seed: int = 0
    deterministic_last_step: bool = True

    def check(self, T):
        if not 0 <= self.t_start <= T:
            raise ValueError(f"t_start {self.t_start} outside [0, {T}]")


def translate(x_n, ae, denoiser, sched, cfg=None, latent_scale=1.0):
    """Non-contrast image -> synthetic contrast-enhanced image.

    The non-contrast latent (all-ones mask) is noised to ``cfg.t_start`` and
    denoised back with ancestral steps, then quantized and decoded.
    ``t_start = 0`` is the plain autoencoder path.
    """
    cfg = cfg or SamplerConfig(t_start=sched.T // 2)
    cfg.check(sched.T)
    if denoiser is not None and denoiser.latent_channels != ae.latent_channels:
        raise ValueError(f"denoiser expects {denoiser.latent_channels} latent channels, "
                         f"autoencoder produces {ae.latent_channels}")
    x_n = np.asarray(x_n, dtype=np.float64)
    e_n = encode(x_n, ae)
    single = e_n.ndim == 3
    z = latent_scale * apply_mask(e_n if not single else e_n[None],
                                  np.ones((1 if single else e_n.shape[0],) + e_n.shape[-2:]))
    if cfg.t_start > 0:
        if denoiser is None:
            raise ValueError("a denoiser is required when t_start > 0")
        stream = RngStream(cfg.seed, 31)
        z = q_sample(z, cfg.t_start, gaussian(stream, z.shape), sched)
        for t in range(cfg.t_start, 0, -1):
            eps_hat, _ = denoiser.forward(z, np.full(z.shape[0], t))
            last = t == 1 and cfg.deterministic_last_step
            noise = None if last else gaussian(stream, z.shape)
            if t == 1 and noise is not None:
                z = ddpm_reverse_step(z, t, eps_hat, sched) + np.sqrt(sched.beta[0]) * noise
            else:
                z = ddpm_reverse_step(z, t, eps_hat, sched, noise)
    z = z / latent_scale
    e_q = quantize(z.astype(ae.dtype), ae.codebook)[0]
    out = decode(e_q, ae)
    return out[0] if single else out
