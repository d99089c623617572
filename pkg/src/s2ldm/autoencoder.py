"""Stage 1: weight-shared encoder, vector quantizer and CECT decoder.

One encoder parameter set embeds both the non-contrast and the
contrast-enhanced image. Only the contrast latent is quantized and decoded
during training; the non-contrast latent enters through the similarity loss.
At inference the non-contrast latent alone goes through the same codebook.
"""
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .diffnet.layers import init_conv, init_resblock
from .diffnet.network import Sequential
from .diffnet.optim import AdamW, Param
from .diffnet.rng import RngStream, gaussian
from .errors import DivergenceError
from .similarity import adaptive_sim_loss, cosine_map

WIDTHS = (16, 32, 64)
DOWNSAMPLE = 4
NORM_EPS = 1e-6


class SyncreticEncoder(Sequential):
    """Image (N, H, W, 1) -> latent (N, C, H/4, W/4) with two stride-2 stages.

    With ``normalize`` each latent vector is scaled to unit length, so the
    cosine between two latents fixes their distance as well as their angle.
    """

    def __init__(self, stream, latent_channels=4, widths=WIDTHS, groups=8, dtype=np.float64,
                 normalize=True):
        w0, w1, w2 = widths
        g = {"groups": groups}
        super().__init__([
            ("conv3x3", "conv_in", {}),
            ("residual_block", "res0", g),
            ("conv3x3", "down1", {"stride": 2}),
            ("residual_block", "res1", g),
            ("conv3x3", "down2", {"stride": 2}),
            ("residual_block", "res2", g),
            ("group_norm", "norm_out", g),
            ("silu", None, {}),
            ("conv3x3", "conv_out", {}),
        ], dtype)
        self.latent_channels = latent_channels
        self.normalize = normalize
        self.add_params("conv_in", init_conv(stream, 1, w0))
        self.add_params("res0", init_resblock(stream, w0, w0))
        self.add_params("down1", init_conv(stream, w0, w1))
        self.add_params("res1", init_resblock(stream, w1, w1))
        self.add_params("down2", init_conv(stream, w1, w2))
        self.add_params("res2", init_resblock(stream, w2, w2))
        self.add_params("norm_out", {"gamma": np.ones(w2), "beta": np.zeros(w2)})
        self.add_params("conv_out", init_conv(stream, w2, latent_channels, scale=0.5))

    def forward(self, x):
        h, caches = super().forward(x)
        r = None
        if self.normalize:
            r = np.sqrt(np.sum(h * h, axis=-1, keepdims=True) + NORM_EPS)
            z = h / r
        else:
            z = h
        return np.ascontiguousarray(z.transpose(0, 3, 1, 2)), (caches, h, r)

    def backward(self, cache, dz):
        caches, h, r = cache
        dz = np.asarray(dz, dtype=self.dtype).transpose(0, 2, 3, 1)
        if r is not None:
            dz = dz / r - h * (np.sum(h * dz, axis=-1, keepdims=True) / r ** 3)
        return super().backward(caches, np.ascontiguousarray(dz))


class CectDecoder(Sequential):
    """Latent (N, C, h, w) -> image (N, 4h, 4w, 1) in [-1, 1] (tanh output)."""

    def __init__(self, stream, latent_channels=4, widths=WIDTHS, groups=8, dtype=np.float64):
        w0, w1, w2 = widths
        g = {"groups": groups}
        super().__init__([
            ("conv3x3", "conv_in", {}),
            ("residual_block", "res0", g),
            ("upsample2x_then_conv3x3", "up1", {}),
            ("residual_block", "res1", g),
            ("upsample2x_then_conv3x3", "up2", {}),
            ("residual_block", "res2", g),
            ("group_norm", "norm_out", g),
            ("silu", None, {}),
            ("conv3x3", "conv_out", {}),
            ("tanh", None, {}),
        ], dtype)
        self.latent_channels = latent_channels
        self.add_params("conv_in", init_conv(stream, latent_channels, w2))
        self.add_params("res0", init_resblock(stream, w2, w2))
        self.add_params("up1", init_conv(stream, w2, w1))
        self.add_params("res1", init_resblock(stream, w1, w1))
        self.add_params("up2", init_conv(stream, w1, w0))
        self.add_params("res2", init_resblock(stream, w0, w0))
        self.add_params("norm_out", {"gamma": np.ones(w0), "beta": np.zeros(w0)})
        self.add_params("conv_out", init_conv(stream, w0, 1, scale=0.5))

    def forward(self, e):
        e = np.asarray(e, dtype=self.dtype)
        return super().forward(np.ascontiguousarray(e.transpose(0, 2, 3, 1)))

    def backward(self, caches, dout):
        return super().backward(caches, dout).transpose(0, 3, 1, 2)


class Codebook:
    """K learnable code vectors plus usage bookkeeping for dead-code reseeding."""

    def __init__(self, stream, size=128, dim=4, scale=0.5, dtype=np.float64):
        if size < 2:
            raise ValueError("codebook needs at least 2 codes")
        self.codes = Param((scale * gaussian(stream, (size, dim))).astype(dtype))
        self.usage_counts = np.zeros(size, dtype=np.int64)
        self.idle_steps = np.zeros(size, dtype=np.int64)

    @property
    def size(self):
        return self.codes.value.shape[0]

    @property
    def dim(self):
        return self.codes.value.shape[1]


@dataclass
class QuantCache:
    flat: np.ndarray
    codes: np.ndarray
    idx: np.ndarray
    shape: tuple
    beta_commit: float


def _to_flat(e):
    # (..., C, H, W) -> (M, C) with locations in row-major (batch, h, w) order
    moved = np.moveaxis(e, -3, -1)
    return moved.reshape(-1, e.shape[-3]), moved.shape


def quantize(e, codebook, beta_commit=0.25, return_cache=False):
    """Snap each spatial latent vector to its nearest code (ties -> lowest index).

    Returns ``(quantized, indices, l_quan)`` where
    ``l_quan = mean_loc |sg(E) - q|^2 + beta_commit * mean_loc |E - sg(q)|^2``.
    The quantized tensor passes gradients straight through to ``e``.
    """
    codes = codebook.codes.value if isinstance(codebook, Codebook) else np.asarray(codebook)
    e = np.asarray(e)
    if e.dtype not in (np.float32, np.float64):
        e = e.astype(np.float64)
    if e.ndim < 3 or e.shape[-3] != codes.shape[1]:
        raise ValueError(f"latent channels {e.shape} do not match code dim {codes.shape[1]}")
    flat, moved_shape = _to_flat(e)
    dist = ((flat[:, None, :] - codes[None, :, :]) ** 2).sum(axis=2)
    idx = np.argmin(dist, axis=1)
    q_flat = codes[idx]
    l_quan = float((1.0 + beta_commit) * ((flat - q_flat) ** 2).sum(axis=1).mean())
    q = np.moveaxis(q_flat.reshape(moved_shape), -1, -3)
    indices = idx.reshape(moved_shape[:-1])
    if return_cache:
        return q, indices, l_quan, QuantCache(flat, codes, idx, moved_shape, beta_commit)
    return q, indices, l_quan


def quantize_backward(cache, dq, dl_quan=1.0):
    """Gradients wrt the latent and the codebook.

    ``dq`` is copied to the latent unchanged (straight-through); the commitment
    term adds to the latent and the codebook term moves the selected codes.
    """
    m = cache.flat.shape[0]
    q_flat = cache.codes[cache.idx]
    diff = cache.flat - q_flat
    dflat = np.moveaxis(dq, -3, -1).reshape(-1, cache.flat.shape[1])
    dflat = dflat + dl_quan * cache.beta_commit * 2.0 * diff / m
    dcodes = np.zeros_like(cache.codes)
    np.add.at(dcodes, cache.idx, -dl_quan * 2.0 * diff / m)
    de = np.moveaxis(dflat.reshape(cache.shape), -1, -3)
    return de, dcodes


def high_freq_enhance(x, beta=1.0, sigma=1.0):
    """Unsharp mask ``clip(x + beta * (x - blur(x)), -1, 1)`` with a reflecting
    Gaussian blur over the last two axes."""
    if beta < 0 or sigma <= 0:
        raise ValueError("need beta >= 0 and sigma > 0")
    x = np.asarray(x, dtype=np.float64)
    if beta == 0:
        return x.copy()
    sig = (0.0,) * (x.ndim - 2) + (sigma, sigma)
    blur = gaussian_filter(x, sig, mode="reflect", truncate=4.0)
    return np.clip(x + beta * (x - blur), -1.0, 1.0)


class SyncreticAutoencoder:
    """Encoder + codebook + decoder with a flat parameter namespace
    (``enc.*``, ``codebook``, ``dec.*``)."""

    def __init__(self, seed=0, latent_channels=4, codebook_size=128, widths=WIDTHS, groups=8,
                 dtype=np.float32):
        root = RngStream(seed, 0)
        self.latent_channels = latent_channels
        self.dtype = np.dtype(dtype)
        self.encoder = SyncreticEncoder(root.spawn(1), latent_channels, widths, groups, dtype)
        self.decoder = CectDecoder(root.spawn(2), latent_channels, widths, groups, dtype)
        self.codebook = Codebook(root.spawn(3), codebook_size, latent_channels, dtype=dtype)

    def named_params(self):
        out = {"enc." + k: p for k, p in self.encoder.params.items()}
        out["codebook"] = self.codebook.codes
        out.update({"dec." + k: p for k, p in self.decoder.params.items()})
        return out

    def zero_grad(self):
        for p in self.named_params().values():
            p.zero_grad()

    def state_arrays(self):
        return {k: p.value for k, p in self.named_params().items()}

    def load_arrays(self, arrays):
        self.encoder.load_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("enc.")})
        self.decoder.load_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("dec.")})
        codes = np.asarray(arrays["codebook"], dtype=self.dtype)
        if codes.ndim != 2 or codes.shape[1] != self.latent_channels:
            raise ValueError(f"codebook shape {codes.shape} incompatible with "
                             f"{self.latent_channels} latent channels")
        self.codebook.codes = Param(codes)
        self.codebook.usage_counts = np.zeros(codes.shape[0], dtype=np.int64)
        self.codebook.idle_steps = np.zeros(codes.shape[0], dtype=np.int64)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected (H, W) or (N, H, W) images, got {x.shape}")
    if x.shape[1] % DOWNSAMPLE or x.shape[2] % DOWNSAMPLE:
        raise ValueError(f"image dims {x.shape[1:]} must be divisible by {DOWNSAMPLE}")
    return x[..., None]


def encode(x, model):
    """Latent of one image (H, W) -> (C, H/4, W/4), or a batch (N, H, W) -> (N, C, ...)."""
    single = np.ndim(x) == 2
    enc = model.encoder if isinstance(model, SyncreticAutoencoder) else model
    z, _ = enc.forward(_as_batch(x))
    return z[0] if single else z


def decode(e_q, model):
    """Image in [-1, 1] from a (quantized) latent, (C, h, w) -> (4h, 4w)."""
    dec = model.decoder if isinstance(model, SyncreticAutoencoder) else model
    e_q = np.asarray(e_q, dtype=np.float64)
    single = e_q.ndim == 3
    batch = e_q[None] if single else e_q
    if batch.ndim != 4 or batch.shape[1] != dec.latent_channels:
        raise ValueError(f"latent shape {e_q.shape} does not match decoder "
                         f"({dec.latent_channels} channels)")
    out, _ = dec.forward(batch)
    out = out[..., 0]
    return out[0] if single else out


def encode_for_inference(x_n, model):
    """Quantized latent of the non-contrast image; nothing else is needed."""
    return quantize(encode(x_n, model), model.codebook)[0]


@dataclass(frozen=True)
class AeLossWeights:
    lambda_r: float = 1.0
    lambda_q: float = 1.0
    lambda_s: float = 0.1
    lambda_adv: float = 0.0

    def __post_init__(self):
        vals = (self.lambda_r, self.lambda_q, self.lambda_s, self.lambda_adv)
        if min(vals) < 0:
            raise ValueError("loss weights must be non-negative")
        if max(self.lambda_r, self.lambda_q, self.lambda_s) <= 0:
            raise ValueError("at least one of lambda_r, lambda_q, lambda_s must be positive")


@dataclass(frozen=True)
class AeConfig:
    weights: AeLossWeights = AeLossWeights()
    gamma: float = 1.0
    floor: float = 1e-7
    beta_commit: float = 0.25
    hf_beta: float = 1.0
    hf_sigma: float = 1.0
    lr: float = 1e-4
    weight_decay: float = 0.01
    dead_code_steps: int = 200


@dataclass
class LossRecord:
    l_auto: float
    l_rec: float
    l_quan: float
    l_sim: float
    mean_cos: float
    l_adv: float = 0.0
    d_loss: float = 0.0

    def as_dict(self):
        return dict(self.__dict__)


def _forward(model, x_n, x_c, cfg, keep=False):
    xn = _as_batch(x_n)
    xc = _as_batch(x_c)
    n = xn.shape[0]
    z, enc_cache = model.encoder.forward(np.concatenate([xn, xc]))
    e_n, e_c = z[:n], z[n:]
    e_q, idx, l_quan, q_cache = quantize(e_c, model.codebook, cfg.beta_commit, return_cache=True)
    recon, dec_cache = model.decoder.forward(e_q)
    target = high_freq_enhance(xc[..., 0], cfg.hf_beta, cfg.hf_sigma)[..., None]
    resid = recon - target
    l_rec = float(np.abs(resid).mean())
    l_sim, g_n, g_c = adaptive_sim_loss(e_n, e_c, cfg.gamma, cfg.floor)
    w = cfg.weights
    l_auto = w.lambda_r * l_rec + w.lambda_q * l_quan + w.lambda_s * l_sim
    record = LossRecord(l_auto, l_rec, l_quan, l_sim, float(cosine_map(e_n, e_c).mean()))
    if not np.isfinite(l_auto):
        raise DivergenceError(f"non-finite autoencoder loss: {record}")
    state = (enc_cache, e_c, idx, q_cache, dec_cache, resid, g_n, g_c, recon) if keep else None
    return record, state


def auto_loss(x_n, x_c, model, cfg=None):
    """Weighted reconstruction + quantization + similarity loss on (batches of) pairs.

    ``x_n``/``x_c`` are normalized images (H, W) or (N, H, W). Returns a
    :class:`LossRecord` whose ``l_auto`` is the weighted sum of the parts.
    """
    return _forward(model, x_n, x_c, cfg or AeConfig())[0]


def auto_loss_backward(x_n, x_c, model, cfg=None, extra_recon_grad=None):
    """Like :func:`auto_loss` but also accumulates parameter gradients.

    ``extra_recon_grad`` (optional, shape (N, H, W, 1)) is added to the
    reconstruction gradient, used for the adversarial generator term.
    Returns ``(record, e_c, indices, recon)``.
    """
    cfg = cfg or AeConfig()
    w = cfg.weights
    record, (enc_cache, e_c, idx, q_cache, dec_cache, resid, g_n, g_c, recon) = _forward(
        model, x_n, x_c, cfg, keep=True)
    drecon = w.lambda_r * np.sign(resid) / resid.size
    if extra_recon_grad is not None:
        drecon = drecon + extra_recon_grad
    de_q = model.decoder.backward(dec_cache, drecon)
    de_c, dcodes = quantize_backward(q_cache, de_q, w.lambda_q)
    model.codebook.codes.grad += dcodes
    dz = np.concatenate([w.lambda_s * g_n, de_c + w.lambda_s * g_c])
    model.encoder.backward(enc_cache, dz)
    return record, e_c, idx, recon


class PatchDiscriminator(Sequential):
    """Three-convolution discriminator producing a (N, H/4, W/4, 1) logit grid."""

    def __init__(self, stream, width=16, dtype=np.float64):
        super().__init__([
            ("conv3x3", "c1", {"stride": 2}),
            ("relu", None, {}),
            ("conv3x3", "c2", {"stride": 2}),
            ("relu", None, {}),
            ("conv3x3", "c3", {}),
        ], dtype)
        self.add_params("c1", init_conv(stream, 1, width))
        self.add_params("c2", init_conv(stream, width, 2 * width))
        self.add_params("c3", init_conv(stream, 2 * width, 1, scale=0.1))


def patch_disc_loss(x_real, x_fake, disc):
    """Hinge losses over patch logits.

    d_loss = (mean relu(1 - D(real)) + mean relu(1 + D(fake))) / 2
    g_loss = mean relu(1 - D(fake))
    """
    d_real, _ = disc.forward(_as_batch(x_real) if np.ndim(x_real) < 4 else x_real)
    d_fake, _ = disc.forward(_as_batch(x_fake) if np.ndim(x_fake) < 4 else x_fake)
    d_loss = 0.5 * (np.maximum(1.0 - d_real, 0.0).mean() + np.maximum(1.0 + d_fake, 0.0).mean())
    g_loss = np.maximum(1.0 - d_fake, 0.0).mean()
    return float(d_loss), float(g_loss)


class AeTrainState:
    """Model, optimizers and the random stream owned by a stage-1 run."""

    def __init__(self, model, cfg, seed=0):
        self.model = model
        self.cfg = cfg
        self.step = 0
        self.stream = RngStream(seed, 11)
        self.optimizer = AdamW(model.named_params(), cfg.lr, weight_decay=cfg.weight_decay)
        self.disc = None
        if cfg.weights.lambda_adv > 0:
            self.disc = PatchDiscriminator(RngStream(seed, 12), dtype=model.dtype)
            self.disc_opt = AdamW(self.disc.params, cfg.lr, weight_decay=cfg.weight_decay)


def _generator_grad(state, recon):
    d_fake, cache = state.disc.forward(recon)
    active = (1.0 - d_fake) > 0
    g_loss = float(np.where(active, 1.0 - d_fake, 0.0).mean())
    dlogit = -active.astype(d_fake.dtype) / d_fake.size
    state.disc.zero_grad()
    drecon = state.disc.backward(cache, dlogit)
    state.disc.zero_grad()
    return g_loss, drecon


def _disc_update(state, real, fake):
    disc = state.disc
    disc.zero_grad()
    d_real, c_real = disc.forward(real)
    d_fake, c_fake = disc.forward(fake)
    a_real = (1.0 - d_real) > 0
    a_fake = (1.0 + d_fake) > 0
    d_loss = 0.5 * (np.where(a_real, 1.0 - d_real, 0.0).mean()
                    + np.where(a_fake, 1.0 + d_fake, 0.0).mean())
    disc.backward(c_real, -0.5 * a_real / d_real.size)
    disc.backward(c_fake, 0.5 * a_fake / d_fake.size)
    state.disc_opt.step()
    return float(d_loss)


def _reseed_dead_codes(state, e_c, idx):
    cb = state.model.codebook
    used = np.unique(idx)
    cb.usage_counts += np.bincount(idx.reshape(-1), minlength=cb.size)
    cb.idle_steps += 1
    cb.idle_steps[used] = 0
    dead = np.flatnonzero(cb.idle_steps >= state.cfg.dead_code_steps)
    if dead.size:
        flat, _ = _to_flat(e_c)
        picks = state.stream.integers(0, flat.shape[0], dead.size)
        cb.codes.value[dead] = flat[picks]
        cb.codes.adam_m[dead] = 0.0
        cb.codes.adam_v[dead] = 0.0
        cb.idle_steps[dead] = 0
    return dead.size


def ae_train_step(state, x_n, x_c):
    """One forward/backward/AdamW update over encoder, codebook and decoder.

    The similarity gradient reaches the shared encoder through both the
    non-contrast and contrast applications.
    """
    model, cfg = state.model, state.cfg
    model.zero_grad()
    extra = None
    l_adv = 0.0
    if state.disc is not None:
        # generator gradient is evaluated on the decoder output of this step
        _, (*_, recon) = _forward(model, x_n, x_c, cfg, keep=True)
        l_adv, g = _generator_grad(state, recon)
        extra = cfg.weights.lambda_adv * g
    record, e_c, idx, recon = auto_loss_backward(x_n, x_c, model, cfg, extra)
    if state.disc is not None:
        record.l_adv = l_adv
        record.l_auto += cfg.weights.lambda_adv * l_adv
        record.d_loss = _disc_update(state, _as_batch(x_c), recon)
    state.optimizer.step()
    _reseed_dead_codes(state, e_c, idx)
    state.step += 1
    return record
