"""Two-stage training loops, dataset files and model <-> checkpoint conversion."""
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from ..autoencoder import DOWNSAMPLE, AeTrainState, SyncreticAutoencoder, ae_train_step, encode
from ..diffnet.optim import AdamW, cosine_lr
from ..diffnet.rng import RngStream
from ..diffusion import Denoiser, SamplerConfig, diff_loss, make_schedule, translate
from ..errors import DivergenceError
from ..phantom import PairedSample, crop_pair, gen_pair, split_dataset, window_normalize
from ..similarity import cosine_map, dynamic_mask
from .io import Checkpoint, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


# -- data ----------------------------------------------------------------------

def sample_seed(seed, index):
    # 63 bits so the seed fits the i64 metadata slot of a sample file
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint64)[0]) >> 1


def generate_pairs(n, size, seed):
    return [gen_pair(sample_seed(seed, i), size) for i in range(n)]


def normalize_pair(pair, cfg):
    return (window_normalize(pair.ncct, cfg.window_width, cfg.window_level),
            window_normalize(pair.cect, cfg.window_width, cfg.window_level))


def write_dataset(out_dir, n, size, seed):
    """Write ``n`` phantom pairs plus a manifest with a seeded 4:1 split."""
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i, pair in enumerate(generate_pairs(n, size, seed)):
        name = f"sample_{i:04d}.s2t1"
        save_checkpoint(os.path.join(out_dir, name),
                        {"ncct": pair.ncct, "cect": pair.cect,
                         "mask": pair.contrast_mask.astype(np.int64)},
                        {"stage": "sample", "seed": pair.seed})
        names.append(name)
    manifest = {"n": n, "size": size, "seed": seed, "files": names}
    if n >= 5:
        train, val = split_dataset(names, seed)
        manifest.update(train=train, val=val)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def read_sample(path):
    ck = load_checkpoint(path)
    missing = {"ncct", "cect", "mask"} - set(ck.tensors)
    if missing:
        raise ValueError(f"{path}: not a sample file (missing {sorted(missing)})")
    return PairedSample(ck.tensors["ncct"], ck.tensors["cect"],
                        ck.tensors["mask"].astype(bool), int(ck.metadata.get("seed", 0)))


def read_dataset(data_dir, split="train"):
    with open(os.path.join(data_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    names = manifest["files"] if split == "all" else manifest.get(split)
    if names is None:
        raise ValueError(f"manifest in {data_dir} has no {split!r} split")
    return [read_sample(os.path.join(data_dir, name)) for name in names], names


# -- checkpoints ---------------------------------------------------------------

def ae_to_checkpoint(model, extra=None):
    meta = {"stage": "ae", "latent_channels": model.latent_channels,
            "downsample_factor": DOWNSAMPLE, "codebook_size": model.codebook.size}
    meta.update(extra or {})
    return Checkpoint(dict(model.state_arrays()), meta)


def ae_from_checkpoint(ck):
    if ck.stage != "ae":
        raise ValueError(f"expected an autoencoder checkpoint, got stage {ck.stage!r}")
    try:
        channels = int(ck.metadata["latent_channels"])
        factor = int(ck.metadata["downsample_factor"])
        codes = ck.tensors["codebook"]
    except KeyError as exc:
        raise ValueError(f"autoencoder checkpoint missing {exc.args[0]!r}") from exc
    if factor != DOWNSAMPLE:
        raise ValueError(f"downsample factor {factor} unsupported (expected {DOWNSAMPLE})")
    model = SyncreticAutoencoder(0, channels, codes.shape[0],
                                 dtype=ck.tensors["enc.conv_in.w"].dtype)
    model.load_arrays(ck.tensors)
    return model


@dataclass
class DiffusionModel:
    denoiser: Denoiser
    sched: object
    latent_scale: float
    t_start_default: int
    alpha: float = 2.0


def diff_to_checkpoint(dm):
    tensors = {"diff." + k: v for k, v in dm.denoiser.state_arrays().items()}
    meta = {"stage": "diff", "T": dm.sched.T, "beta_1": float(dm.sched.beta[0]),
            "beta_T": float(dm.sched.beta[-1]), "t_start_default": dm.t_start_default,
            "latent_scale": dm.latent_scale, "latent_channels": dm.denoiser.latent_channels,
            "alpha": dm.alpha}
    return Checkpoint(tensors, meta)


def diff_from_checkpoint(ck):
    if ck.stage != "diff":
        raise ValueError(f"expected a diffusion checkpoint, got stage {ck.stage!r}")
    m = ck.metadata
    try:
        T, b1, bT = int(m["T"]), float(m["beta_1"]), float(m["beta_T"])
        channels = int(m["latent_channels"])
    except KeyError as exc:
        raise ValueError(f"diffusion checkpoint missing {exc.args[0]!r}") from exc
    arrays = {k[5:]: v for k, v in ck.tensors.items() if k.startswith("diff.")}
    den = Denoiser(0, channels, dtype=arrays["conv_in.w"].dtype)
    den.load_arrays(arrays)
    sched = make_schedule(T, b1, bT) if T > 1 else make_schedule(1, b1, bT)
    return DiffusionModel(den, sched, float(m.get("latent_scale", 1.0)),
                          int(m.get("t_start_default", T // 2)), float(m.get("alpha", 2.0)))


def params_digest(model):
    """Byte-level fingerprint of a model's parameters."""
    import hashlib
    h = hashlib.sha256()
    for key, value in sorted(model.state_arrays().items()):
        h.update(key.encode())
        h.update(np.ascontiguousarray(value).tobytes())
    return h.hexdigest()


# -- stage 1 -------------------------------------------------------------------

@dataclass
class Stage1Result:
    model: SyncreticAutoencoder
    curve: list = field(default_factory=list)
    diverged: bool = False


def _permutation(stream, n):
    return np.argsort(stream.uniform(n), kind="stable")


def train_stage1(cfg, pairs, steps=None, log_every=0):
    """Train the syncretic autoencoder on ``pairs`` (HU phantoms)."""
    if len(pairs) < 8:
        raise ValueError(f"stage 1 needs at least 8 training pairs, got {len(pairs)}")
    steps = cfg.ae_steps if steps is None else steps
    model = SyncreticAutoencoder(cfg.seed, cfg.latent_channels, cfg.codebook_size)
    state = AeTrainState(model, cfg.ae_config(), cfg.seed)
    order_stream = RngStream(cfg.seed, 41)
    result = Stage1Result(model)
    order = np.empty(0, dtype=np.int64)
    for step in range(steps):
        if order.size < cfg.ae_batch:
            order = np.concatenate([order, _permutation(order_stream, len(pairs))])
        batch, order = order[:cfg.ae_batch], order[cfg.ae_batch:]
        chosen = [pairs[i] for i in batch]
        if cfg.patch_size:
            chosen = [crop_pair(p, cfg.patch_size, sample_seed(cfg.seed, step * 1000 + j))
                      for j, p in enumerate(chosen)]
        xn, xc = zip(*(normalize_pair(p, cfg) for p in chosen))
        state.optimizer.lr = cosine_lr(cfg.ae_lr, step, steps, cfg.ae_lr_final)
        try:
            rec = ae_train_step(state, np.stack(xn), np.stack(xc))
        except DivergenceError as exc:
            log.error("stage 1 diverged at step %d: %s", step, exc)
            result.diverged = True
            break
        row = {"step": step, **rec.as_dict()}
        result.curve.append(row)
        if log_every and step % log_every == 0:
            log.info("ae step %d: L_auto=%.5f L_rec=%.5f L_quan=%.5f L_sim=%.5f",
                     step, rec.l_auto, rec.l_rec, rec.l_quan, rec.l_sim)
    return result


# -- stage 2 -------------------------------------------------------------------

@dataclass
class Stage2Result:
    model: DiffusionModel
    curve: list = field(default_factory=list)
    mask_schedule: list = field(default_factory=list)
    latents: tuple = None


def encode_pairs(ae, pairs, cfg, batch=8):
    e_n, e_c = [], []
    for i in range(0, len(pairs), batch):
        xn, xc = zip(*(normalize_pair(p, cfg) for p in pairs[i:i + batch]))
        e_n.append(encode(np.stack(xn), ae))
        e_c.append(encode(np.stack(xc), ae))
    return np.concatenate(e_n).astype(np.float64), np.concatenate(e_c).astype(np.float64)


def mean_mask(e_n, e_c, tau, total, alpha):
    return float(dynamic_mask(cosine_map(e_n, e_c), tau, total, alpha).mean())


def train_stage2(cfg, pairs, ae, steps_per_epoch=None, log_every=0):
    """Train the denoiser on frozen-autoencoder latents.

    Epoch ``tau`` runs from 0 to ``diff_epochs - 1``; the logged mask
    schedule has one extra terminal entry at ``tau = diff_epochs``.
    """
    e_n, e_c = encode_pairs(ae, pairs, cfg)
    if e_n.shape[1] != ae.latent_channels:
        raise ValueError("latent shape incompatible with the autoencoder")
    latent_scale = float(1.0 / max(e_n.std(), 1e-8))
    sched = make_schedule(cfg.T, cfg.beta_1, cfg.beta_T)
    den = Denoiser(cfg.seed, ae.latent_channels)
    opt = AdamW(den.params, cfg.diff_lr, weight_decay=cfg.weight_decay)
    stream = RngStream(cfg.seed, 51)
    order_stream = RngStream(cfg.seed, 52)
    total = cfg.diff_epochs
    if steps_per_epoch is None:
        steps_per_epoch = cfg.diff_steps_per_epoch or math.ceil(len(pairs) / cfg.diff_batch)
    result = Stage2Result(DiffusionModel(den, sched, latent_scale, cfg.sampler_t_start, cfg.alpha),
                          latents=(e_n, e_c))
    step = 0
    for tau in range(total):
        result.mask_schedule.append({"epoch": tau, "mean_mask": mean_mask(e_n, e_c, tau, total, cfg.alpha)})
        order = np.empty(0, dtype=np.int64)
        losses = []
        for _ in range(steps_per_epoch):
            if order.size < cfg.diff_batch:
                order = np.concatenate([order, _permutation(order_stream, len(pairs))])
            batch, order = order[:cfg.diff_batch], order[cfg.diff_batch:]
            den.zero_grad()
            loss, _ = diff_loss(e_n[batch], e_c[batch], tau, total, den, sched, stream,
                                cfg.alpha, latent_scale)
            opt.step()
            losses.append(loss)
            result.curve.append({"step": step, "epoch": tau, "loss": loss})
            step += 1
        if log_every and tau % log_every == 0:
            log.info("diff epoch %d: mean loss %.5f", tau, float(np.mean(losses)))
    result.mask_schedule.append({"epoch": total, "mean_mask": mean_mask(e_n, e_c, total, total, cfg.alpha),
                                 "terminal": True})
    return result


def translate_images(xs, ae, dm, seed, t_start=None):
    t_start = dm.t_start_default if t_start is None else t_start
    return [translate(x, ae, dm.denoiser, dm.sched, SamplerConfig(t_start, seed), dm.latent_scale)
            for x in xs]
