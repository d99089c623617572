"""Run configuration: a flat set of typed keys read from ``key = value`` files."""
import dataclasses
from dataclasses import dataclass, fields

from ..autoencoder import AeConfig, AeLossWeights


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # data
    n_pairs: int = 40
    image_size: int = 64
    patch_size: int = 0  # 0 = no cropping
    window_width: float = 400.0
    window_level: float = 0.0
    # stage 1
    latent_channels: int = 4
    codebook_size: int = 128
    ae_steps: int = 1500
    ae_batch: int = 1
    ae_lr: float = 1e-4
    ae_lr_final: float = 1.0  # cosine decay to ae_lr * ae_lr_final; 1 = constant
    weight_decay: float = 0.01
    lambda_r: float = 1.0
    lambda_q: float = 1.0
    lambda_s: float = 0.1
    lambda_adv: float = 0.0
    gamma: float = 1.0
    floor: float = 1e-7
    beta_commit: float = 0.25
    hf_beta: float = 1.0
    hf_sigma: float = 1.0
    dead_code_steps: int = 200
    # stage 2
    diff_epochs: int = 10
    diff_steps_per_epoch: int = 0  # 0 = one pass over the training set
    diff_batch: int = 2
    diff_lr: float = 2e-4
    T: int = 1000
    beta_1: float = 1e-4
    beta_T: float = 0.02
    alpha: float = 2.0
    # sampler
    t_start: int = -1  # -1 = T // 2

    def __post_init__(self):
        checks = [
            (self.n_pairs >= 1, "n_pairs must be >= 1"),
            (self.image_size >= 32 and self.image_size % 4 == 0,
             "image_size must be >= 32 and divisible by 4"),
            (self.patch_size == 0 or (8 <= self.patch_size <= self.image_size
                                      and self.patch_size % 4 == 0),
             "patch_size must be 0 or a multiple of 4 in [8, image_size]"),
            (self.window_width > 0, "window_width must be positive"),
            (self.latent_channels >= 1, "latent_channels must be >= 1"),
            (self.codebook_size >= 2, "codebook_size must be >= 2"),
            (self.ae_steps >= 0 and self.ae_batch >= 1, "ae_steps >= 0 and ae_batch >= 1"),
            (0 <= self.ae_lr_final <= 1, "ae_lr_final must lie in [0, 1]"),
            (self.ae_lr >= 0 and self.diff_lr >= 0 and self.weight_decay >= 0,
             "learning rates and weight decay must be non-negative"),
            (min(self.lambda_r, self.lambda_q, self.lambda_s, self.lambda_adv) >= 0,
             "loss weights must be non-negative"),
            (max(self.lambda_r, self.lambda_q, self.lambda_s) > 0,
             "one of lambda_r, lambda_q, lambda_s must be positive"),
            (self.gamma >= 0 and 0 < self.floor < 1, "need gamma >= 0 and 0 < floor < 1"),
            (self.beta_commit >= 0 and self.hf_beta >= 0 and self.hf_sigma > 0,
             "need beta_commit >= 0, hf_beta >= 0, hf_sigma > 0"),
            (self.dead_code_steps >= 1, "dead_code_steps must be >= 1"),
            (self.diff_epochs >= 1 and self.diff_steps_per_epoch >= 0 and self.diff_batch >= 1,
             "need diff_epochs >= 1, diff_steps_per_epoch >= 0, diff_batch >= 1"),
            (self.T >= 1 and 0 < self.beta_1 < self.beta_T < 1,
             "need T >= 1 and 0 < beta_1 < beta_T < 1"),
            (self.alpha > 0, "alpha must be positive"),
            (self.t_start == -1 or 0 <= self.t_start <= self.T, "t_start must be -1 or in [0, T]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    @property
    def sampler_t_start(self):
        return self.T // 2 if self.t_start == -1 else self.t_start

    def ae_config(self):
        return AeConfig(
            weights=AeLossWeights(self.lambda_r, self.lambda_q, self.lambda_s, self.lambda_adv),
            gamma=self.gamma, floor=self.floor, beta_commit=self.beta_commit,
            hf_beta=self.hf_beta, hf_sigma=self.hf_sigma, lr=self.ae_lr,
            weight_decay=self.weight_decay, dead_code_steps=self.dead_code_steps,
        )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def parse_config(text, base=None):
    """Parse ``key = value`` lines (``#`` starts a comment); unknown keys are errors."""
    base = base or RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    changes = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in changes:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        kind = types[key]
        try:
            changes[key] = int(value) if kind in (int, "int") else float(value)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    return base.replace(**changes)


def load_config(path, base=None):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base)
