from .config import RunConfig, load_config, parse_config
from .io import Checkpoint, emit_pgm, load_checkpoint, pgm_bytes, save_checkpoint
from .train import train_stage1, train_stage2

__all__ = ["Checkpoint", "RunConfig", "emit_pgm", "load_checkpoint", "load_config",
           "parse_config", "pgm_bytes", "save_checkpoint", "train_stage1", "train_stage2"]
