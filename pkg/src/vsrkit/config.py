"""Run configuration: one documented key-value file, overridable by
flags.

File format: ``key = value`` lines, ``#`` starts a comment, blank lines
ignored.  Keys and defaults are exactly the fields of RunConfig;
booleans accept true/false, tuples are comma-separated.

Example::

    # stage-2 training with context-enhanced fusion
    stage = 2
    seed = 0
    data_dir = data/toy
    out_dir = runs/s2
    steps = 400
    fusion = cem
    init = stage1_checkpoint
    init_checkpoint = runs/s1/checkpoint.vsck
"""

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError

FUSION_MODES = ("cem", "avg", "global_only", "local_only")
INIT_MODES = ("scratch", "stage1_checkpoint")
STAGE1_BRANCHES = ("global", "global_local")


@dataclass
class RunConfig:
    # run identity
    stage: int = 1
    seed: int = 0
    data_dir: str = "data/toy"
    out_dir: str = "runs/run0"
    # optimization
    steps: int = 300
    batch_size: int = 8
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.01
    warmup_frac: float = 0.1
    clip_norm: float = 5.0
    augment: bool = True
    log_every: int = 25
    # architecture
    embed_dim: int = 32
    num_regions: int = 5
    cem_layers: int = 1
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    conv_kernel: int = 7
    stage_channels: tuple = (16, 32)
    stem_stride: int = 2
    assign_softmax_axis: str = "regions"
    # stage 1
    stage1_branches: str = "global_local"
    codebook_size: int = 64
    share_alignment_encoder: bool = True
    # stage 2
    lam: float = 0.1
    fusion: str = "cem"
    init: str = "scratch"
    init_checkpoint: str = ""
    load_alignment_encoder: bool = False
    # decoding / evaluation
    decode_mode: str = "greedy"
    beam_width: int = 4
    lam_dec: float = 0.1
    eval_split: str = "test"

    def validate(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}")
        if self.init not in INIT_MODES:
            raise ConfigError(f"init must be one of {INIT_MODES}")
        if self.stage1_branches not in STAGE1_BRANCHES:
            raise ConfigError(
                f"stage1_branches must be one of {STAGE1_BRANCHES}")
        if self.stage == 2 and self.init == "stage1_checkpoint":
            if not self.init_checkpoint:
                raise ConfigError(
                    "init=stage1_checkpoint requires init_checkpoint")
            if not Path(self.init_checkpoint).is_file():
                raise ConfigError(
                    f"init_checkpoint not readable: {self.init_checkpoint}")
        if self.beam_width < 1:
            raise ConfigError(f"beam_width must be >= 1, got {self.beam_width}")
        return self


def _coerce(name, text, target_type):
    text = text.strip()
    try:
        if target_type is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if target_type is tuple:
            return tuple(int(v) for v in text.split(",") if v.strip())
        return target_type(text)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


def parse_config_text(text, base=None):
    cfg = base or RunConfig()
    types = {f.name: type(getattr(cfg, f.name)) for f in fields(RunConfig)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _coerce(key, value, types[key])
    return replace(cfg, **updates)


def load_config(path, overrides=()):
    """Read a config file and apply ``key=value`` override strings."""
    cfg = parse_config_text(Path(path).read_text()) if path else RunConfig()
    if overrides:
        cfg = parse_config_text("\n".join(overrides), base=cfg)
    return cfg
