"""Run configuration: one flat dataclass fed from ``key = value`` files."""

import dataclasses
import hashlib
from dataclasses import dataclass

from ..basm import BASMConfig
from ..cmsa import CMSAConfig, ConfigurationError

# dotted config key -> RunConfig attribute
KEYS = {
    "seed": "seed",
    "steps": "steps",
    "lr": "lr",
    "weight_decay": "weight_decay",
    "batch": "batch",
    "n_train": "n_train",
    "n_val": "n_val",
    "eval_every": "eval_every",
    "image_size": "image_size",
    "classes": "classes",
    "widths": "widths",
    "noise": "noise",
    "threads": "threads",
    "out_dir": "out_dir",
    "loss.ds_weights": "ds_weights",
    "loss.dice": "dice_weight",
    "loss.ce": "ce_weight",
    "scan.method": "scan_method",
    "basm.enabled": "basm_enabled",
    "basm.modulation": "basm_modulation",
    "basm.se_fusion": "basm_se_fusion",
    "basm.fusion_input": "basm_fusion_input",
    "basm.mu_R": "mu_R",
    "basm.mu_E": "mu_E",
    "basm.state": "basm_state",
    "cmsa.enabled": "cmsa_enabled",
    "cmsa.groups": "cmsa_groups",
    "cmsa.lambda_init": "cmsa_lambda_init",
    "cmsa.Lambda_init": "cmsa_Lambda_init",
    "cmsa.d_model": "cmsa_d_model",
    "cmsa.state": "cmsa_state",
}

_BOOL = {"on": True, "true": True, "1": True, "yes": True,
         "off": False, "false": False, "0": False, "no": False}


@dataclass
class RunConfig:
    seed: int = 0
    steps: int = 2000
    lr: float = 4e-3
    weight_decay: float = 1e-2
    batch: int = 4
    n_train: int = 128
    n_val: int = 32
    eval_every: int = 250
    image_size: int = 64
    classes: int = 4
    widths: tuple = (16, 32, 64)
    noise: float = 0.03
    threads: int = 1
    out_dir: str = "runs/default"
    ds_weights: tuple = (1.0, 0.5, 0.25)
    dice_weight: float = 1.0
    ce_weight: float = 1.0
    scan_method: str = "fused"
    basm_enabled: bool = True
    basm_modulation: bool = True
    basm_se_fusion: bool = True
    basm_fusion_input: str = "sum"
    mu_R: float = 0.8
    mu_E: float = 1.2
    basm_state: int = 4
    cmsa_enabled: bool = True
    cmsa_groups: int = 4
    cmsa_lambda_init: float = 1.0
    cmsa_Lambda_init: float = 0.9
    cmsa_d_model: int = 8
    cmsa_state: int = 4

    def basm_config(self):
        return BASMConfig(self.basm_enabled, self.basm_modulation, self.basm_se_fusion,
                          self.basm_fusion_input, self.scan_method)

    def cmsa_config(self):
        return CMSAConfig(self.cmsa_enabled, self.cmsa_groups, True, self.scan_method)

    def validate(self):
        if self.lr < 0:
            raise ConfigurationError("lr must be non-negative")
        if len(self.widths) != 3:
            raise ConfigurationError("the toy net has exactly three levels")
        if len(self.ds_weights) != len(self.widths):
            raise ConfigurationError(
                f"{len(self.ds_weights)} deep-supervision weights for {len(self.widths)} levels")
        if any(w < 0 for w in self.ds_weights):
            raise ConfigurationError("loss weights must be non-negative")
        if self.cmsa_enabled and self.widths[-1] % self.cmsa_groups:
            raise ConfigurationError(
                f"cmsa.groups={self.cmsa_groups} does not divide bottleneck width {self.widths[-1]}")
        if self.image_size % 4:
            raise ConfigurationError("image_size must be divisible by 4")
        if self.basm_fusion_input not in ("sum", "concat"):
            raise ConfigurationError("basm.fusion_input must be sum or concat")
        if self.scan_method not in ("parallel", "sequential", "fused"):
            raise ConfigurationError("scan.method must be parallel, sequential or fused")
        return self

    def items(self):
        """Canonical (dotted key, text value) pairs."""
        out = []
        for key, attr in sorted(KEYS.items()):
            value = getattr(self, attr)
            if isinstance(value, bool):
                text = "on" if value else "off"
            elif isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            else:
                text = str(value)
            out.append((key, text))
        return out

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    def config_hash(self):
        skip = {"out_dir", "threads", "eval_every"}
        text = "".join(f"{k}={v};" for k, v in self.items() if k not in skip)
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def _coerce(attr, text):
    default = getattr(RunConfig(), attr)
    try:
        if isinstance(default, bool):
            return _BOOL[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            conv = float if isinstance(default[0], float) else int
            return tuple(conv(v) for v in text.split(",") if v.strip())
    except (KeyError, ValueError) as exc:
        raise ConfigurationError(f"bad value {text!r} for {attr}") from exc
    return text


def from_mapping(mapping, base=None):
    cfg = base or RunConfig()
    updates = {}
    for key, text in mapping.items():
        if key not in KEYS:
            raise ConfigurationError(f"unknown config key {key!r}")
        attr = KEYS[key]
        updates[attr] = _coerce(attr, str(text))
    return cfg.replace(**updates).validate()
