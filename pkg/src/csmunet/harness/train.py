"""Training loop, evaluation and hyperparameter sweeps for the toy network."""

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import io, metrics
from .._fpmode import flush_subnormals
from ..cmsa import ConfigurationError
from . import model
from .config import RunConfig, from_mapping
from .data import synth_dataset
from .loss import dice_ce_loss
from .optim import AdamW

CHECKPOINT_DIR = "checkpoint"
CONFIG_FILE = "config.txt"


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite."""


@dataclass
class TrainResult:
    params: dict
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    checkpoint: Path = None
    seconds: float = 0.0

    @property
    def final(self):
        return self.evals[-1] if self.evals else None


class JsonLog:
    """Append-only JSON-lines writer; a no-op when ``path`` is None."""

    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("w")

    def write(self, record):
        if self.path:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self):
        if self.path:
            self._fh.close()


def split_data(cfg):
    images, masks = synth_dataset(cfg.seed, cfg.n_train + cfg.n_val, cfg.image_size, cfg.noise)
    n = cfg.n_train
    return (images[:n], masks[:n]), (images[n:], masks[n:])


def batch_order(cfg, n_train):
    """Deterministic stream of index batches: reshuffled every epoch."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    while True:
        perm = rng.permutation(n_train)
        for i in range(0, n_train - cfg.batch + 1, cfg.batch):
            yield perm[i:i + cfg.batch]
        if n_train < cfg.batch:
            yield perm


def evaluate(params, cfg, images, masks):
    """mDice / mIoU from overlap counts pooled over the given images."""
    preds = model.predict(images, params, cfg)
    dice, iou, mdice, miou = metrics.dataset_scores(preds, masks, cfg.classes)
    return {"mDice": mdice, "mIoU": miou, "dice": dice, "iou": iou}


def _diagnostics(step, loss, params, grads):
    def norms(d):
        return {k: float(np.sqrt(np.sum(np.square(v, dtype=np.float64)))) for k, v in d.items()}
    return {
        "step": step,
        "loss": float(loss) if np.isscalar(loss) else str(loss),
        "nonfinite_params": sorted(k for k, v in params.items() if not np.isfinite(v).all()),
        "nonfinite_grads": sorted(k for k, v in grads.items() if not np.isfinite(v).all()),
        "param_norms": norms(params),
        "grad_norms": norms(grads),
    }


def save_run(directory, params, cfg):
    """Checkpoint tensors plus the config needed to rebuild the network."""
    directory = Path(directory)
    manifest = io.save_checkpoint(directory, params)
    (directory / CONFIG_FILE).write_text(cfg.to_text())
    return manifest


def load_run(directory):
    directory = Path(directory)
    if directory.is_file():
        directory = directory.parent
    cfg = RunConfig()
    cfg_path = directory / CONFIG_FILE
    if cfg_path.exists():
        cfg = from_mapping(io.load_config(cfg_path))
    return io.load_checkpoint(directory), cfg


def train(cfg, log_path=None, data=None, save=True, progress=None):
    """Train one model; returns a :class:`TrainResult`.

    ``data`` overrides the generated ((train images, masks), (val images, masks)).
    Raises :class:`TrainingDiverged` on a non-finite loss after writing
    ``nan_dump.json`` to the output directory.
    """
    with flush_subnormals():
        return _train(cfg, log_path, data, save, progress)


def _train(cfg, log_path, data, save, progress):
    cfg.validate()
    t0 = time.perf_counter()
    (xtr, ytr), (xva, yva) = data if data is not None else split_data(cfg)
    params = model.init_params(cfg)
    opt = AdamW(params, cfg.lr, cfg.weight_decay, total_steps=cfg.steps)
    out_dir = Path(cfg.out_dir)
    ckpt = out_dir / CHECKPOINT_DIR if save else None
    log = JsonLog(log_path)
    log.write({"event": "config", "hash": cfg.config_hash(), "config": dict(cfg.items()),
               "checkpoint": str(ckpt) if ckpt else None,
               "params": model.param_count(params)})
    result = TrainResult(params)
    batches = batch_order(cfg, len(xtr))
    try:
        for step in range(1, cfg.steps + 1):
            idx = next(batches)
            logits, cache = model.forward(xtr[idx], params, cfg)
            loss, glogits = dice_ce_loss(logits, ytr[idx], cfg.ds_weights,
                                         cfg.dice_weight, cfg.ce_weight)
            grads = model.backward(cache, glogits, params, cfg)
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                dump = _diagnostics(step, loss, params, grads)
                out_dir.mkdir(parents=True, exist_ok=True)
                (out_dir / "nan_dump.json").write_text(json.dumps(dump, indent=1))
                log.write({"event": "abort", **{k: dump[k] for k in ("step", "loss", "nonfinite_grads")}})
                raise TrainingDiverged(f"non-finite loss at step {step}; see {out_dir / 'nan_dump.json'}")
            lr = opt.step(params, grads)
            result.losses.append(float(loss))
            log.write({"event": "step", "step": step, "loss": float(loss), "lr": lr})
            if step % cfg.eval_every == 0 or step == cfg.steps:
                ev = evaluate(params, cfg, xva, yva) if len(xva) else {"mDice": None, "mIoU": None}
                ev["step"] = step
                result.evals.append(ev)
                log.write({"event": "eval", **ev})
                if progress:
                    progress(ev)
        if ckpt is not None:
            save_run(ckpt, params, cfg)
            result.checkpoint = ckpt
    finally:
        result.seconds = time.perf_counter() - t0
        log.write({"event": "done", "seconds": result.seconds})
        log.close()
    return result


SWEEP_PARAMS = {"mu_R": "mu_R", "mu_E": "mu_E", "G": "cmsa_groups"}


def sweep_configs(cfg, param, values):
    """One validated config per value; all errors surface before any training."""
    if param not in SWEEP_PARAMS:
        raise ConfigurationError(f"cannot sweep {param!r}; choose from {sorted(SWEEP_PARAMS)}")
    attr = SWEEP_PARAMS[param]
    out = []
    for v in values:
        v = int(v) if attr == "cmsa_groups" else float(v)
        if attr != "cmsa_groups" and v < 0:
            raise ConfigurationError(f"{param} must be non-negative, got {v}")
        c = cfg.replace(**{attr: v}, out_dir=str(Path(cfg.out_dir) / f"{param}={v}"))
        out.append((v, c.validate()))
    return out


def sweep(cfg, param, values, log_dir=None, save=False):
    """Train one model per value at a fixed seed; rows of (value, mDice, mIoU)."""
    rows = []
    for v, c in sweep_configs(cfg, param, values):
        log_path = Path(log_dir) / f"{param}={v}.jsonl" if log_dir else None
        res = train(c, log_path=log_path, save=save)
        rows.append({"param": param, "value": v, "mDice": res.final["mDice"],
                     "mIoU": res.final["mIoU"], "hash": c.config_hash()})
    return rows
