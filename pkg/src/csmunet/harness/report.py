"""Static run reports: a JSON summary plus PGM heatmaps of the BASM internals."""

import json
from pathlib import Path

import numpy as np

from .. import io
from . import model
from .bench import scan_bench
from .data import synth_image
from .train import load_run

HEATMAPS = ("M", "P_b", "R", "E", "w_ssm")


def read_log(path):
    """Parsed JSON-lines records; raises FileNotFoundError if the log is missing."""
    path = Path(path)
    text = path.read_text()
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def manifest_param_count(directory):
    """Parameter count summed from the TNSR headers listed in a manifest."""
    total = 0
    for tpath in io.read_manifest(directory).values():
        total += int(io.read_tnsr(tpath).size)
    return total


def sample_image(cfg, index=None):
    """First held-out image of the run's synthetic split (or any index)."""
    i = cfg.n_train if index is None else index
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, i]))
    img, mask = synth_image(rng, cfg.image_size, cfg.noise)
    return img[None, None], mask


def basm_maps(params, cfg, image):
    """Fine-level BASM maps for one image: name -> (H, W) array."""
    _, cache = model.forward(image, params, cfg)
    bc = cache.get("basm1")
    if bc is None or "M" not in bc:
        return {}
    out = {"M": bc["M"][0], "w_ssm": bc["w_ssm"][0]}
    if bc["re"] is not None:
        out.update(P_b=bc["re"].P_b[0], R=bc["re"].R[0], E=bc["re"].E[0])
    return {k: np.asarray(v, dtype=np.float64).reshape(v.shape[-2:]) for k, v in out.items()}


def write_heatmaps(maps, out_dir):
    """PGM per map; values in [0, 1] map linearly to 0..255, larger ranges use [0, max]."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scales = {}
    for name in HEATMAPS:
        if name not in maps:
            continue
        v = maps[name]
        hi = 1.0 if name in ("M", "P_b", "w_ssm") else max(float(v.max()), 1e-12)
        io.write_pgm(out_dir / f"{name}.pgm", io.to_gray8(v, 0.0, hi))
        scales[name] = [0.0, hi]
    return scales


def _eval_summary(records):
    evals = [r for r in records if r.get("event") == "eval"]
    steps = [r for r in records if r.get("event") == "step"]
    if not evals and not steps:
        return {"mDice": "no data", "mIoU": "no data", "steps": 0, "final_loss": "no data"}
    out = {"steps": len(steps),
           "final_loss": steps[-1]["loss"] if steps else "no data"}
    if evals:
        last = evals[-1]
        out.update(mDice=last["mDice"], mIoU=last["mIoU"], dice=last.get("dice"),
                   best_mDice=max(e["mDice"] for e in evals if e["mDice"] is not None),
                   history=[{"step": e["step"], "mDice": e["mDice"], "mIoU": e["mIoU"]} for e in evals])
    else:
        out.update(mDice="no data", mIoU="no data")
    return out


def report(log_path, out_dir=None, bench=True, bench_kwargs=None):
    """Write ``summary.json`` (and heatmaps when a checkpoint is available).

    Returns the summary dict.  A log with no records gives "no data" fields.
    """
    log_path = Path(log_path)
    records = read_log(log_path)
    out_dir = Path(out_dir) if out_dir else log_path.parent / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    config = next((r for r in records if r.get("event") == "config"), None)
    summary = {"log": str(log_path), "records": len(records),
               "config_hash": config["hash"] if config else "no data",
               "metrics": _eval_summary(records)}
    ckpt = Path(config["checkpoint"]) if config and config.get("checkpoint") else None
    if ckpt is not None and (ckpt / io.MANIFEST).exists():
        params, cfg = load_run(ckpt)
        summary["parameters"] = {"model": model.param_count(params),
                                 "manifest": manifest_param_count(ckpt)}
        image, _ = sample_image(cfg)
        maps = basm_maps(params, cfg, image)
        summary["heatmaps"] = {name: {"file": f"{name}.pgm", "range": rng}
                               for name, rng in write_heatmaps(maps, out_dir).items()}
    else:
        summary["parameters"] = "no data"
        summary["heatmaps"] = {}
    summary["scan_bench"] = scan_bench(**(bench_kwargs or {})) if bench else "skipped"
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary
