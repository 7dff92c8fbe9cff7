"""Batch enhancement: decompose, enhance illumination, recompose, report."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .image_core import load_png, save_png
from .metrics import build_report
from .nism import apply_gamma, apply_nism, estimate_eta, recompose
from .sid_net import SidConfig, decompose

log = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "name", "height", "width", "eta", "T", "iters", "final_loss",
    "ge", "ce", "gmi", "gmg", "psnr", "ssim",
)
CURVES = ("nism", "gamma", "fixed-eta")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    inputs: list = field(default_factory=list)
    out: str = "out"
    sid: SidConfig = field(default_factory=SidConfig)
    curve: str = "nism"
    eta: float = 2.2
    gamma: float = 2.2
    dump_intermediates: bool = False
    ref_dir: Optional[str] = None
    workers: Optional[int] = None

    def __post_init__(self):
        if self.curve not in CURVES:
            raise ConfigError(f"curve must be one of {CURVES}, got {self.curve!r}")
        if self.curve == "gamma" and self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if self.curve == "fixed-eta" and self.eta <= 0:
            raise ConfigError("eta must be positive")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")


SID_KEYS = {f.name for f in fields(SidConfig)}
RUN_KEYS = {"inputs", "out", "curve", "eta", "gamma", "dump_intermediates", "ref_dir", "workers"}
ALIASES = {"iters": "iterations"}


def config_from_dict(doc: dict) -> RunConfig:
    """Build a RunConfig from a flat dict (JSON config merged with CLI flags)."""
    sid_kw, run_kw = {}, {}
    for key, value in doc.items():
        if value is None:
            continue
        key = ALIASES.get(key, key)
        if key in SID_KEYS:
            sid_kw[key] = value
        elif key in RUN_KEYS:
            run_kw[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        sid = SidConfig(**sid_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if isinstance(run_kw.get("inputs"), str):
        run_kw["inputs"] = [run_kw["inputs"]]
    return RunConfig(sid=sid, **run_kw)


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    return doc


def expand_inputs(inputs) -> list[Path]:
    paths = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(q for q in p.iterdir() if q.suffix.lower() == ".png"))
        else:
            paths.append(p)
    if not paths:
        raise ConfigError("no input images")
    return paths


def assign_stems(paths, out_dir: Path) -> list[str]:
    """Unique output stems: repeated names (in the batch or on disk) get _1, _2, ..."""
    taken, stems = set(), []
    for p in paths:
        base = stem = p.stem
        k = 0
        while stem in taken or (out_dir / f"{stem}_enhanced.png").exists():
            k += 1
            stem = f"{base}_{k}"
        taken.add(stem)
        stems.append(stem)
    return stems


def enhance_array(img: np.ndarray, cfg: RunConfig):
    """Run the full pipeline on one (H, W, 3) image.

    Returns ``(enhanced, decomposition, nism_params, eta_used)``; ``eta_used``
    is ``None`` for the gamma curve.
    """
    dec = decompose(img, cfg.sid)
    params = estimate_eta(dec.L_low)
    if cfg.curve == "gamma":
        L_hat, eta_used = apply_gamma(dec.L_low, cfg.gamma), None
    else:
        eta_used = params.eta if cfg.curve == "nism" else cfg.eta
        L_hat = apply_nism(dec.L_low, eta_used)
    return recompose(dec.R_low, L_hat), dec, params, eta_used


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.6f}"


def process_image(path, stem: str, cfg: RunConfig) -> dict:
    out_dir = Path(cfg.out)
    img = load_png(path)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    enhanced, dec, params, eta_used = enhance_array(img, cfg)
    if dec.aborted:
        raise RuntimeError("; ".join(dec.warnings))
    save_png(enhanced, out_dir / f"{stem}_enhanced.png")
    if cfg.dump_intermediates:
        save_png(dec.R_low, out_dir / f"{stem}_R.png")
        save_png(dec.L_low, out_dir / f"{stem}_L.png")
        save_png((dec.N_low + 1.0) / 2.0, out_dir / f"{stem}_N.png")
        (out_dir / f"{stem}_loss.csv").write_text(dec.history_csv())

    ref = None
    if cfg.ref_dir:
        ref_path = Path(cfg.ref_dir) / Path(path).name
        if ref_path.exists():
            ref = load_png(ref_path)
            if ref.shape[2] == 1:
                ref = np.repeat(ref, 3, axis=2)
        else:
            log.warning("no reference image for %s", Path(path).name)
    report = build_report(enhanced, ref)
    log.info("%s: eta=%s T=%.4f final_loss=%.6g", stem,
             "-" if eta_used is None else f"{eta_used:.4f}", params.T, dec.final_loss)
    row = {
        "name": stem, "height": img.shape[0], "width": img.shape[1],
        "eta": eta_used, "T": params.T, "iters": dec.iterations_run, "final_loss": dec.final_loss,
        "ge": report.ge, "ce": report.ce, "gmi": report.gmi, "gmg": report.gmg,
        "psnr": report.psnr, "ssim": report.ssim,
    }
    return {k: _fmt(v) for k, v in row.items()}


def _job(args):
    path, stem, cfg = args
    try:
        return process_image(path, stem, cfg), None
    except Exception as exc:  # per-image failures are reported, not fatal
        return None, f"{path}: {type(exc).__name__}: {exc}"


def run_enhance(cfg: RunConfig):
    """Process every input; returns ``(rows, failures)`` and writes report.csv."""
    paths = expand_inputs(cfg.inputs)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stems = assign_stems(paths, out_dir)
    jobs = [(p, s, cfg) for p, s in zip(paths, stems)]

    workers = min(cfg.workers or os.cpu_count() or 1, len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]

    rows, failures = [], []
    for row, err in results:
        if err is None:
            rows.append(row)
        else:
            log.error("failed: %s", err)
            failures.append(err)

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    (out_dir / "report.csv").write_text(buf.getvalue())
    return rows, failures
