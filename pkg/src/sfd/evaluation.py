"""Angular-error evaluation with bootstrap standard errors and report output."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from sfd.exceptions import AssetError, ConfigError
from sfd.features import ArrayGeometry, classic_doa_estimate
from sfd.scene import (
    BUILTIN_NOISE_TYPES,
    NO_NOISE,
    Assets,
    SceneSpec,
    child_rng,
    read_manifest,
    render,
    stable_seed,
)
from sfd.signal import AudioBuffer, StftConfig, read_wav

log = logging.getLogger(__name__)

CLEAN = "clean"
DEFAULT_EVAL_GRID = (-20, -10, 0, 10, 20, CLEAN)
CLASSIC_WARMUP_FRAMES = 100


def angular_error(pred, truth):
    """Absolute difference of broadside angles; both must lie in [-90, 90]."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    for name, a in (("prediction", p), ("truth", t)):
        if np.any(np.isnan(a)) or np.any(np.abs(a) > 90.0):
            raise ValueError(f"{name} outside [-90, 90]")
    err = np.abs(p - t)
    return float(err) if err.ndim == 0 else err


def mae_bootstrap(per_utterance_errors, B: int = 1000, rng=None):
    """Mean error and the spread of ``B`` utterance-resampled means."""
    errors = np.asarray(per_utterance_errors, dtype=np.float64).ravel()
    if errors.size == 0:
        raise ValueError("no utterance errors to aggregate")
    if B < 2:
        raise ValueError("need at least two bootstrap resamples")
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    idx = rng.integers(0, errors.size, size=(B, errors.size))
    means = errors[idx].mean(axis=1)
    return float(errors.mean()), float(means.std(ddof=1))


# --------------------------------------------------------------------------
# Predictors
# --------------------------------------------------------------------------

@dataclass
class GccPhatArgmax:
    """Zero-parameter baseline: pooled GCC-PHAT peak mapped to an angle."""

    stft: StftConfig = field(default_factory=StftConfig)
    pool_window: int = 100
    max_lag: int | None = None
    warmup_frames: int = CLASSIC_WARMUP_FRAMES

    def predict_degrees(self, buffer: AudioBuffer, geometry: ArrayGeometry | None = None):
        return classic_doa_estimate(buffer, self.stft, geometry, self.pool_window, self.max_lag)


@dataclass
class ConstantPredictor:
    angle: float = 0.0
    stft: StftConfig = field(default_factory=StftConfig)
    warmup_frames: int = 0

    def predict_degrees(self, buffer: AudioBuffer, geometry=None):
        return np.full(self.stft.n_frames(buffer.length), float(self.angle))


def utterance_error(predictor, buffer: AudioBuffer, truth: float, geometry=None) -> float:
    """Mean frame error, skipping the predictor's warm-up when the utterance allows."""
    pred = np.asarray(predictor.predict_degrees(buffer, geometry))
    warm = getattr(predictor, "warmup_frames", 0)
    if pred.size > warm:
        pred = pred[warm:]
    if pred.size == 0:
        raise ValueError("utterance shorter than one frame")
    return float(np.mean(angular_error(np.clip(pred, -90.0, 90.0), truth)))


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalCell:
    model: str
    noise: str
    snr: float | str
    mae: float
    stderr: float
    n: int

    def __post_init__(self):
        if self.mae < 0 or self.stderr < 0:
            raise ValueError("mae and stderr must be non-negative")


def _snr_key(snr):
    return (1, 0.0) if snr == CLEAN else (0, float(snr))


@dataclass
class EvalReport:
    cells: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def models(self) -> list:
        return list(dict.fromkeys(c.model for c in self.cells))

    def noise_types(self) -> list:
        return list(dict.fromkeys(c.noise for c in self.cells))

    def snrs(self) -> list:
        return sorted(set(c.snr for c in self.cells), key=_snr_key)

    def averages(self) -> dict:
        """Per-model mean over that model's cells."""
        out = {}
        for model in self.models():
            values = [c.mae for c in self.cells if c.model == model]
            out[model] = math.fsum(values) / len(values)
        return out

    def cell(self, model, noise, snr) -> EvalCell:
        for c in self.cells:
            if (c.model, c.noise, c.snr) == (model, noise, snr):
                return c
        raise KeyError((model, noise, snr))

    def merged(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.cells + other.cells, {**self.provenance, **other.provenance})


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

@dataclass
class TestItem:
    source: AudioBuffer
    spec: SceneSpec
    id: str = ""


def load_test_items(test_manifest) -> list:
    """Accept a manifest path, manifest entries or ready ``TestItem`` objects."""
    if isinstance(test_manifest, (str, Path)):
        entries = read_manifest(test_manifest)
    else:
        entries = list(test_manifest)
    items = []
    for e in entries:
        if isinstance(e, TestItem):
            items.append(e)
        elif isinstance(e, tuple):
            items.append(TestItem(e[0], e[1], str(len(items))))
        else:
            if e.status != "ok":
                continue
            buf = read_wav(e.source)
            if buf.channel_count != 1:
                buf = AudioBuffer(buf.samples.mean(axis=0), buf.sample_rate)
            items.append(TestItem(buf, e.spec, e.id))
    return items


def parse_snr(value):
    if isinstance(value, str) and value.strip().lower() in (CLEAN, "none", "inf"):
        return CLEAN
    if value is None or (isinstance(value, float) and math.isinf(value)):
        return CLEAN
    return float(value)


def _condition_spec(spec: SceneSpec, noise: str, snr, seed: int) -> SceneSpec:
    cell_seed = stable_seed("eval", seed, spec.seed, noise, str(snr))
    if snr == CLEAN:
        return replace(spec, noise_type=NO_NOISE, snr_db=math.inf, seed=cell_seed)
    return replace(spec, noise_type=noise, snr_db=float(snr), seed=cell_seed)


def evaluate(models, test_manifest, snr_grid=DEFAULT_EVAL_GRID, noise_types=BUILTIN_NOISE_TYPES,
             assets: Assets | None = None, seed: int = 0, B: int = 1000,
             jobs: int = 1) -> EvalReport:
    """Re-render the test scenes per (noise, SNR) cell and score every model.

    ``models`` is a predictor or a mapping ``id -> predictor``; a predictor is
    anything with ``predict_degrees(buffer, geometry)``. Scenes for one cell
    are rendered once and shared by all models. ``clean`` drops additive
    noise but keeps reverberation.
    """
    if not isinstance(models, dict):
        models = {getattr(models, "name", type(models).__name__): models}
    if not models:
        raise ConfigError("no models to evaluate")
    assets = (assets or Assets.builtin()).with_split("test")
    items = load_test_items(test_manifest)
    if not items:
        raise ConfigError("test manifest is empty")
    grid = [parse_snr(s) for s in snr_grid]
    noise_types = list(noise_types)
    conditions = []
    for noise in noise_types:
        seen = set()
        for snr in grid:
            if snr not in seen:
                seen.add(snr)
                conditions.append((noise, snr))
    missing = assets.missing(_condition_spec(it.spec, n, s, seed)
                             for it in items for n, s in conditions)
    if missing:
        raise AssetError(f"test assets not resolvable: {', '.join(missing)}", missing=missing)

    def run_cell(condition):
        noise, snr = condition
        errors = {m: [] for m in models}
        for item in items:
            scene = render(_condition_spec(item.spec, noise, snr, seed), item.source, assets)
            for model_id, predictor in models.items():
                errors[model_id].append(
                    utterance_error(predictor, scene.augmented, scene.doa_label, scene.geometry))
        cells = []
        for model_id, errs in errors.items():
            rng = child_rng("bootstrap", seed, model_id, noise, str(snr))
            mae, se = mae_bootstrap(errs, B, rng)
            cells.append(EvalCell(model_id, noise, snr, mae, se, len(errs)))
        return cells

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_condition = list(pool.map(run_cell, conditions))
    else:
        per_condition = [run_cell(c) for c in conditions]
    order = {m: i for i, m in enumerate(models)}
    cells = sorted((c for group in per_condition for c in group),
                   key=lambda c: (order[c.model], noise_types.index(c.noise), _snr_key(c.snr)))
    provenance = {
        "config_hash": _digest({"snr_grid": [str(s) for s in grid], "noise_types": noise_types,
                                "B": B, "models": list(models)}),
        "seed": seed,
        "manifest_hash": _digest([(it.id, it.spec.to_dict(), it.source.length) for it in items]),
    }
    return EvalReport(cells, provenance)


def run_baseline_suite(test_manifest, configs: dict, **eval_kwargs) -> EvalReport:
    """Evaluate every requested system under one protocol.

    ``configs`` maps a row name to a checkpoint path, a ready predictor, or
    ``None`` for the checkpoint-free GCC-PHAT argmax baseline. Rows whose
    checkpoint is missing are skipped with a notice.
    """
    from sfd.training import DoAPredictor

    models = {}
    for name, spec in configs.items():
        if spec is None or spec == "gccphat-argmax":
            models[name] = GccPhatArgmax()
        elif isinstance(spec, (str, Path)):
            if not Path(spec).is_file():
                log.warning("skipping %s: checkpoint %s not found", name, spec)
                continue
            models[name] = DoAPredictor.from_checkpoint(spec)
        else:
            models[name] = spec
    return evaluate(models, test_manifest, **eval_kwargs)


# --------------------------------------------------------------------------
# Emission
# --------------------------------------------------------------------------

def _snr_label(snr) -> str:
    return CLEAN if snr == CLEAN else f"{float(snr):g}"


def report_csv(report: EvalReport) -> str:
    if not report.cells:
        return ""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "noise", "snr", "mae", "stderr", "n"])
    for c in report.cells:
        writer.writerow([c.model, c.noise, _snr_label(c.snr), f"{c.mae:.6f}",
                         f"{c.stderr:.6f}", c.n])
    return buf.getvalue()


def report_markdown(report: EvalReport) -> str:
    """Models as rows, SNR columns averaged over noise types, then the average."""
    if not report.cells:
        return ""
    snrs = report.snrs()
    averages = report.averages()
    header = ["Model"] + [f"{_snr_label(s)} dB" if s != CLEAN else "Clean" for s in snrs]
    lines = ["| " + " | ".join(header + ["Avg."]) + " |",
             "|" + "---|" * (len(header) + 1)]
    for model in report.models():
        row = [model]
        for snr in snrs:
            group = [c for c in report.cells if c.model == model and c.snr == snr]
            if not group:
                row.append("")
                continue
            mae = math.fsum(c.mae for c in group) / len(group)
            se = math.sqrt(math.fsum(c.stderr**2 for c in group)) / len(group)
            row.append(f"{mae:.2f} ± {se:.2f}")
        row.append(f"{averages[model]:.2f}")
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def report_svg(report: EvalReport, width: int = 640, height: int = 400) -> str:
    """Line plot of noise-averaged MAE against SNR, one polyline per model."""
    if not report.cells:
        raise ValueError("cannot plot an empty report")
    snrs = report.snrs()
    left, right, top, bottom = 60, 150, 20, 50
    pw, ph = width - left - right, height - top - bottom
    series = {}
    for model in report.models():
        pts = []
        for i, snr in enumerate(snrs):
            group = [c.mae for c in report.cells if c.model == model and c.snr == snr]
            if group:
                pts.append((i, math.fsum(group) / len(group)))
        series[model] = pts
    ymax = max(v for pts in series.values() for _, v in pts)
    ymax = max(1.0, math.ceil(ymax / 5.0) * 5.0)

    def x(i):
        return left + (pw * i / (len(snrs) - 1) if len(snrs) > 1 else pw / 2)

    def y(v):
        return top + ph * (1.0 - v / ymax)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           '<rect width="100%" height="100%" fill="white"/>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for i, snr in enumerate(snrs):
        xi = x(i)
        out.append(f'<line class="xtick" x1="{xi:.1f}" y1="{top + ph}" x2="{xi:.1f}" '
                   f'y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{xi:.1f}" y="{top + ph + 18}" font-size="11" '
                   f'text-anchor="middle">{_snr_label(snr)}</text>')
    for k in range(6):
        v = ymax * k / 5
        out.append(f'<text x="{left - 6}" y="{y(v) + 4:.1f}" font-size="11" '
                   f'text-anchor="end">{v:g}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 8}" font-size="12" '
               'text-anchor="middle">SNR (dB)</text>')
    out.append(f'<text x="14" y="{top + ph / 2}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2})">MAE (deg)</text>')
    for k, (model, pts) in enumerate(series.items()):
        color = _PALETTE[k % len(_PALETTE)]
        coords = " ".join(f"{x(i):.1f},{y(v):.1f}" for i, v in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" '
                   f'points="{coords}"><title>{model}</title></polyline>')
        ly = top + 14 + 18 * k
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 34}" y="{ly + 4}" font-size="11">{model}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


_WRITERS = {"csv": (report_csv, "csv"), "markdown": (report_markdown, "md"),
            "md": (report_markdown, "md"), "svg": (report_svg, "svg"),
            "svg_plot": (report_svg, "svg")}


def emit_report(report: EvalReport, formats, out_dir, stem: str = "report") -> list:
    """Write the report in each requested format; returns the written paths."""
    if isinstance(formats, str):
        formats = [f.strip() for f in formats.split(",") if f.strip()]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for fmt in formats:
        if fmt not in _WRITERS:
            raise ConfigError(f"unknown report format {fmt!r}")
        writer, ext = _WRITERS[fmt]
        path = out_dir / f"{stem}.{ext}"
        path.write_text(writer(report), encoding="utf-8")
        paths.append(path)
    return paths
