"""Accuracy, latency, ablation and occlusion-robustness harnesses."""
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List

import numpy as np

from . import geometry
from . import model as M
from .data import BACKGROUNDS

FRAME_BUDGET_MS = 1000.0 / 30.0  # 30 FPS video


@dataclass
class EvalReport:
    per_background: Dict[str, float]
    per_background_count: Dict[str, int]
    overall: float
    frames: int
    failures: int
    negatives: int
    per_sample: List[dict] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


@dataclass
class LatencyReport:
    samples_ms: List[float]
    mean_ms: float
    p50_ms: float
    p95_ms: float
    fps: float
    parameter_count: int
    within_budget: bool
    budget_ms: float = FRAME_BUDGET_MS
    machine: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- prediction

def predict_corners(ckpt, images, batch_size=64):
    """Decoded corner quads in pixels ``[B,4,2]`` for float images ``[B,S,S,3]``."""
    s = ckpt.config.input_hw
    out = []
    for start in range(0, len(images), batch_size):
        res = M.forward(ckpt, images[start:start + batch_size])
        out.append(M.decode_coords(res.corners.reshape(-1, 4, 2)) * s)
    return np.concatenate(out) if out else np.zeros((0, 4, 2))


def model_predictor(ckpt):
    def predict(samples):
        images = np.stack([smp.image for smp in samples])
        quads = predict_corners(ckpt, images)
        scale = np.array([[smp.label.width, smp.label.height] for smp in samples], float) / ckpt.config.input_hw
        return quads * scale[:, None, :]
    return predict


def oracle_predictor(samples):
    return np.stack([np.asarray(s.label.corners, float) for s in samples])


def center_square_predictor(side=0.5):
    """Baseline that ignores the image: a centred square covering ``side`` of each frame dimension."""
    unit = (np.array([[-1, -1], [-1, 1], [1, 1], [1, -1]], float) * side + 1) / 2

    def predict(samples):
        return np.stack([unit * [s.label.width, s.label.height] for s in samples])
    return predict


# ---------------------------------------------------------------- accuracy

def evaluate(ckpt, samples, predictor=None):
    """Rectified Jaccard index of every positive frame, aggregated per background family."""
    predictor = predictor or model_predictor(ckpt)
    positives = [s for s in samples if s.label.cls > 0 and s.label.corners is not None]
    preds = predictor(positives) if positives else np.zeros((0, 4, 2))
    rows, failures = [], 0
    for smp, quad in zip(positives, preds):
        try:
            ji = geometry.rectified_jaccard(quad, smp.label.corners, smp.label.canonical)
            ok = True
        except geometry.DegenerateGeometryError:
            ji, ok = 0.0, False
            failures += 1
        bg = BACKGROUNDS[int(smp.meta.get("background", 0))]
        rows.append({"index": smp.meta.get("index"), "background": bg, "ji": ji, "ok": ok,
                     "corner_distance": geometry.corner_distance(quad, smp.label.corners)})
    per_bg, counts = {}, {}
    for name in BACKGROUNDS:
        vals = [r["ji"] for r in rows if r["background"] == name]
        if vals:
            per_bg[name] = float(np.mean(vals))
            counts[name] = len(vals)
    overall = float(np.mean([r["ji"] for r in rows])) if rows else 0.0
    return EvalReport(per_bg, counts, overall, len(rows), failures, len(samples) - len(positives), rows)


# ---------------------------------------------------------------- latency

def machine_descriptor():
    return {"platform": platform.platform(), "processor": platform.processor() or platform.machine(),
            "python": platform.python_version(), "cpus": os.cpu_count()}


def _stats(samples_ms, params):
    arr = np.asarray(samples_ms, dtype=np.float64)
    mean = float(arr.mean())
    return LatencyReport(list(map(float, arr)), mean, float(np.percentile(arr, 50)),
                         float(np.percentile(arr, 95)), 1000.0 / mean, params, mean < FRAME_BUDGET_MS,
                         machine=machine_descriptor())


def benchmark_inference(ckpt, n_frames=100, warmup=5, seed=0, prune=True):
    """Per-frame wall time of :func:`model.predict_quad` on in-memory synthetic frames."""
    if n_frames < 30 or warmup < 5:
        raise ValueError("need n_frames >= 30 and warmup >= 5")
    ck = M.prune_for_inference(ckpt) if prune else ckpt
    s = ck.config.input_hw
    frames = np.random.default_rng(seed).random((n_frames + warmup, s, s, 3)).astype(np.float32)
    for f in frames[:warmup]:
        M.predict_quad(ck, f)
    times = []
    for f in frames[warmup:]:
        t0 = time.perf_counter()
        M.predict_quad(ck, f)
        times.append((time.perf_counter() - t0) * 1e3)
    return _stats(times, ck.parameter_count())


def benchmark_paired(ckpt, n_frames=100, warmup=5, seed=0):
    """Pruned and unpruned latency measured interleaved frame by frame: ``(pruned, full)``."""
    if n_frames < 30 or warmup < 5:
        raise ValueError("need n_frames >= 30 and warmup >= 5")
    full = ckpt if not ckpt.config.pruned else None
    if full is None:
        raise ValueError("paired benchmark needs an unpruned checkpoint")
    pruned = M.prune_for_inference(full)
    s = full.config.input_hw
    frames = np.random.default_rng(seed).random((n_frames + warmup, s, s, 3)).astype(np.float32)
    for f in frames[:warmup]:
        M.predict_quad(pruned, f)
        M.predict_quad(full, f)
    tp, tf = [], []
    for k, f in enumerate(frames[warmup:]):
        pair = ((pruned, tp), (full, tf)) if k % 2 == 0 else ((full, tf), (pruned, tp))
        for ck, sink in pair:
            t0 = time.perf_counter()
            M.predict_quad(ck, f)
            sink.append((time.perf_counter() - t0) * 1e3)
    return _stats(tp, pruned.parameter_count()), _stats(tf, full.parameter_count())


# ---------------------------------------------------------------- ablations

AXES = ("fusion", "line_loss", "alpha")


def _variant(tcfg, axis, value):
    if axis == "fusion":
        return replace(tcfg, model=replace(tcfg.model, fusion_enabled=bool(value)))
    if axis == "line_loss":
        w = tcfg.weights if value else tcfg.weights.without_line_loss()
        return replace(tcfg, weights=w)
    if axis == "alpha":
        return replace(tcfg, model=replace(tcfg.model, alpha=float(value)))
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")


def run_ablation(base_cfg, axis, values, seeds, train_samples, test_samples, progress=None):
    """Train every (value, seed) variant on the same data and report test JI.

    Returns ``(rows, summary)``: one row per run, and per value the median,
    mean and spread (max - min) of JI over seeds.
    """
    from .train import train

    if not seeds:
        raise ValueError("at least one seed is required")
    rows = []
    for value in values:
        for seed in seeds:
            cfg = replace(_variant(base_cfg, axis, value), seed=int(seed))
            t0 = time.perf_counter()
            ckpt, _ = train(cfg, train_samples)
            ji = evaluate(ckpt, test_samples).overall
            row = {"axis": axis, "value": value, "seed": int(seed), "ji": ji,
                   "seconds": time.perf_counter() - t0}
            rows.append(row)
            if progress is not None:
                progress(row)
    summary = []
    for value in values:
        js = [r["ji"] for r in rows if r["value"] == value]
        summary.append({"axis": axis, "value": value, "median": statistics.median(js),
                        "mean": float(np.mean(js)), "spread": float(np.ptp(js)), "n": len(js)})
    return rows, summary


# ---------------------------------------------------------------- occlusion

def occlusion_suite(ckpt, sweep, predictor=None):
    """JI and corner distance per occlusion fraction. ``sweep`` maps fraction -> samples."""
    curve = []
    for frac in sorted(sweep):
        report = evaluate(ckpt, sweep[frac], predictor)
        dist = float(np.mean([r["corner_distance"] for r in report.per_sample])) if report.per_sample else 0.0
        curve.append({"fraction": float(frac), "ji": report.overall, "corner_distance": dist,
                      "frames": report.frames})
    return curve


def out_of_frame_decoding(ckpt, samples, margin=0.0):
    """For every true corner coordinate outside the frame, whether the prediction is outside too.

    Returns ``(hits, total)`` counted per coordinate (x or y) that lies
    outside ``[0, 1]`` by more than ``margin`` in normalized units.
    """
    pos = [s for s in samples if s.label.cls > 0]
    if not pos:
        return 0, 0
    pred = predict_corners(ckpt, np.stack([s.image for s in pos])) / ckpt.config.input_hw
    hits = total = 0
    for smp, p in zip(pos, pred):
        true = np.asarray(smp.label.corners) / np.array([smp.label.width, smp.label.height])
        below = true < -margin
        above = true > 1 + margin
        total += int(below.sum() + above.sum())
        hits += int((p[below] < 0).sum() + (p[above] > 1).sum())
    return hits, total
