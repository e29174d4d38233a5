"""Command-line entry point: ``ldrnet <command> [flags]``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""
import os

# Cap BLAS/OpenMP pools before numpy loads; one thread keeps runs bit-reproducible.
_THREADS = os.environ.get("LDR_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import csv  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import math  # noqa: E402
import sys  # noqa: E402
from dataclasses import replace  # noqa: E402
from xml.sax.saxutils import escape  # noqa: E402

import numpy as np  # noqa: E402

from . import data as D  # noqa: E402
from . import evaluate as V  # noqa: E402
from . import model as M  # noqa: E402
from . import train as T  # noqa: E402
from .geometry import DegenerateGeometryError  # noqa: E402

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


def _probability(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"probability must be in [0, 1], got {v}")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _flags(args):
    return {k: v for k, v in vars(args).items() if k != "func"}


def _write_json(path, obj):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _write_rows(path, rows):
    if not rows:
        open(path, "w").close()
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _ensure_empty(directory, force):
    if os.path.isdir(directory) and os.listdir(directory) and not force:
        raise UsageError(f"{directory} exists and is not empty (use --force)")


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    _ensure_empty(args.out, args.force)
    cfg = D.SceneConfig(image_hw=args.size, seed=args.seed, occlusion_prob=args.occlusion,
                        negative_prob=args.negatives, out_of_frame_prob=args.out_of_frame)
    samples = D.generate_dataset(cfg, args.count)
    index = D.write_dataset(samples, args.out, cfg, extra={"command": "gen-data", "flags": _flags(args)})
    print(f"wrote {index['count']} samples to {args.out}")


def _train_config(args):
    profile = T.PROFILES[args.profile]()
    model = profile.model
    if args.alpha is not None:
        model = replace(model, alpha=args.alpha)
    if args.n_points is not None:
        model = replace(model, n_points=args.n_points)
    if args.no_fusion:
        model = replace(model, fusion_enabled=False)
    cfg = replace(profile, model=model, seed=args.seed)
    if args.epochs is not None:
        cfg = T.with_epochs(cfg, args.epochs)
    if args.batch_size is not None:
        cfg = replace(cfg, batch_size=args.batch_size)
    if args.no_line_loss:
        cfg = replace(cfg, weights=cfg.weights.without_line_loss())
    if args.eval_every is not None:
        cfg = replace(cfg, eval_every=args.eval_every)
    return cfg


def _train_paths(out):
    """``--out`` is a run directory, or a ``.ckpt`` path whose directory receives the other files."""
    if out.endswith(".ckpt"):
        return os.path.dirname(out) or ".", out
    return out, os.path.join(out, "model.ckpt")


def cmd_train(args):
    if not os.path.isdir(args.data):
        raise D.DatasetError(f"{args.data}: dataset directory not found")
    out_dir, ckpt_path = _train_paths(args.out)
    cfg = replace(_train_config(args), data=args.data, val_data=args.val_data)
    ckpt, rows = T.train(cfg, out_dir=out_dir, resume=args.resume,
                         progress=lambda r: print(f"epoch {r['epoch']} loss {r['loss_total']:.5f} "
                                                  f"val_ji {r['val_ji']}", flush=True) if args.verbose else None)
    # output locations stay out of the checkpoint so its bytes depend on inputs only
    flags = {k: v for k, v in _flags(args).items() if k not in ("out", "resume")}
    ckpt.meta.update({"command": "train", "flags": flags})
    M.save_checkpoint(ckpt, ckpt_path)
    _write_json(os.path.join(out_dir, "run.json"),
                {"command": "train", "flags": _flags(args), "train_config": cfg.to_dict(),
                 "final": rows[-1] if rows else None})
    print(f"trained {len(rows)} epochs -> {ckpt_path}")


def cmd_eval(args):
    samples = D.load_dataset(args.data)
    if args.oracle:
        ckpt, predictor = None, V.oracle_predictor
    else:
        if args.ckpt is None:
            raise UsageError("eval needs --ckpt unless --oracle is given")
        ckpt, predictor = M.load_checkpoint(args.ckpt), None
    report = V.evaluate(ckpt, samples, predictor)
    out = report.to_dict()
    per_sample = out.pop("per_sample")
    out.update({"command": "eval", "flags": _flags(args)})
    if args.out:
        _write_json(args.out, out)
        _write_rows(os.path.splitext(args.out)[0] + ".csv", per_sample)
    print(f"overall JI {report.overall:.4f} over {report.frames} frames "
          f"({report.failures} failures, {report.negatives} negatives)")


def cmd_infer(args):
    ckpt = M.load_checkpoint(args.ckpt)
    pixels = D.read_ppm(args.image)
    s = ckpt.config.input_hw
    if pixels.shape[:2] != (s, s):
        raise D.DatasetError(f"{args.image}: image is {pixels.shape[1]}x{pixels.shape[0]}, model expects {s}x{s}")
    quad, cls = M.predict_quad(ckpt, pixels.astype(np.float32) / 255.0, pixels.shape[1], pixels.shape[0])
    if args.json:
        print(json.dumps({"corners": quad.tolist(), "class": cls, "flags": _flags(args)}))
    else:
        for x, y in quad:
            print(f"{x:.2f} {y:.2f}")
        print(f"class {cls}")


def cmd_bench(args):
    ckpt = M.load_checkpoint(args.ckpt)
    if args.paired:
        pruned, full = V.benchmark_paired(ckpt, args.frames, args.warmup, args.seed)
        out = {"pruned": pruned.to_dict(), "full": full.to_dict()}
        rep = pruned
    else:
        rep = V.benchmark_inference(ckpt, args.frames, args.warmup, args.seed, prune=not args.no_prune)
        out = rep.to_dict()
    out.update({"command": "bench", "flags": _flags(args)})
    if args.out:
        _write_json(args.out, out)
    flag = "within" if rep.within_budget else "over"
    print(f"mean {rep.mean_ms:.2f} ms ({rep.fps:.1f} fps), {flag} the {V.FRAME_BUDGET_MS:.1f} ms frame budget")


def _parse_value(axis, text):
    if axis == "alpha":
        return float(text)
    if text.lower() in ("1", "true", "on", "yes"):
        return True
    if text.lower() in ("0", "false", "off", "no"):
        return False
    raise UsageError(f"axis {axis} takes on/off values, got {text!r}")


def cmd_ablate(args):
    values = [_parse_value(args.axis, v) for v in args.values.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    base = _train_config(args)
    train_samples = D.load_dataset(args.data)
    test_samples = D.load_dataset(args.test_data)
    rows, summary = V.run_ablation(base, args.axis, values, seeds, train_samples, test_samples,
                                   progress=lambda r: print(r, flush=True) if args.verbose else None)
    _write_json(args.out, {"command": "ablate", "flags": _flags(args), "rows": rows, "summary": summary})
    _write_rows(os.path.splitext(args.out)[0] + ".csv", rows)
    for s in summary:
        print(f"{args.axis}={s['value']}: median JI {s['median']:.4f} (spread {s['spread']:.4f}, n={s['n']})")


# ---------------------------------------------------------------- plotting

_W, _H, _PAD = 480, 360, 56


def _axes(title, xlabel, ylabel, xr, yr, xticks, yticks, xfmt, yfmt):
    x0, x1 = xr
    y0, y1 = yr
    sx = lambda x: _PAD + (x - x0) / (x1 - x0) * (_W - 2 * _PAD)
    sy = lambda y: _H - _PAD - (y - y0) / (y1 - y0) * (_H - 2 * _PAD)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}" '
             f'font-family="sans-serif" font-size="11">',
             f'<rect width="{_W}" height="{_H}" fill="white"/>',
             f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
             f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>',
             f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_H - _PAD}" stroke="black"/>',
             f'<text x="{_W / 2}" y="{_H - 14}" text-anchor="middle">{escape(xlabel)}</text>',
             f'<text x="16" y="{_H / 2}" text-anchor="middle" transform="rotate(-90 16 {_H / 2})">'
             f'{escape(ylabel)}</text>']
    for t in xticks:
        parts.append(f'<line x1="{sx(t):.1f}" y1="{_H - _PAD}" x2="{sx(t):.1f}" y2="{_H - _PAD + 4}" stroke="black"/>'
                     f'<text x="{sx(t):.1f}" y="{_H - _PAD + 16}" text-anchor="middle">{xfmt(t)}</text>')
    for t in yticks:
        parts.append(f'<line x1="{_PAD - 4}" y1="{sy(t):.1f}" x2="{_PAD}" y2="{sy(t):.1f}" stroke="black"/>'
                     f'<text x="{_PAD - 6}" y="{sy(t) + 4:.1f}" text-anchor="end">{yfmt(t)}</text>')
    return parts, sx, sy


def _range(vals, pad=0.05):
    lo, hi = min(vals), max(vals)
    span = hi - lo or max(abs(hi), 1.0) * 0.1
    return lo - pad * span, hi + pad * span


def latency_scatter_svg(points):
    """``points``: dicts with label, ji, latency_ms. x axis is log10 latency."""
    xs = [math.log10(p["latency_ms"]) for p in points]
    ys = [p["ji"] for p in points]
    xr, yr = _range(xs + [math.log10(V.FRAME_BUDGET_MS)]), _range(ys)
    xticks = np.linspace(*xr, 5)[1:-1]
    yticks = np.linspace(*yr, 5)[1:-1]
    parts, sx, sy = _axes("JI vs latency", "latency (ms, log scale)", "Jaccard index", xr, yr, xticks, yticks,
                          lambda t: f"{10 ** t:.3g}", lambda t: f"{t:.3f}")
    bx = sx(math.log10(V.FRAME_BUDGET_MS))
    parts.append(f'<line x1="{bx:.1f}" y1="{_PAD}" x2="{bx:.1f}" y2="{_H - _PAD}" stroke="gray" '
                 f'stroke-dasharray="4 3"/>')
    for p, x, y in zip(points, xs, ys):
        parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="4" fill="steelblue"/>'
                     f'<text x="{sx(x) + 6:.1f}" y="{sy(y) - 6:.1f}">{escape(str(p["label"]))}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def alpha_line_svg(series):
    """``series``: {name: [(alpha, ji), ...]} drawn as one polyline each."""
    colors = ["steelblue", "darkorange", "seagreen", "crimson"]
    allx = [a for pts in series.values() for a, _ in pts]
    ally = [j for pts in series.values() for _, j in pts]
    xr, yr = _range(allx), _range(ally)
    parts, sx, sy = _axes("JI vs width multiplier", "alpha", "Jaccard index", xr, yr,
                          sorted(set(allx)), np.linspace(*yr, 5)[1:-1], lambda t: f"{t:g}", lambda t: f"{t:.3f}")
    for k, (name, pts) in enumerate(sorted(series.items())):
        pts = sorted(pts)
        color = colors[k % len(colors)]
        coords = " ".join(f"{sx(a):.1f},{sy(j):.1f}" for a, j in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.extend(f'<circle cx="{sx(a):.1f}" cy="{sy(j):.1f}" r="3" fill="{color}"/>' for a, j in pts)
        parts.append(f'<text x="{_W - _PAD + 4}" y="{_PAD + 14 * k}" fill="{color}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def _load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise D.DatasetError(f"{path}: not found") from None
    except json.JSONDecodeError as exc:
        raise D.DatasetError(f"{path}: malformed JSON ({exc})") from None


def cmd_plot(args):
    if not args.eval and not args.ablation:
        raise UsageError("plot needs --eval/--bench pairs and/or --ablation reports")
    if len(args.eval or []) != len(args.bench or []):
        raise UsageError("--eval and --bench must be given the same number of times")
    os.makedirs(args.out, exist_ok=True)
    written = []
    if args.eval:
        points = []
        for ev, be in zip(args.eval, args.bench):
            e, b = _load_json(ev), _load_json(be)
            lat = b["pruned"] if "pruned" in b else b
            label = os.path.basename(os.path.dirname(os.path.abspath(ev))) or ev
            points.append({"label": label, "ji": e["overall"], "latency_ms": lat["mean_ms"]})
        path = os.path.join(args.out, "ji_vs_latency.svg")
        with open(path, "w") as fh:
            fh.write(latency_scatter_svg(points))
        written.append(path)
    if args.ablation:
        series = {}
        for ab in args.ablation:
            rep = _load_json(ab)
            if rep.get("flags", {}).get("axis") != "alpha":
                raise UsageError(f"{ab}: not an alpha ablation")
            name = "fusion off" if rep["flags"].get("no_fusion") else "fusion on"
            series.setdefault(name, []).extend((s["value"], s["median"]) for s in rep["summary"])
        path = os.path.join(args.out, "ji_vs_alpha.svg")
        with open(path, "w") as fh:
            fh.write(alpha_line_svg(series))
        written.append(path)
    for p in written:
        print(p)


# ---------------------------------------------------------------- parser

def _add_model_flags(p):
    p.add_argument("--profile", choices=sorted(T.PROFILES), default="desk")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float)
    p.add_argument("--n-points", type=int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--no-fusion", action="store_true")
    p.add_argument("--no-line-loss", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="ldrnet", description="Document localization pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--occlusion", type=_probability, default=0.2)
    p.add_argument("--negatives", type=_probability, default=0.05)
    p.add_argument("--out-of-frame", type=_probability, default=0.1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data")
    p.add_argument("--out", required=True, help="run directory, or a .ckpt path for the final model")
    p.add_argument("--resume", help="state.ckpt of an interrupted run")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Jaccard index per background")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--oracle", action="store_true", help="score the ground truth itself")
    p.add_argument("--out", help="JSON report path; per-sample rows go to the matching .csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict the corners of one PPM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="per-frame inference latency")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-prune", action="store_true")
    p.add_argument("--paired", action="store_true", help="interleave pruned and full models")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="train variants over seeds and compare test JI")
    p.add_argument("--axis", choices=V.AXES, required=True)
    p.add_argument("--values", required=True, help="comma separated, e.g. on,off or 0.25,0.5,1")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="SVG figures from eval/bench/ablation reports")
    p.add_argument("--eval", action="append", help="eval report (pair with --bench)")
    p.add_argument("--bench", action="append", help="bench report (pair with --eval)")
    p.add_argument("--ablation", action="append", help="alpha ablation report")
    p.add_argument("--out", required=True, help="run directory, or a .ckpt path for the final model")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"ldrnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DatasetError, M.CheckpointError, DegenerateGeometryError, FileNotFoundError,
            D.SceneGenerationError) as exc:
        print(f"ldrnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (T.TrainingDivergedError, FloatingPointError) as exc:
        print(f"ldrnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"ldrnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
