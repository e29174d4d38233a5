"""Synthetic document scenes and the on-disk dataset format.

A scene is a textured "document" rectangle warped by a random perspective
transform onto one of five procedural backgrounds. The document carries a
border line, text-like strokes and a coloured orientation disc next to its
content top-left corner, which is therefore corner 0 of the label. Labels
are ordered counter-clockwise on screen: top-left, bottom-left,
bottom-right, top-right of the document content.

Dataset directory layout::

    index.json      scene config, sample count, sha256 per image file
    labels.jsonl    one JSON object per sample
    images/NNNNNN.ppm
"""
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from . import geometry
from .model import encode_coords

BACKGROUNDS = ("flat", "gradient", "checker", "noise", "stripes")
DATASET_FORMAT = 1


class DatasetError(ValueError):
    pass


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    image_hw: int = 64
    n_cls: int = 2
    aspect_range: Tuple[float, float] = (0.65, 1.55)
    scale_range: Tuple[float, float] = (0.5, 0.9)
    max_rotation_deg: float = 30.0
    perspective_jitter: float = 0.08
    occlusion_prob: float = 0.2
    occlusion_max_fraction: float = 0.2
    out_of_frame_prob: float = 0.1
    background_families: Tuple[int, ...] = (0, 1, 2, 3, 4)
    negative_prob: float = 0.05
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "aspect_range", tuple(self.aspect_range))
        object.__setattr__(self, "scale_range", tuple(self.scale_range))
        object.__setattr__(self, "background_families", tuple(self.background_families))
        for name in ("occlusion_prob", "out_of_frame_prob", "negative_prob", "occlusion_max_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.n_cls < 2:
            raise ValueError("n_cls must be >= 2")
        if not set(self.background_families) <= set(range(len(BACKGROUNDS))) or not self.background_families:
            raise ValueError(f"background_families must be a non-empty subset of 0..{len(BACKGROUNDS) - 1}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class QuadLabel:
    cls: int
    width: int
    height: int
    corners: Optional[np.ndarray] = None     # 4x2 pixels, screen-ccw from content top-left
    canonical: Optional[np.ndarray] = None   # 4x2 undistorted document rectangle, same order

    def to_json(self):
        d = {"class": int(self.cls), "width": int(self.width), "height": int(self.height)}
        d["corners"] = None if self.corners is None else np.asarray(self.corners, float).tolist()
        d["canonical"] = None if self.canonical is None else np.asarray(self.canonical, float).tolist()
        return d

    @classmethod
    def from_json(cls, d):
        corners = None if d.get("corners") is None else np.array(d["corners"], dtype=np.float64)
        canonical = None if d.get("canonical") is None else np.array(d["canonical"], dtype=np.float64)
        return cls(int(d["class"]), int(d["width"]), int(d["height"]), corners, canonical)


@dataclass
class SceneSample:
    pixels: np.ndarray          # [S,S,3] uint8
    label: QuadLabel
    meta: dict = field(default_factory=dict)

    @property
    def image(self):
        return self.pixels.astype(np.float32) / np.float32(255.0)


# ---------------------------------------------------------------- procedural textures

def _background(rng, family, n):
    """Background of side ``n`` (supersampled pixels) for the given family index."""
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) / n
    c1 = rng.uniform(0.05, 0.85, 3)
    c2 = rng.uniform(0.05, 0.85, 3)
    if family == 0:
        return np.broadcast_to(c1, (n, n, 3)).copy()
    ang = rng.uniform(0, np.pi)
    t = np.cos(ang) * xx + np.sin(ang) * yy
    if family == 1:
        t = (t - t.min()) / max(np.ptp(t), 1e-9)
        return c1 + t[..., None] * (c2 - c1)
    if family == 2:
        period = rng.uniform(0.08, 0.25)
        ox, oy = rng.uniform(0, 1, 2)
        mask = (np.floor(xx / period + ox) + np.floor(yy / period + oy)) % 2
        return np.where(mask[..., None] > 0, c1, c2)
    if family == 3:
        field_ = np.zeros((n, n))
        for _ in range(6):
            fx, fy = rng.uniform(-8, 8, 2)
            field_ += np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
        field_ = (field_ - field_.min()) / max(np.ptp(field_), 1e-9)
        return c1 + field_[..., None] * (c2 - c1)
    freq = rng.uniform(3, 10)
    s = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi)))
    return c1 + s[..., None] * (c2 - c1)


def _document_texture(rng, doc_cls):
    """Closure coloring normalized document coordinates (a, b) in [0,1]^2."""
    paper = rng.uniform(0.82, 1.0) * (1 - rng.uniform(0, 0.08, 3))
    ink = rng.uniform(0.05, 0.3, 3)
    frame = rng.uniform(0.1, 0.5, 3)
    palette = np.array([[0.85, 0.1, 0.1], [0.1, 0.2, 0.85], [0.1, 0.6, 0.15], [0.7, 0.1, 0.7]])
    mark = palette[(doc_cls - 1) % len(palette)]
    n_lines = int(rng.integers(4, 8))
    line_y = np.linspace(0.38, 0.9, n_lines)
    line_len = rng.uniform(0.3, 0.75, n_lines)
    thick = 0.5 * (0.52 / n_lines)

    def shade(a, b, aspect):
        out = np.broadcast_to(paper, a.shape + (3,)).copy()
        edge = np.minimum(np.minimum(a, 1 - a) * aspect, np.minimum(b, 1 - b))
        out[(edge > 0.045) & (edge < 0.085)] = frame
        for y0, ln in zip(line_y, line_len):
            out[(b >= y0) & (b < y0 + thick) & (a >= 0.12) & (a < 0.12 + ln)] = ink
        da = (a - 0.2) * aspect
        db = b - 0.2
        out[da * da + db * db < 0.11 ** 2] = mark
        return out
    return shade


# ---------------------------------------------------------------- geometry sampling

def _sample_quad(rng, cfg, out_of_frame):
    s = float(cfg.image_hw)
    for _ in range(100):
        aspect = rng.uniform(*cfg.aspect_range)
        size = rng.uniform(*cfg.scale_range) * s
        hw, hh = (size / 2, size / (2 * aspect)) if aspect >= 1 else (size * aspect / 2, size / 2)
        base = np.array([[-hw, -hh], [-hw, hh], [hw, hh], [hw, -hh]])
        th = np.radians(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        quad = base @ rot.T + rng.uniform(-1, 1, (4, 2)) * cfg.perspective_jitter * size
        lo, hi = quad.min(axis=0), quad.max(axis=0)
        if out_of_frame:
            center = rng.uniform(-0.1 * s, 1.1 * s, 2)
        else:
            span_lo, span_hi = 0.02 * s - lo, 0.98 * s - hi
            if np.any(span_lo > span_hi):
                continue
            center = rng.uniform(span_lo, span_hi)
        quad = quad + center
        if not _acceptable(quad, s, out_of_frame):
            continue
        canonical = np.array([[0.0, 0.0], [0.0, 1.0], [aspect, 1.0], [aspect, 0.0]])
        return quad, canonical
    raise SceneGenerationError("no acceptable document quad after 100 attempts")


def _acceptable(quad, s, out_of_frame):
    if geometry.signed_area(quad) <= 0.06 * s * s or not geometry.is_convex(quad):
        return False
    if geometry.interior_angles(quad).min() <= 10.0:
        return False
    inside = np.all((quad >= 0) & (quad <= s), axis=1)
    if not out_of_frame:
        return bool(inside.all())
    # partly outside, never beyond the encodable range, mostly visible
    if inside.all() or np.any(quad < -0.18 * s) or np.any(quad > 1.18 * s):
        return False
    frame = np.array([[0, 0], [0, s], [s, s], [s, 0]], dtype=np.float64)
    visible = geometry.convex_intersection_area(quad, frame)
    return visible >= 0.45 * geometry.polygon_area(quad)


# ---------------------------------------------------------------- rendering

_SS = 2  # supersampling factor per axis


def _pixel_grid(n):
    coords = (np.arange(n * _SS) + 0.5) / _SS
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    return xx, yy


def _downsample(img, n):
    return img.reshape(n, _SS, n, _SS, 3).mean(axis=(1, 3))


def generate_scene(cfg, index, occlusion_fraction=None, occluded_corner=None):
    """Deterministic scene number ``index`` of the stream defined by ``cfg``.

    ``occlusion_fraction`` forces an occluder of that size (0 disables it),
    over ``occluded_corner`` if given; the layout, textures and noise are
    unaffected, so sweeping the fraction occludes the very same scene.
    """
    n = cfg.image_hw
    streams = np.random.SeedSequence([int(cfg.seed), int(index)]).spawn(5)
    r_kind, r_geom, r_tex, r_occ, r_noise = (np.random.default_rng(s) for s in streams)

    negative = r_kind.random() < cfg.negative_prob
    out_of_frame = r_kind.random() < cfg.out_of_frame_prob
    doc_cls = int(r_kind.integers(1, cfg.n_cls)) if not negative else 0
    family = int(cfg.background_families[int(r_kind.integers(len(cfg.background_families)))])

    img = _background(r_tex, family, n * _SS)
    xx, yy = _pixel_grid(n)
    meta = {"seed": int(cfg.seed), "index": int(index), "background": family,
            "out_of_frame": False, "occlusion_fraction": 0.0, "occluded_corner": None}

    if negative:
        if r_geom.random() < 0.5:  # plain dark card: not a document
            cx, cy = r_geom.uniform(0.2, 0.8, 2) * n
            rx, ry = r_geom.uniform(0.1, 0.3, 2) * n
            img[(np.abs(xx - cx) < rx) & (np.abs(yy - cy) < ry)] = r_tex.uniform(0.0, 0.5, 3)
        label = QuadLabel(0, n, n)
    else:
        quad, canonical = _sample_quad(r_geom, cfg, out_of_frame)
        meta["out_of_frame"] = bool(out_of_frame)
        h = geometry.estimate_homography(quad, canonical)
        w = h[2, 0] * xx + h[2, 1] * yy + h[2, 2]
        u = (h[0, 0] * xx + h[0, 1] * yy + h[0, 2]) / w
        v = (h[1, 0] * xx + h[1, 1] * yy + h[1, 2]) / w
        aspect = canonical[2, 0]
        inside = (w > 0) & (u >= 0) & (u <= aspect) & (v >= 0) & (v <= 1)
        shade = _document_texture(r_tex, doc_cls)
        img[inside] = shade(u[inside] / aspect, v[inside], aspect)

        occ_draw = r_occ.random()
        frac = r_occ.uniform(0.05, cfg.occlusion_max_fraction) if cfg.occlusion_max_fraction > 0.05 else 0.0
        corner = int(r_occ.integers(4))
        tone = np.array([0.85, 0.62, 0.5]) * r_occ.uniform(0.7, 1.05)
        if occlusion_fraction is not None:
            frac = float(occlusion_fraction)
            corner = corner if occluded_corner is None else int(occluded_corner)
        elif occ_draw >= cfg.occlusion_prob:
            frac = 0.0
        if frac > 0:
            radius = np.sqrt(frac * geometry.polygon_area(quad) / np.pi)
            toward = quad.mean(axis=0) - quad[corner]
            center = quad[corner] + 0.5 * radius * toward / np.linalg.norm(toward)
            img[(xx - center[0]) ** 2 + (yy - center[1]) ** 2 < radius ** 2] = tone
            meta["occlusion_fraction"] = float(frac)
            meta["occluded_corner"] = corner
        label = QuadLabel(doc_cls, n, n, quad, canonical)

    img = _downsample(img, n) * r_noise.uniform(0.8, 1.1)
    img = img + r_noise.normal(0.0, cfg.noise_sigma, img.shape)
    pixels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return SceneSample(pixels, label, meta)


def generate_dataset(cfg, count, start=0):
    return [generate_scene(cfg, i) for i in range(start, start + count)]


def occlusion_sweep(cfg, count, fractions=(0.0, 0.05, 0.1, 0.2), start=0):
    """Positive scenes re-rendered at every occlusion fraction: ``{fraction: [samples]}``."""
    cfg = replace(cfg, negative_prob=0.0)
    out = {float(f): [] for f in fractions}
    for i in range(start, start + count):
        for f in fractions:
            out[float(f)].append(generate_scene(cfg, i, occlusion_fraction=f))
    return out


# ---------------------------------------------------------------- labels

def make_training_label(label, n_points):
    """Encoded ground-truth ring ``[N,2]`` and class for one label (zeros for negatives)."""
    if label.cls == 0 or label.corners is None:
        return np.zeros((n_points, 2)), 0
    corners = np.asarray(label.corners, dtype=np.float64)
    if geometry.signed_area(corners) <= 0 or not geometry.is_convex(corners):
        raise ValueError("label quad is degenerate or not counter-clockwise")
    ring = geometry.equal_division_points(corners, n_points)
    ring = ring / np.array([label.width, label.height], dtype=np.float64)
    return encode_coords(ring), int(label.cls)


def training_arrays(samples, n_points):
    """Stack samples into (uint8 images [K,S,S,3], encoded rings [K,N,2] float32, classes [K])."""
    if not samples:
        return np.zeros((0, 0, 0, 3), np.uint8), np.zeros((0, n_points, 2), np.float32), np.zeros(0, np.int64)
    images = np.stack([s.pixels for s in samples])
    rings, classes = zip(*(make_training_label(s.label, n_points) for s in samples))
    return images, np.stack(rings).astype(np.float32), np.array(classes, dtype=np.int64)


# ---------------------------------------------------------------- PPM

def encode_ppm(pixels):
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w, _ = pixels.shape
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def decode_ppm(blob, name="image"):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{name}: truncated PPM header")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P6":
        raise DatasetError(f"{name}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DatasetError(f"{name}: malformed PPM header") from None
    if maxval != 255:
        raise DatasetError(f"{name}: only 8-bit PPM supported (maxval {maxval})")
    need = w * h * 3
    body = blob[pos:pos + need]
    if len(body) != need:
        raise DatasetError(f"{name}: truncated PPM data ({len(body)} of {need} bytes)")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def read_ppm(path):
    with open(path, "rb") as fh:
        return decode_ppm(fh.read(), os.path.basename(path))


def write_ppm(path, pixels):
    with open(path, "wb") as fh:
        fh.write(encode_ppm(pixels))


# ---------------------------------------------------------------- dataset directory

def write_dataset(samples, directory, config=None, extra=None):
    """Write samples in the directory layout described in the module docstring."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    files = {}
    lines = []
    for k, sample in enumerate(samples):
        rel = f"images/{k:06d}.ppm"
        blob = encode_ppm(sample.pixels)
        with open(os.path.join(directory, rel), "wb") as fh:
            fh.write(blob)
        files[rel] = hashlib.sha256(blob).hexdigest()
        row = {"file": rel}
        row.update(sample.label.to_json())
        row["meta"] = sample.meta
        lines.append(json.dumps(row, sort_keys=True))
    with open(os.path.join(directory, "labels.jsonl"), "w", encoding="utf-8") as fh:
        fh.write("".join(line + "\n" for line in lines))
    index = {"format": DATASET_FORMAT, "count": len(lines), "files": files,
             "config": None if config is None else config.to_dict()}
    if extra:
        index.update(extra)
    with open(os.path.join(directory, "index.json"), "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return index


def read_index(directory):
    path = os.path.join(directory, "index.json")
    try:
        with open(path, encoding="utf-8") as fh:
            index = json.load(fh)
    except FileNotFoundError:
        raise DatasetError(f"{directory}: no index.json") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed index ({exc})") from None
    if not isinstance(index, dict) or "files" not in index or "count" not in index:
        raise DatasetError(f"{path}: malformed index (missing files/count)")
    return index


def read_dataset(directory):
    """Yield SceneSamples, verifying each image against the index checksum."""
    index = read_index(directory)
    path = os.path.join(directory, "labels.jsonl")
    try:
        fh = open(path, encoding="utf-8")
    except FileNotFoundError:
        raise DatasetError(f"{directory}: no labels.jsonl") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                rel = row["file"]
                label = QuadLabel.from_json(row)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"labels.jsonl line {lineno}: malformed ({exc})") from None
            want = index["files"].get(rel)
            if want is None:
                raise DatasetError(f"{rel}: not listed in index.json")
            try:
                with open(os.path.join(directory, rel), "rb") as img_fh:
                    blob = img_fh.read()
            except FileNotFoundError:
                raise DatasetError(f"{rel}: missing image file") from None
            if hashlib.sha256(blob).hexdigest() != want:
                raise DatasetError(f"{rel}: checksum mismatch")
            yield SceneSample(decode_ppm(blob, rel), label, row.get("meta", {}))


def load_dataset(directory):
    return list(read_dataset(directory))
