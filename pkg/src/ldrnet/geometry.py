"""Quadrilateral geometry: equal-division rings, corner distance, homographies, Jaccard index.

Coordinates are image coordinates (x right, y down). "Counter-clockwise"
means counter-clockwise as seen on screen, so a quad listed top-left,
bottom-left, bottom-right, top-right is counter-clockwise and has positive
:func:`signed_area`.
"""
import numpy as np

_EPS = 1e-12


class DegenerateGeometryError(ValueError):
    pass


def _points(a, n=None):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2 or (n is not None and a.shape[0] != n):
        want = f"{n}x2" if n is not None else "Kx2"
        raise ValueError(f"expected a {want} point array, got shape {a.shape}")
    return a


def signed_area(poly):
    """Shoelace area, positive for screen-counter-clockwise vertex order (y down)."""
    p = np.asarray(poly, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    return 0.5 * float(np.sum(xn * y - x * yn))


def polygon_area(poly):
    if len(poly) < 3:
        return 0.0
    return abs(signed_area(poly))


def is_convex(poly, eps=_EPS):
    p = _points(poly)
    d1 = np.roll(p, -1, axis=0) - p
    d2 = np.roll(p, -2, axis=0) - np.roll(p, -1, axis=0)
    cross = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    return bool(np.all(cross >= -eps) or np.all(cross <= eps))


def interior_angles(quad):
    """Interior angles in degrees at each vertex of a simple polygon."""
    p = _points(quad)
    prev = np.roll(p, 1, axis=0) - p
    nxt = np.roll(p, -1, axis=0) - p
    cosang = np.sum(prev * nxt, axis=1) / (np.linalg.norm(prev, axis=1) * np.linalg.norm(nxt, axis=1))
    return np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))


# ---------------------------------------------------------------- point rings

def equal_division_points(quad, n_total):
    """Ring of ``n_total`` points: the 4 corners plus ``(n_total-4)/4`` evenly spaced points per border.

    Border ``k`` runs from corner ``k`` to corner ``k+1`` (mod 4). The ring
    lists corner k, then that border's interior points, then corner k+1, ...
    so corners land at indices ``0, N/4, N/2, 3N/4``.
    """
    q = _points(quad, 4)
    if int(n_total) != n_total or n_total < 8 or n_total % 4:
        raise ValueError(f"n_total must be a multiple of 4 and >= 8, got {n_total}")
    per = n_total // 4
    t = np.arange(per, dtype=np.float64) / per
    start = q
    end = np.roll(q, -1, axis=0)
    ring = start[:, None, :] + t[None, :, None] * (end - start)[:, None, :]
    # corners exactly, not via interpolation at t=0
    ring[:, 0, :] = q
    return ring.reshape(n_total, 2)


def border_indices(n_total):
    """Index array of shape (4, N/4+1): border k's view into the ring, corners included."""
    per = n_total // 4
    return (np.arange(4)[:, None] * per + np.arange(per + 1)[None, :]) % n_total


def border_views(ring):
    ring = np.asarray(ring)
    return ring[..., border_indices(ring.shape[-2]), :]


def corner_indices(n_total):
    return np.arange(4) * (n_total // 4)


def corner_distance(pred, target):
    """Sum over the four corners of the Euclidean distance between matching corners."""
    d = _points(pred, 4) - _points(target, 4)
    return float(np.sum(np.hypot(d[:, 0], d[:, 1])))


# ---------------------------------------------------------------- homography

def _check_no_collinear_triple(pts, what):
    scale = max(float(np.ptp(pts[:, 0])), float(np.ptp(pts[:, 1])), _EPS)
    for skip in range(4):
        a, b, c = np.delete(pts, skip, axis=0)
        cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(cross) <= 1e-9 * scale * scale:
            raise DegenerateGeometryError(f"{what} points contain a collinear or coincident triple")


def _normalizer(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def estimate_homography(src, dst):
    """3x3 homography mapping the four ``src`` points onto ``dst``, scaled so h[2,2] == 1.

    Normalized direct linear transform; raises DegenerateGeometryError for a
    collinear triple or a singular result.
    """
    src = _points(src, 4)
    dst = _points(dst, 4)
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise DegenerateGeometryError("non-finite correspondence")
    _check_no_collinear_triple(src, "source")
    _check_no_collinear_triple(dst, "destination")

    ts, td = _normalizer(src), _normalizer(dst)
    s = src @ ts[:2, :2].T + ts[:2, 2]
    d = dst @ td[:2, :2].T + td[:2, 2]
    a = np.zeros((8, 9))
    for i, ((x, y), (u, v)) in enumerate(zip(s, d)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y, -u]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y, -v]
    h = np.linalg.svd(a)[2][-1].reshape(3, 3)
    h = np.linalg.inv(td) @ h @ ts
    if abs(h[2, 2]) > _EPS:
        h = h / h[2, 2]
    else:
        h = h / np.abs(h).max()
    if abs(np.linalg.det(h)) <= _EPS:
        raise DegenerateGeometryError("estimated homography is singular")
    return h


def apply_homography(h, pts):
    """Project point(s) of shape (2,) or (K, 2) through ``h`` with perspective division."""
    h = np.asarray(h, dtype=np.float64)
    p = np.asarray(pts, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    w = h[2, 0] * p[:, 0] + h[2, 1] * p[:, 1] + h[2, 2]
    if np.any(np.abs(w) <= _EPS):
        raise DegenerateGeometryError("point maps to infinity")
    x = (h[0, 0] * p[:, 0] + h[0, 1] * p[:, 1] + h[0, 2]) / w
    y = (h[1, 0] * p[:, 0] + h[1, 1] * p[:, 1] + h[1, 2]) / w
    out = np.stack([x, y], axis=1)
    return out[0] if single else out


def homography_w(h, pts):
    """Homogeneous w-component of each projected point (sign tells which side of the horizon)."""
    p = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    return h[2, 0] * p[:, 0] + h[2, 1] * p[:, 1] + h[2, 2]


# ---------------------------------------------------------------- polygon clipping

def clip_polygon(subject, clip, eps=_EPS):
    """Sutherland-Hodgman: part of ``subject`` inside the convex polygon ``clip``.

    Either orientation is accepted for both polygons. Boundary points count
    as inside (tolerance ``eps``).
    """
    clip = _points(clip)
    if signed_area(clip) < 0:  # keep the clip polygon screen-ccw
        clip = clip[::-1]
    out = [tuple(p) for p in _points(subject)]
    n = len(clip)
    for k in range(n):
        if not out:
            break
        ax, ay = clip[k]
        bx, by = clip[(k + 1) % n]
        ex, ey = bx - ax, by - ay

        # screen-ccw polygon keeps its interior where this cross product is <= 0
        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        s = inp[-1]
        fs = side(s)
        for e in inp:
            fe = side(e)
            if fe <= eps:
                if fs > eps:
                    out.append(_cut(s, e, fs, fe))
                out.append(e)
            elif fs <= eps:
                out.append(_cut(s, e, fs, fe))
            s, fs = e, fe
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _cut(s, e, fs, fe):
    t = fs / (fs - fe)
    return (s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1]))


def convex_intersection_area(a, b):
    """Area of the intersection of two convex polygons; 0 when disjoint or degenerate."""
    a, b = _points(a), _points(b)
    if polygon_area(a) <= _EPS or polygon_area(b) <= _EPS:
        return 0.0
    return polygon_area(clip_polygon(a, b))


# ---------------------------------------------------------------- Jaccard index

def jaccard_index(pred, gt, gt_canonical):
    """Jaccard index of ``pred`` vs ``gt`` after rectifying ``gt`` onto ``gt_canonical``.

    Both quads are mapped through the homography taking ``gt`` to its
    canonical rectangle; the ratio of intersection to union area is then
    taken in that frame. A prediction that cannot be mapped (degenerate
    ground truth, or a predicted corner at or beyond the rectified
    horizon) scores 0.
    """
    try:
        return rectified_jaccard(pred, gt, gt_canonical)
    except DegenerateGeometryError:
        return 0.0


def rectified_jaccard(pred, gt, gt_canonical):
    """As :func:`jaccard_index` but raises DegenerateGeometryError instead of scoring 0."""
    pred = _points(pred, 4)
    gt = _points(gt, 4)
    if not np.all(np.isfinite(pred)):
        raise DegenerateGeometryError("non-finite prediction")
    h = estimate_homography(gt, gt_canonical)
    w_gt = homography_w(h, gt)
    w_pred = homography_w(h, pred)
    # every predicted vertex must lie on the document's side of the horizon
    if np.any(w_pred * np.sign(w_gt[0]) <= _EPS):
        raise DegenerateGeometryError("prediction crosses the rectified horizon")
    g = apply_homography(h, gt)
    s = apply_homography(h, pred)
    area_g = polygon_area(g)
    if area_g <= _EPS:
        raise DegenerateGeometryError("rectified ground truth has no area")
    area_s = polygon_area(s)
    inter = polygon_area(clip_polygon(s, g))
    union = area_g + area_s - inter
    return float(min(1.0, max(0.0, inter / union)))
