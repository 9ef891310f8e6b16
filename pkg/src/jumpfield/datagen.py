"""Ground-truth generation: random diffusion-curve scenes rendered by the
walk-on-spheres method, plus analytic flat-fill / linear-gradient targets.

A scene is a set of primitives (segments, axis-aligned rectangles, circles)
with two-sided boundary colors; the image is the harmonic extension of
those colors away from the curves. WoS estimates it by jumping to a uniform
point on the largest curve-free circle until a walk lands within an
absorption shell of a curve, then takes the color of the side it is on.
Walks leaving the canvas are mirrored back (reflecting canvas boundary).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .geometry import TWO_PI
from .train import derive_rng

EPS_SHELL = 1e-3
MAX_STEPS = 10_000


@dataclass
class Segment:
    p0: tuple
    p1: tuple
    color_left: tuple  # CCW side of p0->p1 (left normal side)
    color_right: tuple

    def outline_points(self, n):
        t = np.linspace(0, 1, n)
        p0 = np.asarray(self.p0)
        p1 = np.asarray(self.p1)
        return p0[None] * (1 - t[:, None]) + p1[None] * t[:, None]

    def arclength(self):
        return float(np.hypot(self.p1[0] - self.p0[0], self.p1[1] - self.p0[1]))


@dataclass
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float
    color_out: tuple
    color_in: tuple

    def outline_points(self, n):
        per = self.arclength()
        xs = [self.x0, self.x1, self.x1, self.x0]
        ys = [self.y0, self.y0, self.y1, self.y1]
        sides = []
        for i in range(4):
            a = np.array([xs[i], ys[i]])
            b = np.array([xs[(i + 1) % 4], ys[(i + 1) % 4]])
            L = np.hypot(*(b - a))
            m = max(2, int(round(n * L / per)))
            t = np.linspace(0, 1, m, endpoint=False)
            sides.append(a[None] * (1 - t[:, None]) + b[None] * t[:, None])
        return np.vstack(sides)

    def arclength(self):
        return 2.0 * ((self.x1 - self.x0) + (self.y1 - self.y0))


@dataclass
class Circle:
    cx: float
    cy: float
    radius: float
    color_out: tuple
    color_in: tuple

    def outline_points(self, n):
        t = np.linspace(0, 2 * np.pi, n, endpoint=False)
        return np.stack(
            [self.cx + self.radius * np.cos(t), self.cy + self.radius * np.sin(t)], axis=1
        )

    def arclength(self):
        return float(2 * np.pi * self.radius)


@dataclass
class CurveScene:
    primitives: list
    channels: int = 3
    canvas_px: int = 128
    antialias: bool = True
    seed: int = 0

    def outline_samples(self, n_total):
        """Points uniformly (by arc length) over all primitive outlines."""
        lens = np.array([p.arclength() for p in self.primitives])
        total = lens.sum()
        pts = []
        for p, L in zip(self.primitives, lens):
            m = max(4, int(round(n_total * L / total)))
            pts.append(p.outline_points(m))
        return np.vstack(pts)


# ----------------------------------------------------------------------
# distances, sides, absorption colors
# ----------------------------------------------------------------------


def _seg_geometry(prim: Segment, pts):
    p0 = np.asarray(prim.p0, dtype=np.float64)
    p1 = np.asarray(prim.p1, dtype=np.float64)
    d = p1 - p0
    L2 = max(float(d @ d), 1e-300)
    t = np.clip(((pts - p0) @ d) / L2, 0.0, 1.0)
    closest = p0 + t[:, None] * d
    diff = pts - closest
    dist = np.hypot(diff[:, 0], diff[:, 1])
    # left side of p0->p1: positive cross(d, x - p0)
    side = d[0] * (pts[:, 1] - p0[1]) - d[1] * (pts[:, 0] - p0[0])
    return dist, side >= 0


def _rect_geometry(prim: Rect, pts):
    cx = np.clip(pts[:, 0], prim.x0, prim.x1)
    cy = np.clip(pts[:, 1], prim.y0, prim.y1)
    inside = (
        (pts[:, 0] > prim.x0) & (pts[:, 0] < prim.x1)
        & (pts[:, 1] > prim.y0) & (pts[:, 1] < prim.y1)
    )
    dx_out = pts[:, 0] - cx
    dy_out = pts[:, 1] - cy
    dist_out = np.hypot(dx_out, dy_out)
    # inside: distance to the nearest of the four sides
    dist_in = np.minimum.reduce(
        [pts[:, 0] - prim.x0, prim.x1 - pts[:, 0], pts[:, 1] - prim.y0, prim.y1 - pts[:, 1]]
    )
    dist = np.where(inside, dist_in, dist_out)
    return np.abs(dist), inside


def _circle_geometry(prim: Circle, pts):
    dx = pts[:, 0] - prim.cx
    dy = pts[:, 1] - prim.cy
    r = np.hypot(dx, dy)
    return np.abs(r - prim.radius), r < prim.radius


_GEOMS = {Segment: _seg_geometry, Rect: _rect_geometry, Circle: _circle_geometry}


def scene_distance(scene: CurveScene, pts):
    """(dist, nearest primitive index) over all primitives, vectorized."""
    pts = np.atleast_2d(pts)
    n = len(pts)
    dmin = np.full(n, np.inf)
    imin = np.zeros(n, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        d, _ = _GEOMS[type(prim)](prim, pts)
        better = d < dmin
        dmin[better] = d[better]
        imin[better] = i
    return dmin, imin


def absorption_colors(scene: CurveScene, pts, prim_idx):
    """Side-resolved boundary colors for absorbed walkers."""
    pts = np.atleast_2d(pts)
    out = np.zeros((len(pts), scene.channels))
    for i, prim in enumerate(scene.primitives):
        sel = prim_idx == i
        if not np.any(sel):
            continue
        _, first_side = _GEOMS[type(prim)](prim, pts[sel])
        if isinstance(prim, Segment):
            ca = np.asarray(prim.color_left, dtype=np.float64)
            cb = np.asarray(prim.color_right, dtype=np.float64)
        else:  # first_side means "inside" for rects and circles
            ca = np.asarray(prim.color_in, dtype=np.float64)
            cb = np.asarray(prim.color_out, dtype=np.float64)
        out[sel] = np.where(first_side[:, None], ca[None], cb[None])
    return out


def _reflect01(x):
    """Mirror coordinates into [0,1] (reflecting canvas boundary)."""
    t = np.mod(x, 2.0)
    return np.where(t > 1.0, 2.0 - t, t)


def wos_walk_batch(scene: CurveScene, starts, rng, eps_shell=EPS_SHELL,
                   max_steps=MAX_STEPS, diagnostics=None):
    """One walk-on-spheres estimate per start point (vectorized).

    Walks exceeding ``max_steps`` restart from their origin (counted in
    ``diagnostics['resampled']`` when a dict is passed). Surviving walkers
    are compacted so late iterations stay cheap.
    """
    if not scene.primitives:
        raise ValueError("scene has no primitives")
    n = len(starts)
    out = np.zeros((n, scene.channels))
    origin = np.asarray(starts, dtype=np.float64)
    pos = origin.copy()
    ids = np.arange(n)
    steps = np.zeros(n, dtype=np.int32)
    resampled = 0
    while len(ids):
        d, pi = scene_distance(scene, pos)
        hit = d < eps_shell
        if np.any(hit):
            out[ids[hit]] = absorption_colors(scene, pos[hit], pi[hit])
            keep = ~hit
            ids = ids[keep]
            pos = pos[keep]
            steps = steps[keep]
            d = d[keep]
            if len(ids) == 0:
                break
        phi = rng.random(len(ids)) * TWO_PI
        pos[:, 0] += d * np.cos(phi)
        pos[:, 1] += d * np.sin(phi)
        np.mod(pos, 2.0, out=pos)
        over_one = pos > 1.0
        pos[over_one] = 2.0 - pos[over_one]
        steps += 1
        over = steps >= max_steps
        if np.any(over):
            pos[over] = origin[ids[over]]
            steps[over] = 0
            resampled += int(over.sum())
    if diagnostics is not None:
        diagnostics["resampled"] = diagnostics.get("resampled", 0) + resampled
    return out


def wos_solve(scene: CurveScene, x, n_walks=64, eps_shell=EPS_SHELL,
              max_steps=MAX_STEPS, rng=None, return_samples=False):
    """Monte Carlo estimate of the harmonic function at a single point."""
    rng = rng or derive_rng(scene.seed, 33)
    starts = np.tile(np.asarray(x, dtype=np.float64)[None], (n_walks, 1))
    vals = wos_walk_batch(scene, starts, rng, eps_shell, max_steps)
    if return_samples:
        return vals.mean(axis=0), vals
    return vals.mean(axis=0)


ROW_BLOCK = 8  # rows per RNG stream / work unit; fixed so output is
# independent of the worker count


def render_scene(scene: CurveScene, width: int, height: int, spp: int,
                 seed=None, eps_shell=EPS_SHELL, max_steps=MAX_STEPS,
                 threads: int = 1) -> np.ndarray:
    """Per-pixel average of spp single-walk estimates, clamped to [0,1].

    Anti-aliased scenes use stratified subpixel start positions; no-AA
    scenes start every walk at the pixel center. RNG streams derive from
    (seed, row-block index) with a fixed block height, making the output
    byte-identical for any worker count.
    """
    seed = scene.seed if seed is None else seed
    img = np.zeros((height, width, scene.channels))
    blocks = [(b, min(b + ROW_BLOCK, height)) for b in range(0, height, ROW_BLOCK)]

    def do_block(args):
        bi, (r0, r1) = args
        rng = derive_rng(seed, 11, bi)
        rows = r1 - r0
        if scene.antialias:
            xs = (np.arange(width)[None, :, None] + rng.random((rows, width, spp))) / width
            ys = ((r0 + np.arange(rows))[:, None, None] + rng.random((rows, width, spp))) / height
        else:
            xs = np.broadcast_to(
                (np.arange(width)[None, :, None] + 0.5) / width, (rows, width, spp)
            ).copy()
            ys = np.broadcast_to(
                ((r0 + np.arange(rows))[:, None, None] + 0.5) / height, (rows, width, spp)
            ).copy()
        starts = np.stack([xs.ravel(), ys.ravel()], axis=1)
        vals = wos_walk_batch(scene, starts, rng, eps_shell, max_steps)
        return vals.reshape(rows, width, spp, scene.channels).mean(axis=2)

    tasks = list(enumerate(blocks))
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as ex:
            for (bi, (r0, r1)), vals in zip(tasks, ex.map(do_block, tasks)):
                img[r0:r1] = vals
    else:
        for task in tasks:
            bi, (r0, r1) = task
            img[r0:r1] = do_block(task)
    return np.clip(img, 0.0, 1.0)


# ----------------------------------------------------------------------
# random scenes
# ----------------------------------------------------------------------


def _outline_min_distance(a, b, n=256) -> float:
    pa = a.outline_points(n)
    pb = b.outline_points(n)
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min()))


def gen_random_scene(seed: int, klass: str = "mixed", canvas_px: int = 128,
                     channels: int = 3, max_primitives: int = 6) -> CurveScene:
    """Seeded random scene of 1-6 non-intersecting primitives.

    klass='rect-only' restricts to integer-pixel-coordinate rectangles and
    disables anti-aliasing (the paper's no-AA half of the corpus).
    """
    rng = derive_rng(seed, 99)
    n_prim = int(rng.integers(1, max_primitives + 1))
    margin = 2.0 / canvas_px
    prims = []
    guard = 0
    while len(prims) < n_prim and guard < 500:
        guard += 1
        if klass == "rect-only":
            px = canvas_px
            w = int(rng.integers(max(2, px // 16), px // 2))
            h = int(rng.integers(max(2, px // 16), px // 2))
            x0 = int(rng.integers(2, px - w - 2))
            y0 = int(rng.integers(2, px - h - 2))
            cand = Rect(x0 / px, y0 / px, (x0 + w) / px, (y0 + h) / px,
                        tuple(rng.random(channels)), tuple(rng.random(channels)))
        else:
            kind = int(rng.integers(0, 3))
            if kind == 0:
                p0 = rng.random(2) * 0.9 + 0.05
                ang = rng.random() * 2 * np.pi
                L = rng.random() * 0.5 + 0.15
                p1 = np.clip(p0 + L * np.array([np.cos(ang), np.sin(ang)]), 0.03, 0.97)
                cand = Segment(tuple(p0), tuple(p1),
                               tuple(rng.random(channels)), tuple(rng.random(channels)))
            elif kind == 1:
                w = rng.random() * 0.4 + 0.08
                h = rng.random() * 0.4 + 0.08
                x0 = rng.random() * (0.94 - w) + 0.03
                y0 = rng.random() * (0.94 - h) + 0.03
                cand = Rect(x0, y0, x0 + w, y0 + h,
                            tuple(rng.random(channels)), tuple(rng.random(channels)))
            else:
                r = rng.random() * 0.2 + 0.05
                cx = rng.random() * (0.94 - 2 * r) + 0.03 + r
                cy = rng.random() * (0.94 - 2 * r) + 0.03 + r
                cand = Circle(cx, cy, r,
                              tuple(rng.random(channels)), tuple(rng.random(channels)))
        if all(_outline_min_distance(cand, p) > margin for p in prims):
            prims.append(cand)
    return CurveScene(
        primitives=prims,
        channels=channels,
        canvas_px=canvas_px,
        antialias=(klass != "rect-only"),
        seed=seed,
    )


# ----------------------------------------------------------------------
# analytic vector targets
# ----------------------------------------------------------------------


def render_vector_target(kind: str, width: int, height: int, params: dict = None):
    """Analytic raster + ground-truth boundary scene for vector-style images.

    kind='flat-fills': two half-planes split at x = params['x_split'];
    kind='linear-gradient': linear gradient inside a circle, flat outside.
    """
    params = params or {}
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    gx, gy = np.meshgrid(xs, ys)
    if kind == "flat-fills":
        x_split = float(params.get("x_split", 0.5))
        c0 = np.asarray(params.get("c0", (0.15, 0.3, 0.8)))
        c1 = np.asarray(params.get("c1", (0.9, 0.7, 0.1)))
        img = np.where(gx[:, :, None] < x_split, c0[None, None], c1[None, None])
        scene = CurveScene(
            [Segment((x_split, 0.0), (x_split, 1.0), tuple(c1), tuple(c0))],
            channels=len(c0), canvas_px=width, antialias=False,
        )
        return img, scene
    if kind == "linear-gradient":
        cx = float(params.get("cx", 0.5))
        cy = float(params.get("cy", 0.5))
        rad = float(params.get("radius", 0.3))
        c_out = np.asarray(params.get("c_out", (0.2, 0.2, 0.2)))
        ca = np.asarray(params.get("ca", (0.1, 0.5, 0.9)))
        cb = np.asarray(params.get("cb", (0.9, 0.4, 0.1)))
        t = np.clip((gx - (cx - rad)) / (2 * rad), 0.0, 1.0)
        grad = ca[None, None] * (1 - t[:, :, None]) + cb[None, None] * t[:, :, None]
        inside = (gx - cx) ** 2 + (gy - cy) ** 2 < rad * rad
        img = np.where(inside[:, :, None], grad, c_out[None, None])
        scene = CurveScene(
            [Circle(cx, cy, rad, tuple(c_out), tuple(0.5 * (ca + cb)))],
            channels=len(c_out), canvas_px=width, antialias=False,
        )
        return img, scene
    raise ValueError(f"unknown vector target kind {kind!r}")


# ----------------------------------------------------------------------
# scene text serialization
# ----------------------------------------------------------------------


def save_scene(scene: CurveScene, path):
    lines = [
        "scene v1",
        f"channels {scene.channels}",
        f"canvas_px {scene.canvas_px}",
        f"antialias {int(scene.antialias)}",
        f"seed {scene.seed}",
    ]
    for p in scene.primitives:
        if isinstance(p, Segment):
            lines.append(
                "segment "
                + " ".join(repr(float(v)) for v in (*p.p0, *p.p1))
                + " | " + " ".join(repr(float(v)) for v in p.color_left)
                + " | " + " ".join(repr(float(v)) for v in p.color_right)
            )
        elif isinstance(p, Rect):
            lines.append(
                "rect "
                + " ".join(repr(float(v)) for v in (p.x0, p.y0, p.x1, p.y1))
                + " | " + " ".join(repr(float(v)) for v in p.color_out)
                + " | " + " ".join(repr(float(v)) for v in p.color_in)
            )
        elif isinstance(p, Circle):
            lines.append(
                "circle "
                + " ".join(repr(float(v)) for v in (p.cx, p.cy, p.radius))
                + " | " + " ".join(repr(float(v)) for v in p.color_out)
                + " | " + " ".join(repr(float(v)) for v in p.color_in)
            )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_scene(path) -> CurveScene:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != "scene v1":
        raise ValueError("not a scene file")
    meta = {"channels": 3, "canvas_px": 128, "antialias": 1, "seed": 0}
    prims = []
    for ln in lines[1:]:
        head = ln.split()[0]
        if head in meta:
            meta[head] = int(ln.split()[1])
            continue
        body = ln[len(head):].strip()
        fields = [part.split() for part in body.split("|")]
        nums = [float(v) for v in fields[0]]
        ca = tuple(float(v) for v in fields[1])
        cb = tuple(float(v) for v in fields[2])
        if head == "segment":
            prims.append(Segment((nums[0], nums[1]), (nums[2], nums[3]), ca, cb))
        elif head == "rect":
            prims.append(Rect(nums[0], nums[1], nums[2], nums[3], ca, cb))
        elif head == "circle":
            prims.append(Circle(nums[0], nums[1], nums[2], ca, cb))
        else:
            raise ValueError(f"unknown primitive {head!r}")
    return CurveScene(
        primitives=prims,
        channels=meta["channels"],
        canvas_px=meta["canvas_px"],
        antialias=bool(meta["antialias"]),
        seed=meta["seed"],
    )
