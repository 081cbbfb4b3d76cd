"""Procedural face renderer with fully known generative factors.

Every image in this project comes from a FaceScene: an 8-dim identity vector,
a 4-dim expression vector, a 3-dim pose vector, a discrete style label and a
texture seed. The renderer is deterministic and analytic, so factor-level
ground truth is available for every pixel — it plays the role that captured
video frames, 3DMM fits and segmentation masks play at production scale.

Geometry lives in centered canonical coordinates (x right, y down, the frame
spanning roughly [-1, 1]); pose applies an in-plane rotation about the image
center plus a translation measured in fractions of the frame width. All facial
features are sized so that, across the entire factor ranges, they stay inside
the head ellipse — that containment is what makes the expression-locality
invariant (expression edits never touch mask-exterior pixels) hold exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .utils import derive_seed, hsv_to_rgb, rng_for

STYLE_NAMES = ("photo", "poster", "sketch", "warm_paint", "cool_paint", "posterized")

# Styles whose post-process adds a seeded noise/hatch field. The remaining
# styles are pure pointwise palette maps (exactly mirror-symmetric output for
# symmetric geometry).
NOISY_STYLES = frozenset({2, 3, 4})


@dataclass(frozen=True)
class FaceSpaceSpec:
    """Dimensions and sampling layout of the face factor space."""

    image_size: int = 32
    d_identity: int = 8
    d_expression: int = 4
    d_pose: int = 3
    n_styles: int = 6
    rot_range: float = 0.3
    trans_range: float = 0.1
    lattice_grid: int = 12        # identity cells per axis over (f0, f1)
    n_test_cells: int = 24
    cell_margin: float = 0.2      # identity samples keep this margin inside their cell
    split_seed: int = 613


DEFAULT_SPEC = FaceSpaceSpec()


@dataclass(frozen=True)
class FaceScene:
    """One renderable face: all generative factors plus the texture seed."""

    identity_factors: np.ndarray
    expression_factors: np.ndarray
    pose_factors: np.ndarray
    style_id: int
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "identity_factors", np.asarray(self.identity_factors, dtype=np.float64))
        object.__setattr__(self, "expression_factors", np.asarray(self.expression_factors, dtype=np.float64))
        object.__setattr__(self, "pose_factors", np.asarray(self.pose_factors, dtype=np.float64))

    def with_style(self, style_id: int) -> "FaceScene":
        return replace(self, style_id=int(style_id))

    def with_expression(self, expression_factors) -> "FaceScene":
        return replace(self, expression_factors=np.asarray(expression_factors, dtype=np.float64))

    def with_pose(self, pose_factors) -> "FaceScene":
        return replace(self, pose_factors=np.asarray(pose_factors, dtype=np.float64))


def validate_scene(scene: FaceScene, spec: FaceSpaceSpec = DEFAULT_SPEC) -> None:
    if scene.identity_factors.shape != (spec.d_identity,):
        raise ValueError("identity_factors has wrong dimension")
    if scene.expression_factors.shape != (spec.d_expression,):
        raise ValueError("expression_factors has wrong dimension")
    if scene.pose_factors.shape != (spec.d_pose,):
        raise ValueError("pose_factors has wrong dimension")
    if np.abs(scene.identity_factors).max(initial=0.0) > 1.0 + 1e-9:
        raise ValueError("identity factor out of [-1, 1]")
    if np.abs(scene.expression_factors).max(initial=0.0) > 1.0 + 1e-9:
        raise ValueError("expression factor out of [-1, 1]")
    rot, tx, ty = scene.pose_factors
    if abs(rot) > spec.rot_range + 1e-9 or abs(tx) > spec.trans_range + 1e-9 or abs(ty) > spec.trans_range + 1e-9:
        raise ValueError("pose factor out of range")
    if not 0 <= scene.style_id < spec.n_styles:
        raise ValueError("style_id out of range")


# ---------------------------------------------------------------------------
# Identity lattice and scene sampling
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _cell_pools(grid: int, n_test: int, split_seed: int):
    """Disjoint (train, test) lattice cells over the first two identity factors."""
    cells = [(i, j) for i in range(grid) for j in range(grid)]
    rng = np.random.default_rng(split_seed)
    order = rng.permutation(len(cells))
    test = tuple(cells[k] for k in order[:n_test])
    train = tuple(cells[k] for k in order[n_test:])
    return train, test


def split_cells(split: str, spec: FaceSpaceSpec = DEFAULT_SPEC):
    train, test = _cell_pools(spec.lattice_grid, spec.n_test_cells, spec.split_seed)
    if split == "train":
        return train
    if split == "test":
        return test
    raise ValueError(f"unknown split {split!r}")


def identity_cell(identity_factors: np.ndarray, spec: FaceSpaceSpec = DEFAULT_SPEC):
    """Lattice cell containing the first two identity factors."""
    g = spec.lattice_grid
    ij = np.floor((np.asarray(identity_factors[:2]) + 1.0) / 2.0 * g).astype(int)
    ij = np.clip(ij, 0, g - 1)
    return int(ij[0]), int(ij[1])


def _factors_in_cell(cell, rng: np.random.Generator, spec: FaceSpaceSpec) -> np.ndarray:
    g = spec.lattice_grid
    width = 2.0 / g
    lo = np.array([-1.0 + cell[0] * width, -1.0 + cell[1] * width])
    m = spec.cell_margin * width
    f01 = rng.uniform(lo + m, lo + width - m)
    rest = rng.uniform(-1.0, 1.0, size=spec.d_identity - 2)
    return np.concatenate([f01, rest])


def sample_identity(index: int, split: str, spec: FaceSpaceSpec = DEFAULT_SPEC) -> np.ndarray:
    """Identity factor vector for the index-th identity of a split (fixed forever)."""
    pool = split_cells(split, spec)
    cell = pool[index % len(pool)]
    rng = rng_for("identity", spec.split_seed, split, index)
    return _factors_in_cell(cell, rng, spec)


def sample_expression(rng: np.random.Generator, spec: FaceSpaceSpec = DEFAULT_SPEC) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=spec.d_expression)


def sample_pose(rng: np.random.Generator, spec: FaceSpaceSpec = DEFAULT_SPEC) -> np.ndarray:
    return np.array([
        rng.uniform(-spec.rot_range, spec.rot_range),
        rng.uniform(-spec.trans_range, spec.trans_range),
        rng.uniform(-spec.trans_range, spec.trans_range),
    ])


def sample_scene(seed: int, split: str, spec: FaceSpaceSpec = DEFAULT_SPEC) -> FaceScene:
    """Random scene, deterministic in (seed, split); identity cell drawn from the split pool."""
    pool = split_cells(split, spec)
    rng = rng_for("scene", spec.split_seed, split, seed)
    cell = pool[int(rng.integers(len(pool)))]
    return FaceScene(
        identity_factors=_factors_in_cell(cell, rng, spec),
        expression_factors=sample_expression(rng, spec),
        pose_factors=sample_pose(rng, spec),
        style_id=int(rng.integers(spec.n_styles)),
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def _geometry(scene: FaceScene) -> dict:
    f = scene.identity_factors
    e = scene.expression_factors
    return {
        "rx": 0.60 * (1.0 - 0.10 * f[0]),
        "ry": 0.60 * (1.0 + 0.10 * f[0]),
        "eye_x": 0.22 + 0.03 * f[1],
        "eye_y": -0.17,
        "eye_r": 0.10 + 0.02 * f[2],
        "eye_open": 0.25 + 0.75 * (e[2] + 1.0) / 2.0,   # vertical/horizontal radius ratio
        "nose_end": 0.10 + 0.07 * f[3],
        "mouth_y": 0.26,
        "mouth_hw": 0.16 + 0.05 * f[4],
        "mouth_curve": 0.12 * e[0],                      # >0 bends corners upward (smile)
        "mouth_th": 0.020 + 0.045 * (e[1] + 1.0) / 2.0,
        # identity brow height is a pure vertical shift; expression raise is a
        # pure parabolic arch (ends rise, center drops) — orthogonal
        # signatures, so both are recoverable from a single image
        "brow_y": -0.285 - 0.035 * f[5] - 0.02 * e[3],
        "brow_arc": 0.16 * e[3],
        "brow_hw": 0.055,
        "hair_scale": 1.10 + 0.06 * f[7],
        "skin_hue": 0.07 + 0.035 * f[6],
    }


def _canonical_grid(scene: FaceScene, size: int):
    """Pixel grid mapped back through the inverse pose transform."""
    half = size / 2.0
    idx = (np.arange(size) - (size - 1) / 2.0) / half
    xg, yg = np.meshgrid(idx, idx)          # xg: columns, yg: rows (down-positive)
    rot, tx, ty = scene.pose_factors
    xs = xg - 2.0 * tx
    ys = yg - 2.0 * ty
    c, s = np.cos(rot), np.sin(rot)
    # inverse rotation R(-rot)
    xc = c * xs + s * ys
    yc = -s * xs + c * ys
    return xg, yg, xc, yc


def _soft(d: np.ndarray, w: float = 0.04) -> np.ndarray:
    """Inside-positive coverage from a signed distance (d < 0 inside)."""
    return np.clip(0.5 - d / w, 0.0, 1.0)


def _ellipse_e(x, y, cx, cy, rx, ry):
    return np.sqrt(((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2)


def _brow_distance(x, y, g, half_th):
    """Arched-band distance for both brows; mirror-symmetric."""
    d = None
    for s in (-1.0, 1.0):
        u = x - s * 0.9 * g["eye_x"]
        y_line = g["brow_y"] + g["brow_arc"] * ((u / g["brow_hw"]) ** 2 - 0.5)
        d_s = np.maximum(np.abs(u) - g["brow_hw"], np.abs(y - y_line) - half_th)
        d = d_s if d is None else np.minimum(d, d_s)
    return d


def _layers(scene: FaceScene, size: int) -> dict:
    """Coverage maps for every facial element, in paint order."""
    g = _geometry(scene)
    xg, yg, x, y = _canonical_grid(scene, size)
    rmin = min(g["rx"], g["ry"])

    e_head = _ellipse_e(x, y, 0.0, 0.0, g["rx"], g["ry"])
    head = _soft((e_head - 1.0) * rmin)
    hair = _soft((e_head - g["hair_scale"]) * rmin) * _soft(y + 0.15)

    eyes, pupils = [], []
    rev = g["eye_r"] * g["eye_open"]
    for sx in (-1.0, 1.0):
        ee = _ellipse_e(x, y, sx * g["eye_x"], g["eye_y"], g["eye_r"], rev)
        eyes.append(_soft((ee - 1.0) * min(g["eye_r"], rev), 0.03))
        pd = np.sqrt((x - sx * g["eye_x"]) ** 2 + (y - g["eye_y"]) ** 2)
        pupils.append(_soft(pd - 0.55 * g["eye_r"], 0.03) * eyes[-1])

    brows = _soft(_brow_distance(x, y, g, 0.022), 0.03)

    nose_d = np.maximum(np.abs(x) - 0.018, np.maximum(-0.06 - y, y - g["nose_end"]))
    nose = _soft(nose_d, 0.03)

    ym = g["mouth_y"] - g["mouth_curve"] * (x / g["mouth_hw"]) ** 2
    mouth_d = np.maximum(np.abs(y - ym) - g["mouth_th"], np.abs(x) - g["mouth_hw"])
    lips = _soft(mouth_d, 0.03)
    inner_d = np.maximum(np.abs(y - ym) - 0.45 * g["mouth_th"], np.abs(x) - 0.8 * g["mouth_hw"])
    inner = _soft(inner_d, 0.03) * float(g["mouth_th"] > 0.034)

    return {
        "geom": g, "xg": xg, "yg": yg, "head": head, "hair": hair,
        "eye_l": eyes[0], "eye_r": eyes[1], "pupil_l": pupils[0], "pupil_r": pupils[1],
        "brows": brows, "nose": nose, "lips": lips, "inner": inner,
    }


def mouth_bbox(scene: FaceScene, spec: FaceSpaceSpec = DEFAULT_SPEC, pad_px: int = 0):
    """Pixel bbox (r0, r1, c0, c1), inclusive-exclusive, containing the rendered mouth.

    Includes the anti-alias halo so every pixel the mouth touches is inside.
    """
    g = _geometry(scene)
    halo = g["mouth_th"] + 0.05
    xs = np.linspace(-g["mouth_hw"] - 0.05, g["mouth_hw"] + 0.05, 41)
    ys = g["mouth_y"] - g["mouth_curve"] * np.clip(np.abs(xs) / g["mouth_hw"], 0, 1) ** 2
    pts = []
    for dy in (-halo, halo):
        pts.append(np.stack([xs, ys + dy], axis=1))
    pts = np.concatenate(pts, axis=0)
    rot, tx, ty = scene.pose_factors
    c, s = np.cos(rot), np.sin(rot)
    px = c * pts[:, 0] - s * pts[:, 1] + 2.0 * tx
    py = s * pts[:, 0] + c * pts[:, 1] + 2.0 * ty
    size = spec.image_size
    half = size / 2.0
    cols = px * half + (size - 1) / 2.0
    rows = py * half + (size - 1) / 2.0
    r0 = max(0, int(np.floor(rows.min())) - pad_px)
    r1 = min(size, int(np.ceil(rows.max())) + 1 + pad_px)
    c0 = max(0, int(np.floor(cols.min())) - pad_px)
    c1 = min(size, int(np.ceil(cols.max())) + 1 + pad_px)
    return r0, r1, c0, c1


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

_BG = {
    0: (0.28, 0.30, 0.34),
    1: (0.93, 0.78, 0.15),
    2: (0.96, 0.95, 0.91),
    3: (0.82, 0.70, 0.55),
    4: (0.62, 0.72, 0.82),
    5: (0.38, 0.46, 0.55),
}


def _paint(out, alpha, color):
    out *= (1.0 - alpha)[..., None]
    out += alpha[..., None] * np.asarray(color, dtype=np.float64)


def _wave_field(xg, yg, seed: int, n_waves: int = 6) -> np.ndarray:
    """Smooth seeded noise in [-1, 1]: a sum of random plane waves (pointwise, local)."""
    rng = np.random.default_rng(seed)
    acc = np.zeros_like(xg)
    for _ in range(n_waves):
        fx, fy = rng.uniform(2.0, 9.0, size=2) * rng.choice([-1.0, 1.0], size=2)
        ph = rng.uniform(0.0, 2 * np.pi)
        acc += rng.uniform(0.5, 1.0) * np.sin(fx * xg + fy * yg + ph)
    return acc / n_waves


def _apply_style(base: np.ndarray, style_id: int, xg, yg, seed: int) -> np.ndarray:
    if style_id == 0:
        shade = 1.0 - 0.18 * (xg ** 2 + yg ** 2)
        return base * shade[..., None]
    if style_id == 1:
        m = base.mean(axis=2, keepdims=True)
        return m + 1.7 * (base - m)
    if style_id == 2:
        gray = base @ np.array([0.299, 0.587, 0.114])
        ink = 1.0 - gray
        hatch = 0.5 + 0.5 * np.sin(38.0 * (xg + yg) + 2.0 * _wave_field(xg, yg, derive_seed("hatch", seed)))
        draw = np.clip(ink * (0.35 + 0.65 * hatch), 0.0, 1.0)
        paper = np.array([0.97, 0.96, 0.92])
        ink_tint = np.array([0.95, 0.97, 1.0])
        return paper[None, None, :] * (1.0 - 0.92 * draw[..., None] * ink_tint[None, None, :])
    if style_id == 3:
        tint = np.array([1.14, 0.98, 0.80])
        n = _wave_field(xg, yg, derive_seed("blotch", seed))
        return base * tint[None, None, :] + 0.06 * n[..., None]
    if style_id == 4:
        tint = np.array([0.80, 0.98, 1.14])
        n = _wave_field(xg, yg, derive_seed("blotch", seed))
        return base * tint[None, None, :] + 0.06 * n[..., None]
    if style_id == 5:
        return np.round(base * 4.0) / 4.0
    raise ValueError(f"unknown style_id {style_id}")


def render(scene: FaceScene, spec: FaceSpaceSpec = DEFAULT_SPEC) -> np.ndarray:
    """Render the scene to an HxWx3 float image in [0, 1]. Deterministic."""
    validate_scene(scene, spec)
    L = _layers(scene, spec.image_size)
    g = L["geom"]

    skin = hsv_to_rgb(g["skin_hue"], 0.38, 0.84)
    out = np.empty((spec.image_size, spec.image_size, 3), dtype=np.float64)
    out[:] = np.asarray(_BG[scene.style_id], dtype=np.float64)

    _paint(out, L["hair"], hsv_to_rgb(0.08, 0.55, 0.22))
    _paint(out, L["head"], skin)
    _paint(out, L["brows"], (0.18, 0.12, 0.10))
    _paint(out, L["eye_l"], (0.98, 0.98, 0.96))
    _paint(out, L["eye_r"], (0.98, 0.98, 0.96))
    _paint(out, L["pupil_l"], (0.03, 0.02, 0.02))
    _paint(out, L["pupil_r"], (0.03, 0.02, 0.02))
    _paint(out, L["nose"], (0.45, 0.30, 0.24))
    _paint(out, L["lips"], (0.62, 0.25, 0.25))
    _paint(out, L["inner"], (0.22, 0.07, 0.07))

    out = _apply_style(out, scene.style_id, L["xg"], L["yg"], scene.seed)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def render_landmarks(scene: FaceScene, spec: FaceSpaceSpec = DEFAULT_SPEC) -> np.ndarray:
    """Landmark sketch: geometry outlines on black, independent of style and texture.

    Depends only on the geometric identity factors (0-5), expression and pose.
    Mouth openness is encoded as separate upper/lower lip lines so the full
    expression vector is recoverable from the landmark image alone.
    """
    validate_scene(scene, spec)
    g = _geometry(scene)
    _, _, x, y = _canonical_grid(scene, spec.image_size)
    rmin = min(g["rx"], g["ry"])
    acc = np.zeros((spec.image_size, spec.image_size), dtype=np.float64)

    # Strokes are kept >= ~1.5 px wide so they survive resampling at any pose.
    e_head = _ellipse_e(x, y, 0.0, 0.0, g["rx"], g["ry"])
    acc = np.maximum(acc, _soft(np.abs(e_head - 1.0) * rmin - 0.022, 0.05))

    rev = g["eye_r"] * g["eye_open"]
    for sx in (-1.0, 1.0):
        ee = _ellipse_e(x, y, sx * g["eye_x"], g["eye_y"], g["eye_r"], rev)
        acc = np.maximum(acc, _soft(np.abs(ee - 1.0) * min(g["eye_r"], rev) - 0.014, 0.05))

    acc = np.maximum(acc, _soft(_brow_distance(x, y, g, 0.018), 0.05))

    nose_d = np.maximum(np.abs(x) - 0.018, np.maximum(-0.06 - y, y - g["nose_end"]))
    acc = np.maximum(acc, _soft(nose_d, 0.05))

    ym = g["mouth_y"] - g["mouth_curve"] * (x / g["mouth_hw"]) ** 2
    for lip in (-g["mouth_th"], g["mouth_th"]):
        d = np.maximum(np.abs(y - (ym + lip)) - 0.016, np.abs(x) - g["mouth_hw"])
        acc = np.maximum(acc, _soft(d, 0.05))

    img = np.repeat(acc[..., None], 3, axis=2)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_mask(scene: FaceScene, spec: FaceSpaceSpec = DEFAULT_SPEC) -> np.ndarray:
    """Binary foreground mask: head ellipse plus hair arc. Expression-independent."""
    validate_scene(scene, spec)
    g = _geometry(scene)
    _, _, x, y = _canonical_grid(scene, spec.image_size)
    rmin = min(g["rx"], g["ry"])
    e_head = _ellipse_e(x, y, 0.0, 0.0, g["rx"], g["ry"])
    head = _soft((e_head - 1.0) * rmin)
    hair = _soft((e_head - g["hair_scale"]) * rmin) * _soft(y + 0.15)
    return (np.maximum(head, hair) >= 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# Style exemplars and the palette oracle
# ---------------------------------------------------------------------------

def canonical_scene(style_id: int, spec: FaceSpaceSpec = DEFAULT_SPEC) -> FaceScene:
    """The fixed neutral scene used as the style exemplar for a given style."""
    return FaceScene(
        identity_factors=np.zeros(spec.d_identity),
        expression_factors=np.zeros(spec.d_expression),
        pose_factors=np.zeros(spec.d_pose),
        style_id=int(style_id),
        seed=7,
    )


def style_bank(style_ids, spec: FaceSpaceSpec = DEFAULT_SPEC) -> dict:
    """One canonical exemplar render per requested style id."""
    return {int(s): render(canonical_scene(s, spec), spec) for s in style_ids}


def _style_features(img: np.ndarray) -> np.ndarray:
    mean = img.mean(axis=(0, 1))
    std = img.std(axis=(0, 1))
    sat = (img.max(axis=2) - img.min(axis=2)).mean()
    quant = np.abs(img * 4.0 - np.round(img * 4.0)).mean()
    diag = np.abs(img[1:, 1:] - img[:-1, :-1]).mean()
    warmth = (img[..., 0] - img[..., 2]).mean()
    return np.concatenate([mean, std, [sat, quant, diag, warmth]])


class StyleOracle:
    """Nearest-centroid style classifier over analytic palette statistics.

    Styles here are deterministic palette/texture post-processes, so a handful
    of summary statistics separates them with a wide margin on clean renders.
    Used to score style preservation of generated images.
    """

    def __init__(self, spec: FaceSpaceSpec = DEFAULT_SPEC, refs_per_style: int = 40):
        self.spec = spec
        feats = {s: [] for s in range(spec.n_styles)}
        for s in range(spec.n_styles):
            for k in range(refs_per_style):
                scene = sample_scene(derive_seed("style-oracle", s, k), "train", spec).with_style(s)
                feats[s].append(_style_features(render(scene, spec)))
        all_feats = np.concatenate([np.stack(v) for v in feats.values()])
        self._mu = all_feats.mean(axis=0)
        self._sd = all_feats.std(axis=0) + 1e-8
        self._centroids = np.stack([
            ((np.stack(feats[s]) - self._mu) / self._sd).mean(axis=0) for s in range(spec.n_styles)
        ])

    def classify(self, img: np.ndarray) -> int:
        z = (_style_features(img) - self._mu) / self._sd
        return int(np.argmin(np.linalg.norm(self._centroids - z, axis=1)))
