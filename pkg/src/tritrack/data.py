"""Synthetic tracking sequences and a LaSOT-layout sequence loader.

Generated sequences place one textured target on a smooth noise background
with optional look-alike distractors, partial occluders, and out-of-view
spans. The target's pattern lives in box-local coordinates, so its
appearance is stable under the large scale/aspect drifts the generator
applies; distractors share a configurable fraction of the target's texture
palette. Everything is a pure function of the spec (seed included): the
same spec yields byte-identical frames.

On-disk layout mirrors LaSOT: `<root>/<seq>/img/%08d.ppm`,
`<root>/<seq>/groundtruth.txt` (one `x,y,w,h` line per frame, `0,0,0,0`
when the target is absent), plus `<root>/<seq>/meta.json`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .geometry import Box

CANVAS_W = 666
CANVAS_H = 400

PATTERNS = ("stripes", "checks", "rings", "spots")
SHAPES = ("ellipse", "box", "blob")


@dataclass
class SyntheticSpec:
    num_sequences: int = 8
    frames_per_sequence: int = 24
    canvas_w: int = CANVAS_W
    canvas_h: int = CANVAS_H
    base_size_range: tuple[float, float] = (36.0, 80.0)
    scale_range: tuple[float, float] = (0.6, 1.6)
    aspect_drift: float = 0.25
    num_distractors: int = 4
    distractor_similarity: float = 0.5
    occlusion_probability: float = 0.0
    out_of_view_probability: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.scale_range[0] <= 0 or self.scale_range[1] < self.scale_range[0]:
            raise ValueError("scale_range must be a non-empty positive range")
        if self.frames_per_sequence < 2:
            raise ValueError("sequences need at least 2 frames")
        max_dim = max(self.base_size_range) * self.scale_range[1] * np.exp(self.aspect_drift)
        if max_dim > 0.92 * min(self.canvas_w, self.canvas_h):
            raise ValueError(
                f"spec demands targets up to {max_dim:.0f}px on a "
                f"{self.canvas_w}x{self.canvas_h} canvas"
            )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_dict(d: dict) -> "SyntheticSpec":
        kwargs = dict(d)
        for key in ("base_size_range", "scale_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return SyntheticSpec(**kwargs)


@dataclass
class Sequence:
    """Ordered frames with per-frame GT box and presence flag.

    Frames are either held in memory (uint8) or loaded lazily from disk;
    `frame(i)` always returns float64 RGB in [0, 1].
    """

    name: str
    boxes: list[Box | None]
    present: list[bool]
    frames: list[np.ndarray] | None = None
    frame_paths: list[Path] | None = None
    attributes: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.present)

    def frame(self, i: int) -> np.ndarray:
        if self.frames is not None:
            return self.frames[i].astype(np.float64) / 255.0
        return read_image(self.frame_paths[i])


# ---------------------------------------------------------------------------
# rendering


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cells: int = 12) -> np.ndarray:
    coarse = rng.uniform(0.25, 0.6, (cells + 2, cells + 2, 3))
    ys = np.linspace(0, cells - 0.001, h)
    xs = np.linspace(0, cells - 0.001, w)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    return (
        coarse[y0][:, x0] * (1 - fy) * (1 - fx)
        + coarse[y0][:, x0 + 1] * (1 - fy) * fx
        + coarse[y0 + 1][:, x0] * fy * (1 - fx)
        + coarse[y0 + 1][:, x0 + 1] * fy * fx
    )


def _pattern_indices(u: np.ndarray, v: np.ndarray, kind: str, freq: float, phase: float,
                     n_colors: int) -> np.ndarray:
    """Map local coords in [-1, 1] to palette indices; local coords keep the
    texture attached to the target across scale changes."""
    if kind == "stripes":
        k = np.floor((u + v) * freq + phase)
    elif kind == "checks":
        k = np.floor(u * freq + phase) + np.floor(v * freq + phase)
    elif kind == "rings":
        k = np.floor(np.sqrt(u * u + v * v) * freq * 2 + phase)
    else:  # spots
        k = (np.sin(u * freq * np.pi + phase) * np.sin(v * freq * np.pi + phase) > 0.15).astype(
            np.float64
        ) + 2.0 * (np.cos(u * freq * 2.1 + phase) > 0.4)
    return (k.astype(np.int64)) % n_colors


def _shape_mask(u: np.ndarray, v: np.ndarray, kind: str, wob: float) -> np.ndarray:
    if kind == "ellipse":
        return u * u + v * v <= 1.0
    if kind == "box":
        return np.maximum(np.abs(u), np.abs(v)) <= 1.0
    # blob: radius modulated by angle (slow deformation via wob)
    r = np.sqrt(u * u + v * v)
    phi = np.arctan2(v, u)
    return r <= 0.78 + 0.22 * np.cos(3 * phi + wob)


@dataclass
class _Actor:
    palette: np.ndarray  # (n, 3)
    pattern: str
    shape: str
    freq: float
    base_w: float
    base_h: float


def _render_actor(
    canvas: np.ndarray,
    actor: _Actor,
    cx: float,
    cy: float,
    w: float,
    h: float,
    rot: float,
    phase: float,
    wob: float,
) -> tuple[int, int]:
    """Draw the actor; returns (visible pixel count, nominal pixel count)."""
    ch, cw = canvas.shape[:2]
    x1 = int(np.floor(cx - w / 2))
    y1 = int(np.floor(cy - h / 2))
    x2 = int(np.ceil(cx + w / 2)) + 1
    y2 = int(np.ceil(cy + h / 2)) + 1
    xs = np.arange(x1, x2)
    ys = np.arange(y1, y2)
    u = (xs + 0.5 - cx) / (w / 2)
    v = (ys + 0.5 - cy) / (h / 2)
    uu = u[None, :].repeat(len(v), axis=0)
    vv = v[:, None].repeat(len(u), axis=1)
    mask = _shape_mask(uu, vv, actor.shape, wob)
    nominal = int(mask.sum())
    if nominal == 0:
        return 0, 0
    # rotate pattern coordinates only; the outline (and so the box) is axis-aligned
    cr, sr = np.cos(rot), np.sin(rot)
    pu = uu * cr - vv * sr
    pv = uu * sr + vv * cr
    idx = _pattern_indices(pu, pv, actor.pattern, actor.freq, phase, len(actor.palette))
    colors = actor.palette[idx]

    ix = (xs >= 0) & (xs < cw)
    iy = (ys >= 0) & (ys < ch)
    sub = mask[np.ix_(iy, ix)]
    visible = int(sub.sum())
    if visible:
        region = canvas[np.ix_(ys[iy], xs[ix])]
        region[sub] = colors[np.ix_(iy, ix)][sub]
    return visible, nominal


def _mask_bbox(
    cx: float, cy: float, w: float, h: float, shape: str, wob: float, cw: int, ch: int
) -> Box | None:
    """Tight bounding box of the visible part of the shape."""
    x1 = int(np.floor(cx - w / 2))
    y1 = int(np.floor(cy - h / 2))
    x2 = int(np.ceil(cx + w / 2)) + 1
    y2 = int(np.ceil(cy + h / 2)) + 1
    xs = np.arange(x1, x2)
    ys = np.arange(y1, y2)
    u = (xs + 0.5 - cx) / (w / 2)
    v = (ys + 0.5 - cy) / (h / 2)
    mask = _shape_mask(u[None, :].repeat(len(v), 0), v[:, None].repeat(len(u), 1), shape, wob)
    ix = (xs >= 0) & (xs < cw)
    iy = (ys >= 0) & (ys < ch)
    sub = mask[np.ix_(iy, ix)]
    if not sub.any():
        return None
    rows = np.flatnonzero(sub.any(axis=1))
    cols = np.flatnonzero(sub.any(axis=0))
    vis_x = xs[ix]
    vis_y = ys[iy]
    return Box(
        float(vis_x[cols[0]]),
        float(vis_y[rows[0]]),
        float(vis_x[cols[-1]] + 1),
        float(vis_y[rows[-1]] + 1),
    )


def _smooth_path(rng, n, lo, hi):
    """Sum-of-sines trajectory inside [lo, hi]."""
    t = np.linspace(0, 1, n)
    mid = rng.uniform(lo + 0.2 * (hi - lo), hi - 0.2 * (hi - lo))
    amp = (hi - lo) / 2
    path = mid + amp * (
        0.6 * np.sin(2 * np.pi * rng.uniform(0.4, 1.3) * t + rng.uniform(0, 2 * np.pi))
        + 0.4 * np.sin(2 * np.pi * rng.uniform(1.5, 2.8) * t + rng.uniform(0, 2 * np.pi))
    )
    return np.clip(path, lo, hi)


def _make_actor(rng: np.random.Generator, spec: SyntheticSpec, like: _Actor | None = None) -> _Actor:
    n_colors = 4
    if like is None:
        palette = rng.uniform(0.0, 1.0, (n_colors, 3))
        # push palette colors apart from the muted background band
        palette = np.where(palette < 0.5, palette * 0.45, 0.55 + palette * 0.45)
        pattern = PATTERNS[int(rng.integers(len(PATTERNS)))]
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
    else:
        n_shared = int(round(spec.distractor_similarity * n_colors))
        palette = rng.uniform(0.0, 1.0, (n_colors, 3))
        palette = np.where(palette < 0.5, palette * 0.45, 0.55 + palette * 0.45)
        if n_shared:
            palette[:n_shared] = like.palette[:n_shared]
        pattern = like.pattern if n_shared >= 2 else PATTERNS[int(rng.integers(len(PATTERNS)))]
        shape = like.shape if n_shared >= 3 else SHAPES[int(rng.integers(len(SHAPES)))]
    base = rng.uniform(*spec.base_size_range)
    aspect = np.exp(rng.uniform(-0.2, 0.2))
    return _Actor(
        palette=palette,
        pattern=pattern,
        shape=shape,
        freq=rng.uniform(2.0, 4.5),
        base_w=base * aspect,
        base_h=base / aspect,
    )


def generate_sequence(spec: SyntheticSpec, index: int) -> Sequence:
    """Render one deterministic sequence (index selects the RNG stream)."""
    ss = np.random.SeedSequence(spec.seed).spawn(spec.num_sequences)[index]
    rng = np.random.default_rng(ss)
    n = spec.frames_per_sequence
    cw, ch = spec.canvas_w, spec.canvas_h

    target = _make_actor(rng, spec)
    s_min, s_max = spec.scale_range
    ramp = np.geomspace(s_min, s_max, n)
    if rng.uniform() < 0.5:
        ramp = ramp[::-1]
    wobble = np.exp(rng.uniform(-0.05, 0.05, n))
    scale = ramp * wobble
    aspect = np.exp(_smooth_path(rng, n, -spec.aspect_drift, spec.aspect_drift))
    widths = target.base_w * scale * aspect
    heights = target.base_h * scale / aspect

    margin_x = widths / 2 + 2
    margin_y = heights / 2 + 2
    cx = _smooth_path(rng, n, float(margin_x.max()), cw - float(margin_x.max()))
    cy = _smooth_path(rng, n, float(margin_y.max()), ch - float(margin_y.max()))
    rot = _smooth_path(rng, n, -0.8, 0.8)
    wob = _smooth_path(rng, n, 0.0, 2 * np.pi)
    phase = rng.uniform(0, 4)

    # optional out-of-view excursion: cosine-ramped push past the border
    oov = np.zeros(n)
    if rng.uniform() < spec.out_of_view_probability and n >= 10:
        span = max(4, int(n * rng.uniform(0.12, 0.25)))
        t0 = int(rng.integers(n // 4, n - span - n // 8))
        push = np.sin(np.linspace(0, np.pi, span)) ** 2
        oov[t0 : t0 + span] = push
    exit_dir = rng.choice([-1.0, 1.0])

    distractors = [_make_actor(rng, spec, like=target) for _ in range(spec.num_distractors)]
    d_paths = []
    for d in distractors:
        dm_x = d.base_w / 2 + 2
        dm_y = d.base_h / 2 + 2
        d_paths.append(
            (
                _smooth_path(rng, n, dm_x, cw - dm_x),
                _smooth_path(rng, n, dm_y, ch - dm_y),
                _smooth_path(rng, n, 0.75, 1.35),
                _smooth_path(rng, n, -0.8, 0.8),
                rng.uniform(0, 4),
                _smooth_path(rng, n, 0.0, 2 * np.pi),
            )
        )

    background = _smooth_noise(rng, ch, cw)
    occl_draws = rng.uniform(size=n)
    occl_geom = rng.uniform(size=(n, 4))

    frames: list[np.ndarray] = []
    boxes: list[Box | None] = []
    present: list[bool] = []
    for t in range(n):
        canvas = background.copy()
        for d, (dx, dy, dsc, drot, dphase, dwob) in zip(distractors, d_paths):
            _render_actor(
                canvas, d, dx[t], dy[t], d.base_w * dsc[t], d.base_h * dsc[t],
                drot[t], dphase, dwob[t],
            )
        tx = cx[t] + oov[t] * exit_dir * (cw / 2 + widths[t])
        ty = cy[t]
        visible, nominal = _render_actor(
            canvas, target, tx, ty, widths[t], heights[t], rot[t], phase, wob[t]
        )
        if spec.occlusion_probability and occl_draws[t] < spec.occlusion_probability:
            g = occl_geom[t]
            ow = widths[t] * (0.3 + 0.3 * g[0])
            ox = tx - widths[t] / 2 + g[1] * (widths[t] - ow)
            oy1 = max(int(ty - heights[t] / 2), 0)
            oy2 = min(int(ty + heights[t] / 2) + 1, ch)
            ox1 = max(int(ox), 0)
            ox2 = min(int(ox + ow) + 1, cw)
            if ox2 > ox1 and oy2 > oy1:
                canvas[oy1:oy2, ox1:ox2] = 0.42 + 0.1 * g[2]
        is_present = nominal > 0 and visible / max(nominal, 1) >= 0.5
        box = _mask_bbox(tx, ty, widths[t], heights[t], target.shape, wob[t], cw, ch)
        if box is None or not box.is_valid():
            is_present = False
        boxes.append(box if is_present else None)
        present.append(is_present)
        frames.append((np.clip(canvas, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8))

    area_ratio = None
    areas = [b.area for b, p in zip(boxes, present) if p]
    if areas:
        area_ratio = float(max(areas) / min(areas))
    return Sequence(
        name=f"synth-{spec.seed:04d}-{index:04d}",
        boxes=boxes,
        present=present,
        frames=frames,
        attributes={
            "scale_range": list(spec.scale_range),
            "num_distractors": spec.num_distractors,
            "distractor_similarity": spec.distractor_similarity,
            "area_ratio": area_ratio,
            "pattern": target.pattern,
            "shape": target.shape,
        },
    )


def generate_sequences(spec: SyntheticSpec) -> Iterator[Sequence]:
    for k in range(spec.num_sequences):
        yield generate_sequence(spec, k)


def generate(spec: SyntheticSpec) -> list[Sequence]:
    return list(generate_sequences(spec))


# ---------------------------------------------------------------------------
# PPM I/O


def write_ppm(path: str | Path, image_u8: np.ndarray) -> None:
    h, w = image_u8.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image_u8, dtype=np.uint8).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM")
    # header: magic, width, height, maxval, single whitespace, payload
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(blob, dtype=np.uint8, count=h * w * 3, offset=pos)
    return data.reshape(h, w, 3)


def read_image(path: str | Path) -> np.ndarray:
    """Decode a frame to float64 RGB in [0, 1]; PPM natively, PNG/JPEG via
    pillow when available."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path).astype(np.float64) / 255.0
    try:
        from PIL import Image
    except ImportError as exc:
        raise ValueError(f"{path}: only PPM is supported without pillow") from exc
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# LaSOT-layout directories


def write_sequence_dir(seq: Sequence, root: str | Path) -> Path:
    out = Path(root) / seq.name
    (out / "img").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(len(seq)):
        img = seq.frames[i] if seq.frames is not None else (
            (seq.frame(i) * 255.0 + 0.5).astype(np.uint8)
        )
        write_ppm(out / "img" / f"{i + 1:08d}.ppm", img)
        if seq.present[i] and seq.boxes[i] is not None:
            x, y, w, h = seq.boxes[i].as_xywh()
            lines.append(f"{x},{y},{w},{h}")
        else:
            lines.append("0,0,0,0")
    (out / "groundtruth.txt").write_text("\n".join(lines) + "\n")
    (out / "meta.json").write_text(json.dumps(seq.attributes, sort_keys=True) + "\n")
    return out


def load_lasot_dir(path: str | Path) -> Sequence:
    root = Path(path)
    img_dir = root / "img"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"{root}: missing img/ directory")
    frame_paths = sorted(
        p for p in img_dir.iterdir() if p.suffix.lower() in (".ppm", ".png", ".jpg", ".jpeg")
    )
    gt_file = root / "groundtruth.txt"
    if not gt_file.is_file():
        raise FileNotFoundError(f"{root}: missing groundtruth.txt")
    lines = [ln for ln in gt_file.read_text().splitlines() if ln.strip()]
    if len(lines) != len(frame_paths):
        raise ValueError(
            f"{root}: {len(frame_paths)} frames but {len(lines)} annotation lines"
        )
    boxes: list[Box | None] = []
    present: list[bool] = []
    for ln in lines:
        x, y, w, h = (float(v) for v in ln.split(","))
        if w <= 0 or h <= 0:
            boxes.append(None)
            present.append(False)
        else:
            boxes.append(Box.from_xywh(x, y, w, h))
            present.append(True)
    attributes = {}
    meta = root / "meta.json"
    if meta.is_file():
        attributes = json.loads(meta.read_text())
    return Sequence(
        name=root.name,
        boxes=boxes,
        present=present,
        frame_paths=frame_paths,
        attributes=attributes,
    )


def load_dataset_dir(root: str | Path) -> list[Sequence]:
    """Load every sequence directory under root, sorted by name."""
    root = Path(root)
    seqs = []
    for child in sorted(root.iterdir()):
        if child.is_dir() and (child / "groundtruth.txt").is_file():
            seqs.append(load_lasot_dir(child))
    if not seqs:
        raise ValueError(f"{root}: no sequence directories found")
    return seqs
