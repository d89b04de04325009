"""Procedural grid scenes and the five curriculum task generators.

Scenes are small ``H x W x 3`` canvases in ``[0, 1]`` with up to four
primitive objects (rectangles, crosses, discs) on a faintly noisy
background. Every generator is a pure function of its ``Generator``.

Mask construction for inpainting mixes three kinds of masks:

* random brush-stroke masks, rejected whenever their IoU with any object
  exceeds 0.3 (so accepted masks mostly cover background),
* object-shaped masks (an object's own bitmap),
* irregular object masks: a closed quadratic Bezier loop around the
  object's bounding box, sampled at 20 points and filled even-odd.
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from . import kernels

HEIGHT = WIDTH = 16
CHANNELS = 3
PATCH = 4

TASKS = ("mask_inpainting", "grounding", "controllable", "customized", "instruction_edit")

CLASS_NAMES = ("rect", "cross", "disc")
PALETTE = np.array([
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
])
# annotation colours never occur in objects or background
ANNOTATION_COLORS = np.array([
    [1.0, 1.0, 1.0],
    [0.0, 0.0, 0.0],
    [1.0, 0.5, 0.0],
])
N_SIZES = 3
MAX_OBJECTS = 4
EDGE_THRESHOLD = 0.2
IOU_REJECT = 0.3
MASK_KIND_PROBS = (0.2, 0.4, 0.4)
N_POLYGON_POINTS = 20

# caption vocabulary: five integer tokens per object
CLASS_BASE = 0
COLOR_BASE = CLASS_BASE + len(CLASS_NAMES)
ROW_BASE = COLOR_BASE + len(PALETTE)
COL_BASE = ROW_BASE + HEIGHT
SIZE_BASE = COL_BASE + WIDTH
CAPTION_VOCAB = SIZE_BASE + N_SIZES


class MaskKind(enum.Enum):
    RANDOM = "random"
    OBJECT = "object"
    IRREGULAR = "irregular"


class GroundingMode(enum.Enum):
    BOX = "box_detect"
    MASK = "mask_seg"
    INSTANCE = "instance_detect"


EDIT_OPS = ("recolor", "remove", "move")


# ----------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class ObjectParams:
    class_id: int
    color_id: int
    row0: int
    col0: int
    size: int  # 0-based size index


@dataclass
class ObjectAnnotation:
    class_id: int
    color_id: int
    bitmap: np.ndarray
    bbox: Tuple[int, int, int, int]  # (row0, col0, row1, col1), half-open
    params: ObjectParams

    @classmethod
    def from_params(cls, p: ObjectParams, height: int = HEIGHT, width: int = WIDTH) -> "ObjectAnnotation":
        bitmap = render_shape(p, height, width)
        ext = shape_extent(p.class_id, p.size)
        return cls(p.class_id, p.color_id, bitmap, (p.row0, p.col0, p.row0 + ext, p.col0 + ext), p)


@dataclass
class GridScene:
    canvas: np.ndarray
    background: np.ndarray
    objects: List[ObjectAnnotation]
    scene_id: int
    caption: List[int]


def shape_extent(class_id: int, size: int) -> int:
    """Side length of the square bounding box of a shape."""
    s = size + 1
    if class_id == 0:
        return s + 2
    return 2 * (s + 1) + 1


@functools.lru_cache(maxsize=None)
def _local_shape(class_id: int, size: int) -> np.ndarray:
    ext = shape_extent(class_id, size)
    if class_id == 0:
        local = np.ones((ext, ext), dtype=bool)
    elif class_id == 1:
        mid = ext // 2
        local = np.zeros((ext, ext), dtype=bool)
        local[mid, :] = True
        local[:, mid] = True
    else:
        mid = ext // 2
        rr, cc = np.mgrid[:ext, :ext]
        local = (rr - mid) ** 2 + (cc - mid) ** 2 <= mid ** 2 + 0.5
    local.setflags(write=False)
    return local


def render_shape(p: ObjectParams, height: int = HEIGHT, width: int = WIDTH) -> np.ndarray:
    ext = shape_extent(p.class_id, p.size)
    if p.row0 < 0 or p.col0 < 0 or p.row0 + ext > height or p.col0 + ext > width:
        raise ValueError(f"object {p} does not fit a {height}x{width} canvas")
    out = np.zeros((height, width), dtype=bool)
    out[p.row0:p.row0 + ext, p.col0:p.col0 + ext] = _local_shape(p.class_id, p.size)
    return out


def tight_bbox(bitmap: np.ndarray) -> Tuple[int, int, int, int]:
    rows = np.flatnonzero(bitmap.any(axis=1))
    cols = np.flatnonzero(bitmap.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty bitmap has no bounding box")
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def _dilate(bitmap: np.ndarray) -> np.ndarray:
    out = bitmap.copy()
    out[1:] |= bitmap[:-1]
    out[:-1] |= bitmap[1:]
    out[:, 1:] |= bitmap[:, :-1]
    out[:, :-1] |= bitmap[:, 1:]
    return out


def make_background(rng: np.random.Generator, height: int = HEIGHT, width: int = WIDTH) -> np.ndarray:
    base = rng.uniform(0.35, 0.55, size=CHANNELS)
    return base + rng.uniform(-0.03, 0.03, size=(height, width, CHANNELS))


def paint(background: np.ndarray, objects: Sequence[ObjectAnnotation]) -> np.ndarray:
    canvas = background.copy()
    for obj in objects:
        canvas[obj.bitmap] = PALETTE[obj.color_id]
    return canvas


def encode_caption(objects: Sequence[ObjectAnnotation]) -> List[int]:
    tokens = []
    for o in objects:
        p = o.params
        tokens += [CLASS_BASE + p.class_id, COLOR_BASE + p.color_id,
                   ROW_BASE + p.row0, COL_BASE + p.col0, SIZE_BASE + p.size]
    return tokens


def decode_caption(tokens: Sequence[int]) -> List[ObjectParams]:
    if len(tokens) % 5:
        raise ValueError("caption length must be a multiple of 5")
    out = []
    for i in range(0, len(tokens), 5):
        c, k, r, q, s = tokens[i:i + 5]
        out.append(ObjectParams(c - CLASS_BASE, k - COLOR_BASE, r - ROW_BASE, q - COL_BASE, s - SIZE_BASE))
    return out


def _fits(candidate: np.ndarray, occupied: np.ndarray) -> bool:
    return not (_dilate(candidate) & occupied).any()


def place_object(rng: np.random.Generator, occupied: np.ndarray, class_id: int = None,
                 color_id: int = None, size: int = None, retries: int = 20) -> Optional[ObjectAnnotation]:
    """Random non-touching placement, or ``None`` after ``retries`` failures."""
    height, width = occupied.shape
    for _ in range(retries):
        c = int(rng.integers(len(CLASS_NAMES))) if class_id is None else class_id
        k = int(rng.integers(len(PALETTE))) if color_id is None else color_id
        s = int(rng.integers(N_SIZES)) if size is None else size
        ext = shape_extent(c, s)
        if ext > min(height, width):
            continue
        p = ObjectParams(c, k, int(rng.integers(height - ext + 1)), int(rng.integers(width - ext + 1)), s)
        obj = ObjectAnnotation.from_params(p, height, width)
        if _fits(obj.bitmap, occupied):
            return obj
    return None


def gen_scene(rng: np.random.Generator, n_objects: int = None, height: int = HEIGHT,
              width: int = WIDTH) -> GridScene:
    """1-4 non-touching objects; placement failures only reduce the count."""
    target = int(rng.integers(1, MAX_OBJECTS + 1)) if n_objects is None else n_objects
    scene_id = int(rng.integers(0, 2**63 - 1))
    background = make_background(rng, height, width)
    occupied = np.zeros((height, width), dtype=bool)
    objects: List[ObjectAnnotation] = []
    for _ in range(target):
        obj = place_object(rng, occupied)
        if obj is None:
            continue
        objects.append(obj)
        occupied |= obj.bitmap
    if not objects:  # the smallest shape always fits an empty canvas
        objects.append(ObjectAnnotation.from_params(ObjectParams(0, 0, 0, 0, 0), height, width))
    return GridScene(paint(background, objects), background, objects, scene_id, encode_caption(objects))


# ----------------------------------------------------------------------------
# masks


@dataclass
class MaskSpec:
    kind: MaskKind
    bitmap: np.ndarray
    source_object: Optional[int] = None  # index into scene.objects
    polygon: Optional[np.ndarray] = None  # (20, 2) rows/cols for IRREGULAR


class Rejected(NamedTuple):
    max_iou: float
    bitmap: np.ndarray


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"iou: shapes {a.shape} and {b.shape} differ")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def screen_random_mask(scene: GridScene, bitmap: np.ndarray) -> Union[MaskSpec, Rejected]:
    """Accept unless IoU with some object strictly exceeds the threshold."""
    worst = max((iou(bitmap, o.bitmap) for o in scene.objects), default=0.0)
    if worst > IOU_REJECT:
        return Rejected(worst, bitmap)
    return MaskSpec(MaskKind.RANDOM, bitmap)


def brush_strokes(rng: np.random.Generator, height: int = HEIGHT, width: int = WIDTH,
                  max_strokes: int = 3, max_vertices: int = 4, max_step: float = 5.0,
                  radius_range: Tuple[float, float] = (0.5, 1.5)) -> np.ndarray:
    """Free-form mask: 1..max_strokes random walks stamped with a round brush."""
    rr = np.arange(height)[:, None] + 0.5
    cc = np.arange(width)[None, :] + 0.5
    mask = np.zeros((height, width), dtype=bool)
    for _ in range(int(rng.integers(1, max_strokes + 1))):
        r, c = rng.uniform(0, height), rng.uniform(0, width)
        radius = rng.uniform(*radius_range)
        angle = rng.uniform(0, 2 * np.pi)
        pts = [(r, c)]
        for _ in range(int(rng.integers(1, max_vertices + 1))):
            angle += rng.uniform(-np.pi / 2, np.pi / 2)
            step = rng.uniform(1.0, max_step)
            r = float(np.clip(r + step * np.sin(angle), 0, height))
            c = float(np.clip(c + step * np.cos(angle), 0, width))
            pts.append((r, c))
        stamps = []
        for (r1, c1), (r2, c2) in zip(pts[:-1], pts[1:]):
            n = max(2, int(np.ceil(np.hypot(r2 - r1, c2 - c1) * 4)))
            t = np.linspace(0.0, 1.0, n)
            stamps.append(np.stack([r1 + t * (r2 - r1), c1 + t * (c2 - c1)], axis=1))
        stamps = np.concatenate(stamps)
        d2 = (rr[..., None] - stamps[:, 0]) ** 2 + (cc[..., None] - stamps[:, 1]) ** 2
        mask |= (d2 <= radius ** 2).any(axis=-1)
        if not mask.any():
            mask[min(int(r), height - 1), min(int(c), width - 1)] = True
    return mask


def random_mask(scene: GridScene, rng: np.random.Generator) -> Union[MaskSpec, Rejected]:
    h, w = scene.canvas.shape[:2]
    return screen_random_mask(scene, brush_strokes(rng, h, w))


def bezier_loop(bbox: Tuple[int, int, int, int], jitter: np.ndarray, height: int, width: int,
                n_points: int = N_POLYGON_POINTS) -> np.ndarray:
    """Sample a closed composite quadratic Bezier around ``bbox``.

    Control points are the 4 corners and 4 edge midpoints of the box; each
    is pushed outward from the box centre by ``jitter[i] * diagonal`` and
    clamped to the canvas. Edge midpoints are the on-curve knots, corners
    the off-curve controls. Returns ``(n_points, 2)`` row/col vertices at
    uniform parameter spacing.
    """
    r0, c0, r1, c1 = bbox
    if r1 <= r0 or c1 <= c0:
        raise ValueError(f"degenerate bounding box {bbox}")
    centre = np.array([(r0 + r1) / 2, (c0 + c1) / 2])
    diag = float(np.hypot(r1 - r0, c1 - c0))
    # clockwise from the top edge midpoint: mid, corner, mid, corner, ...
    ctrl = np.array([
        [r0, (c0 + c1) / 2], [r0, c1], [(r0 + r1) / 2, c1], [r1, c1],
        [r1, (c0 + c1) / 2], [r1, c0], [(r0 + r1) / 2, c0], [r0, c0],
    ], dtype=np.float64)
    offsets = ctrl - centre
    unit = offsets / np.linalg.norm(offsets, axis=1, keepdims=True)
    ctrl = ctrl + unit * (np.asarray(jitter)[:, None] * diag)
    ctrl[:, 0] = np.clip(ctrl[:, 0], 0.0, height)
    ctrl[:, 1] = np.clip(ctrl[:, 1], 0.0, width)
    taus = np.arange(n_points) * (4 / n_points)
    seg = taus.astype(int)
    t = (taus - seg)[:, None]
    p0, p1, p2 = ctrl[2 * seg], ctrl[2 * seg + 1], ctrl[(2 * seg + 2) % 8]
    return (1 - t) ** 2 * p0 + 2 * t * (1 - t) * p1 + t ** 2 * p2


def bezier_irregular_mask(obj: ObjectAnnotation, rng: np.random.Generator, height: int = HEIGHT,
                          width: int = WIDTH, max_jitter: float = 0.3, retries: int = 8,
                          source_object: int = None) -> MaskSpec:
    """Irregular object-shaped mask: 20-vertex polygon filled even-odd.

    Jitter is redrawn if the polygon self-intersects; after ``retries``
    failures the unjittered (convex) loop is used.
    """
    r0, c0, r1, c1 = obj.bbox
    if r1 <= r0 or c1 <= c0:
        raise ValueError(f"degenerate bounding box {obj.bbox}")
    poly = None
    for _ in range(retries):
        cand = bezier_loop(obj.bbox, rng.uniform(0.0, max_jitter, size=8), height, width)
        if kernels.polygon_is_simple(cand[:, 0], cand[:, 1]):
            poly = cand
            break
    if poly is None:
        poly = bezier_loop(obj.bbox, np.zeros(8), height, width)
    bitmap = kernels.rasterize_even_odd(poly[:, 0], poly[:, 1], height, width)
    return MaskSpec(MaskKind.IRREGULAR, bitmap, source_object, poly)


def sample_mask_type(rng: np.random.Generator) -> MaskKind:
    u = rng.random()
    if u < MASK_KIND_PROBS[0]:
        return MaskKind.RANDOM
    if u < MASK_KIND_PROBS[0] + MASK_KIND_PROBS[1]:
        return MaskKind.OBJECT
    return MaskKind.IRREGULAR


def inpainting_mask(scene: GridScene, rng: np.random.Generator, max_tries: int = 100) -> Tuple[MaskSpec, int]:
    """Draw a mask of a sampled kind; returns ``(mask, n_rejected)``."""
    kind = sample_mask_type(rng)
    h, w = scene.canvas.shape[:2]
    if kind is MaskKind.RANDOM:
        for n in range(max_tries):
            m = random_mask(scene, rng)
            if isinstance(m, MaskSpec):
                return m, n
        # every stroke collided; fall back to a single background cell
        free = ~np.any([o.bitmap for o in scene.objects], axis=0)
        cells = np.argwhere(free)
        bm = np.zeros((h, w), dtype=bool)
        r, c = cells[int(rng.integers(len(cells)))]
        bm[r, c] = True
        return MaskSpec(MaskKind.RANDOM, bm), max_tries
    idx = int(rng.integers(len(scene.objects)))
    obj = scene.objects[idx]
    if kind is MaskKind.OBJECT:
        return MaskSpec(MaskKind.OBJECT, obj.bitmap.copy(), idx), 0
    return bezier_irregular_mask(obj, rng, h, w, source_object=idx), 0


# ----------------------------------------------------------------------------
# condition tokens and samples


@dataclass
class Slot:
    """One condition token before featurisation; ``None`` fields are unset."""

    kind: str  # task | object | arg | pad
    task: Optional[int] = None
    class_id: Optional[int] = None
    color_id: Optional[int] = None
    row: Optional[int] = None
    col: Optional[int] = None
    size: Optional[int] = None
    mode: Optional[int] = None
    op: Optional[int] = None
    annot: Optional[int] = None

    def as_list(self) -> list:
        return [self.kind, self.task, self.class_id, self.color_id, self.row, self.col,
                self.size, self.mode, self.op, self.annot]


def object_slot(p: ObjectParams, with_color: bool = True, with_position: bool = True) -> Slot:
    return Slot("object", class_id=p.class_id, color_id=p.color_id if with_color else None,
                row=p.row0 if with_position else None, col=p.col0 if with_position else None,
                size=p.size if with_position else None)


@dataclass
class TaskSample:
    task: str
    source: np.ndarray  # (H, W, 3) source image in [0, 1]
    source_valid: np.ndarray  # (H, W) bool; False where masked or absent
    target: np.ndarray  # (H, W, 3)
    slots: List[Slot]
    control: Optional[np.ndarray] = None  # (H, W) edge map for controllable
    mask: Optional[MaskSpec] = None
    meta: Dict = field(default_factory=dict)
    scene: Optional[GridScene] = None  # the scene the sample was built from


def edge_map(canvas: np.ndarray, threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    """Cells whose colour differs from any 4-neighbour by more than ``threshold``."""
    diff_v = np.abs(canvas[1:] - canvas[:-1]).max(axis=-1) > threshold
    diff_h = np.abs(canvas[:, 1:] - canvas[:, :-1]).max(axis=-1) > threshold
    out = np.zeros(canvas.shape[:2], dtype=bool)
    out[1:] |= diff_v
    out[:-1] |= diff_v
    out[:, 1:] |= diff_h
    out[:, :-1] |= diff_h
    return out


def _caption_slots(objects: Sequence[ObjectAnnotation]) -> List[Slot]:
    return [object_slot(o.params) for o in objects]


def _assemble_slots(task: str, caption: List[Slot], args: List[Slot]) -> List[Slot]:
    slots = [Slot("task", task=TASKS.index(task))]
    slots += caption[:MAX_OBJECTS] + [Slot("pad")] * (MAX_OBJECTS - len(caption[:MAX_OBJECTS]))
    slots += args + [Slot("pad")] * (N_ARG_SLOTS - len(args))
    return slots


N_ARG_SLOTS = 3
N_SLOTS = 1 + MAX_OBJECTS + N_ARG_SLOTS


def box_perimeter(bbox: Tuple[int, int, int, int], height: int, width: int) -> np.ndarray:
    r0, c0, r1, c1 = bbox
    out = np.zeros((height, width), dtype=bool)
    out[r0:r1, c0] = out[r0:r1, c1 - 1] = True
    out[r0, c0:c1] = out[r1 - 1, c0:c1] = True
    return out


def grounding_augment(scene: GridScene, obj: ObjectAnnotation, mode: GroundingMode,
                      rng: np.random.Generator) -> TaskSample:
    if not any(o is obj for o in scene.objects):
        raise ValueError("grounding target is not an object of the scene")
    h, w = scene.canvas.shape[:2]
    annot = int(rng.integers(len(ANNOTATION_COLORS)))
    target = scene.canvas.copy()
    if mode is GroundingMode.INSTANCE:
        candidates = [o for o in scene.objects if o.class_id == obj.class_id]
        if not candidates:
            raise ValueError(f"no instance of class {obj.class_id} in scene")
        chosen = candidates[int(rng.integers(len(candidates)))]
        support = box_perimeter(chosen.bbox, h, w)
        referred = object_slot(obj.params, with_color=False, with_position=False)
    elif mode is GroundingMode.BOX:
        chosen = obj
        support = box_perimeter(obj.bbox, h, w)
        referred = object_slot(obj.params, with_position=False)
    else:
        chosen = obj
        support = obj.bitmap.copy()
        referred = object_slot(obj.params, with_position=False)
    target[support] = ANNOTATION_COLORS[annot]
    mode_idx = list(GroundingMode).index(mode)
    args = [Slot("arg", mode=mode_idx, annot=annot), referred]
    return TaskSample(
        task="grounding", source=scene.canvas.copy(), source_valid=np.ones((h, w), dtype=bool),
        target=target, slots=_assemble_slots("grounding", _caption_slots(scene.objects), args),
        meta={"mode": mode.value, "object": next(i for i, o in enumerate(scene.objects) if o is chosen), "support": support,
              "annotation_color": annot},
    )


def _inpainting_sample(rng, scene: GridScene) -> TaskSample:
    mask, rejected = inpainting_mask(scene, rng)
    h, w = scene.canvas.shape[:2]
    source = scene.canvas.copy()
    source[mask.bitmap] = 0.0
    return TaskSample(
        task="mask_inpainting", source=source, source_valid=~mask.bitmap, target=scene.canvas.copy(),
        slots=_assemble_slots("mask_inpainting", _caption_slots(scene.objects), []),
        mask=mask, meta={"mask_kind": mask.kind.value, "rejected": rejected},
    )


def _controllable_sample(rng, scene: GridScene) -> TaskSample:
    h, w = scene.canvas.shape[:2]
    return TaskSample(
        task="controllable", source=np.zeros_like(scene.canvas), source_valid=np.zeros((h, w), dtype=bool),
        target=scene.canvas.copy(), slots=_assemble_slots("controllable", _caption_slots(scene.objects), []),
        control=edge_map(scene.canvas),
    )


def random_glyph(rng: np.random.Generator, side: int = 4, min_cells: int = 6) -> np.ndarray:
    while True:
        g = rng.random((side, side)) < 0.6
        if g.sum() >= min_cells and g.any(axis=0).all() and g.any(axis=1).all():
            return g


def _customized_sample(rng, scene: GridScene) -> TaskSample:
    """Reference: a subject glyph on its own; target: glyph placed into ``scene``."""
    h, w = scene.canvas.shape[:2]
    glyph = random_glyph(rng)
    side = glyph.shape[0]
    color = int(rng.integers(len(PALETTE)))
    ref_bg = make_background(rng, h, w)
    rr, rc = int(rng.integers(h - side + 1)), int(rng.integers(w - side + 1))
    reference = ref_bg.copy()
    reference[rr:rr + side, rc:rc + side][glyph] = PALETTE[color]
    occupied = np.zeros((h, w), dtype=bool)
    for o in scene.objects:
        occupied |= o.bitmap
    placed = None
    for _ in range(40):
        r, c = int(rng.integers(h - side + 1)), int(rng.integers(w - side + 1))
        bm = np.zeros((h, w), dtype=bool)
        bm[r:r + side, c:c + side] = glyph
        if _fits(bm, occupied):
            placed = (r, c, bm)
            break
    objects = list(scene.objects)
    if placed is None:  # make room by dropping scene objects
        objects = []
        r, c = int(rng.integers(h - side + 1)), int(rng.integers(w - side + 1))
        bm = np.zeros((h, w), dtype=bool)
        bm[r:r + side, c:c + side] = glyph
        placed = (r, c, bm)
    r, c, bm = placed
    target = paint(scene.background, objects)
    target[bm] = PALETTE[color]
    args = [Slot("arg", row=r, col=c)]
    return TaskSample(
        task="customized", source=reference, source_valid=np.ones((h, w), dtype=bool), target=target,
        slots=_assemble_slots("customized", _caption_slots(objects), args),
        meta={"glyph": glyph, "glyph_color": color, "placement": (r, c), "reference_at": (rr, rc)},
    )


def apply_edit(scene: GridScene, index: int, op: str, rng: np.random.Generator):
    """Returns ``(target, param_slot, diff_support, new_objects)``."""
    obj = scene.objects[index]
    p = obj.params
    h, w = scene.canvas.shape[:2]
    others = [o for i, o in enumerate(scene.objects) if i != index]
    if op == "move":
        occupied = np.zeros((h, w), dtype=bool)
        for o in others:
            occupied |= o.bitmap
        ext = shape_extent(p.class_id, p.size)
        for _ in range(30):
            r, c = int(rng.integers(h - ext + 1)), int(rng.integers(w - ext + 1))
            if (r, c) == (p.row0, p.col0):
                continue
            moved = ObjectAnnotation.from_params(ObjectParams(p.class_id, p.color_id, r, c, p.size), h, w)
            if _fits(moved.bitmap, occupied):
                objs = others[:index] + [moved] + others[index:]
                return (paint(scene.background, objs), Slot("arg", row=r, col=c),
                        obj.bitmap | moved.bitmap, objs)
        op = "recolor"
    if op == "recolor":
        new_color = int(rng.choice([k for k in range(len(PALETTE)) if k != p.color_id]))
        recol = ObjectAnnotation(p.class_id, new_color, obj.bitmap.copy(), obj.bbox,
                                 ObjectParams(p.class_id, new_color, p.row0, p.col0, p.size))
        objs = others[:index] + [recol] + others[index:]
        return paint(scene.background, objs), Slot("arg", color_id=new_color), obj.bitmap.copy(), objs
    # remove
    return paint(scene.background, others), Slot("arg"), obj.bitmap.copy(), others


def _edit_sample(rng, scene: GridScene) -> TaskSample:
    h, w = scene.canvas.shape[:2]
    index = int(rng.integers(len(scene.objects)))
    op = EDIT_OPS[int(rng.integers(len(EDIT_OPS)))]
    target, param, support, _ = apply_edit(scene, index, op, rng)
    if param.row is not None:
        op_done = "move"
    elif param.color_id is not None:
        op_done = "recolor"
    else:
        op_done = "remove"
    args = [Slot("arg", op=EDIT_OPS.index(op_done)), object_slot(scene.objects[index].params), param]
    return TaskSample(
        task="instruction_edit", source=scene.canvas.copy(), source_valid=np.ones((h, w), dtype=bool),
        target=target, slots=_assemble_slots("instruction_edit", [], args),
        meta={"op": op_done, "object": index, "support": support},
    )


def gen_stage_sample(task: str, rng: np.random.Generator) -> TaskSample:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    scene = gen_scene(rng)
    if task == "mask_inpainting":
        sample = _inpainting_sample(rng, scene)
    elif task == "grounding":
        obj = scene.objects[int(rng.integers(len(scene.objects)))]
        mode = list(GroundingMode)[int(rng.integers(3))]
        sample = grounding_augment(scene, obj, mode, rng)
    elif task == "controllable":
        sample = _controllable_sample(rng, scene)
    elif task == "customized":
        sample = _customized_sample(rng, scene)
    else:
        sample = _edit_sample(rng, scene)
    sample.scene = scene
    return sample


# ----------------------------------------------------------------------------
# featurisation into model tokens

_Y_FIELDS = (
    ("kind", 4), ("task", len(TASKS)), ("class", len(CLASS_NAMES)), ("color", len(PALETTE)),
    ("row", HEIGHT), ("col", WIDTH), ("size", N_SIZES), ("mode", 3), ("op", len(EDIT_OPS)),
    ("annot", len(ANNOTATION_COLORS)), ("control", PATCH * PATCH),
)
Y_OFFSETS = {}
_off = 0
for _name, _width in _Y_FIELDS:
    Y_OFFSETS[_name] = (_off, _width)
    _off += _width
Y_FEATURES = _off
_KINDS = ("task", "object", "arg", "control")

N_PATCHES = (HEIGHT // PATCH) * (WIDTH // PATCH)
X_FEATURES = PATCH * PATCH * CHANNELS
H_FEATURES = PATCH * PATCH * (CHANNELS + 1)
LEN_Y = N_SLOTS + N_PATCHES


def patchify(grid: np.ndarray, patch: int = PATCH) -> np.ndarray:
    """(H, W, C) -> (H/p * W/p, p*p*C), patches in row-major order."""
    if grid.ndim == 2:
        grid = grid[..., None]
    h, w, c = grid.shape
    t = grid.reshape(h // patch, patch, w // patch, patch, c).transpose(0, 2, 1, 3, 4)
    return t.reshape((h // patch) * (w // patch), patch * patch * c)


def unpatchify(tokens: np.ndarray, height: int = HEIGHT, width: int = WIDTH, patch: int = PATCH) -> np.ndarray:
    c = tokens.shape[-1] // (patch * patch)
    t = tokens.reshape(height // patch, width // patch, patch, patch, c).transpose(0, 2, 1, 3, 4)
    return t.reshape(height, width, c)


def _slot_vector(slot: Slot) -> np.ndarray:
    v = np.zeros(Y_FEATURES)
    if slot.kind == "pad":
        return v

    def hot(name, idx):
        if idx is not None:
            off, _ = Y_OFFSETS[name]
            v[off + idx] = 1.0

    hot("kind", _KINDS.index(slot.kind))
    hot("task", slot.task)
    hot("class", slot.class_id)
    hot("color", slot.color_id)
    hot("row", slot.row)
    hot("col", slot.col)
    hot("size", slot.size)
    hot("mode", slot.mode)
    hot("op", slot.op)
    hot("annot", slot.annot)
    return v


def encode_condition(sample: TaskSample) -> np.ndarray:
    """(LEN_Y, Y_FEATURES) condition tokens: slots then control patches."""
    y = np.zeros((LEN_Y, Y_FEATURES))
    for i, s in enumerate(sample.slots):
        y[i] = _slot_vector(s)
    if sample.control is not None:
        off, width = Y_OFFSETS["control"]
        koff, _ = Y_OFFSETS["kind"]
        patches = patchify(sample.control.astype(np.float64))
        y[N_SLOTS:, off:off + width] = patches
        y[N_SLOTS:, koff + _KINDS.index("control")] = 1.0
    return y


def encode_source(sample: TaskSample) -> np.ndarray:
    """(N_PATCHES, H_FEATURES): RGB in [-1, 1] where valid else 0, plus mask channel."""
    rgb = np.where(sample.source_valid[..., None], 2.0 * sample.source - 1.0, 0.0)
    mask = np.zeros(sample.source_valid.shape) if sample.mask is None else sample.mask.bitmap.astype(np.float64)
    return patchify(np.concatenate([rgb, mask[..., None]], axis=-1))


def encode_target(sample: TaskSample) -> np.ndarray:
    return patchify(2.0 * sample.target - 1.0)


def decode_target(tokens: np.ndarray) -> np.ndarray:
    return (unpatchify(tokens) + 1.0) / 2.0


@dataclass
class EncodedBatch:
    """Stacked model inputs for a list of samples."""

    z1: np.ndarray  # (B, N_PATCHES, X_FEATURES) clean target tokens
    y: np.ndarray   # (B, LEN_Y, Y_FEATURES)
    h: np.ndarray   # (B, N_PATCHES, H_FEATURES)
    tasks: List[str]


def encode_batch(samples: Sequence[TaskSample]) -> EncodedBatch:
    return EncodedBatch(
        z1=np.stack([encode_target(s) for s in samples]),
        y=np.stack([encode_condition(s) for s in samples]),
        h=np.stack([encode_source(s) for s in samples]),
        tasks=[s.task for s in samples],
    )
