"""Synthetic weakly labelled scenes, proposal files and run configuration.

Scenes are small RGB images holding 1..k filled shapes. Every class shares
the same family of body colours and differs by silhouette and by a small,
high-contrast "part" patch occupying about a quarter of the box. The part is
the easiest cue to learn, which reproduces the part-domination failure mode
at toy scale.

Proposals mix jittered ground-truth boxes, part-only boxes, boxes grouping
two instances and random boxes.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from .geometry import MIN_AREA, Box, InvalidBox, ProposalSet, ZeroAreaAfterClip, clip_box, iou, iou_matrix

SHAPES = ("square", "disc", "triangle", "diamond", "cross")

# distinctive part colours, one per class
PART_COLORS = np.array([
    [1.0, 0.15, 0.15],
    [0.15, 0.9, 0.2],
    [0.2, 0.35, 1.0],
    [1.0, 0.9, 0.1],
    [0.9, 0.2, 0.9],
])


class SchemaError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class EmptyProposalSet(ValueError):
    pass


@dataclass
class RunConfig:
    # self-training
    p: float = 0.15
    mist_iou_tau: float = 0.2
    fg_iou: float = 0.5
    students: int = 3
    selector: str = "mist"  # mist | top1
    use_regression: bool = True
    literal_image_loss: bool = False
    # dropblock
    drop: str = "concrete"  # off | fixed | concrete
    drop_clamp_tau: float = 0.3
    block_size: int = 3
    gumbel_temperature: float = 0.5
    drop_width: int = 16
    drop_lr_scale: float = 1.0
    # back-propagation schedule
    mode: str = "seqbp"  # vanilla | seqbp
    sub_batch_size: int = 500
    # optimisation
    optimizer: str = "adam"  # adam | sgd
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    iterations: int = 3000
    images_per_batch: int = 2
    seed: int = 0
    # synthetic data
    num_classes: int = 3
    max_instances: int = 3
    image_size: int = 64
    part_purity: float = 0.75
    part_scale: float = 1 / 3
    num_train: int = 200
    num_test: int = 100
    # inference
    nms_iou: float = 0.3
    score_thresh: float = 1e-3
    max_dets: int = 100

    def validate(self) -> "RunConfig":
        checks = [
            (0 < self.p <= 1, "p must lie in (0, 1]"),
            (0 < self.mist_iou_tau <= 1, "mist_iou_tau must lie in (0, 1]"),
            (0 < self.fg_iou <= 1, "fg_iou must lie in (0, 1]"),
            (self.students >= 1, "students must be >= 1"),
            (self.selector in ("mist", "top1"), "selector must be mist or top1"),
            (self.drop in ("off", "fixed", "concrete"), "drop must be off, fixed or concrete"),
            (0 < self.drop_clamp_tau < 1, "drop_clamp_tau must lie in (0, 1)"),
            (self.block_size >= 1 and self.block_size % 2 == 1, "block_size must be odd"),
            (self.gumbel_temperature > 0, "gumbel_temperature must be positive"),
            (self.mode in ("vanilla", "seqbp"), "mode must be vanilla or seqbp"),
            (self.sub_batch_size >= 1, "sub_batch_size must be positive"),
            (self.optimizer in ("adam", "sgd"), "optimizer must be adam or sgd"),
            (self.drop_lr_scale >= 0, "drop_lr_scale must be non-negative"),
            (self.lr > 0 and 0 <= self.momentum < 1 and self.weight_decay >= 0, "bad optimiser settings"),
            (self.iterations >= 1 and self.images_per_batch >= 1, "bad schedule"),
            (2 <= self.num_classes <= len(SHAPES), f"num_classes must lie in [2, {len(SHAPES)}]"),
            (self.max_instances >= 1, "max_instances must be >= 1"),
            (self.image_size >= 32, "image_size must be >= 32"),
            (0 <= self.part_purity <= 1, "part_purity must lie in [0, 1]"),
            (0 < self.part_scale <= 0.5, "part_scale must lie in (0, 0.5]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class SyntheticScene:
    image_id: str
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    instances: list[tuple[int, Box]]
    image_label: np.ndarray  # (K,) {0, 1}
    proposals: ProposalSet
    parts: list[Box] = field(default_factory=list)

    @property
    def gt_classes(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.image_label)]


def label_from_instances(instances: Iterable[tuple[int, Box]], num_classes: int) -> np.ndarray:
    y = np.zeros(num_classes, dtype=np.int64)
    for c, _ in instances:
        y[c] = 1
    return y


def _shape_mask(shape: str, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w
    v = (yy + 0.5) / h
    if shape == "square":
        return np.ones((h, w), dtype=bool)
    if shape == "disc":
        return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    if shape == "triangle":
        return np.abs(u - 0.5) <= 0.5 * v
    if shape == "diamond":
        return np.abs(u - 0.5) + np.abs(v - 0.5) <= 0.5
    if shape == "cross":
        return (np.abs(u - 0.5) <= 0.2) | (np.abs(v - 0.5) <= 0.2)
    raise ValueError(shape)


def _part_box(shape: str, b: Box, scale: float = 1 / 3) -> Box:
    """Sub-box with sides ``scale`` times the object's that lies on the shape."""
    w, h = b.width, b.height
    cx, cy = b.x1 + 0.5 * w, b.y1 + 0.5 * h
    if shape == "triangle":
        # the base of the triangle is solid
        return Box(cx - 0.5 * scale * w, b.y2 - scale * h, cx + 0.5 * scale * w, b.y2)
    if shape in ("disc", "diamond", "cross"):
        return Box(cx - 0.5 * scale * w, cy - 0.5 * scale * h, cx + 0.5 * scale * w, cy + 0.5 * scale * h)
    return Box(b.x1, b.y1, b.x1 + scale * w, b.y1 + scale * h)


def _paint(image: np.ndarray, rng: np.random.Generator, cls: int, b: Box, part: Box, part_color: np.ndarray) -> None:
    x1, y1, x2, y2 = (int(round(v)) for v in b.as_tuple())
    mask = _shape_mask(SHAPES[cls], y2 - y1, x2 - x1)
    body = rng.uniform(0.45, 0.75) * np.ones(3) + rng.normal(0, 0.03, 3)
    region = image[:, y1:y2, x1:x2]
    region[:, mask] = body[:, None] + rng.normal(0, 0.02, (3, int(mask.sum())))
    px1, py1, px2, py2 = (int(round(v)) for v in part.as_tuple())
    pm = np.zeros_like(mask)
    pm[max(py1 - y1, 0):py2 - y1, max(px1 - x1, 0):px2 - x1] = True
    pm &= mask
    region[:, pm] = part_color[:, None]


def _jitter(rng: np.random.Generator, b: Box, shift: float, scale: float, size: tuple[int, int]) -> Box | None:
    w, h = b.width, b.height
    cx = b.x1 + 0.5 * w + rng.uniform(-shift, shift) * w
    cy = b.y1 + 0.5 * h + rng.uniform(-shift, shift) * h
    nw = w * np.exp(rng.uniform(-scale, scale))
    nh = h * np.exp(rng.uniform(-scale, scale))
    try:
        return clip_box(Box(cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2), size, eps=4.0)
    except (ZeroAreaAfterClip, InvalidBox):
        return None


def _random_box(rng: np.random.Generator, size: tuple[int, int], min_side: float) -> Box:
    W, H = size
    w = rng.uniform(min_side, 0.7 * W)
    h = rng.uniform(min_side, 0.7 * H)
    x1 = rng.uniform(0, W - w)
    y1 = rng.uniform(0, H - h)
    return Box(x1, y1, x1 + w, y1 + h)


def _proposals(rng, instances, parts, size, n_total) -> list[Box]:
    props: list[Box] = []
    for _, b in instances:
        # guaranteed hits first, then looser jitter
        good = 0
        while good < 3:
            j = _jitter(rng, b, 0.12, 0.18, size)
            if j is not None and iou(j, b) >= 0.5:
                props.append(j)
                good += 1
        for _ in range(rng.integers(6, 11)):
            j = _jitter(rng, b, 0.25, 0.35, size)
            if j is not None:
                props.append(j)
    for p in parts:
        for _ in range(rng.integers(2, 5)):
            j = _jitter(rng, p, 0.15, 0.2, size)
            if j is not None:
                props.append(j)
    for i in range(len(instances)):
        for k in range(i + 1, len(instances)):
            a, b = instances[i][1], instances[k][1]
            g = Box(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))
            for _ in range(2):
                j = _jitter(rng, g, 0.05, 0.1, size)
                if j is not None:
                    props.append(j)
    min_side = 0.12 * min(size)
    while len(props) < n_total:
        props.append(_random_box(rng, size, min_side))
    order = rng.permutation(len(props))
    return [props[i] for i in order]


def generate_scene(
    rng: np.random.Generator,
    num_classes: int = 3,
    max_instances: int = 3,
    image_size: int = 64,
    image_id: str = "scene",
    num_proposals: tuple[int, int] = (50, 120),
    part_purity: float = 0.75,
    part_scale: float = 1 / 3,
) -> SyntheticScene:
    """One scene. A part gets its own class colour with probability
    ``part_purity`` and the next class's colour otherwise, so the part alone
    is a strong but ambiguous cue while part plus silhouette is not. Parts
    span ``part_scale`` of the object's sides."""
    if num_classes < 2 or num_classes > len(SHAPES):
        raise ValueError(f"num_classes must lie in [2, {len(SHAPES)}]")
    W = H = image_size
    size = (W, H)
    image = rng.uniform(0.0, 0.25) + rng.normal(0.0, 0.05, (3, H, W))
    n_inst = int(rng.integers(1, max_instances + 1))
    instances: list[tuple[int, Box]] = []
    parts: list[Box] = []
    lo, hi = 0.25 * image_size, 0.5 * image_size
    attempts = 0
    while len(instances) < n_inst and attempts < 200:
        attempts += 1
        side = rng.uniform(lo, hi)
        aspect = np.exp(rng.uniform(-0.25, 0.25))
        w, h = side * aspect, side / aspect
        x1 = float(np.floor(rng.uniform(0, W - w)))
        y1 = float(np.floor(rng.uniform(0, H - h)))
        b = Box(x1, y1, float(np.ceil(x1 + w)), float(np.ceil(y1 + h)))
        if b.x2 > W or b.y2 > H:
            continue
        if any(iou(b, o) > 0.05 for _, o in instances):
            continue
        instances.append((int(rng.integers(num_classes)), b))
    for c, b in instances:
        part = _part_box(SHAPES[c], b, part_scale)
        pc = c if rng.random() < part_purity else (c + 1) % num_classes
        _paint(image, rng, c, b, part, PART_COLORS[pc])
        parts.append(part)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    n_total = int(rng.integers(num_proposals[0], num_proposals[1] + 1))
    props = _proposals(rng, instances, parts, size, n_total)
    return SyntheticScene(
        image_id=image_id,
        image=image,
        instances=instances,
        image_label=label_from_instances(instances, num_classes),
        proposals=ProposalSet(props, image_id=image_id, image_size=size),
        parts=parts,
    )


def generate_dataset(seed: int, n: int, prefix: str = "img", **kwargs) -> list[SyntheticScene]:
    """``n`` scenes; scene ``i`` depends only on ``(seed, i)``."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [generate_scene(np.random.default_rng(ss), image_id=f"{prefix}{i:05d}", **kwargs)
            for i, ss in enumerate(children)]


def proposal_recall(scenes: Iterable[SyntheticScene], thresh: float = 0.5) -> float:
    hit = total = 0
    for s in scenes:
        gt = np.asarray([b.as_tuple() for _, b in s.instances])
        if len(gt) == 0:
            continue
        best = iou_matrix(gt, s.proposals.as_array()).max(axis=1)
        hit += int((best >= thresh).sum())
        total += len(gt)
    return hit / max(total, 1)


# proposal files: one JSON object per line
# {"image_id": str, "x1": .., "y1": .., "x2": .., "y2": .., "objectness": optional}

def write_proposals(path: str | os.PathLike, proposal_sets: Iterable[ProposalSet]) -> None:
    with open(path, "w") as fp:
        for ps in proposal_sets:
            obj = ps.objectness or [None] * len(ps)
            for b, o in zip(ps.boxes, obj):
                rec = {"image_id": ps.image_id, "x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2}
                if o is not None:
                    rec["objectness"] = o
                fp.write(json.dumps(rec) + "\n")


def load_proposals(path: str | os.PathLike, image_sizes: dict[str, tuple[int, int]] | None = None
                   ) -> dict[str, ProposalSet]:
    """Read a proposal file into per-image :class:`ProposalSet` objects.

    Boxes are clipped to the image when its size is known; boxes that collapse
    below the minimum area are dropped, and an image left with no box raises
    :class:`EmptyProposalSet`. Malformed lines raise :class:`SchemaError`.
    """
    rows: dict[str, list[tuple[Box, float | None]]] = {}
    with open(path) as fp:
        for lineno, line in enumerate(fp, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"invalid JSON ({e.msg})", lineno) from None
            if not isinstance(rec, dict):
                raise SchemaError("record must be an object", lineno)
            missing = [k for k in ("image_id", "x1", "y1", "x2", "y2") if k not in rec]
            if missing:
                raise SchemaError(f"missing keys {missing}", lineno)
            try:
                coords = [float(rec[k]) for k in ("x1", "y1", "x2", "y2")]
                box = Box(*coords)
            except (TypeError, ValueError) as e:
                raise SchemaError(str(e), lineno) from None
            obj = rec.get("objectness")
            if obj is not None and not isinstance(obj, (int, float)):
                raise SchemaError("objectness must be a number", lineno)
            rows.setdefault(str(rec["image_id"]), []).append((box, obj))

    out: dict[str, ProposalSet] = {}
    for image_id, items in rows.items():
        if image_sizes is not None and image_id in image_sizes:
            size = tuple(image_sizes[image_id])
        else:
            size = (int(np.ceil(max(b.x2 for b, _ in items))), int(np.ceil(max(b.y2 for b, _ in items))))
        boxes, objs = [], []
        for b, o in items:
            try:
                boxes.append(clip_box(b, size, eps=MIN_AREA))
                objs.append(o)
            except ZeroAreaAfterClip:
                continue
        if not boxes:
            raise EmptyProposalSet(f"no valid proposals for image {image_id!r}")
        has_obj = any(o is not None for o in objs)
        out[image_id] = ProposalSet(boxes, image_id=image_id, image_size=size,
                                    objectness=objs if has_obj else None)
    return out


def save_dataset(scenes: list[SyntheticScene], root: str | os.PathLike) -> Path:
    """Write images, proposals, annotations and a manifest under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    manifest = []
    for s in scenes:
        rel = f"images/{s.image_id}.npy"
        np.save(root / rel, s.image)
        manifest.append({"image_id": s.image_id, "path": rel, "label": s.image_label.tolist(),
                         "width": int(s.image.shape[2]), "height": int(s.image.shape[1])})
    write_proposals(root / "proposals.jsonl", [s.proposals for s in scenes])
    with open(root / "annotations.jsonl", "w") as fp:
        for s in scenes:
            for (c, b), part in zip(s.instances, s.parts):
                fp.write(json.dumps({"image_id": s.image_id, "cls": c, "box": list(b.as_tuple()),
                                     "part": list(part.as_tuple())}) + "\n")
    (root / "manifest.json").write_text(json.dumps({"images": manifest}, indent=1))
    return root


def load_dataset(root: str | os.PathLike) -> list[SyntheticScene]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())["images"]
    sizes = {m["image_id"]: (m["width"], m["height"]) for m in manifest}
    props = load_proposals(root / "proposals.jsonl", sizes)
    inst: dict[str, list] = {}
    parts: dict[str, list] = {}
    with open(root / "annotations.jsonl") as fp:
        for line in fp:
            rec = json.loads(line)
            inst.setdefault(rec["image_id"], []).append((int(rec["cls"]), Box.from_seq(rec["box"])))
            parts.setdefault(rec["image_id"], []).append(Box.from_seq(rec["part"]))
    scenes = []
    for m in manifest:
        iid = m["image_id"]
        scenes.append(SyntheticScene(
            image_id=iid,
            image=np.load(root / m["path"]),
            instances=inst.get(iid, []),
            image_label=np.asarray(m["label"], dtype=np.int64),
            proposals=props[iid],
            parts=parts.get(iid, []),
        ))
    return scenes
