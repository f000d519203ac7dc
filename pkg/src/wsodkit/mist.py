"""Multiple instance self-training.

Pseudo boxes are mined per ground-truth class from the top ``p`` fraction of
regions, thinned with an IoU-diversity filter, and turned into per-region
class labels, box-regression targets and loss weights for a chain of student
blocks. Each student block then supervises the next one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import IO, Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .geometry import ProposalSet, decode_deltas, encode_deltas, greedy_diverse_indices, iou_matrix
from .milhead import LOG_EPS

DEFAULT_P = 0.15
DEFAULT_TAU = 0.2
DEFAULT_FG_IOU = 0.5


class PseudoBox(NamedTuple):
    index: int  # region index into the proposal set
    box: tuple[float, float, float, float]
    score: float


@dataclass
class PseudoLabelSet:
    """Self-training supervision for one image.

    ``labels[r]`` is a class index in ``[0, num_classes)`` or ``num_classes`` for
    background. ``targets[r]`` is only meaningful where ``foreground[r]``.
    """

    pseudo_boxes: dict[int, list[PseudoBox]]
    labels: np.ndarray
    targets: np.ndarray
    foreground: np.ndarray
    weights: np.ndarray
    num_classes: int

    @property
    def background_index(self) -> int:
        return self.num_classes

    def one_hot(self) -> np.ndarray:
        out = np.zeros((len(self.labels), self.num_classes + 1))
        out[np.arange(len(self.labels)), self.labels] = 1.0
        return out


def _as_array(proposals) -> np.ndarray:
    if isinstance(proposals, ProposalSet):
        return proposals.as_array()
    return np.asarray(proposals, dtype=np.float64).reshape(-1, 4)


def pool_size(p: float, num_regions: int) -> int:
    """``ceil(p * |R|)`` with a floor of one."""
    # round first so that e.g. 0.15 * 100 does not ceil to 16
    return max(1, math.ceil(round(p * num_regions, 9)))


def rank_regions(scores: np.ndarray) -> np.ndarray:
    """Descending order; ties keep the lower region index first."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def mist_select(
    scores: np.ndarray,
    proposals,
    gt_classes: Iterable[int],
    p: float = DEFAULT_P,
    tau: float = DEFAULT_TAU,
    top1: bool = False,
) -> dict[int, list[PseudoBox]]:
    """Mine diverse, high-scoring pseudo boxes for each ground-truth class.

    Args:
        scores: ``(|R|, |C|)`` region scores.
        proposals: ``ProposalSet`` or ``(|R|, 4)`` box array.
        gt_classes: classes present in the image label.
        p: fraction of ranked regions forming the candidate pool.
        tau: a candidate is kept only if its IoU with every kept box is < tau.
        top1: keep only the best region per class (single-box baseline).

    Returns:
        class -> pseudo boxes in descending score order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    boxes = _as_array(proposals)
    if scores.ndim != 2 or scores.shape[0] != len(boxes):
        raise ValueError(f"scores {scores.shape} do not match {len(boxes)} proposals")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    gt_classes = sorted(set(int(c) for c in gt_classes))
    if not gt_classes:
        raise ValueError("at least one ground-truth class is required")

    k = 1 if top1 else pool_size(p, len(boxes))
    out: dict[int, list[PseudoBox]] = {}
    for c in gt_classes:
        pool = rank_regions(scores[:, c])[:k]
        keep = greedy_diverse_indices(boxes, pool, tau)
        out[c] = [PseudoBox(int(i), tuple(boxes[i]), float(scores[i, c])) for i in keep]
    return out


def resolve_conflicts(candidates: Mapping[int, Sequence[PseudoBox]]) -> dict[int, list[PseudoBox]]:
    """Give every region selected by several classes to its best-scoring class.

    Ties go to the lower class index.
    """
    owner: dict[int, tuple[float, int]] = {}
    for c in sorted(candidates):
        for pb in candidates[c]:
            best = owner.get(pb.index)
            # strict '>' keeps the earlier (lower) class on ties
            if best is None or pb.score > best[0]:
                owner[pb.index] = (pb.score, c)
    return {c: [pb for pb in candidates[c] if owner[pb.index][1] == c] for c in sorted(candidates)}


def assign_targets(
    proposals,
    pseudo: Mapping[int, Sequence[PseudoBox]],
    num_classes: int,
    fg_iou: float = DEFAULT_FG_IOU,
) -> PseudoLabelSet:
    """Label every region from its best-overlapping pseudo box.

    Regions with IoU >= ``fg_iou`` take that box's class, a regression target
    onto it and its teacher score as weight. Other regions become background
    but keep the weight of their best-overlapping pseudo box. Without any
    pseudo box everything is background with zero weight.
    """
    boxes = _as_array(proposals)
    n = len(boxes)
    flat = [(c, pb) for c in sorted(pseudo) for pb in pseudo[c]]
    labels = np.full(n, num_classes, dtype=np.int64)
    targets = np.zeros((n, 4))
    foreground = np.zeros(n, dtype=bool)
    weights = np.zeros(n)
    if flat:
        pb_boxes = np.asarray([pb.box for _, pb in flat])
        pb_cls = np.asarray([c for c, _ in flat])
        pb_score = np.asarray([pb.score for _, pb in flat])
        ious = iou_matrix(boxes, pb_boxes)
        best = ious.argmax(axis=1)
        best_iou = ious[np.arange(n), best]
        weights = pb_score[best]
        foreground = best_iou >= fg_iou
        labels[foreground] = pb_cls[best[foreground]]
        if foreground.any():
            targets[foreground] = encode_deltas(boxes[foreground], pb_boxes[best[foreground]])
    return PseudoLabelSet(
        pseudo_boxes={c: list(v) for c, v in pseudo.items()},
        labels=labels,
        targets=targets,
        foreground=foreground,
        weights=weights,
        num_classes=num_classes,
    )


def smooth_l1(x: Tensor | float) -> Tensor:
    x = torch.as_tensor(x)
    ax = x.abs()
    return torch.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


@dataclass
class StudentOutput:
    logits: Tensor  # (|R|, |C| + 1), background last
    deltas: Tensor  # (|R|, 4), class agnostic

    @property
    def probs(self) -> Tensor:
        return torch.softmax(self.logits, dim=1)


class StudentBlock(nn.Module):
    """A refinement classifier (with background) plus a box regressor."""

    def __init__(self, in_dim: int, num_classes: int):
        super().__init__()
        self.cls = nn.Linear(in_dim, num_classes + 1)
        self.reg = nn.Linear(in_dim, 4)
        nn.init.normal_(self.cls.weight, std=0.01)
        nn.init.normal_(self.reg.weight, std=0.001)
        nn.init.zeros_(self.cls.bias)
        nn.init.zeros_(self.reg.bias)

    def forward(self, emb: Tensor) -> StudentOutput:
        return StudentOutput(self.cls(emb), self.reg(emb))


def student_loss(block: StudentOutput, labels: PseudoLabelSet, use_regression: bool = True) -> Tensor:
    """Weighted region loss: Smooth-L1 regression on foreground plus cross-entropy.

    The cross-entropy term is divided by the number of foreground classes and
    the total by the number of regions.
    """
    logits = block.logits
    n = logits.shape[0]
    like = dict(dtype=logits.dtype, device=logits.device)
    lab = torch.as_tensor(labels.labels, device=logits.device)
    w = torch.as_tensor(labels.weights, **like)
    logp = torch.log(torch.softmax(logits, dim=1).clamp_min(LOG_EPS))
    per_region = -logp[torch.arange(n, device=logits.device), lab] / labels.num_classes
    if use_regression:
        fg = torch.as_tensor(labels.foreground, device=logits.device)
        t = torch.as_tensor(labels.targets, **like)
        reg = smooth_l1(t - block.deltas).sum(dim=1)
        per_region = per_region + torch.where(fg, reg, torch.zeros_like(reg))
    return (w * per_region).sum() / n


def ensemble_chain(
    teacher_scores: np.ndarray,
    students: Sequence[StudentOutput],
    proposals,
    gt_classes: Iterable[int],
    num_classes: int,
    p: float = DEFAULT_P,
    tau: float = DEFAULT_TAU,
    fg_iou: float = DEFAULT_FG_IOU,
    use_regression: bool = True,
    top1: bool = False,
) -> tuple[list[Tensor], list[PseudoLabelSet]]:
    """Train each student on pseudo labels mined from its predecessor.

    Student 1 learns from ``teacher_scores``; student k+1 from the
    foreground columns of student k's class probabilities.
    """
    if not students:
        raise ValueError("need at least one student block")
    gt_classes = list(gt_classes)
    losses, label_sets = [], []
    source = np.asarray(teacher_scores, dtype=np.float64)
    for block in students:
        picked = mist_select(source, proposals, gt_classes, p=p, tau=tau, top1=top1)
        labels = assign_targets(proposals, resolve_conflicts(picked), num_classes, fg_iou=fg_iou)
        losses.append(student_loss(block, labels, use_regression=use_regression))
        label_sets.append(labels)
        with torch.no_grad():
            source = block.probs[:, :num_classes].double().cpu().numpy()
    return losses, label_sets


def inference_average(students: Sequence[StudentOutput], proposals, use_regression: bool = True):
    """Average student predictions.

    Returns ``(scores, boxes)``: mean foreground probabilities ``(|R|, |C|)``
    and the mean of each block's refined boxes ``(|R|, 4)`` (the proposals
    themselves when regression is off).
    """
    if not students:
        raise ValueError("need at least one student block")
    boxes = _as_array(proposals)
    with torch.no_grad():
        probs = torch.stack([s.probs for s in students]).mean(dim=0)
        scores = probs[:, :-1].double().cpu().numpy()
        if use_regression:
            refined = [decode_deltas(boxes, s.deltas.double().cpu().numpy()) for s in students]
            boxes = np.mean(refined, axis=0)
    return scores, boxes


def dump_pseudo_labels(fp: IO[str], image_id: str, label_sets: Sequence[PseudoLabelSet]) -> None:
    """Append one JSON line per pseudo box: image id, block, class, box and teacher score."""
    for block, labels in enumerate(label_sets):
        for c in sorted(labels.pseudo_boxes):
            for pb in labels.pseudo_boxes[c]:
                x1, y1, x2, y2 = pb.box
                rec = dict(image_id=image_id, block=block, cls=int(c), region=pb.index,
                           x1=x1, y1=y1, x2=x2, y2=y2, score=pb.score)
                fp.write(json.dumps(rec) + "\n")
