"""Training loop, inference and evaluation for the toy detector."""

from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import RunConfig, SyntheticScene, generate_dataset
from .dropblock import flip_gradients
from .evalmetrics import Detection, GroundTruth, evaluate
from .geometry import clip_boxes, nms
from .model import ImageTarget, WSODNet, rois_tensor
from .seqbp import NonFiniteLoss, seqbp_step, vanilla_step

log = logging.getLogger(__name__)

DATA_SEED = 2024


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, checkpoint: str | None):
        self.iteration = iteration
        self.checkpoint = checkpoint
        super().__init__(f"non-finite loss at iteration {iteration}; last good checkpoint: {checkpoint}")


@dataclass
class RunRecord:
    config: dict
    seed: int
    losses: list[float] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    bench: list[dict] = field(default_factory=list)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))


def make_datasets(cfg: RunConfig, data_seed: int = DATA_SEED):
    kw = dict(num_classes=cfg.num_classes, max_instances=cfg.max_instances, image_size=cfg.image_size,
              part_purity=cfg.part_purity, part_scale=cfg.part_scale)
    train = generate_dataset(data_seed, cfg.num_train, prefix="train", **kw)
    test = generate_dataset(data_seed + 1, cfg.num_test, prefix="test", **kw)
    return train, test


def image_tensor(scene: SyntheticScene, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(scene.image, dtype=dtype).unsqueeze(0)


def lr_at(cfg: RunConfig, it: int) -> float:
    """Single x0.1 decay at two thirds of training."""
    return cfg.lr * (0.1 if it >= (2 * cfg.iterations) // 3 else 1.0)


def make_optimizer(cfg: RunConfig, model: WSODNet) -> torch.optim.Optimizer:
    """Detector and adversary share one optimiser; the adversary's lr is scaled by ``drop_lr_scale``."""
    groups = [{"params": model.detector_parameters(), "lr_scale": 1.0}]
    adversary = model.adversary_parameters()
    if adversary:
        groups.append({"params": adversary, "lr_scale": cfg.drop_lr_scale})
    for g in groups:
        g["lr"] = cfg.lr * g["lr_scale"]
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(groups, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return torch.optim.Adam(groups, lr=cfg.lr, weight_decay=cfg.weight_decay)


def train(cfg: RunConfig, scenes: Sequence[SyntheticScene], out_dir: str | os.PathLike | None = None,
          dtype=torch.float32,
          callback: Callable[[int, float], None] | None = None):
    """Train a fresh model; returns ``(model, RunRecord)``.

    Every iteration samples ``images_per_batch`` scenes, accumulates their
    gradients (averaged), reverses the DropBlock adversary's gradients and
    takes one optimiser step.
    """
    cfg.validate()
    # weight decay drives dead units into subnormal range, which slows CPU matmuls several-fold
    torch.set_flush_denormal(True)
    try:
        return _train(cfg, scenes, out_dir, dtype, callback)
    finally:
        torch.set_flush_denormal(False)


def _train(cfg, scenes, out_dir, dtype, callback):
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = WSODNet.from_config(cfg).to(dtype)
    model.train()
    graph = model.graph()
    opt = make_optimizer(cfg, model)
    adversary = model.adversary_parameters()
    record = RunRecord(config=cfg.to_dict(), seed=cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    last_good = copy.deepcopy(model.state_dict())
    order: list[int] = []

    for it in range(cfg.iterations):
        for g in opt.param_groups:
            g["lr"] = lr_at(cfg, it) * g["lr_scale"]
        opt.zero_grad(set_to_none=True)
        batch_loss = 0.0
        for _ in range(cfg.images_per_batch):
            if not order:
                order = list(rng.permutation(len(scenes)))
            s = scenes[order.pop()]
            boxes = s.proposals.as_array()
            target = ImageTarget(boxes, s.image_label)
            img = image_tensor(s, dtype)
            rois = rois_tensor(boxes, dtype)
            noise = graph.sample_noise(len(boxes), gen, dtype)
            try:
                if cfg.mode == "seqbp":
                    res = seqbp_step(graph, img, rois, target, cfg.sub_batch_size, noise=noise)
                else:
                    res = vanilla_step(graph, img, rois, target, noise=noise)
            except NonFiniteLoss:
                ckpt = None
                if out is not None:
                    out.mkdir(parents=True, exist_ok=True)
                    ckpt = str(out / "checkpoint_last_good.pt")
                    torch.save({"model": last_good, "config": cfg.to_dict()}, ckpt)
                raise TrainingDiverged(it, ckpt) from None
            batch_loss += res.loss
        for prm in model.parameters():
            if prm.grad is not None:
                prm.grad /= cfg.images_per_batch
        flip_gradients(adversary)
        opt.step()
        loss = batch_loss / cfg.images_per_batch
        record.losses.append(loss)
        if callback is not None:
            callback(it, loss)
        if (it + 1) % 50 == 0:
            last_good = copy.deepcopy(model.state_dict())
            log.info("iter %d loss %.4f", it + 1, loss)

    if out is not None:
        save_checkpoint(model, cfg, out / "checkpoint.pt")
    return model, record


def save_checkpoint(model: WSODNet, cfg: RunConfig, path: str | os.PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({"model": model.state_dict(), "config": cfg.to_dict()}, path)


def load_checkpoint(path: str | os.PathLike):
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cfg = RunConfig.from_dict(blob["config"])
    model = WSODNet.from_config(cfg)
    model.load_state_dict(blob["model"])
    model.eval()
    return model, cfg


def detect(model: WSODNet, scene: SyntheticScene, cfg: RunConfig) -> list[Detection]:
    """Per-class NMS and score thresholding over the averaged student predictions."""
    dtype = next(model.parameters()).dtype
    boxes = scene.proposals.as_array()
    scores, refined = model.predict(image_tensor(scene, dtype), boxes)
    refined = clip_boxes(refined, scene.proposals.image_size)
    valid = (refined[:, 2] > refined[:, 0]) & (refined[:, 3] > refined[:, 1])
    dets = []
    for c in range(scores.shape[1]):
        sel = np.flatnonzero(valid & (scores[:, c] >= cfg.score_thresh))
        if len(sel) == 0:
            continue
        keep = sel[nms(refined[sel], scores[sel, c], cfg.nms_iou)]
        dets += [Detection(scene.image_id, c, tuple(refined[i]), float(scores[i, c])) for i in keep]
    dets.sort(key=lambda d: -d.confidence)
    return dets[: cfg.max_dets]


def ground_truth(scenes: Sequence[SyntheticScene]) -> list[GroundTruth]:
    return [GroundTruth(s.image_id, c, b.as_tuple()) for s in scenes for c, b in s.instances]


def evaluate_model(model: WSODNet, test: Sequence[SyntheticScene], cfg: RunConfig,
                   train_scenes: Sequence[SyntheticScene] | None = None) -> dict:
    """AP50 and AR on ``test``; CorLoc on ``train_scenes`` when given."""
    dets = [d for s in test for d in detect(model, s, cfg)]
    kw = {}
    if train_scenes is not None:
        kw = dict(corloc_dets=[d for s in train_scenes for d in detect(model, s, cfg)],
                  corloc_gts=ground_truth(train_scenes))
    return evaluate(dets, ground_truth(test), **kw)
