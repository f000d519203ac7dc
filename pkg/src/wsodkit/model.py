"""Toy weakly supervised detector laid out as Base -> RoI pool -> Neck -> Head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torchvision.ops import roi_align

from .dropblock import ConcreteDropBlock, FixedDropBlock, sample_gumbel_noise
from .milhead import MILHead, image_loss
from .mist import PseudoLabelSet, StudentBlock, ensemble_chain, inference_average
from .seqbp import StageGraph


@dataclass
class ImageTarget:
    boxes: np.ndarray  # (N, 4) proposals
    label: np.ndarray  # (K,) image label

    @property
    def gt_classes(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.label)]


@dataclass
class HeadAux:
    img_loss: float
    roi_losses: list[float]
    label_sets: list[PseudoLabelSet] = field(default_factory=list)


class Base(nn.Module):
    def __init__(self, widths=(16, 32)):
        super().__init__()
        layers, c = [], 3
        for i, w in enumerate(widths):
            layers += [nn.Conv2d(c, w, 3, padding=1), nn.ReLU()]
            if i < len(widths) - 1:
                layers.append(nn.MaxPool2d(2))
            c = w
        self.body = nn.Sequential(*layers)
        self.out_channels = c
        self.stride = 2 ** (len(widths) - 1)

    def forward(self, image: Tensor) -> Tensor:
        return self.body(image)


class RoIPool:
    """RoIAlign to ``size x size`` cells; RoIs are ``(N, 5)`` with batch index first."""

    def __init__(self, size: int = 7, spatial_scale: float = 1.0, sampling_ratio: int = 1):
        self.size = size
        self.spatial_scale = spatial_scale
        self.sampling_ratio = sampling_ratio

    def __call__(self, feature: Tensor, rois: Tensor) -> Tensor:
        return roi_align(feature, rois, (self.size, self.size), self.spatial_scale,
                         sampling_ratio=self.sampling_ratio, aligned=True)


class RegionNeck(nn.Module):
    """Optional DropBlock on pooled features followed by a two-layer MLP."""

    def __init__(self, in_channels: int, pool_size: int, hidden: int = 128, out_dim: int = 64,
                 drop: nn.Module | None = None):
        super().__init__()
        self.drop = drop
        self.pool_size = pool_size
        self.fc1 = nn.Linear(in_channels * pool_size * pool_size, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)
        self.out_dim = out_dim

    def sample_noise(self, n: int, generator=None, dtype=torch.float32) -> Tensor | None:
        if self.drop is None or not self.training:
            return None
        return sample_gumbel_noise((n, self.pool_size, self.pool_size), generator=generator, dtype=dtype)

    def forward(self, pooled: Tensor, noise: Tensor | None = None) -> Tensor:
        x = pooled
        if self.drop is not None:
            x = self.drop(x, noise=noise)
        x = F.relu(self.fc1(x.flatten(1)))
        return F.relu(self.fc2(x))


class WSODHead(nn.Module):
    """MIL teacher plus a chain of student blocks; returns ``(loss, HeadAux)``."""

    def __init__(self, in_dim: int, num_classes: int, students: int = 3, p: float = 0.15,
                 tau: float = 0.2, fg_iou: float = 0.5, use_regression: bool = True,
                 top1: bool = False, literal_image_loss: bool = False):
        super().__init__()
        self.num_classes = num_classes
        self.mil = MILHead(in_dim, num_classes)
        self.students = nn.ModuleList([StudentBlock(in_dim, num_classes) for _ in range(students)])
        self.p, self.tau, self.fg_iou = p, tau, fg_iou
        self.use_regression = use_regression
        self.top1 = top1
        self.literal_image_loss = literal_image_loss

    def forward(self, emb: Tensor, target: ImageTarget):
        sm = self.mil(emb)
        y = torch.as_tensor(target.label, dtype=emb.dtype)
        l_img = image_loss(sm.phi, y, literal=self.literal_image_loss)
        outs = [s(emb) for s in self.students]
        teacher = sm.s_joint.detach().double().cpu().numpy()
        roi_losses, label_sets = ensemble_chain(
            teacher, outs, target.boxes, target.gt_classes, self.num_classes,
            p=self.p, tau=self.tau, fg_iou=self.fg_iou,
            use_regression=self.use_regression, top1=self.top1)
        loss = l_img + sum(roi_losses)
        aux = HeadAux(float(l_img.detach()), [float(v.detach()) for v in roi_losses], label_sets)
        return loss, aux


class WSODNet(nn.Module):
    def __init__(self, num_classes: int, students: int = 3, drop: str = "concrete",
                 drop_tau: float = 0.3, block_size: int = 3, temperature: float = 0.5,
                 p: float = 0.15, tau: float = 0.2, fg_iou: float = 0.5,
                 use_regression: bool = True, top1: bool = False, literal_image_loss: bool = False,
                 base_widths=(16, 32), pool_size: int = 7, hidden: int = 128, emb_dim: int = 64,
                 drop_width: int = 64):
        super().__init__()
        self.base = Base(base_widths)
        self.pool = RoIPool(pool_size, 1.0 / self.base.stride)
        c = self.base.out_channels
        self.neck = RegionNeck(c, pool_size, hidden, emb_dim)
        self.head = WSODHead(emb_dim, num_classes, students, p=p, tau=tau, fg_iou=fg_iou,
                             use_regression=use_regression, top1=top1,
                             literal_image_loss=literal_image_loss)
        # built last so a given seed yields the same detector weights with or without it
        if drop == "concrete":
            dmod = ConcreteDropBlock(c, tau=drop_tau, block_size=block_size, temperature=temperature,
                                     width=drop_width)
        elif drop == "fixed":
            dmod = FixedDropBlock(rate=drop_tau, block_size=block_size)
        elif drop == "off":
            dmod = None
        else:
            raise ValueError(f"unknown drop mode {drop!r}")
        self.neck.drop = dmod

    @classmethod
    def from_config(cls, cfg) -> "WSODNet":
        return cls(cfg.num_classes, students=cfg.students, drop=cfg.drop, drop_tau=cfg.drop_clamp_tau,
                   block_size=cfg.block_size, temperature=cfg.gumbel_temperature, p=cfg.p,
                   tau=cfg.mist_iou_tau, fg_iou=cfg.fg_iou, use_regression=cfg.use_regression,
                   top1=cfg.selector == "top1", literal_image_loss=cfg.literal_image_loss,
                   drop_width=cfg.drop_width)

    def adversary_parameters(self) -> list[Tensor]:
        drop = self.neck.drop
        return list(drop.parameters()) if isinstance(drop, ConcreteDropBlock) else []

    def detector_parameters(self) -> list[Tensor]:
        adv = {id(p) for p in self.adversary_parameters()}
        return [p for p in self.parameters() if id(p) not in adv]

    def graph(self) -> StageGraph:
        return StageGraph(self.base, self.pool, self.neck, self.head, head_modules=(self.head,))

    @torch.no_grad()
    def predict(self, image: Tensor, boxes: np.ndarray):
        """Averaged student scores ``(N, K)`` and refined boxes ``(N, 4)`` for one image."""
        was = self.training
        self.eval()
        try:
            feat = self.base(image)
            emb = self.neck(self.pool(feat, rois_tensor(boxes, feat.dtype)))
            outs = [s(emb) for s in self.head.students]
            return inference_average(outs, boxes, use_regression=self.head.use_regression)
        finally:
            self.train(was)


def rois_tensor(boxes: np.ndarray, dtype=torch.float32) -> Tensor:
    b = torch.as_tensor(np.asarray(boxes), dtype=dtype)
    return torch.cat([torch.zeros(len(b), 1, dtype=dtype), b], dim=1)
