"""Two-branch multiple-instance scoring head (WSDDN style) and image-level loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

LOG_EPS = 1e-8


@dataclass
class ScoreMatrix:
    """Per-image region x class scores.

    ``s_cls`` is normalised over classes (each row sums to one), ``s_det`` over
    regions (each column sums to one). ``phi`` is the image-level evidence.
    """

    f: Tensor
    g: Tensor
    s_cls: Tensor
    s_det: Tensor
    s_joint: Tensor
    phi: Tensor


def score(f: Tensor, g: Tensor) -> ScoreMatrix:
    if f.shape != g.shape or f.dim() != 2:
        raise ValueError(f"expected two |R|x|C| logit matrices, got {tuple(f.shape)} and {tuple(g.shape)}")
    if not (torch.isfinite(f).all() and torch.isfinite(g).all()):
        raise ValueError("non-finite logits")
    # torch.softmax subtracts the max along `dim` before exponentiating
    s_cls = torch.softmax(f, dim=1)
    s_det = torch.softmax(g, dim=0)
    s_joint = s_cls * s_det
    return ScoreMatrix(f=f, g=g, s_cls=s_cls, s_det=s_det, s_joint=s_joint, phi=s_joint.sum(dim=0))


def image_loss(phi: Tensor, y: Tensor, literal: bool = False, eps: float = LOG_EPS) -> Tensor:
    """Multi-label image classification loss on the image evidence ``phi``.

    By default this is full binary cross-entropy summed over classes. With
    ``literal=True`` only the positive-class term ``-sum_c y(c) log phi(c)``
    is used.
    """
    out_dtype = phi.dtype
    # 1 - 1e-8 rounds to 1 in float32, so clamp and take logs in float64
    phi = phi.double().clamp(eps, 1.0 - eps)
    y = y.to(phi.dtype)
    loss = -(y * torch.log(phi)).sum()
    if not literal:
        loss = loss - ((1.0 - y) * torch.log1p(-phi)).sum()
    return loss.to(out_dtype)


class MILHead(nn.Module):
    """Projects region embeddings to classification and detection logits."""

    def __init__(self, in_dim: int, num_classes: int):
        super().__init__()
        self.cls = nn.Linear(in_dim, num_classes)
        self.det = nn.Linear(in_dim, num_classes)
        for layer in (self.cls, self.det):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

    def forward(self, emb: Tensor) -> ScoreMatrix:
        return score(self.cls(emb), self.det(emb))
