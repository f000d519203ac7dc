"""Sequential batch back-propagation for Base -> RoI pool -> Neck -> Head models.

The per-region Neck is where activations scale with the number of proposals.
Instead of keeping them for the backward pass, training runs in three phases:

(a) forward everything, keeping only the Base output ``A_b`` (the Neck runs
    without a graph); forward and backward the Head to get ``G_n``, the
    gradient with respect to the Neck output;
(b) for each sub-batch of regions, re-pool from ``A_b``, re-run the Neck with
    a graph and back-propagate the matching slice of ``G_n``; Neck gradients
    and the per-region gradient into ``A_b`` (``G_b``) accumulate;
(c) back-propagate ``G_b`` through the Base.

Gradients are the same as ordinary back-propagation (up to float rounding)
because the loss gradient is linear in the disjoint region slices.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import torch
from torch import Tensor, nn

DEFAULT_SUB_BATCH = 500


class PlanError(ValueError):
    """Sub-batch ranges do not tile the regions exactly once."""


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class SubBatchPlan:
    ranges: tuple[tuple[int, int], ...]
    num_regions: int

    def __post_init__(self):
        pos = 0
        for start, stop in self.ranges:
            if start != pos:
                kind = "gap" if start > pos else "overlap"
                raise PlanError(f"{kind} at region {pos}: next range starts at {start}")
            if stop <= start:
                raise PlanError(f"empty or reversed range ({start}, {stop})")
            pos = stop
        if pos != self.num_regions:
            raise PlanError(f"ranges cover [0, {pos}) but there are {self.num_regions} regions")

    @classmethod
    def from_size(cls, num_regions: int, sub_batch_size: int) -> "SubBatchPlan":
        if sub_batch_size < 1:
            raise PlanError("sub_batch_size must be positive")
        starts = range(0, num_regions, sub_batch_size)
        return cls(tuple((s, min(s + sub_batch_size, num_regions)) for s in starts), num_regions)

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> "SubBatchPlan":
        ranges, pos = [], 0
        for s in sizes:
            ranges.append((pos, pos + int(s)))
            pos += int(s)
        return cls(tuple(ranges), pos)

    def __iter__(self):
        return (slice(a, b) for a, b in self.ranges)

    def __len__(self) -> int:
        return len(self.ranges)


class MemoryAccountant:
    """Model-level activation accounting in tensor elements.

    Tensors are registered under tags while they are alive; the accountant
    tracks the running total and its peak. :meth:`capture` adds the outputs
    of every leaf module of the given modules while the block runs.
    """

    def __init__(self):
        self.live: dict[str, int] = {}
        self.current = 0
        self.peak = 0

    def hold(self, tag: str, numel: int) -> None:
        self.live[tag] = self.live.get(tag, 0) + int(numel)
        self.current += int(numel)
        self.peak = max(self.peak, self.current)

    def release(self, *tags: str) -> None:
        for tag in tags:
            self.current -= self.live.pop(tag, 0)

    def release_all(self) -> None:
        self.release(*list(self.live))

    @contextmanager
    def capture(self, tag: str, *modules: nn.Module):
        def hook(_mod, _inp, out):
            if isinstance(out, Tensor):
                self.hold(tag, out.numel())

        handles = [m.register_forward_hook(hook) for mod in modules for m in mod.modules()
                   if len(list(m.children())) == 0]
        try:
            yield
        finally:
            for h in handles:
                h.remove()


class _NullAccountant(MemoryAccountant):
    def hold(self, tag, numel):
        pass

    @contextmanager
    def capture(self, tag, *modules):
        yield


@dataclass
class StageGraph:
    """Base -> pool -> Neck -> Head wiring.

    ``neck(pooled, noise)`` must treat regions independently; ``noise`` is a
    per-region tensor (or None) drawn once per step by ``neck.sample_noise``
    so that recomputation replays the same random masks.
    ``head(emb, target)`` returns ``(loss, aux)``.
    """

    base: nn.Module
    pool: Callable[[Tensor, Tensor], Tensor]
    neck: nn.Module
    head: Callable[[Tensor, Any], tuple[Tensor, Any]]
    head_modules: Sequence[nn.Module] = ()

    def sample_noise(self, num_regions: int, generator: torch.Generator | None, dtype) -> Tensor | None:
        sampler = getattr(self.neck, "sample_noise", None)
        return None if sampler is None else sampler(num_regions, generator=generator, dtype=dtype)


@dataclass
class ActivationCache:
    A_b: Tensor  # Base output with its graph, the only retained activation
    boxes: Tensor  # (N, 5) RoIs with batch index
    noise: Tensor | None
    G_n: Tensor | None = None
    G_b: Tensor | None = None


@dataclass
class StepResult:
    loss: float
    aux: Any
    seconds: float
    peak_units: int
    phase_seconds: dict[str, float] = field(default_factory=dict)


def _slice(noise: Tensor | None, sl: slice) -> Tensor | None:
    return None if noise is None else noise[sl]


def _check_loss(loss: Tensor) -> None:
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss.item()}")


def forward_pass(graph: StageGraph, image: Tensor, boxes: Tensor, plan: SubBatchPlan,
                 noise: Tensor | None = None, acct: MemoryAccountant | None = None):
    """Full forward keeping only ``A_b``; returns ``(neck_output, cache)``.

    The Neck runs under ``no_grad`` one sub-batch at a time, so none of its
    internals outlive their chunk.
    """
    acct = acct or _NullAccountant()
    with acct.capture("base", graph.base):
        A_b = graph.base(image)
    chunks = []
    with torch.no_grad():
        A_det = A_b.detach()
        for i, sl in enumerate(plan):
            tag = f"neck_fwd{i}"
            with acct.capture(tag, graph.neck):
                pooled = graph.pool(A_det, boxes[sl])
                acct.hold(tag, pooled.numel())
                out = graph.neck(pooled, _slice(noise, sl))
            chunks.append(out)
            acct.release(tag)
    emb = torch.cat(chunks)
    acct.hold("emb", emb.numel())
    return emb, ActivationCache(A_b=A_b, boxes=boxes, noise=noise)


def head_step(graph: StageGraph, emb: Tensor, target: Any, cache: ActivationCache,
              acct: MemoryAccountant | None = None):
    """Forward/backward through the Head; stores ``G_n = dloss/d(neck output)``."""
    acct = acct or _NullAccountant()
    leaf = emb.detach().requires_grad_(True)
    with acct.capture("head", *graph.head_modules):
        loss, aux = graph.head(leaf, target)
    _check_loss(loss)
    loss.backward()
    G_n = leaf.grad if leaf.grad is not None else torch.zeros_like(leaf)
    cache.G_n = G_n
    acct.hold("G_n", G_n.numel())
    acct.release("head", "emb")
    return loss.detach(), aux, G_n


def neck_sequential_step(graph: StageGraph, cache: ActivationCache, plan: SubBatchPlan,
                         acct: MemoryAccountant | None = None) -> Tensor:
    """Recompute and back-propagate the Neck one sub-batch at a time; returns ``G_b``."""
    acct = acct or _NullAccountant()
    if cache.G_n is None:
        raise RuntimeError("head_step must run before neck_sequential_step")
    if plan.num_regions != cache.boxes.shape[0]:
        raise PlanError(f"plan covers {plan.num_regions} regions, step has {cache.boxes.shape[0]}")
    # a fresh leaf on A_b's storage; its .grad is G_b, accumulated in plan order
    x = cache.A_b.detach().requires_grad_(True)
    acct.hold("G_b", x.numel())
    for sl in plan:
        with acct.capture("neck_chunk", graph.neck):
            pooled = graph.pool(x, cache.boxes[sl])
            acct.hold("neck_chunk", pooled.numel())
            out = graph.neck(pooled, _slice(cache.noise, sl))
        out.backward(cache.G_n[sl])
        acct.release("neck_chunk")
        del pooled, out
    cache.G_b = x.grad if x.grad is not None else torch.zeros_like(x)
    return cache.G_b


def base_step(cache: ActivationCache, acct: MemoryAccountant | None = None) -> None:
    """Back-propagate the accumulated ``G_b`` through the Base."""
    acct = acct or _NullAccountant()
    if cache.G_b is None:
        raise RuntimeError("neck_sequential_step must run before base_step")
    if cache.A_b.requires_grad:
        cache.A_b.backward(cache.G_b)
    acct.release("G_n", "G_b", "base")


def seqbp_step(graph: StageGraph, image: Tensor, boxes: Tensor, target: Any, sub_batch_size: int,
               noise: Tensor | None = None, acct: MemoryAccountant | None = None,
               plan: SubBatchPlan | None = None) -> StepResult:
    """All three phases; parameter ``.grad`` fields are accumulated, not reset."""
    own = acct is None
    acct = MemoryAccountant() if own else acct
    plan = plan or SubBatchPlan.from_size(boxes.shape[0], sub_batch_size)
    t0 = time.perf_counter()
    emb, cache = forward_pass(graph, image, boxes, plan, noise, acct)
    t1 = time.perf_counter()
    loss, aux, _ = head_step(graph, emb, target, cache, acct)
    t2 = time.perf_counter()
    neck_sequential_step(graph, cache, plan, acct)
    t3 = time.perf_counter()
    base_step(cache, acct)
    t4 = time.perf_counter()
    acct.release_all()
    return StepResult(float(loss), aux, t4 - t0, acct.peak,
                      dict(forward=t1 - t0, head=t2 - t1, neck=t3 - t2, base=t4 - t3))


def vanilla_step(graph: StageGraph, image: Tensor, boxes: Tensor, target: Any,
                 noise: Tensor | None = None, acct: MemoryAccountant | None = None) -> StepResult:
    """Ordinary single-pass back-propagation; every activation lives until backward."""
    acct = MemoryAccountant() if acct is None else acct
    t0 = time.perf_counter()
    with acct.capture("base", graph.base):
        A_b = graph.base(image)
    with acct.capture("neck", graph.neck):
        pooled = graph.pool(A_b, boxes)
        acct.hold("neck", pooled.numel())
        emb = graph.neck(pooled, noise)
    acct.hold("emb", emb.numel())
    with acct.capture("head", *graph.head_modules):
        loss, aux = graph.head(emb, target)
    _check_loss(loss)
    loss.backward()
    acct.release_all()
    return StepResult(float(loss.detach()), aux, time.perf_counter() - t0, acct.peak)


def memory_account(graph: StageGraph, image: Tensor, boxes: Tensor, target: Any, mode: str,
                   sub_batch_size: int = DEFAULT_SUB_BATCH, noise: Tensor | None = None) -> dict:
    """Run one instrumented step and report ``peak_activation_units`` and ``wall_time``."""
    if mode == "seqbp":
        res = seqbp_step(graph, image, boxes, target, sub_batch_size, noise=noise)
    elif mode == "vanilla":
        res = vanilla_step(graph, image, boxes, target, noise=noise)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return {"peak_activation_units": res.peak_units, "wall_time": res.seconds}
