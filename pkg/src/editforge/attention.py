"""Decoupled text/visual cross-attention with task-routed experts.

Text conditioning flows through one attention branch; visual-prompt tokens
flow through a bank of expert attention branches whose outputs are blended
by router weights and added to the text branch. With no visual tokens the
whole visual side is skipped, so the reduction to plain text attention is
bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tasks
from .errors import ConfigError, ContractError, ShapeError
from .tensor import (Tensor, add, from_array, matmul, reshape, scale,
                     scale_t, softmax_rows, take_flat, transpose, zeros)


@dataclass
class AttentionParams:
    """Query/key/value projections for the text branch; all share width d."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    def __post_init__(self):
        if not (self.w_q.shape[1] == self.w_k.shape[1] == self.w_v.shape[1]):
            raise ShapeError("w_q/w_k/w_v must share output width")

    @property
    def d(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]


@dataclass
class ExpertWeights:
    """One expert's key/value projections over visual-prompt tokens."""

    w_k: Tensor
    w_v: Tensor


@dataclass
class ExpertBank:
    experts: list[ExpertWeights]

    @property
    def count(self) -> int:
        return len(self.experts)


@dataclass
class TaskEmbeddingTable:
    """One learned embedding row per task, stored as a single [n_tasks, N]
    tensor so lookups stay differentiable."""

    table: Tensor
    task_order: tuple[str, ...]

    def __post_init__(self):
        if self.table.shape[0] != len(self.task_order):
            raise ShapeError("one embedding row per task required")
        if len(set(self.task_order)) != len(self.task_order):
            raise ConfigError("duplicate task in embedding table")

    @property
    def width(self) -> int:
        return self.table.shape[1]

    def embedding(self, task: str) -> Tensor:
        """Differentiable row lookup for one task."""
        tasks.validate_task(task)
        try:
            row = self.task_order.index(task)
        except ValueError:
            raise ContractError(f"task {task!r} missing from embedding table")
        n = self.width
        return take_flat(self.table, np.arange(row * n, (row + 1) * n), [n])


@dataclass
class Router:
    """Linear projection from task-embedding space to expert logits."""

    projection: Tensor
    temperature: float = 1.0
    top1: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")

    @property
    def expert_count(self) -> int:
        return self.projection.shape[1]


def route(task_embedding: Tensor, router: Router) -> Tensor:
    """Distribute weights across experts from one task embedding.

    softmax(embedding . projection / temperature); the result lives on the
    probability simplex. In top-1 mode the weights collapse to a one-hot
    vector at the argmax (not differentiable; ablation only).
    """
    n = task_embedding.size
    if router.projection.shape[0] != n:
        raise ShapeError(
            f"embedding width {n} != router input {router.projection.shape[0]}")
    logits = matmul(reshape(task_embedding, [1, n]), router.projection)
    weights = softmax_rows(scale(logits, 1.0 / router.temperature))
    if router.top1:
        hot = np.zeros(router.expert_count)
        hot[int(np.argmax(weights.values[0]))] = 1.0
        return from_array(hot)
    return reshape(weights, [router.expert_count])


def init_experts_from_text(bank: ExpertBank, params: AttentionParams) -> ExpertBank:
    """Reset every expert's projections to deep copies of the text ones.

    When the visual token width differs from d_model, the overlapping rows
    are copied and the remainder is zero-filled.
    """
    fresh: list[ExpertWeights] = []
    for expert in bank.experts:
        if expert.w_k.shape[1] != params.d:
            raise ShapeError(
                f"expert width {expert.w_k.shape[1]} != text width {params.d}")
        d_cond = expert.w_k.shape[0]
        overlap = min(d_cond, params.d_model)
        wk = np.zeros((d_cond, params.d))
        wv = np.zeros((d_cond, params.d))
        wk[:overlap] = params.w_k.values[:overlap]
        wv[:overlap] = params.w_v.values[:overlap]
        fresh.append(ExpertWeights(from_array(wk), from_array(wv)))
    return ExpertBank(fresh)


def text_cross_attention(z: Tensor, c_t: Tensor, params: AttentionParams) -> Tensor:
    """Single-head scaled dot-product attention over text tokens."""
    if c_t.shape[0] < 1:
        raise ContractError("text attention needs at least one key")
    q = matmul(z, params.w_q)
    k = matmul(c_t, params.w_k)
    v = matmul(c_t, params.w_v)
    logits = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(params.d))
    return matmul(softmax_rows(logits), v)


def decoupled_attention(z: Tensor, c_t: Tensor, c_v_tokens: Tensor | None,
                        params: AttentionParams, bank: ExpertBank,
                        expert_weights: Tensor) -> Tensor:
    """Text attention plus the weight-blended expert attention over visual
    tokens. A null visual prompt skips the visual sum entirely, making the
    output identical to plain text attention."""
    if c_v_tokens is None:
        return text_cross_attention(z, c_t, params)
    if expert_weights.size != bank.count:
        raise ShapeError(
            f"{expert_weights.size} weights for {bank.count} experts")
    total = float(expert_weights.values.sum())
    if abs(total - 1.0) > 1e-6:
        raise ContractError(f"expert weights sum to {total}, not 1")

    out = text_cross_attention(z, c_t, params)
    q = matmul(z, params.w_q)
    inv_sqrt_d = 1.0 / math.sqrt(params.d)
    for e, expert in enumerate(bank.experts):
        k = matmul(c_v_tokens, expert.w_k)
        v = matmul(c_v_tokens, expert.w_v)
        branch = matmul(softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_d)), v)
        w_e = take_flat(expert_weights, np.array([e]), [])
        out = add(out, scale_t(branch, w_e))
    return out


def canonical_routing(n_embed: int, expert_count: int = tasks.EXPERT_COUNT,
                      temperature: float = 1.0, margin: float = 6.0,
                      seed: int = 0) -> tuple[TaskEmbeddingTable, Router]:
    """Task embeddings and a router whose argmax matches the canonical
    task-to-expert assignment at initialization.

    Embeddings start orthonormal (seeded QR), so projecting each onto its
    assigned expert column with a logit margin guarantees the argmax while
    keeping the routing soft and trainable.
    """
    n_tasks = len(tasks.ALL_TASKS)
    if n_embed < n_tasks:
        raise ConfigError(
            f"embedding width {n_embed} cannot hold {n_tasks} orthonormal rows")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(n_embed, n_embed)))
    emb = q[:, :n_tasks].T.copy()

    projection = np.zeros((n_embed, expert_count))
    for i, task in enumerate(tasks.ALL_TASKS):
        slot = tasks.CANONICAL_EXPERT[task] - 1
        if slot >= expert_count:
            raise ConfigError(
                f"task {task!r} assigned to expert {slot + 1} of {expert_count}")
        projection[:, slot] += margin * emb[i]

    table = TaskEmbeddingTable(from_array(emb), tasks.ALL_TASKS)
    router = Router(from_array(projection), temperature=temperature)
    return table, router


def empty_expert_bank(expert_count: int, d_cond: int, d: int) -> ExpertBank:
    """Bank of zero-initialized experts (fill via init_experts_from_text)."""
    return ExpertBank([ExpertWeights(zeros([d_cond, d]), zeros([d_cond, d]))
                       for _ in range(expert_count)])
