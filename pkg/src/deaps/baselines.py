"""Comparison objectives on the same encoder and sampler.

* ``byol``: cross-record positive pairs, one projector/predictor, EMA teacher.
* ``contrastive``: cross-record positive pairs, every other batch item is a
  negative (NT-Xent), no teacher.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .model import encode, predict, project
from .objectives import LossBreakdown, cosine_loss
from .sampling import QuadBatch
from .trainer import TrainState, _check_finite, batch_tensors, ema_update


def nt_xent(z_a: torch.Tensor, z_b: torch.Tensor, temperature: float = 0.1) -> torch.Tensor:
    """Normalized-temperature cross-entropy over 2B embeddings.

    Row ``k`` of ``z_a`` and row ``k`` of ``z_b`` are positives; the other
    2B - 2 rows act as negatives for both.
    """
    b = z_a.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs at least 2 pairs (no negatives otherwise)")
    z = F.normalize(torch.cat([z_a, z_b]), dim=1)
    sim = z @ z.T / temperature
    sim = sim.masked_fill(torch.eye(2 * b, dtype=torch.bool, device=z.device), float("-inf"))
    targets = torch.cat([torch.arange(b, 2 * b), torch.arange(0, b)]).to(z.device)
    return F.cross_entropy(sim, targets)


def byol_loss(student, teacher, x1: torch.Tensor, x2: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    h1, h2 = encode(student, torch.cat([x1, x2])).chunk(2)
    q1 = predict(student, project(student, h1, "static"), "static")
    q2 = predict(student, project(student, h2, "static"), "static")
    with torch.no_grad():
        e1, e2 = encode(teacher, torch.cat([x1, x2])).chunk(2)
        zeta1, zeta2 = project(teacher, e1, "static"), project(teacher, e2, "static")
    return 0.5 * (cosine_loss(q1, zeta2, eps) + cosine_loss(q2, zeta1, eps))


def byol_step(state: TrainState, batch: QuadBatch):
    """Plain non-contrastive step on (record-A window, record-B window) pairs."""
    state.student.train()
    state.teacher.train()
    x = batch_tensors(batch)
    loss = byol_loss(state.student, state.teacher, x["x1"], x["x_t"], state.config.eps)
    _check_finite(loss, state, batch)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    ema_update(state.teacher, state.student, state.config.tau)
    state.iteration += 1
    value = loss.item()
    return state, LossBreakdown(value, 0.0, 0.0, value)


def contrastive_loss(student, x1: torch.Tensor, x2: torch.Tensor, temperature: float) -> torch.Tensor:
    h1, h2 = encode(student, torch.cat([x1, x2])).chunk(2)
    return nt_xent(project(student, h1, "static"), project(student, h2, "static"), temperature)


def contrastive_step(state: TrainState, batch: QuadBatch):
    if len(batch) < 2:
        raise ValueError("contrastive training needs batch_size >= 2")
    state.student.train()
    x = batch_tensors(batch)
    loss = contrastive_loss(state.student, x["x1"], x["x_t"], state.config.temperature)
    _check_finite(loss, state, batch)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.iteration += 1
    value = loss.item()
    return state, LossBreakdown(value, 0.0, 0.0, value)
