"""DEAPS objectives: similarity, gradual interpolation, feature mask, covariance.

Role convention: ``z``/``q`` are student projections/predictions, ``zeta``
tensors come from the teacher.  Teacher tensors always enter a loss through
``detach()``, so no gradient reaches them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

EPS = 1e-8


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1
    eps: float = EPS
    n_selected: int = 32
    proj_dim: int = 256

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 1 <= self.n_selected <= self.proj_dim:
            raise ValueError(f"n_selected must lie in [1, {self.proj_dim}]")


@dataclass
class LossBreakdown:
    l_sim: float
    l_gra: float
    l_cov: float
    total: float

    def as_row(self, iteration: int) -> dict:
        return {"iter": iteration, **asdict(self)}


def cosine_loss(student: torch.Tensor, teacher: torch.Tensor, eps: float = EPS, stop_grad: bool = True) -> torch.Tensor:
    """Mean over the batch of ``1 - cos(student, teacher)``; lies in [0, 2]."""
    if student.shape != teacher.shape:
        raise ValueError(f"shape mismatch {tuple(student.shape)} vs {tuple(teacher.shape)}")
    if stop_grad:
        teacher = teacher.detach()
    dot = (student * teacher).sum(dim=-1)
    denom = torch.clamp(student.norm(dim=-1) * teacher.norm(dim=-1), min=eps)
    return (1.0 - dot / denom).mean()


def _offsets(i_s, j_s, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    i = torch.as_tensor(i_s, dtype=like.dtype, device=like.device)
    j = torch.as_tensor(j_s, dtype=like.dtype, device=like.device)
    if torch.any(i <= 0) or torch.any(j <= 0):
        raise ValueError("offsets must be positive")
    if i.ndim == 1:
        i, j = i[:, None], j[:, None]
    return i, j


def par(z_a: torch.Tensor, z_b: torch.Tensor, i_s, j_s) -> torch.Tensor:
    """Offset-weighted interpolation of the two endpoint vectors.

    The window ``i`` seconds before the middle gets weight ``j/(i+j)`` and
    the one ``j`` seconds after gets ``i/(i+j)``, so the nearer endpoint
    dominates.  ``i_s``/``j_s`` are scalars or per-item vectors.
    """
    i, j = _offsets(i_s, j_s, z_a)
    return (z_a * j + z_b * i) / (i + j)


@torch.no_grad()
def gradual_mask(pred_a: torch.Tensor, pred_b: torch.Tensor, n_selected: int) -> torch.Tensor:
    """Per-row 0/1 mask over the ``n_selected`` largest ``|pred_a - pred_b|``.

    Ties go to the lower feature index (stable sort).
    """
    if pred_a.shape != pred_b.shape:
        raise ValueError("shape mismatch")
    diff = (pred_a - pred_b).abs()
    order = torch.argsort(-diff, dim=-1, stable=True)
    mask = torch.zeros_like(diff)
    mask.scatter_(-1, order[..., :n_selected], 1.0)
    return mask


def gradual_loss(
    pred_mid: torch.Tensor,
    z_a: torch.Tensor,
    z_b: torch.Tensor,
    i_s,
    j_s,
    mask: torch.Tensor,
    eps: float = EPS,
    teacher: str = "endpoints",
) -> torch.Tensor:
    """Cosine loss between the masked middle vector and the masked interpolation.

    ``teacher`` names the role that is held fixed: ``"endpoints"`` (student
    predicts the middle from teacher endpoints), ``"middle"`` (student
    endpoint predictions interpolate toward the teacher middle) or ``"none"``.
    """
    mask = mask.detach()
    if teacher == "endpoints":
        z_a, z_b = z_a.detach(), z_b.detach()
    elif teacher == "middle":
        pred_mid = pred_mid.detach()
    elif teacher != "none":
        raise ValueError(f"unknown teacher role {teacher!r}")
    target = par(mask * z_a, mask * z_b, i_s, j_s)
    return cosine_loss(mask * pred_mid, target, eps=eps, stop_grad=False)


def covariance_loss(proj: torch.Tensor) -> torch.Tensor:
    """Sum of squared off-diagonal covariances over the feature count."""
    b, d = proj.shape
    if b < 2:
        raise ValueError("covariance needs a batch of at least 2")
    centred = proj - proj.mean(dim=0)
    cov = centred.T @ centred / (b - 1)
    off = cov - torch.diag(torch.diagonal(cov))
    return (off**2).sum() / d


@dataclass
class DeapsOutputs:
    """Forward tensors of one DEAPS step.

    Suffixes: ``1``/``2`` are the record-A window and the record-B middle
    window; ``tmi``/``t``/``tpj`` the record-B triplet.
    """

    z1_s: torch.Tensor
    z2_s: torch.Tensor
    q1_s: torch.Tensor
    q2_s: torch.Tensor
    zd_tmi: torch.Tensor
    zd_t: torch.Tensor
    zd_tpj: torch.Tensor
    qd_tmi: torch.Tensor
    qd_t: torch.Tensor
    qd_tpj: torch.Tensor
    zeta1_s: torch.Tensor
    zeta2_s: torch.Tensor
    zetad_tmi: torch.Tensor
    zetad_t: torch.Tensor
    zetad_tpj: torch.Tensor
    i_s: torch.Tensor
    j_s: torch.Tensor


def similarity_loss(out: DeapsOutputs, eps: float = EPS) -> torch.Tensor:
    return 0.5 * (cosine_loss(out.q1_s, out.zeta2_s, eps) + cosine_loss(out.q2_s, out.zeta1_s, eps))


def total_loss(out: DeapsOutputs, cfg: LossConfig = LossConfig()) -> tuple[torch.Tensor, LossBreakdown]:
    l_sim = similarity_loss(out, cfg.eps)

    mask = gradual_mask(out.qd_tmi, out.qd_tpj, cfg.n_selected)
    l_gra = 0.5 * (
        gradual_loss(out.zetad_t, out.qd_tmi, out.qd_tpj, out.i_s, out.j_s, mask, cfg.eps, teacher="middle")
        + gradual_loss(out.qd_t, out.zetad_tmi, out.zetad_tpj, out.i_s, out.j_s, mask, cfg.eps, teacher="endpoints")
    )

    # each branch: mean over its views, then static + dynamic
    l_cov_static = 0.5 * (covariance_loss(out.z1_s) + covariance_loss(out.z2_s))
    l_cov_dynamic = (covariance_loss(out.zd_tmi) + covariance_loss(out.zd_t) + covariance_loss(out.zd_tpj)) / 3.0
    l_cov = l_cov_static + l_cov_dynamic

    total = l_sim + l_gra + cfg.alpha * l_cov
    breakdown = LossBreakdown(l_sim.item(), l_gra.item(), l_cov.item(), total.item())
    return total, breakdown


def compose(l_sim: float, l_gra: float, l_cov: float, alpha: float) -> float:
    return l_sim + l_gra + alpha * l_cov
