"""Student/teacher training loop: Adam on the student, EMA on the teacher."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .io import config_hash
from .model import SMOKE_ENCODER, EncoderConfig, Network, encode, list_checkpoints, load_checkpoint, predict, project, save_checkpoint
from .objectives import DeapsOutputs, LossConfig, total_loss
from .sampling import BatchSampler, Corpus, Prefetcher, QuadBatch

log = logging.getLogger(__name__)

METHODS = ("deaps", "byol", "contrastive")
LOG_COLUMNS = ["iter", "l_sim", "l_gra", "l_cov", "total"]


@dataclass(frozen=True)
class TrainConfig:
    method: str = "deaps"
    iterations: int = 30000
    batch_size: int = 256
    lr: float = 3e-4
    weight_decay: float = 1.5e-6
    tau: float = 0.995
    alpha: float = 0.1
    eps: float = 1e-8
    n_selected: int = 32
    temperature: float = 0.1
    window_size_s: int = 120
    min_offset_s: int = 10
    seed: int = 0
    checkpoint_every: int = 1000
    prefetch: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        # tau = 1 freezes the teacher; kept legal for diagnostics
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        self.loss_config()  # validates alpha / n_selected

    def loss_config(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, eps=self.eps, n_selected=self.n_selected, proj_dim=self.encoder.out_dim)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        enc = d.pop("encoder", {})
        if isinstance(enc, dict):
            enc = EncoderConfig(**enc)
        return cls(encoder=enc, **d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


PRESETS = {
    "paper": TrainConfig(),
    "smoke": TrainConfig(iterations=2000, batch_size=32, checkpoint_every=500, encoder=SMOKE_ENCODER),
}


@dataclass
class TrainState:
    student: Network
    teacher: Network | None
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    iteration: int = 0


def heads_for(method: str) -> tuple[str, ...]:
    return ("static", "dynamic") if method == "deaps" else ("static",)


def make_optimizer(net: nn.Module, cfg: TrainConfig) -> torch.optim.Adam:
    """Adam; biases, norm scales and embedding tokens are not decayed."""
    decay, no_decay = [], []
    for name, p in net.named_parameters():
        if not p.requires_grad:
            continue
        if p.ndim <= 1 or name.endswith(("pos_embed", "cls_token")):
            no_decay.append(p)
        else:
            decay.append(p)
    return torch.optim.Adam(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.lr,
        fused=True,  # same update rule, one kernel per step
    )


def init_state(cfg: TrainConfig, corpus: Corpus | None = None) -> TrainState:
    if corpus is not None and not corpus.records:
        raise ValueError("empty corpus")
    torch.manual_seed(cfg.seed)
    uses_teacher = cfg.method != "contrastive"
    student = Network(cfg.encoder, heads=heads_for(cfg.method), predictors=uses_teacher)
    teacher = student.make_teacher() if uses_teacher else None
    return TrainState(student, teacher, make_optimizer(student, cfg), cfg)


@torch.no_grad()
def ema_update(xi, theta, tau: float):
    """``xi <- tau * xi + (1 - tau) * theta``.

    Accepts two tensors (returns the new tensor) or teacher/student modules
    (updates the teacher in place, matching parameters by name).
    """
    if isinstance(xi, nn.Module):
        student = dict(theta.named_parameters())
        for name, p in xi.named_parameters():
            if name not in student:
                raise ValueError(f"student has no parameter {name!r}")
            s = student[name]
            if s.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {tuple(p.shape)} vs {tuple(s.shape)}")
            p.mul_(tau).add_(s.detach(), alpha=1.0 - tau)
        return xi
    xi, theta = torch.as_tensor(xi), torch.as_tensor(theta)
    if xi.shape != theta.shape:
        raise ValueError(f"shape mismatch {tuple(xi.shape)} vs {tuple(theta.shape)}")
    return tau * xi + (1.0 - tau) * theta


def batch_tensors(batch: QuadBatch) -> dict[str, torch.Tensor]:
    return {
        "x1": torch.from_numpy(batch.x1),
        "x_tmi": torch.from_numpy(batch.x_tmi),
        "x_t": torch.from_numpy(batch.x_t),
        "x_tpj": torch.from_numpy(batch.x_tpj),
        "i_s": torch.from_numpy(batch.i_s),
        "j_s": torch.from_numpy(batch.j_s),
    }


def deaps_forward(student: Network, teacher: Network, batch: QuadBatch) -> DeapsOutputs:
    x = batch_tensors(batch)
    views = torch.cat([x["x1"], x["x_tmi"], x["x_t"], x["x_tpj"]])
    h1, h_tmi, h_t, h_tpj = encode(student, views).chunk(4)

    z1_s, z2_s = project(student, h1, "static"), project(student, h_t, "static")
    zd = [project(student, h, "dynamic") for h in (h_tmi, h_t, h_tpj)]
    qd = [predict(student, z, "dynamic") for z in zd]

    with torch.no_grad():
        e1, e_tmi, e_t, e_tpj = encode(teacher, views).chunk(4)
        zeta1_s, zeta2_s = project(teacher, e1, "static"), project(teacher, e_t, "static")
        zetad = [project(teacher, e, "dynamic") for e in (e_tmi, e_t, e_tpj)]

    return DeapsOutputs(
        z1_s=z1_s,
        z2_s=z2_s,
        q1_s=predict(student, z1_s, "static"),
        q2_s=predict(student, z2_s, "static"),
        zd_tmi=zd[0],
        zd_t=zd[1],
        zd_tpj=zd[2],
        qd_tmi=qd[0],
        qd_t=qd[1],
        qd_tpj=qd[2],
        zeta1_s=zeta1_s,
        zeta2_s=zeta2_s,
        zetad_tmi=zetad[0],
        zetad_t=zetad[1],
        zetad_tpj=zetad[2],
        i_s=x["i_s"],
        j_s=x["j_s"],
    )


def _check_finite(loss: torch.Tensor, state: TrainState, batch: QuadBatch) -> None:
    if torch.isfinite(loss):
        return
    dump = {
        "iteration": state.iteration,
        "seed": state.config.seed,
        "subject_ids": batch.subject_ids.tolist(),
        "t_s": batch.t_s.tolist(),
        "i_s": batch.i_s.tolist(),
        "j_s": batch.j_s.tolist(),
    }
    raise FloatingPointError(f"non-finite loss at iteration {state.iteration}: {json.dumps(dump)}")


def train_step(state: TrainState, batch: QuadBatch, return_outputs: bool = False):
    """One DEAPS iteration: forward, loss, one Adam step, one EMA step."""
    state.student.train()
    state.teacher.train()
    out = deaps_forward(state.student, state.teacher, batch)
    loss, breakdown = total_loss(out, state.config.loss_config())
    _check_finite(loss, state, batch)

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    ema_update(state.teacher, state.student, state.config.tau)
    state.iteration += 1
    if return_outputs:
        return state, breakdown, out
    return state, breakdown


def step_fn_for(method: str) -> Callable:
    if method == "deaps":
        return train_step
    from . import baselines

    return {"byol": baselines.byol_step, "contrastive": baselines.contrastive_step}[method]


@torch.no_grad()
def representation_std(net: Network, windows: np.ndarray) -> np.ndarray:
    """Per-feature std of encoder outputs over a probe batch (collapse monitor)."""
    was_training = net.training
    net.eval()
    h = encode(net, torch.as_tensor(windows, dtype=torch.float32))
    net.train(was_training)
    return h.std(dim=0).numpy()


def _payload(state: TrainState, sampler_state: dict) -> dict:
    return {
        "student": state.student.state_dict(),
        "teacher": None if state.teacher is None else state.teacher.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "iteration": state.iteration,
        "sampler_state": sampler_state,
        "torch_rng": torch.get_rng_state(),
    }


def _metadata(state: TrainState, corpus_hash: str | None) -> dict:
    cfg = state.config
    return {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "method": cfg.method,
        "encoder": asdict(cfg.encoder),
        "heads": list(state.student.heads),
        "predictors": state.student.has_predictors,
        "pipeline_hash": corpus_hash,
    }


def restore_state(path: str | Path, cfg: TrainConfig | None = None) -> tuple[TrainState, dict]:
    payload, meta = load_checkpoint(path)
    cfg = cfg or TrainConfig.from_dict(meta["config"])
    state = init_state(cfg)
    state.student.load_state_dict(payload["student"])
    if state.teacher is not None:
        state.teacher.load_state_dict(payload["teacher"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.iteration = int(payload["iteration"])
    torch.set_rng_state(payload["torch_rng"])
    return state, payload


def _corpus_pipeline_hash(corpus: Corpus) -> str | None:
    hashes = {r.meta.get("pipeline_hash") for r in corpus.records}
    return hashes.pop() if len(hashes) == 1 else None


def fit(
    cfg: TrainConfig,
    corpus: Corpus,
    out_dir: str | Path,
    resume: str | Path | None = None,
    stop_at: int | None = None,
) -> Path:
    """Train for ``cfg.iterations`` steps; return the final checkpoint path.

    ``resume`` continues from a checkpoint written by an earlier call;
    ``stop_at`` ends early (used to produce a resumable partial run).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps({**cfg.to_dict(), "config_hash": cfg.hash()}, indent=2, default=str))

    sampler = BatchSampler(corpus, cfg.batch_size, cfg.seed, cfg.window_size_s, cfg.min_offset_s)
    if resume is not None:
        state, payload = restore_state(resume, cfg)
        sampler.set_state(payload["sampler_state"])
    else:
        state = init_state(cfg, corpus)
    step = step_fn_for(cfg.method)
    pipeline_hash = _corpus_pipeline_hash(corpus)

    log_path = out_dir / "loss_log.csv"
    rows = []
    if resume is not None and log_path.exists():
        with open(log_path, newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if int(r["iter"]) <= state.iteration]

    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    n_batches = end - state.iteration
    source = Prefetcher(sampler, n_batches, cfg.prefetch) if cfg.prefetch and n_batches > 0 else None

    last = None
    try:
        with open(log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
            while state.iteration < end:
                if source is not None:
                    batch = next(source)
                else:
                    batch = sampler.next_batch()
                try:
                    state, breakdown = step(state, batch)
                except FloatingPointError as exc:
                    (out_dir / "nonfinite_dump.json").write_text(str(exc))
                    raise
                writer.writerow(breakdown.as_row(state.iteration))
                if state.iteration % cfg.checkpoint_every == 0 or state.iteration == end:
                    fh.flush()
                    last = save_checkpoint(
                        out_dir, state.iteration, _payload(state, batch.sampler_state), _metadata(state, pipeline_hash)
                    )
                if state.iteration % 100 == 0:
                    log.info("iter %d total %.4f", state.iteration, breakdown.total)
    finally:
        if source is not None:
            source.close()
    if last is None:
        ckpts = list_checkpoints(out_dir)
        if not ckpts:
            last = save_checkpoint(out_dir, state.iteration, _payload(state, sampler.get_state()), _metadata(state, pipeline_hash))
        else:
            last = ckpts[-1]
    return last


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)
