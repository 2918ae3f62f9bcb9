"""Patch-transformer encoder with static/dynamic projector and predictor heads."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn
from torch.nn import functional as F

from .io import config_hash

HEADS = ("static", "dynamic")


@dataclass(frozen=True)
class EncoderConfig:
    input_len: int = 1000
    patch_len: int = 20
    n_blocks: int = 6
    n_heads: int = 4
    model_dim: int = 128
    hidden_dim: int = 512
    out_dim: int = 256
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.input_len % self.patch_len:
            raise ValueError("input_len must be divisible by patch_len")
        if self.model_dim % self.n_heads:
            raise ValueError("model_dim must be divisible by n_heads")

    @property
    def n_patches(self) -> int:
        return self.input_len // self.patch_len


# desk-scale preset; the narrower feed-forward keeps a 2000-step run on one CPU core
SMOKE_ENCODER = EncoderConfig(n_blocks=3, model_dim=64, mlp_ratio=2)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block with a GELU feed-forward."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(self.norm1(x)).view(b, t, 3, self.n_heads, d // self.n_heads).permute(2, 0, 3, 1, 4)
        y = F.scaled_dot_product_attention(q, k, v)
        x = x + self.proj(y.transpose(1, 2).reshape(b, t, d))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class PatchEncoder(nn.Module):
    """1-D ViT: linear patch embedding, learned aggregate token, pre-norm blocks."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.patch_embed = nn.Linear(cfg.patch_len, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.n_patches, d))
        self.blocks = nn.Sequential(*[TransformerBlock(d, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.n_blocks)])
        self.norm = nn.LayerNorm(d)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 2 or x.shape[1] != self.cfg.input_len:
            raise ValueError(f"expected windows of shape [B, {self.cfg.input_len}], got {tuple(x.shape)}")
        patches = x.reshape(x.shape[0], self.cfg.n_patches, self.cfg.patch_len)
        tokens = self.patch_embed(patches) + self.pos_embed
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        tokens = self.blocks(torch.cat([cls, tokens], dim=1))
        return self.norm(tokens[:, 0])


class _SafeBatchNorm(nn.BatchNorm1d):
    # a single-row batch has no variance to normalise by
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training and x.shape[0] == 1:
            return x
        return super().forward(x)


class MLPHead(nn.Sequential):
    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int):
        super().__init__(
            nn.Linear(in_dim, hidden_dim),
            _SafeBatchNorm(hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(hidden_dim, out_dim),
        )


class Network(nn.Module):
    """Encoder plus projector (and optionally predictor) heads.

    ``heads`` picks which branches exist: DEAPS uses both static and
    dynamic, the baselines only the static one.  Teachers are built with
    ``predictors=False``.
    """

    def __init__(self, cfg: EncoderConfig = EncoderConfig(), heads: tuple[str, ...] = HEADS, predictors: bool = True):
        super().__init__()
        self.cfg = cfg
        self.heads = tuple(heads)
        self.encoder = PatchEncoder(cfg)
        self.projectors = nn.ModuleDict({h: MLPHead(cfg.model_dim, cfg.hidden_dim, cfg.out_dim) for h in self.heads})
        self.predictors = (
            nn.ModuleDict({h: MLPHead(cfg.out_dim, cfg.hidden_dim, cfg.out_dim) for h in self.heads})
            if predictors
            else None
        )

    @property
    def has_predictors(self) -> bool:
        return self.predictors is not None

    def make_teacher(self) -> Network:
        """Exact copy of encoder and projectors, no predictors, no gradients."""
        teacher = copy.deepcopy(self)
        teacher.predictors = None
        teacher.requires_grad_(False)
        return teacher


def encode(net: Network, windows: torch.Tensor) -> torch.Tensor:
    return net.encoder(windows)


def project(net: Network, h: torch.Tensor, head: str) -> torch.Tensor:
    if head not in net.projectors:
        raise ValueError(f"network has no {head!r} projector")
    return net.projectors[head](h)


def predict(net: Network, z: torch.Tensor, head: str) -> torch.Tensor:
    if not net.has_predictors:
        raise ValueError("predictors exist on the student only")
    return net.predictors[head](z)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def encoder_parameter_count(cfg: EncoderConfig = EncoderConfig()) -> int:
    return count_parameters(PatchEncoder(cfg))


def save_checkpoint(out_dir: str | Path, iteration: int, payload: dict, metadata: dict) -> Path:
    """Write ``ckpt_<iter>.pt`` (tensors) and ``ckpt_<iter>.json`` (metadata)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"ckpt_{iteration:06d}.pt"
    tmp = path.with_suffix(".pt.tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    meta = dict(metadata, iteration=iteration)
    meta.setdefault("config_hash", config_hash(meta.get("config", {})))
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str))
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    path = Path(path)
    payload = torch.load(path, map_location="cpu", weights_only=False)
    meta = json.loads(path.with_suffix(".json").read_text())
    return payload, meta


def list_checkpoints(ckpt_dir: str | Path) -> list[Path]:
    return sorted(Path(ckpt_dir).glob("ckpt_*.pt"))


def network_from_checkpoint(path: str | Path) -> tuple[Network, dict]:
    """Rebuild the student network from a checkpoint, in inference mode."""
    payload, meta = load_checkpoint(path)
    cfg = EncoderConfig(**meta["encoder"])
    net = Network(cfg, heads=tuple(meta.get("heads", HEADS)), predictors=meta.get("predictors", True))
    net.load_state_dict(payload["student"])
    net.eval()
    return net, meta


def encoder_config_dict(cfg: EncoderConfig) -> dict:
    return asdict(cfg)
