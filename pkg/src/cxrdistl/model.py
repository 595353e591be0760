"""ViT backbone with DINO, disease and symptom heads, shared by teacher and student."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors import safe_open
from safetensors.torch import load_file, save_file

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 8
    embed_dim: int = 384
    depth: int = 12
    heads: int = 6
    mlp_ratio: float = 4.0
    layernorm_eps: float = 1e-6
    drop_path: float = 0.1
    in_chans: int = 3
    pos_grid: int = 28  # positional-embedding grid of the pretraining resolution (224 / 8)

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if not 0 <= self.drop_path < 1:
            raise ValueError("drop_path must be in [0, 1)")


@dataclass(frozen=True)
class HeadsConfig:
    dino_hidden: int = 2048
    dino_bottleneck: int = 256
    dino_out: int = 65536
    head_hidden: int = 256
    n_disease: int = 3
    n_symptom: int = 7


@dataclass
class ModelOutput:
    cls_embedding: torch.Tensor
    dino_logits: torch.Tensor
    disease_logits: torch.Tensor
    symptom_logits: torch.Tensor


def stochastic_depth(x: torch.Tensor, rate: float, training: bool,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """Drop the residual branch ``x`` per sample with probability ``rate``; rescale survivors."""
    if not 0 <= rate < 1:
        raise ValueError("rate must be in [0, 1)")
    if not training or rate == 0.0:
        return x
    keep = 1.0 - rate
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    mask = (torch.rand(shape, dtype=x.dtype, device=x.device, generator=generator) < keep).to(x.dtype)
    return x * mask / keep


class DropPath(nn.Module):
    def __init__(self, rate: float = 0.0):
        super().__init__()
        self.rate = rate

    def forward(self, x):
        return stochastic_depth(x, self.rate, self.training)


def drop_path_rates(rate: float, depth: int) -> list[float]:
    """Linear ramp from 0 at the first block to ``rate`` at the last."""
    if depth == 1:
        return [rate]
    return [rate * i / (depth - 1) for i in range(depth)]


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * (C // self.heads) ** -0.5
        x = (attn.softmax(dim=-1) @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(x)


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio, eps, drop_path):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=eps)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=eps)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.drop_path = DropPath(drop_path)

    def forward(self, x):
        x = x + self.drop_path(self.attn(self.norm1(x)))
        return x + self.drop_path(self.mlp(self.norm2(x)))


class VisionTransformer(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Conv2d(cfg.in_chans, d, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + cfg.pos_grid ** 2, d))
        self.blocks = nn.ModuleList(
            Block(d, cfg.heads, cfg.mlp_ratio, cfg.layernorm_eps, r)
            for r in drop_path_rates(cfg.drop_path, cfg.depth)
        )
        self.norm = nn.LayerNorm(d, eps=cfg.layernorm_eps)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    def interpolate_pos(self, gh: int, gw: int) -> torch.Tensor:
        g = self.cfg.pos_grid
        if gh == g and gw == g:
            return self.pos_embed
        cls_pos, patch_pos = self.pos_embed[:, :1], self.pos_embed[:, 1:]
        d = patch_pos.shape[-1]
        grid = patch_pos.reshape(1, g, g, d).permute(0, 3, 1, 2)
        grid = F.interpolate(grid, size=(gh, gw), mode="bicubic", align_corners=False)
        return torch.cat([cls_pos, grid.permute(0, 2, 3, 1).reshape(1, gh * gw, d)], dim=1)

    def tokens(self, x: torch.Tensor) -> torch.Tensor:
        """Embed images -> (B, 1 + H/p * W/p, D) token sequence (class token first)."""
        p = self.cfg.patch_size
        H, W = x.shape[-2:]
        if H % p or W % p:
            raise ValueError(f"input size {H}x{W} not divisible by patch size {p}")
        x = self.patch_embed(x)
        gh, gw = x.shape[-2:]
        x = x.flatten(2).transpose(1, 2)  # row-major patch order
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        return x + self.interpolate_pos(gh, gw)

    def forward(self, x, return_cam_tokens: bool = False):
        """Normalised tokens; with ``return_cam_tokens`` also the final block's normalised input.

        The class token is read out after the last block, so the patch tokens
        *leaving* that block have no path to the logits. Saliency therefore
        uses the tokens entering the final block's attention (its norm1 output).
        """
        x = self.tokens(x)
        for blk in self.blocks[:-1]:
            x = blk(x)
        last = self.blocks[-1]
        cam = last.norm1(x)
        x = x + last.drop_path(last.attn(cam))
        x = x + last.drop_path(last.mlp(last.norm2(x)))
        out = self.norm(x)
        return (out, cam) if return_cam_tokens else out


def _mlp(dims, act) -> nn.Sequential:
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(dims) - 2:
            layers.append(act())
    return nn.Sequential(*layers)


class DinoHead(nn.Module):
    """MLP to a bottleneck, L2-normalise, then a weight-normalised projection (unit row norms)."""

    def __init__(self, in_dim, hidden, bottleneck, out_dim):
        super().__init__()
        self.mlp = _mlp([in_dim, hidden, hidden, bottleneck], nn.GELU)
        self.last_weight = nn.Parameter(torch.empty(out_dim, bottleneck))
        nn.init.trunc_normal_(self.last_weight, std=0.02)

    def forward(self, x):
        x = F.normalize(self.mlp(x), dim=-1)
        # weight norm with the magnitude fixed at 1
        return F.linear(x, F.normalize(self.last_weight, dim=1))


class DistlNet(nn.Module):
    def __init__(self, backbone: BackboneConfig = BackboneConfig(), heads: HeadsConfig = HeadsConfig()):
        super().__init__()
        self.backbone_cfg, self.heads_cfg = backbone, heads
        d, h = backbone.embed_dim, heads.head_hidden
        self.backbone = VisionTransformer(backbone)
        self.dino_head = DinoHead(d, heads.dino_hidden, heads.dino_bottleneck, heads.dino_out)
        self.disease_head = _mlp([d, h, h, heads.n_disease], nn.ReLU)
        self.symptom_head = _mlp([d, h, h, heads.n_symptom], nn.ReLU)
        # supervised heads keep PyTorch's default Linear init: three std-0.02 layers
        # in a row shrink the signal reaching the backbone ~100x
        self.backbone.apply(_init_linear)
        self.dino_head.apply(_init_linear)

    def heads(self, cls: torch.Tensor, with_dino: bool = True) -> ModelOutput:
        dino = self.dino_head(cls) if with_dino else cls.new_zeros(cls.shape[0], 0)
        return ModelOutput(cls, dino, self.disease_head(cls), self.symptom_head(cls))

    def forward(self, x: torch.Tensor, with_dino: bool = True) -> ModelOutput:
        return self.heads(self.backbone(x)[:, 0], with_dino)

    def forward_views(self, views: list[torch.Tensor], teacher: bool = False, n_globals: int = 2,
                      with_dino: bool = True) -> list[ModelOutput]:
        """Per-view outputs. The teacher only ever sees the first ``n_globals`` views.

        Views sharing a resolution go through the backbone as one batch.
        """
        if teacher:
            views = views[:n_globals]
        outs: list[ModelOutput | None] = [None] * len(views)
        i = 0
        while i < len(views):
            j = i
            while j < len(views) and views[j].shape[-2:] == views[i].shape[-2:]:
                j += 1
            chunk = torch.cat(views[i:j])
            o = self.forward(chunk, with_dino)
            b = views[i].shape[0]
            for k in range(i, j):
                s = slice((k - i) * b, (k - i + 1) * b)
                outs[k] = ModelOutput(o.cls_embedding[s], o.dino_logits[s], o.disease_logits[s],
                                      o.symptom_logits[s])
            i = j
        return outs

    def gradcam_forward(self, x: torch.Tensor):
        """(final block's normalised input tokens, symptom logits) for saliency."""
        out, cam = self.backbone(x, return_cam_tokens=True)
        return cam, self.symptom_head(out[:, 0])


def _init_linear(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)


def build_model(backbone: BackboneConfig, heads: HeadsConfig, seed: int) -> DistlNet:
    """Deterministic seeded construction."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DistlNet(backbone, heads)


def teacher_copy(student: DistlNet) -> DistlNet:
    """Teacher with identical weights and no stochastic depth; never receives gradients."""
    cfg = student.backbone_cfg
    teacher = DistlNet(BackboneConfig(**{**cfg.__dict__, "drop_path": 0.0}), student.heads_cfg)
    teacher.load_state_dict(student.state_dict())
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


# --- checkpoint archives -----------------------------------------------------

class CheckpointMismatchError(ValueError):
    def __init__(self, mismatches: list[str]):
        self.mismatches = mismatches
        super().__init__("checkpoint mismatch: " + "; ".join(mismatches))


def save_tensors(path, tensors: dict[str, torch.Tensor], metadata: dict | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    meta = {"json": json.dumps(metadata, sort_keys=True)} if metadata is not None else None
    save_file({k: v.detach().contiguous() for k, v in tensors.items()}, str(path), metadata=meta)


def load_tensors(path) -> dict[str, torch.Tensor]:
    return load_file(str(path))


def tensor_manifest(path) -> list[tuple[str, str, tuple[int, ...]]]:
    """(name, dtype, shape) for every tensor in an archive, without loading data."""
    out = []
    with safe_open(str(path), framework="pt") as f:
        for name in sorted(f.keys()):
            sl = f.get_slice(name)
            out.append((name, sl.get_dtype(), tuple(sl.get_shape())))
    return out


def load_pretrained(model: DistlNet, path, allow_random_init: bool = False) -> list[str]:
    """Replace backbone weights from an archive; heads keep their fresh initialisation.

    Tensor names may carry a ``backbone.`` prefix or not. Returns the list of
    loaded tensor names. Raises CheckpointMismatchError listing every shape
    mismatch or missing tensor.
    """
    path = Path(path) if path else None
    if path is None or not path.exists():
        if allow_random_init:
            log.warning("pretrained checkpoint %s not found; keeping seeded random init", path)
            return []
        raise FileNotFoundError(f"pretrained checkpoint {path} not found")
    raw = load_tensors(path)
    src = {k.removeprefix("backbone."): v for k, v in raw.items()}
    own = model.backbone.state_dict()
    problems = []
    for name, t in own.items():
        if name not in src:
            problems.append(f"{name}: missing")
        elif tuple(src[name].shape) != tuple(t.shape):
            problems.append(f"{name}: expected {tuple(t.shape)}, got {tuple(src[name].shape)}")
    if problems:
        raise CheckpointMismatchError(problems)
    model.backbone.load_state_dict({k: src[k].to(own[k].dtype) for k in own})
    return sorted(own)


def n_tokens(size: int, patch: int) -> int:
    return (size // patch) ** 2 + 1


def param_count(model: nn.Module) -> int:
    return sum(math.prod(p.shape) for p in model.parameters())
