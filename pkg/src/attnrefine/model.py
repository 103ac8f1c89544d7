"""Toy vision-language classifier with per-finding attention heads.

The image is cut into PxP patches, embedded and mixed by a couple of
self-attention blocks.  A frozen text table supplies one token per finding;
that token attends over the patches.  The per-head pre-softmax scores form the
raw attention stack for the finding, and a per-finding C x C head projects the
stack into a [0, 1] map.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_FORMAT = "attnrefine-checkpoint/1"


class UnknownFindingError(KeyError):
    pass


class FindingCatalog:
    """Ordered finding names; position doubles as class index."""

    def __init__(self, names: Iterable[str]):
        names = tuple(names)
        if not names:
            raise ValueError("catalog must contain at least one finding")
        if any(not isinstance(n, str) or not n.strip() for n in names):
            raise ValueError("finding names must be non-empty strings")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate finding names in catalog: {names}")
        self.names = names
        self._index = {n: i for i, n in enumerate(names)}

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownFindingError(f"unknown finding {name!r}; catalog has {list(self.names)}") from None

    def __contains__(self, name) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __getitem__(self, i: int) -> str:
        return self.names[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, FindingCatalog) and self.names == other.names

    def __hash__(self):
        return hash(self.names)

    def __repr__(self) -> str:
        return f"FindingCatalog({list(self.names)!r})"


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    dim: int = 32
    heads: int = 4
    depth: int = 2
    mlp_ratio: int = 2
    text_seed: int = 1234

    def __post_init__(self):
        if self.image_size <= 0 or self.image_size % self.patch_size:
            raise ValueError(
                f"model.image_size={self.image_size} must be a positive multiple of patch_size={self.patch_size}"
            )
        if self.dim % self.heads:
            raise ValueError(f"model.dim={self.dim} must be divisible by model.heads={self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size


class SegHead(nn.Module):
    """Per-pixel channel mixing ``W v + b`` over the attention heads."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.eye(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, attn: torch.Tensor) -> torch.Tensor:
        return seg_head_apply(attn, self)


def seg_head_apply(attn: torch.Tensor, head: SegHead) -> torch.Tensor:
    """Project a (..., C, h, w) attention stack to a (..., h, w) map in [0, 1].

    Channel vector v at each cell goes to W v + b, the result is averaged over
    channels and passed through the logistic function.
    """
    weight, bias = head.weight, head.bias
    if weight.dim() != 2 or weight.shape[0] != weight.shape[1]:
        raise ValueError(f"head weight must be square, got {tuple(weight.shape)}")
    c = weight.shape[0]
    if attn.dim() < 3 or attn.shape[-3] != c:
        raise ValueError(f"channel mismatch: attention stack {tuple(attn.shape)} vs head with {c} channels")
    mixed = torch.einsum("oc,...chw->...ohw", weight, attn) + bias[:, None, None]
    return torch.sigmoid(mixed.mean(dim=-3))


@torch.no_grad()
def iei_init(head: SegHead) -> SegHead:
    """Identity weight, zero bias: the head starts by reproducing the raw attention."""
    head.weight.copy_(torch.eye(head.channels, dtype=head.weight.dtype))
    head.bias.zero_()
    return head


@torch.no_grad()
def random_head_init(head: SegHead, seed: int, std: float | None = None) -> SegHead:
    gen = torch.Generator().manual_seed(int(seed))
    c = head.channels
    std = 1.0 / math.sqrt(c) if std is None else std
    head.weight.copy_(torch.randn(c, c, generator=gen, dtype=torch.float64).to(head.weight.dtype) * std)
    head.bias.copy_(torch.randn(c, generator=gen, dtype=torch.float64).to(head.bias.dtype) * std)
    return head


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim)
        )

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class AttnRefineNet(nn.Module):
    def __init__(self, catalog: FindingCatalog, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.catalog = catalog
        self.config = config
        d, p, g = config.dim, config.patch_size, config.grid
        self.patch_embed = nn.Linear(p * p, d)
        self.pos_embed = nn.Parameter(torch.randn(g * g, d) * 0.02)
        self.blocks = nn.ModuleList(Block(d, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.norm = nn.LayerNorm(d)

        gen = torch.Generator().manual_seed(config.text_seed)
        self.register_buffer("text_table", torch.randn(len(catalog), d, generator=gen))

        self.ca_query = nn.Linear(d, d)
        self.ca_key = nn.Linear(d, d)
        self.ca_value = nn.Linear(d, d)
        self.ca_out = nn.Linear(d, d)
        self.cls_head = nn.Linear(d, 1)
        self.seg_heads = nn.ModuleList(SegHead(config.heads) for _ in catalog)

    # -- building blocks -------------------------------------------------
    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W) or (H, W) pixels -> (B, h, w, d) patch embeddings."""
        single = images.dim() == 2
        if single:
            images = images[None]
        _, hh, ww = images.shape
        p = self.config.patch_size
        if hh % p or ww % p:
            raise ValueError(f"image {hh}x{ww} is not divisible by patch size {p}")
        gh, gw = hh // p, ww // p
        if gh * gw != self.pos_embed.shape[0]:
            raise ValueError(
                f"image {hh}x{ww} does not match model image_size {self.config.image_size}"
            )
        patches = F.unfold(images[:, None], kernel_size=p, stride=p).transpose(1, 2)
        x = self.patch_embed(patches) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x).reshape(-1, gh, gw, self.config.dim)
        return x[0] if single else x

    def text_embed(self, finding: str | int) -> torch.Tensor:
        idx = finding if isinstance(finding, int) else self.catalog.index(finding)
        if not 0 <= idx < len(self.catalog):
            raise UnknownFindingError(f"finding index {idx} out of range")
        return self.text_table[idx]

    def cross_attend(self, patches: torch.Tensor, text: torch.Tensor):
        """Text token(s) attend over patches.

        patches: (B, h, w, d); text: (d,) or (T, d).  Returns ``fused`` of
        shape (B, [T,] d) and raw scores of shape (B, [T,] C, h, w).  Scores
        are exposed before any normalisation.
        """
        if patches.dim() == 3:
            fused, attn = self.cross_attend(patches[None], text)
            return fused[0], attn[0]
        b, gh, gw, d = patches.shape
        single = text.dim() == 1
        if single:
            text = text[None]
        if text.shape[-1] != d or d != self.config.dim:
            raise ValueError(f"dimension mismatch: patches width {d}, text width {text.shape[-1]}")
        c = self.config.heads
        dh = d // c
        flat = patches.reshape(b, gh * gw, d)
        q = self.ca_query(text).reshape(-1, c, dh)  # T, C, dh
        k = self.ca_key(flat).reshape(b, -1, c, dh)  # B, N, C, dh
        v = self.ca_value(flat).reshape(b, -1, c, dh)
        scores = torch.einsum("tcd,bncd->btcn", q, k) / math.sqrt(dh)
        weights = scores.softmax(dim=-1)
        pooled = torch.einsum("btcn,bncd->btcd", weights, v).reshape(b, -1, d)
        fused = self.ca_out(pooled)
        attn = scores.reshape(b, -1, c, gh, gw)
        if single:
            return fused[:, 0], attn[:, 0]
        return fused, attn

    def classify(self, fused: torch.Tensor, finding: str | int | None = None) -> torch.Tensor:
        if finding is not None and isinstance(finding, str):
            self.catalog.index(finding)
        return self.cls_head(fused).squeeze(-1)

    def head(self, finding: str | int) -> SegHead:
        idx = finding if isinstance(finding, int) else self.catalog.index(finding)
        return self.seg_heads[idx]

    # -- composed passes -------------------------------------------------
    def forward(self, images: torch.Tensor, finding: str | int, use_head: bool = True):
        """Single-prompt pass: returns (logits (B,), raw attention (B,C,h,w), map (B,h,w))."""
        idx = finding if isinstance(finding, int) else self.catalog.index(finding)
        patches = self.encode_image(images)
        fused, attn = self.cross_attend(patches, self.text_embed(idx))
        logits = self.classify(fused)
        refined = seg_head_apply(attn, self.seg_heads[idx]) if use_head else squash_raw(attn)
        return logits, attn, refined

    def forward_all(self, images: torch.Tensor):
        """All prompts at once: logits (B,K), attention (B,K,C,h,w), maps (B,K,h,w)."""
        patches = self.encode_image(images)
        fused, attn = self.cross_attend(patches, self.text_table)
        logits = self.classify(fused)
        refined = torch.stack(
            [seg_head_apply(attn[:, k], head) for k, head in enumerate(self.seg_heads)], dim=1
        )
        return logits, attn, refined

    def init_heads(self, mode: str = "iei", seed: int = 0) -> None:
        for k, head in enumerate(self.seg_heads):
            if mode == "iei":
                iei_init(head)
            elif mode == "random":
                random_head_init(head, seed * 1000 + k)
            else:
                raise ValueError(f"unknown init_mode {mode!r} (expected 'iei' or 'random')")


def squash_raw(attn: torch.Tensor) -> torch.Tensor:
    """Logistic of the channel mean of a raw attention stack (no head)."""
    return torch.sigmoid(attn.mean(dim=-3))


def build_model(catalog: FindingCatalog, config: ModelConfig = ModelConfig(), seed: int = 0,
                init_mode: str = "iei", dtype=torch.float32) -> AttnRefineNet:
    torch.manual_seed(seed)
    model = AttnRefineNet(catalog, config)
    model.init_heads(init_mode, seed)
    return model.to(dtype)


# -- checkpoints ---------------------------------------------------------

def params_hash(model: AttnRefineNet) -> str:
    """SHA-256 over catalog, config and every tensor in key order."""
    h = hashlib.sha256()
    h.update(repr(list(model.catalog)).encode())
    h.update(repr(sorted(asdict(model.config).items())).encode())
    for key, t in sorted(model.state_dict().items()):
        h.update(key.encode())
        h.update(str(t.dtype).encode())
        h.update(repr(tuple(t.shape)).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: AttnRefineNet, path, seed: int | None = None, config_hash: str | None = None,
                    extra: dict | None = None) -> str:
    """Write a checkpoint container; returns its parameter hash.

    The container is a torch-serialised dict with keys ``format``,
    ``catalog``, ``model_config``, ``state_dict``, ``seed``, ``config_hash``,
    ``params_hash`` and ``extra``.
    """
    digest = params_hash(model)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "catalog": list(model.catalog),
            "model_config": asdict(model.config),
            "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
            "seed": seed,
            "config_hash": config_hash,
            "params_hash": digest,
            "extra": extra or {},
        },
        path,
    )
    return digest


def load_checkpoint(path) -> tuple[AttnRefineNet, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an attnrefine checkpoint (format={blob.get('format')!r})")
    catalog = FindingCatalog(blob["catalog"])
    model = AttnRefineNet(catalog, ModelConfig(**blob["model_config"]))
    dtype = next(iter(blob["state_dict"].values())).dtype
    model = model.to(dtype)
    model.load_state_dict(blob["state_dict"])
    return model, blob


