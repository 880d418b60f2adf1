"""Siamese transformer encoder + bottleneck-conditioned decoder.

One weight-shared encoder maps a view's patches (plus a class token) to
embeddings. The source view is encoded in full; the target view is encoded
from its visible patches only. The decoder rebuilds the full target patch
sequence by inserting a learned mask token at masked positions, prepends the
source class token (the bottleneck) projected to decoder width, and predicts
every target patch in normalized-pixel space.

Loss is the squared L2 norm per masked patch (summed over the patch's
elements), averaged over masked patches.

Everything is a pure function of (parameters, inputs); initialization is a
pure function of the config seed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError, NumericError
from .views import MaskSet, TargetPatches, ViewPair, normalize_targets, patchify


@dataclass(frozen=True)
class ModelConfig:
    embed_dim_enc: int = 64
    depth_enc: int = 3
    heads_enc: int = 4
    embed_dim_dec: int = 48
    depth_dec: int = 2
    heads_dec: int = 4
    mlp_ratio: float = 4.0
    patch_size: int = 8
    grid_side: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.embed_dim_enc % self.heads_enc != 0:
            raise ConfigError(f"encoder dim {self.embed_dim_enc} not divisible by {self.heads_enc} heads")
        if self.embed_dim_dec % self.heads_dec != 0:
            raise ConfigError(f"decoder dim {self.embed_dim_dec} not divisible by {self.heads_dec} heads")
        for name, dim in (("encoder", self.embed_dim_enc), ("decoder", self.embed_dim_dec)):
            if dim % 4 != 0:
                raise ConfigError(f"{name} dim {dim} must be divisible by 4 for 2D sinusoidal tables")
        if min(self.depth_enc, self.depth_dec, self.patch_size, self.grid_side) < 1:
            raise ConfigError("depths, patch_size and grid_side must be >= 1")

    @property
    def n_patches(self) -> int:
        return self.grid_side**2

    @property
    def patch_len(self) -> int:
        return self.patch_size**2 * 3

    @property
    def view_size(self) -> int:
        return self.grid_side * self.patch_size

    def to_json(self) -> dict:
        return {
            "embed_dim_enc": self.embed_dim_enc,
            "depth_enc": self.depth_enc,
            "heads_enc": self.heads_enc,
            "embed_dim_dec": self.embed_dim_dec,
            "depth_dec": self.depth_dec,
            "heads_dec": self.heads_dec,
            "mlp_ratio": self.mlp_ratio,
            "patch_size": self.patch_size,
            "grid_side": self.grid_side,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    @classmethod
    def micro(cls, seed: int = 0) -> "ModelConfig":
        """Smallest config that exercises every code path; used by gradient checks."""
        return cls(
            embed_dim_enc=8, depth_enc=1, heads_enc=2,
            embed_dim_dec=8, depth_dec=1, heads_dec=2,
            mlp_ratio=2.0, patch_size=4, grid_side=2, seed=seed,
        )


def sincos_pos_table_2d(dim: int, grid_side: int) -> np.ndarray:
    """Fixed 2D sinusoidal table, (grid_side^2, dim), row-major patch order."""
    if dim % 4 != 0:
        raise ConfigError(f"positional dim {dim} must be divisible by 4")
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (np.arange(quarter, dtype=np.float64) / quarter))
    coords = np.arange(grid_side, dtype=np.float64)
    gy, gx = np.meshgrid(coords, coords, indexing="ij")
    gx = gx.reshape(-1, 1) * omega
    gy = gy.reshape(-1, 1) * omega
    table = np.concatenate([np.sin(gx), np.cos(gx), np.sin(gy), np.cos(gy)], axis=1)
    return table


def trunc_normal_(tensor: torch.Tensor, std: float, generator: torch.Generator) -> torch.Tensor:
    """In-place truncated normal on [-2*std, 2*std] via inverse-CDF sampling."""
    bound = 2.0
    lo = 0.5 * (1.0 + math.erf(-bound / math.sqrt(2.0)))
    hi = 0.5 * (1.0 + math.erf(bound / math.sqrt(2.0)))
    with torch.no_grad():
        u = torch.empty_like(tensor).uniform_(2 * lo - 1, 2 * hi - 1, generator=generator)
        tensor.copy_(torch.erfinv(u) * (std * math.sqrt(2.0)))
        tensor.clamp_(-bound * std, bound * std)
    return tensor


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-layernorm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class CroboModel(nn.Module):
    """Encoder/decoder pair with a single-token bottleneck between views."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        de, dd, n = cfg.embed_dim_enc, cfg.embed_dim_dec, cfg.n_patches

        self.patch_proj = nn.Linear(cfg.patch_len, de)
        self.cls_token = nn.Parameter(torch.zeros(de))
        self.cls_pos = nn.Parameter(torch.zeros(de))
        self.enc_blocks = nn.ModuleList(
            Block(de, cfg.heads_enc, cfg.mlp_ratio) for _ in range(cfg.depth_enc)
        )
        self.enc_norm = nn.LayerNorm(de)

        self.enc2dec = nn.Linear(de, dd)
        self.mask_token = nn.Parameter(torch.zeros(dd))
        self.dec_blocks = nn.ModuleList(
            Block(dd, cfg.heads_dec, cfg.mlp_ratio) for _ in range(cfg.depth_dec)
        )
        self.dec_norm = nn.LayerNorm(dd)
        self.head = nn.Linear(dd, cfg.patch_len)

        self.register_buffer(
            "enc_pos", torch.from_numpy(sincos_pos_table_2d(de, cfg.grid_side)).float()
        )
        self.register_buffer(
            "dec_pos", torch.from_numpy(sincos_pos_table_2d(dd, cfg.grid_side)).float()
        )
        self._reset_parameters()

    def _reset_parameters(self) -> None:
        """Deterministic init from cfg.seed, independent of construction order noise."""
        g = torch.Generator().manual_seed(self.cfg.seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name in ("cls_token", "cls_pos", "mask_token"):
                    p.normal_(0.0, 0.02, generator=g)
                elif p.ndim >= 2:
                    trunc_normal_(p, 0.02, g)
                elif "norm" in name and name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()

    # -- encoder -----------------------------------------------------------

    def _check_indices(self, indices: torch.Tensor) -> None:
        n = self.cfg.n_patches
        if indices.numel() == 0:
            return
        if int(indices.min()) < 0 or int(indices.max()) >= n:
            raise InputError(f"patch index outside [0, {n})")
        sorted_idx, _ = torch.sort(indices, dim=-1)
        if indices.shape[-1] > 1 and bool((sorted_idx[..., 1:] == sorted_idx[..., :-1]).any()):
            raise InputError("duplicate patch index")

    def encode(
        self, patches: torch.Tensor, indices: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode (B, K, P*P*3) patches located at (B, K) grid indices.

        Returns (cls (B, D), patch_tokens (B, K, D)); token k corresponds to
        indices[:, k]. Pass all N indices for a full view, only the visible
        ones for a masked view.
        """
        if patches.ndim == 2:
            patches = patches.unsqueeze(0)
        if indices.ndim == 1:
            indices = indices.unsqueeze(0).expand(patches.shape[0], -1)
        if patches.shape[-1] != self.cfg.patch_len:
            raise InputError(
                f"patch vectors of length {patches.shape[-1]}, expected {self.cfg.patch_len}"
            )
        self._check_indices(indices)
        b = patches.shape[0]
        x = self.patch_proj(patches) + self.enc_pos[indices]
        cls = (self.cls_token + self.cls_pos).view(1, 1, -1).expand(b, 1, -1)
        x = torch.cat([cls, x], dim=1)
        for blk in self.enc_blocks:
            x = blk(x)
        x = self.enc_norm(x)
        return x[:, 0], x[:, 1:]

    # -- decoder -----------------------------------------------------------

    def restore_sequence(
        self, visible_tokens: torch.Tensor, visible_indices: torch.Tensor
    ) -> torch.Tensor:
        """Rebuild the full N-token target sequence at decoder width.

        Visible encoder tokens are projected to decoder width and scattered to
        their grid positions; every other position receives the learned mask
        token; the full sequence then gets decoder positional embeddings.
        """
        if visible_tokens.ndim == 2:
            visible_tokens = visible_tokens.unsqueeze(0)
        if visible_indices.ndim == 1:
            visible_indices = visible_indices.unsqueeze(0).expand(visible_tokens.shape[0], -1)
        if visible_indices.shape != visible_tokens.shape[:2]:
            raise InputError(
                f"visible indices {tuple(visible_indices.shape)} do not match "
                f"tokens {tuple(visible_tokens.shape[:2])}"
            )
        self._check_indices(visible_indices)
        b = visible_tokens.shape[0]
        n, dd = self.cfg.n_patches, self.cfg.embed_dim_dec
        base = self.mask_token.view(1, 1, -1).expand(b, n, dd)
        if visible_tokens.shape[1] > 0:
            projected = self.enc2dec(visible_tokens)
            idx = visible_indices.unsqueeze(-1).expand(-1, -1, dd)
            seq = base.scatter(1, idx, projected)
        else:
            seq = base
        return seq + self.dec_pos

    def decode(self, bottleneck: torch.Tensor, restored: torch.Tensor) -> torch.Tensor:
        """Predict all N target patches conditioned on the bottleneck token.

        The bottleneck is projected to decoder width and prepended at slot 0
        with no positional embedding; its output slot is discarded.
        """
        if bottleneck.ndim == 1:
            bottleneck = bottleneck.unsqueeze(0)
        if restored.ndim == 2:
            restored = restored.unsqueeze(0)
        if restored.shape[1] != self.cfg.n_patches:
            raise InputError(
                f"restored sequence of length {restored.shape[1]}, expected {self.cfg.n_patches}"
            )
        x = torch.cat([self.enc2dec(bottleneck).unsqueeze(1), restored], dim=1)
        for blk in self.dec_blocks:
            x = blk(x)
        x = self.dec_norm(x)
        return self.head(x[:, 1:])

    # -- full pipeline -----------------------------------------------------

    def forward(
        self,
        source_patches: torch.Tensor,
        target_visible: torch.Tensor,
        visible_indices: torch.Tensor,
    ) -> torch.Tensor:
        """source (B, N, L) + visible target patches -> predictions (B, N, L)."""
        n = self.cfg.n_patches
        all_idx = torch.arange(n, dtype=torch.long, device=source_patches.device)
        src_cls, _ = self.encode(source_patches, all_idx)
        _, tgt_tokens = self.encode(target_visible, visible_indices)
        restored = self.restore_sequence(tgt_tokens, visible_indices)
        return self.decode(src_cls, restored)


def build_model(cfg: ModelConfig) -> CroboModel:
    """Construct a model with deterministic parameters (byte-stable per cfg)."""
    return CroboModel(cfg)


def masked_mse(
    pred: torch.Tensor, target: torch.Tensor, masked: torch.Tensor | MaskSet
) -> torch.Tensor:
    """Mean over masked patches of the squared L2 distance summed per patch.

    ``masked`` is a boolean (…, N) tensor or a MaskSet. An empty mask yields
    a zero loss and a RuntimeWarning.
    """
    if isinstance(masked, MaskSet):
        flags = torch.zeros(pred.shape[-2], dtype=torch.bool, device=pred.device)
        flags[torch.from_numpy(masked.masked).to(pred.device)] = True
        masked = flags
    if pred.ndim == 2:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    if masked.ndim == 1:
        masked = masked.unsqueeze(0).expand(pred.shape[0], -1)
    if pred.shape != target.shape or masked.shape != pred.shape[:2]:
        raise InputError(
            f"shape mismatch: pred {tuple(pred.shape)}, target {tuple(target.shape)}, "
            f"mask {tuple(masked.shape)}"
        )
    n_masked = masked.sum(dim=1)
    if bool((n_masked == 0).any()):
        warnings.warn("masked_mse over an empty mask; loss defined as 0", RuntimeWarning)
        return pred.sum() * 0.0
    per_patch = ((pred - target) ** 2).sum(dim=-1)
    per_item = (per_patch * masked).sum(dim=1) / n_masked
    return per_item.mean()


@dataclass(eq=False)
class PairTensors:
    """A view pair lowered to the tensors the model consumes."""

    source_patches: torch.Tensor  # (N, L)
    target_visible: torch.Tensor  # (K, L)
    visible_idx: torch.Tensor  # (K,) long
    masked_flags: torch.Tensor  # (N,) bool
    target_norm: torch.Tensor  # (N, L) normalized-pixel targets
    target_stats: TargetPatches  # mean/std for de-normalized rendering


def prepare_pair_tensors(
    pair: ViewPair, mask: MaskSet, patch_size: int, dtype: torch.dtype = torch.float32
) -> PairTensors:
    src = patchify(pair.source, patch_size)
    tgt = patchify(pair.target, patch_size)
    stats = normalize_targets(tgt)
    n = tgt.patches.shape[0]
    if len(mask.masked) + len(mask.visible) != n:
        raise InputError(f"mask over {len(mask.masked) + len(mask.visible)} patches, view has {n}")
    flags = torch.zeros(n, dtype=torch.bool)
    flags[torch.from_numpy(mask.masked)] = True
    return PairTensors(
        source_patches=torch.from_numpy(src.patches).to(dtype),
        target_visible=torch.from_numpy(tgt.patches[mask.visible]).to(dtype),
        visible_idx=torch.from_numpy(mask.visible).long(),
        masked_flags=flags,
        target_norm=torch.from_numpy(stats.normalized).to(dtype),
        target_stats=stats,
    )


def loss_and_grad(
    model: CroboModel, pair: ViewPair, mask: MaskSet
) -> tuple[float, dict[str, torch.Tensor]]:
    """Forward + reverse pass for one pair; returns loss and per-parameter grads.

    Both encoder passes share weights, so encoder gradients accumulate
    contributions from the source and target views.
    """
    dtype = next(model.parameters()).dtype
    pt = prepare_pair_tensors(pair, mask, model.cfg.patch_size, dtype=dtype)
    model.zero_grad(set_to_none=True)
    pred = model(pt.source_patches, pt.target_visible, pt.visible_idx)
    loss = masked_mse(pred, pt.target_norm.unsqueeze(0), pt.masked_flags)
    loss.backward()
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NumericError(_nonfinite_report(model, value))
    grads = {}
    for name, p in model.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not bool(torch.isfinite(g).all()):
            raise NumericError(_nonfinite_report(model, value))
        grads[name] = g.detach().clone()
    return value, grads


def _nonfinite_report(model: CroboModel, loss: float) -> str:
    bad = [
        name
        for name, p in model.named_parameters()
        if p.grad is not None and not bool(torch.isfinite(p.grad).all())
    ]
    return f"non-finite loss/gradients (loss={loss}, offending grads: {bad or 'none'})"
