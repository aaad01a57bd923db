"""Dual-branch hybrid denoiser: cross-shaped window transformer encoder, CNN decoder.

Both branches (noisy and clean inputs) run through one ``DespeckleNet``
instance, so weight sharing holds by construction.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig


class TokenSequence(NamedTuple):
    tokens: torch.Tensor  # B x N x C
    grid: tuple[int, int]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]


class DenoiseOutput(NamedTuple):
    prediction: torch.Tensor  # B x 1 x H x W in [0, 1]
    tokens: TokenSequence
    features: torch.Tensor  # last decoder feature map, B x C x H x W
    pooled: torch.Tensor  # global average of the final tokens, B x C


def tokens_to_grid(z: TokenSequence) -> torch.Tensor:
    """Row-major reshape of B x N x C tokens into a B x C x h x w map."""
    b, n, c = z.tokens.shape
    h, w = z.grid
    if n != h * w:
        raise ValueError(f"{n} tokens do not fill a {h}x{w} grid")
    return z.tokens.transpose(1, 2).reshape(b, c, h, w)


def grid_to_tokens(x: torch.Tensor) -> TokenSequence:
    b, c, h, w = x.shape
    return TokenSequence(x.flatten(2).transpose(1, 2), (h, w))


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection plus learned absolute positions."""

    def __init__(self, image_size: int, patch_size: int, dim: int):
        super().__init__()
        self.image_size = image_size
        self.patch_size = patch_size
        self.proj = nn.Conv2d(1, dim, kernel_size=patch_size, stride=patch_size)
        side = image_size // patch_size
        self.pos = nn.Parameter(torch.zeros(1, side * side, dim))
        nn.init.trunc_normal_(self.pos, std=0.02)

    def forward(self, img: torch.Tensor) -> TokenSequence:
        if img.ndim == 2:
            img = img[None, None]
        elif img.ndim == 3:
            img = img[:, None]
        if img.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(f"expected {self.image_size}x{self.image_size} input, got {tuple(img.shape[-2:])}")
        z = grid_to_tokens(self.proj(img))
        return TokenSequence(z.tokens + self.pos, z.grid)


def window_attention(q, k, v, heads: int, wh: int, ww: int) -> torch.Tensor:
    """Multi-head attention inside non-overlapping wh x ww windows of B x h x w x C maps."""
    b, h, w, c = q.shape
    dh = c // heads

    def split(t):
        t = t.reshape(b, h // wh, wh, w // ww, ww, heads, dh)
        return t.permute(0, 1, 3, 5, 2, 4, 6).reshape(-1, heads, wh * ww, dh)

    qs, ks, vs = split(q), split(k), split(v)
    attn = torch.softmax(qs @ ks.transpose(-2, -1) * dh**-0.5, dim=-1)
    out = (attn @ vs).reshape(b, h // wh, w // ww, heads, wh, ww, dh)
    return out.permute(0, 1, 4, 2, 5, 3, 6).reshape(b, h, w, c)


class CrossShapedAttention(nn.Module):
    """Half the heads attend within horizontal stripes, half within vertical ones.

    When the stripe covers the whole grid a single branch does global attention.
    """

    def __init__(self, dim: int, heads: int, stripe: int, side: int):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.stripe = min(stripe, side)
        self.branches = 1 if stripe >= side else 2
        if side % self.stripe:
            raise ValueError(f"stripe width {stripe} does not divide grid side {side}")
        if heads % self.branches or dim % heads:
            raise ValueError(f"{heads} heads incompatible with dim {dim}")
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
        b, n, c = x.shape
        h, w = grid
        q, k, v = self.qkv(x).reshape(b, h, w, 3, c).unbind(3)
        if self.branches == 1:
            out = window_attention(q, k, v, self.heads, h, w)
        else:
            half, hh = c // 2, self.heads // 2
            horiz = window_attention(q[..., :half], k[..., :half], v[..., :half], hh, self.stripe, w)
            vert = window_attention(q[..., half:], k[..., half:], v[..., half:], hh, h, self.stripe)
            out = torch.cat([horiz, vert], dim=-1)
        return self.proj(out.reshape(b, n, c))


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class CSWinBlock(nn.Module):
    """Parallel residual block: x + attn(LN(x)) + mlp(LN(x))."""

    def __init__(self, dim: int, heads: int, stripe: int, side: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = CrossShapedAttention(dim, heads, stripe, side)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, z: TokenSequence) -> TokenSequence:
        x = z.tokens
        return TokenSequence(x + self.attn(self.norm1(x), z.grid) + self.mlp(self.norm2(x)), z.grid)


class PatchMerge(nn.Module):
    """2x2 neighbourhood concat -> LN -> linear; halves each side, doubles channels."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduce = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, z: TokenSequence) -> TokenSequence:
        x = tokens_to_grid(z)
        x = torch.cat([x[..., 0::2, 0::2], x[..., 1::2, 0::2], x[..., 0::2, 1::2], x[..., 1::2, 1::2]], dim=1)
        t = grid_to_tokens(x)
        return TokenSequence(self.reduce(self.norm(t.tokens)), t.grid)


class TransformerEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = PatchEmbed(cfg.image_size, cfg.patch_size, cfg.embed_dim)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for s, (depth, heads, stripe, side, dim) in enumerate(
            zip(cfg.stage_depths, cfg.heads_per_stage, cfg.stripe_widths, cfg.grid_sides, cfg.stage_dims)
        ):
            self.stages.append(nn.ModuleList(CSWinBlock(dim, heads, stripe, side, cfg.mlp_ratio) for _ in range(depth)))
            if s < 3:
                self.merges.append(PatchMerge(dim))
        self.norm = nn.LayerNorm(cfg.stage_dims[-1])

    def forward(self, img: torch.Tensor) -> TokenSequence:
        z = self.embed(img)
        for s, blocks in enumerate(self.stages):
            for blk in blocks:
                z = blk(z)
            if s < 3:
                z = self.merges[s](z)
        return TokenSequence(self.norm(z.tokens), z.grid)


class ResidualConv(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(x)))


class CNNEncoder(nn.Module):
    """Convolutional stand-in with the same token grid and channel plan as the transformer encoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.image_size = cfg.image_size
        self.embed = nn.Conv2d(1, cfg.embed_dim, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.stages = nn.ModuleList(
            nn.Sequential(*(ResidualConv(dim) for _ in range(depth))) for depth, dim in zip(cfg.stage_depths, cfg.stage_dims)
        )
        self.downs = nn.ModuleList(nn.Conv2d(dim, 2 * dim, 3, stride=2, padding=1) for dim in cfg.stage_dims[:3])

    def forward(self, img: torch.Tensor) -> TokenSequence:
        if img.ndim == 3:
            img = img[:, None]
        if img.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(f"expected {self.image_size}x{self.image_size} input, got {tuple(img.shape[-2:])}")
        x = self.embed(img)
        for s, stage in enumerate(self.stages):
            x = stage(x)
            if s < 3:
                x = self.downs[s](x)
        return grid_to_tokens(x)


class UpStage(nn.Module):
    """Nearest x2 upsample, 3x3 conv, GELU."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)

    def forward(self, x):
        return F.gelu(self.conv(F.interpolate(x, scale_factor=2, mode="nearest")))


class TransformerUpStage(nn.Module):
    """Nearest x2 upsample, 1x1 channel projection, one cross-shaped attention block."""

    def __init__(self, cin: int, cout: int, side: int, mlp_ratio: float):
        super().__init__()
        self.proj = nn.Conv2d(cin, cout, 1)
        heads = 2 if cout % 2 == 0 else 1
        stripe = side if side <= 8 or heads == 1 else 1
        self.block = CSWinBlock(cout, heads, stripe, side, mlp_ratio)

    def forward(self, x):
        x = self.proj(F.interpolate(x, scale_factor=2, mode="nearest"))
        return tokens_to_grid(self.block(grid_to_tokens(x)))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.in_dim = cfg.stage_dims[-1]
        self.in_side = cfg.grid_sides[-1]
        chans = (self.in_dim, *cfg.decoder_channels)
        side = self.in_side
        stages = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            side *= 2
            if cfg.decoder_kind == "cnn":
                stages.append(UpStage(cin, cout))
            else:
                stages.append(TransformerUpStage(cin, cout, side, cfg.mlp_ratio))
        self.stages = nn.ModuleList(stages)
        self.head = nn.Conv2d(chans[-1], 1, 1)

    def forward(self, z: TokenSequence) -> tuple[torch.Tensor, torch.Tensor]:
        if z.grid != (self.in_side, self.in_side) or z.dim != self.in_dim:
            raise ValueError(
                f"decoder expects a {self.in_side}x{self.in_side}x{self.in_dim} token grid, got {z.grid}x{z.dim}"
            )
        x = tokens_to_grid(z)
        for stage in self.stages:
            x = stage(x)
        return torch.sigmoid(self.head(x)), x


class ProjectionHead(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, out_dim)

    def forward(self, pooled):
        return F.normalize(self.fc2(F.relu(self.fc1(pooled))), dim=-1)


def _init_linear(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


class DespeckleNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = TransformerEncoder(cfg) if cfg.encoder_kind == "transformer" else CNNEncoder(cfg)
        self.decoder = Decoder(cfg)
        self.head = ProjectionHead(cfg.stage_dims[-1], cfg.projection_dim)
        self.apply(_init_linear)

    def patch_embed(self, img) -> TokenSequence:
        if not isinstance(self.encoder, TransformerEncoder):
            raise TypeError("patch_embed is only defined for the transformer encoder")
        return self.encoder.embed(img)

    def encode(self, img) -> TokenSequence:
        return self.encoder(img)

    def decode(self, z: TokenSequence) -> torch.Tensor:
        return self.decoder(z)[0]

    def embed(self, img) -> torch.Tensor:
        """Unit-norm instance embedding: encode, global average pool, projection head."""
        return self.head(self.encode(img).tokens.mean(1))

    def forward(self, img) -> DenoiseOutput:
        z = self.encode(img)
        pred, feats = self.decoder(z)
        return DenoiseOutput(pred, z, feats, z.tokens.mean(1))


def zero_branch_projections(model: nn.Module) -> None:
    """Zero every transformer block's attention and MLP output projections."""
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, CSWinBlock):
                for lin in (m.attn.proj, m.mlp.fc2):
                    lin.weight.zero_()
                    lin.bias.zero_()


def build_model(cfg: ModelConfig, seed: int | None = None, dtype: torch.dtype = torch.float32) -> DespeckleNet:
    if seed is not None:
        torch.manual_seed(seed)
    return DespeckleNet(cfg).to(dtype)
