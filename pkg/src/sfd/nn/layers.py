"""Causal Conformer encoder, heads and losses on top of torch autograd.

The functional ops (``linear_forward``, ``causal_mhsa_forward``, ...) accept
any number of leading batch dimensions and frame-major inputs ``(..., N, E)``.
The modules below are thin parameter holders that call them, so a finite
difference check of an op covers the module as well.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

LAYER_NORM_EPS = 1e-5


@dataclass(frozen=True)
class ConformerConfig:
    input_dim: int = 1028
    layers: int = 2
    embed_dim: int = 64
    heads: int = 4
    conv_kernel: int = 31
    ff_expansion: int = 4
    stem_dim: int = 256
    dropout: float = 0.0
    causal: bool = True

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        if not self.causal:
            raise ValueError("only causal encoders are supported")
        if self.input_dim < 1 or self.layers < 1:
            raise ValueError("input_dim and layers must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def linear_forward(x, W, b=None):
    """``x @ W + b`` with ``W`` stored as ``(in_features, out_features)``."""
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"input width {x.shape[-1]} does not match weight {tuple(W.shape)}")
    out = x @ W
    if b is not None:
        if b.shape != (W.shape[1],):
            raise ValueError(f"bias shape {tuple(b.shape)} does not match weight")
        out = out + b
    return out


def causal_mask(n: int, device=None) -> torch.Tensor:
    """Boolean ``(n, n)`` mask, True where frame ``i`` may attend to ``j <= i``."""
    return torch.ones(n, n, dtype=torch.bool, device=device).tril()


def causal_mhsa_forward(x, wq, bq, wk, bk, wv, bv, wo, bo, heads: int,
                        return_weights: bool = False):
    embed = x.shape[-1]
    if embed % heads or wq.shape != (embed, embed):
        raise ValueError(f"input width {embed} incompatible with {heads} heads / weights")
    n = x.shape[-2]
    head_dim = embed // heads

    def split(t):
        return t.reshape(*t.shape[:-1], heads, head_dim).transpose(-3, -2)

    q = split(linear_forward(x, wq, bq))
    k = split(linear_forward(x, wk, bk))
    v = split(linear_forward(x, wv, bv))
    if return_weights:
        scores = q @ k.transpose(-1, -2) / math.sqrt(head_dim)
        scores = scores.masked_fill(~causal_mask(n, x.device), float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        ctx = weights @ v
    else:
        ctx = F.scaled_dot_product_attention(q, k, v, is_causal=True)
    ctx = ctx.transpose(-3, -2).reshape(*x.shape[:-1], embed)
    out = linear_forward(ctx, wo, bo)
    return (out, weights) if return_weights else out


def causal_depthwise_conv_forward(x, kernel, bias=None):
    """Per-channel convolution over frames with ``k - 1`` frames of left padding.

    ``kernel`` has shape ``(E, k)``; tap ``k - 1`` multiplies the current frame.
    """
    channels, size = kernel.shape
    if size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    if x.shape[-1] != channels:
        raise ValueError(f"input width {x.shape[-1]} does not match kernel {tuple(kernel.shape)}")
    lead = x.shape[:-2]
    seq = x.reshape(-1, x.shape[-2], channels).transpose(1, 2)
    seq = F.pad(seq, (size - 1, 0))
    out = F.conv1d(seq, kernel.unsqueeze(1), bias, groups=channels)
    return out.transpose(1, 2).reshape(*lead, x.shape[-2], channels)


def glu(x):
    a, b = x.chunk(2, dim=-1)
    return a * torch.sigmoid(b)


class Linear(nn.Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        limit = math.sqrt(6.0 / (in_features + out_features))
        self.weight = nn.Parameter(torch.empty(in_features, out_features).uniform_(-limit, limit))
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None

    def forward(self, x):
        return linear_forward(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return F.layer_norm(x, self.weight.shape, self.weight, self.bias, LAYER_NORM_EPS)


class FeedForward(nn.Module):
    def __init__(self, dim: int, expansion: int, dropout: float):
        super().__init__()
        self.norm = LayerNorm(dim)
        self.up = Linear(dim, dim * expansion)
        self.down = Linear(dim * expansion, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        h = self.dropout(F.silu(self.up(self.norm(x))))
        return self.dropout(self.down(h))


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.norm = LayerNorm(dim)
        self.query = Linear(dim, dim)
        self.key = Linear(dim, dim)
        self.value = Linear(dim, dim)
        self.out = Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        h = self.norm(x)
        h = causal_mhsa_forward(h, self.query.weight, self.query.bias, self.key.weight,
                                self.key.bias, self.value.weight, self.value.bias,
                                self.out.weight, self.out.bias, self.heads)
        return self.dropout(h)


class ConvModule(nn.Module):
    """Pointwise + GLU, causal depthwise conv, norm, SiLU, pointwise."""

    def __init__(self, dim: int, kernel: int, dropout: float):
        super().__init__()
        self.norm = LayerNorm(dim)
        self.pointwise_in = Linear(dim, 2 * dim)
        bound = 1.0 / math.sqrt(kernel)
        self.depthwise_weight = nn.Parameter(torch.empty(dim, kernel).uniform_(-bound, bound))
        self.depthwise_bias = nn.Parameter(torch.zeros(dim))
        # layer norm instead of batch norm: batch statistics would leak future frames
        self.conv_norm = LayerNorm(dim)
        self.pointwise_out = Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        h = glu(self.pointwise_in(self.norm(x)))
        h = causal_depthwise_conv_forward(h, self.depthwise_weight, self.depthwise_bias)
        h = F.silu(self.conv_norm(h))
        return self.dropout(self.pointwise_out(h))


class ConformerBlock(nn.Module):
    def __init__(self, config: ConformerConfig):
        super().__init__()
        d = config.embed_dim
        self.ff1 = FeedForward(d, config.ff_expansion, config.dropout)
        self.attention = CausalSelfAttention(d, config.heads, config.dropout)
        self.conv = ConvModule(d, config.conv_kernel, config.dropout)
        self.ff2 = FeedForward(d, config.ff_expansion, config.dropout)
        self.norm = LayerNorm(d)

    def forward(self, x):
        x = x + 0.5 * self.ff1(x)
        x = x + self.attention(x)
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.norm(x)


class InputStem(nn.Module):
    """Per-frame normalization and a two-hidden-layer projection to the embedding."""

    def __init__(self, input_dim: int, hidden: int, embed: int):
        super().__init__()
        self.norm = LayerNorm(input_dim)
        self.fc1 = Linear(input_dim, hidden)
        self.fc2 = Linear(hidden, hidden)
        self.fc3 = Linear(hidden, embed)

    def forward(self, x):
        h = F.silu(self.fc1(self.norm(x)))
        h = F.silu(self.fc2(h))
        return self.fc3(h)


class ConformerEncoder(nn.Module):
    def __init__(self, config: ConformerConfig):
        super().__init__()
        self.config = config
        self.stem = InputStem(config.input_dim, config.stem_dim, config.embed_dim)
        self.blocks = nn.ModuleList(ConformerBlock(config) for _ in range(config.layers))

    def forward(self, x):
        if x.shape[-1] != self.config.input_dim:
            raise ValueError(
                f"expected {self.config.input_dim} input features, got {x.shape[-1]}")
        h = self.stem(x)
        for block in self.blocks:
            h = block(h)
        return h


def conformer_encode(x, encoder: ConformerEncoder):
    return encoder(x)


class SFDModel(nn.Module):
    """Encoder plus the linear feature predictor used during distillation."""

    def __init__(self, config: ConformerConfig, target_dim: int):
        super().__init__()
        self.encoder = ConformerEncoder(config)
        self.predictor = Linear(config.embed_dim, target_dim)

    def forward(self, x):
        return self.predictor(self.encoder(x))


class DoAModel(nn.Module):
    """Encoder plus a linear frame-level classifier over DoA classes."""

    def __init__(self, config: ConformerConfig, n_classes: int = 37):
        super().__init__()
        self.encoder = ConformerEncoder(config)
        self.classifier = Linear(config.embed_dim, n_classes)

    def forward(self, x):
        return self.classifier(self.encoder(x))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _frame_mask(mask, shape, device, dtype):
    if mask is None:
        return torch.ones(shape, device=device, dtype=dtype)
    mask = torch.as_tensor(mask, device=device).to(dtype)
    if mask.shape != shape:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match frames {tuple(shape)}")
    return mask


def _per_utterance_mean(per_frame, mask):
    counts = mask.sum(dim=-1).clamp_min(1.0)
    return ((per_frame * mask).sum(dim=-1) / counts).mean()


def mse_loss(y, z, mask=None):
    """Squared error summed over features, averaged over (valid) frames.

    Batched inputs ``(B, N, D)`` average the per-utterance losses.
    """
    if y.shape != z.shape:
        raise ValueError(f"prediction {tuple(y.shape)} and target {tuple(z.shape)} differ")
    per_frame = ((y - z) ** 2).sum(dim=-1)
    return _per_utterance_mean(per_frame, _frame_mask(mask, per_frame.shape, y.device, y.dtype))


def cross_entropy_loss(logits, labels, mask=None):
    """Frame-level cross-entropy with log-sum-exp stabilization."""
    labels = torch.as_tensor(labels, device=logits.device, dtype=torch.long)
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels {tuple(labels.shape)} do not match logits {tuple(logits.shape)}")
    n_classes = logits.shape[-1]
    frame_mask = _frame_mask(mask, labels.shape, logits.device, logits.dtype)
    valid = frame_mask > 0
    if valid.any() and (labels[valid].min() < 0 or labels[valid].max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    safe = labels.clamp(0, n_classes - 1)
    shift = logits.max(dim=-1, keepdim=True).values.detach()
    log_norm = torch.log(torch.exp(logits - shift).sum(dim=-1)) + shift.squeeze(-1)
    picked = logits.gather(-1, safe.unsqueeze(-1)).squeeze(-1)
    return _per_utterance_mean(log_norm - picked, frame_mask)
