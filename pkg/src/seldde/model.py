"""SE-augmented ResNet-Conformer for multi-ACCDDOA output.

The encoder pools only along frequency so all 400 input frames reach the
conformer; time is pooled to the 50 label frames afterwards. Squeeze-and-
excitation placement follows the variant flag:

    ====  ========  ===========  =========
    var   stem sSE  block SCSE   tail SCSE
    ====  ========  ===========  =========
    A     yes       yes          yes
    B     yes       yes          no
    C     yes       no           yes
    D     no        no           no
    ====  ========  ===========  =========
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

VARIANTS = {
    "A": dict(stem_sse=True, block_scse=True, tail_scse=True),
    "B": dict(stem_sse=True, block_scse=True, tail_scse=False),
    "C": dict(stem_sse=True, block_scse=False, tail_scse=True),
    "D": dict(stem_sse=False, block_scse=False, tail_scse=False),
}


@dataclass
class ModelConfig:
    in_channels: int = 7
    stage_channels: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    blocks_per_stage: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    se_reduction: int = 4
    conformer_layers: int = 4
    d_model: int = 256
    attention_heads: int = 8
    conv_kernel: int = 31
    ff_expansion: int = 4
    dropout: float = 0.1
    tracks: int = 3
    classes: int = 13
    time_pool_factor: int = 8
    n_frames: int = 400
    n_freq: int = 200
    variant: str = "A"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {sorted(VARIANTS)}")
        if len(self.stage_channels) != len(self.blocks_per_stage):
            raise ValueError("stage_channels and blocks_per_stage must have equal length")
        if any(c % self.se_reduction for c in self.stage_channels):
            raise ValueError("se_reduction must divide every stage channel count")
        if self.n_frames % self.time_pool_factor:
            raise ValueError("time_pool_factor must divide n_frames")
        if self.d_model % self.attention_heads:
            raise ValueError("attention_heads must divide d_model")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")

    @property
    def out_frames(self) -> int:
        return self.n_frames // self.time_pool_factor

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        base = dict(stage_channels=[4, 8, 8, 16], blocks_per_stage=[1, 1, 1, 1],
                    conformer_layers=1, d_model=32, attention_heads=4, conv_kernel=15,
                    dropout=0.0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(stage_channels=[8, 8, 8, 8], blocks_per_stage=[1, 1, 1, 1],
                    conformer_layers=1, d_model=16, attention_heads=2, conv_kernel=7,
                    dropout=0.0, classes=2)
        base.update(overrides)
        return cls(**base)


def avg_max_pool2d(x: Tensor, kernel: tuple[int, int]) -> Tensor:
    """Sum of average and max pooling over the same window."""
    return F.avg_pool2d(x, kernel) + F.max_pool2d(x, kernel)


def avg_max_pool1d(x: Tensor, kernel: int) -> Tensor:
    return F.avg_pool1d(x, kernel) + F.max_pool1d(x, kernel)


class ChannelSE(nn.Module):
    """Spatial squeeze, channel excitation."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def gate(self, x: Tensor) -> Tensor:
        return torch.sigmoid(self.fc2(F.relu(self.fc1(x.mean(dim=(2, 3))))))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)[:, :, None, None]


class SpatialSE(nn.Module):
    """Channel squeeze, spatial (time-frequency) excitation."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, 1, kernel_size=1)

    def gate(self, x: Tensor) -> Tensor:
        return torch.sigmoid(self.conv(x))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


class SCSE(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        self.cse = ChannelSE(channels, reduction)
        self.sse = SpatialSE(channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.cse(x) + self.sse(x)


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, scse: bool, reduction: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.scse = SCSE(out_ch, reduction) if scse else None
        self.shortcut = None
        if in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, bias=False),
                                          nn.BatchNorm2d(out_ch))

    def forward(self, x: Tensor) -> Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        if self.scse is not None:
            out = self.scse(out)
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class ResNetEncoder(nn.Module):
    """ResNet with frequency-only pooling; returns (B, C_last, T, 1)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        flags = VARIANTS[cfg.variant]
        ch = cfg.stage_channels
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, ch[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(ch[0]),
            nn.ReLU(),
        )
        self.stem_sse = SpatialSE(ch[0]) if flags["stem_sse"] else None
        stages = []
        in_ch = ch[0]
        for out_ch, n_blocks in zip(ch, cfg.blocks_per_stage):
            blocks = []
            for _ in range(n_blocks):
                blocks.append(BasicBlock(in_ch, out_ch, flags["block_scse"], cfg.se_reduction))
                in_ch = out_ch
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)
        self.tail_scse = SCSE(ch[-1], cfg.se_reduction) if flags["tail_scse"] else None

    def forward(self, x: Tensor) -> Tensor:
        x = self.stem(x)
        if self.stem_sse is not None:
            x = self.stem_sse(x)
        for stage in self.stages:
            x = avg_max_pool2d(stage(x), (1, 2))
        if self.tail_scse is not None:
            x = self.tail_scse(x)
        return x.mean(dim=3, keepdim=True) + x.amax(dim=3, keepdim=True)


class RelPositionalEncoding(nn.Module):
    """Sinusoidal embeddings for relative offsets T-1 ... -(T-1)."""

    def __init__(self, d_model: int):
        super().__init__()
        self.d_model = d_model

    def forward(self, length: int, dtype: torch.dtype, device) -> Tensor:
        pos = torch.arange(length - 1, -length, -1, dtype=torch.float64, device=device)
        div = torch.exp(torch.arange(0, self.d_model, 2, dtype=torch.float64, device=device)
                        * (-math.log(10000.0) / self.d_model))
        pe = torch.zeros(2 * length - 1, self.d_model, dtype=torch.float64, device=device)
        pe[:, 0::2] = torch.sin(pos[:, None] * div)
        pe[:, 1::2] = torch.cos(pos[:, None] * div)
        return pe.to(dtype)


class RelPositionMultiHeadAttention(nn.Module):
    """Self-attention with Transformer-XL style relative position terms."""

    def __init__(self, d_model: int, heads: int, dropout: float):
        super().__init__()
        self.h = heads
        self.d_k = d_model // heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.pos = nn.Linear(d_model, d_model, bias=False)
        self.pos_bias_u = nn.Parameter(torch.zeros(heads, self.d_k))
        self.pos_bias_v = nn.Parameter(torch.zeros(heads, self.d_k))
        nn.init.xavier_uniform_(self.pos_bias_u)
        nn.init.xavier_uniform_(self.pos_bias_v)
        self.dropout = nn.Dropout(dropout)

    @staticmethod
    def rel_shift(x: Tensor) -> Tensor:
        """(B, H, T, 2T-1) scores indexed by offset -> (B, H, T, T) indexed by key."""
        b, h, t, n = x.shape
        x = F.pad(x, (1, 0))
        x = x.view(b, h, n + 1, t)[:, :, 1:].view(b, h, t, n)
        return x[..., : n // 2 + 1]

    def forward(self, x: Tensor, pos_emb: Tensor) -> Tensor:
        b, t, _ = x.shape
        q = self.q(x).view(b, t, self.h, self.d_k)
        k = self.k(x).view(b, t, self.h, self.d_k).transpose(1, 2)
        v = self.v(x).view(b, t, self.h, self.d_k).transpose(1, 2)
        p = self.pos(pos_emb).view(-1, self.h, self.d_k).permute(1, 2, 0)
        content = torch.matmul((q + self.pos_bias_u).transpose(1, 2), k.transpose(-2, -1))
        position = self.rel_shift(torch.matmul((q + self.pos_bias_v).transpose(1, 2), p))
        attn = torch.softmax((content + position) / math.sqrt(self.d_k), dim=-1)
        ctx = torch.matmul(self.dropout(attn), v).transpose(1, 2).reshape(b, t, -1)
        return self.out(ctx)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, expansion: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.fc1 = nn.Linear(d_model, d_model * expansion)
        self.fc2 = nn.Linear(d_model * expansion, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        x = self.dropout(F.silu(self.fc1(self.norm(x))))
        return self.dropout(self.fc2(x))


class ConvModule(nn.Module):
    def __init__(self, d_model: int, kernel: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.pointwise1 = nn.Conv1d(d_model, 2 * d_model, 1)
        self.depthwise = nn.Conv1d(d_model, d_model, kernel, padding=kernel // 2, groups=d_model)
        self.bn = nn.BatchNorm1d(d_model)
        self.pointwise2 = nn.Conv1d(d_model, d_model, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm(x).transpose(1, 2)
        x = F.glu(self.pointwise1(x), dim=1)
        x = F.silu(self.bn(self.depthwise(x)))
        return self.dropout(self.pointwise2(x)).transpose(1, 2)


class ConformerBlock(nn.Module):
    def __init__(self, d_model: int, heads: int, kernel: int, expansion: int, dropout: float):
        super().__init__()
        self.ff1 = FeedForward(d_model, expansion, dropout)
        self.attn_norm = nn.LayerNorm(d_model)
        self.attn = RelPositionMultiHeadAttention(d_model, heads, dropout)
        self.attn_dropout = nn.Dropout(dropout)
        self.conv = ConvModule(d_model, kernel, dropout)
        self.ff2 = FeedForward(d_model, expansion, dropout)
        self.final_norm = nn.LayerNorm(d_model)

    def residual_outputs(self) -> list[nn.Module]:
        """Last layer of every residual branch (zeroing these makes the block LN(x))."""
        return [self.ff1.fc2, self.attn.out, self.conv.pointwise2, self.ff2.fc2]

    def forward(self, x: Tensor, pos_emb: Tensor) -> Tensor:
        x = x + 0.5 * self.ff1(x)
        x = x + self.attn_dropout(self.attn(self.attn_norm(x), pos_emb))
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.final_norm(x)


class Conformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.pos = RelPositionalEncoding(cfg.d_model)
        self.layers = nn.ModuleList(
            ConformerBlock(cfg.d_model, cfg.attention_heads, cfg.conv_kernel,
                           cfg.ff_expansion, cfg.dropout)
            for _ in range(cfg.conformer_layers))

    def forward(self, x: Tensor) -> Tensor:
        pos_emb = self.pos(x.shape[1], x.dtype, x.device)
        for layer in self.layers:
            x = layer(x, pos_emb)
        return x


class SeldModel(nn.Module):
    """Features (B, 7, 400, 200) -> multi-ACCDDOA (B, 50, tracks, classes, 4) in (-1, 1)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ResNetEncoder(cfg)
        self.proj = nn.Linear(cfg.stage_channels[-1], cfg.d_model)
        self.conformer = Conformer(cfg)
        self.head = nn.Linear(cfg.d_model, cfg.tracks * cfg.classes * 4)

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        if x.shape[1:] != (cfg.in_channels, cfg.n_frames, cfg.n_freq):
            raise ValueError(f"expected input (B, {cfg.in_channels}, {cfg.n_frames}, "
                             f"{cfg.n_freq}), got {tuple(x.shape)}")
        h = self.encoder(x).squeeze(-1).transpose(1, 2)
        h = self.conformer(self.proj(h))
        h = avg_max_pool1d(h.transpose(1, 2), cfg.time_pool_factor).transpose(1, 2)
        out = torch.tanh(self.head(h))
        return out.view(x.shape[0], cfg.out_frames, cfg.tracks, cfg.classes, 4)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def scse_parameter_count(channels: int, reduction: int) -> int:
    """Closed-form parameter count of one SCSE block (biases included)."""
    hidden = channels // reduction
    cse = channels * hidden + hidden + hidden * channels + channels
    sse = channels + 1
    return cse + sse


def se_presence(model: SeldModel) -> dict[str, int]:
    """How many sSE / SCSE modules sit in each encoder position."""
    enc = model.encoder
    return {
        "stem_sse": int(enc.stem_sse is not None),
        "block_scse": sum(int(b.scse is not None) for stage in enc.stages for b in stage),
        "tail_scse": int(enc.tail_scse is not None),
    }
