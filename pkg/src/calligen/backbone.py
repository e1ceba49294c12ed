"""Patchified state-space denoiser with three-label scale-shift conditioning.

Latent -> non-overlapping p x p patches (row-major) -> linear token embedding
plus learned positions -> N blocks -> modulated final norm -> per-token linear
head -> latent. Each block is

    x + gate * Mixer((1 + scale) * LayerNorm(x) + shift)

where (shift, scale, gate) are a linear function of SiLU(cond). The
conditioning vector cond is the calligrapher + font + character embedding sum
plus the timestep embedding. Mixer is a forward scan plus a backward scan with
separate weights, gated by SiLU.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from calligen.labels import LabelTriple


@dataclass(frozen=True)
class ModelConfig:
    num_calligraphers: int
    num_fonts: int
    num_characters: int
    latent_side: int = 32
    latent_channels: int = 1
    patch_side: int = 4
    hidden_width: int = 128
    depth: int = 2
    state_dim: int = 16
    head_dim: int = 32
    chunk_size: int = 16

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if int(value) != value or value <= 0:
                raise ValueError(f"ModelConfig.{name} must be a positive integer, got {value!r}")
        if self.latent_side % self.patch_side:
            raise ValueError(f"latent_side {self.latent_side} not divisible by patch_side {self.patch_side}")
        if self.hidden_width % 2:
            raise ValueError(f"hidden_width must be even, got {self.hidden_width}")
        if self.hidden_width % self.head_dim:
            raise ValueError(f"head_dim {self.head_dim} does not divide hidden_width {self.hidden_width}")

    @property
    def num_tokens(self) -> int:
        return self.latent_side**2 // self.patch_side**2

    @property
    def token_dim(self) -> int:
        return self.patch_side**2 * self.latent_channels

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, self.latent_side, self.latent_side)

    @classmethod
    def full_scale(cls, num_calligraphers: int, num_fonts: int, num_characters: int) -> "ModelConfig":
        """32x32x4 latents, patch 8, width 512, four blocks."""
        return cls(
            num_calligraphers, num_fonts, num_characters,
            latent_side=32, latent_channels=4, patch_side=8, hidden_width=512, depth=4,
        )

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# patches


def patchify(latent: torch.Tensor, p: int) -> torch.Tensor:
    """``(..., c, b, b) -> (..., n, c*p*p)`` with row-major patch order.

    Each token flattens its patch channel-major, then row, then column.
    """
    *lead, c, h, w = latent.shape
    if h != w:
        raise ValueError(f"latent must be square, got {h}x{w}")
    if h % p:
        raise ValueError(f"latent side {h} not divisible by patch side {p}")
    g = h // p
    k = len(lead)
    x = latent.reshape(*lead, c, g, p, g, p)
    x = x.permute(*range(k), k + 1, k + 3, k, k + 2, k + 4)
    return x.reshape(*lead, g * g, c * p * p)


def unpatchify(tokens: torch.Tensor, p: int, b: int, c: int) -> torch.Tensor:
    """Exact inverse of :func:`patchify`."""
    *lead, n, dim = tokens.shape
    if b % p:
        raise ValueError(f"latent side {b} not divisible by patch side {p}")
    g = b // p
    if n != g * g:
        raise ValueError(f"expected {g * g} tokens for b={b}, p={p}, got {n}")
    if dim != c * p * p:
        raise ValueError(f"expected token length {c * p * p}, got {dim}")
    k = len(lead)
    x = tokens.reshape(*lead, g, g, c, p, p)
    x = x.permute(*range(k), k + 2, k, k + 3, k + 1, k + 4)
    return x.reshape(*lead, c, b, b)


# ---------------------------------------------------------------------------
# conditioning


def sinusoidal_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """``[sin(t*f_k) ..., cos(t*f_k) ...]`` for ``dim // 2`` geometric frequencies starting at 1."""
    if dim % 2:
        raise ValueError(f"embedding width must be even, got {dim}")
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64).reshape(-1, 1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TimestepEmbedder(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        feats = sinusoidal_features(t, self.dim).to(self.mlp[0].weight.dtype)
        return self.mlp(feats)


class LabelEmbedder(nn.Module):
    """One embedding table per label axis; the three rows are summed."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.hidden_width
        self.calligrapher = nn.Embedding(config.num_calligraphers, d)
        self.font = nn.Embedding(config.num_fonts, d)
        self.character = nn.Embedding(config.num_characters, d)

    def check(self, labels: torch.Tensor) -> None:
        if labels.ndim != 2 or labels.shape[1] != 3:
            raise ValueError(f"labels must have shape (B, 3), got {tuple(labels.shape)}")
        tables = (self.calligrapher, self.font, self.character)
        for axis, (name, table) in enumerate(zip(LabelTriple._fields, tables)):
            ids = labels[:, axis]
            if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.num_embeddings):
                raise ValueError(f"{name} out of range [0, {table.num_embeddings}): {ids.tolist()}")

    def forward(self, labels: torch.Tensor) -> torch.Tensor:
        # data-dependent check; skipped under torch.compile to avoid a graph break
        if not torch.compiler.is_compiling():
            self.check(labels)
        return self.calligrapher(labels[:, 0]) + self.font(labels[:, 1]) + self.character(labels[:, 2])


# ---------------------------------------------------------------------------
# state-space scan


def _segsum(log_a: torch.Tensor) -> torch.Tensor:
    """``out[..., i, k] = sum(log_a[..., k+1 : i+1])`` for i >= k, ``-inf`` above the diagonal."""
    q = log_a.shape[-1]
    cs = log_a.cumsum(dim=-1)
    diff = cs.unsqueeze(-1) - cs.unsqueeze(-2)
    upper = torch.ones(q, q, dtype=torch.bool, device=log_a.device).triu(diagonal=1)
    return diff.masked_fill(upper, -math.inf)


def scan_log_decay(
    x: torch.Tensor,
    log_decay: torch.Tensor,
    b: torch.Tensor,
    c: torch.Tensor,
    skip: torch.Tensor,
    step: Optional[torch.Tensor] = None,
    chunk_size: int = 16,
) -> torch.Tensor:
    """Chunked evaluation of the recurrence with decay given in log space.

    ``log_decay`` has shape ``(..., n, h)`` where ``h`` divides the channel count;
    channel ``j`` uses the decay of head ``j // (d // h)``. Within a chunk the
    recurrence is unrolled into its lower-triangular matrix form; chunk boundary
    states are carried sequentially.
    """
    *lead, n, d = x.shape
    s = b.shape[-1]
    heads = log_decay.shape[-1]
    if d % heads:
        raise ValueError(f"{heads} decay heads do not divide {d} channels")
    hd = d // heads
    x = x.reshape(-1, n, d)
    bsz = x.shape[0]
    log_decay = log_decay.reshape(bsz, n, heads)
    b = b.reshape(bsz, n, s)
    c = c.reshape(bsz, n, s)
    u = x if step is None else x * step.reshape(bsz, n, d)

    q = chunk_size
    pad = (-n) % q
    if pad:
        u = F.pad(u, (0, 0, 0, pad))
        log_decay = F.pad(log_decay, (0, 0, 0, pad))
        b = F.pad(b, (0, 0, 0, pad))
        c = F.pad(c, (0, 0, 0, pad))
    nc = (n + pad) // q
    u = u.reshape(bsz, nc, q, heads, hd)
    b = b.reshape(bsz, nc, q, s)
    c = c.reshape(bsz, nc, q, s)
    la = log_decay.reshape(bsz, nc, q, heads).transpose(-1, -2)  # (B, nc, h, q)

    decay = torch.exp(_segsum(la))  # (B, nc, h, i, k)
    scores = torch.einsum("bcis,bcks->bcik", c, b)
    y = torch.einsum("bchik,bckhp->bcihp", decay * scores.unsqueeze(2), u)

    # state each chunk produces from its own inputs
    to_end = decay[..., -1, :]  # (B, nc, h, k)
    weighted = u * to_end.transpose(-1, -2).unsqueeze(-1)
    chunk_states = torch.einsum("bckhp,bcks->bchps", weighted, b)
    from_start = torch.exp(la.cumsum(dim=-1))  # (B, nc, h, i)
    chunk_decay = from_start[..., -1]  # (B, nc, h)

    state = x.new_zeros(bsz, heads, hd, s)
    incoming = []
    for ci in range(nc):
        incoming.append(state)
        state = chunk_decay[:, ci, :, None, None] * state + chunk_states[:, ci]
    h_in = torch.stack(incoming, dim=1)  # (B, nc, h, p, s)
    carried = torch.einsum("bcis,bchps->bcihp", c, h_in)
    y = y + carried * from_start.transpose(-1, -2).unsqueeze(-1)

    y = y.reshape(bsz, nc * q, d)[:, :n]
    y = y + skip * x
    return y.reshape(*lead, n, d)


def ssm_scan(
    x: torch.Tensor,
    decay: torch.Tensor,
    b: torch.Tensor,
    c: torch.Tensor,
    skip: torch.Tensor,
    step: Optional[torch.Tensor] = None,
    chunk_size: int = 16,
) -> torch.Tensor:
    """Causal linear recurrence over tokens, independently per channel ``j``.

    ``h_i[j] = decay_i[j] * h_{i-1}[j] + step_i[j] * x_i[j] * b_i`` (state of size ``s``),
    ``y_i[j] = <c_i, h_i[j]> + skip[j] * x_i[j]``, ``h_{-1} = 0``.

    Shapes: ``x, step: (..., n, d)``; ``decay: (..., n, d)`` or ``(..., n, h)`` with
    ``h`` dividing ``d`` (decay shared by each group of ``d // h`` channels);
    ``b, c: (..., n, s)``; ``skip: (d,)``. ``decay`` lies in ``[0, 1]``; ``step``
    defaults to ones.
    """
    for name, value in (("x", x), ("decay", decay), ("b", b), ("c", c), ("skip", skip), ("step", step)):
        if value is not None and not bool(torch.isfinite(value).all()):
            raise ValueError(f"non-finite values in scan parameter {name!r}")
    if bool((decay < 0).any()) or bool((decay > 1).any()):
        raise ValueError("decay must lie in [0, 1]")
    tiny = torch.finfo(decay.dtype).tiny
    log_decay = torch.log(decay.clamp_min(tiny))
    return scan_log_decay(x, log_decay, b, c, skip, step, chunk_size)


def _inverse_softplus(y: torch.Tensor) -> torch.Tensor:
    return y + torch.log(-torch.expm1(-y))


class SelectiveScan(nn.Module):
    """One scan direction: input-dependent step, state projections and positive decay rates.

    Step size and decay rate are per head of ``head_dim`` channels.
    """

    def __init__(self, dim: int, state_dim: int, head_dim: int = 16, chunk_size: int = 16):
        super().__init__()
        if dim % head_dim:
            raise ValueError(f"head_dim {head_dim} does not divide width {dim}")
        self.dim = dim
        self.state_dim = state_dim
        self.heads = dim // head_dim
        self.head_dim = head_dim
        self.chunk_size = chunk_size
        self.in_proj = nn.Linear(dim, dim + self.heads + 2 * state_dim)
        self.dt_bias = nn.Parameter(torch.empty(self.heads))
        self.A_log = nn.Parameter(torch.empty(self.heads))
        self.D = nn.Parameter(torch.empty(dim))
        self.reset_scan_parameters()

    def reset_scan_parameters(self, dt_min: float = 1e-3, dt_max: float = 1e-1) -> None:
        with torch.no_grad():
            u = torch.rand(self.heads)
            dt = torch.exp(u * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
            self.dt_bias.copy_(_inverse_softplus(dt))
            self.A_log.copy_(torch.log(torch.empty(self.heads).uniform_(1.0, 16.0)))
            self.D.fill_(1.0)

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        d, s, h = self.dim, self.state_dim, self.heads
        x, dt, b, c = self.in_proj(u).split([d, h, s, s], dim=-1)
        x = F.silu(x)
        step = F.softplus(dt + self.dt_bias)  # (..., n, h)
        log_decay = -step * torch.exp(self.A_log)
        step = step.repeat_interleave(self.head_dim, dim=-1)
        return scan_log_decay(x, log_decay, b, c, self.D, step, self.chunk_size)


class BidirectionalMixer(nn.Module):
    """Forward scan + re-reversed backward scan, SiLU-gated, then projected."""

    def __init__(self, dim: int, state_dim: int, head_dim: int = 16, chunk_size: int = 16):
        super().__init__()
        self.forward_scan = SelectiveScan(dim, state_dim, head_dim, chunk_size)
        self.backward_scan = SelectiveScan(dim, state_dim, head_dim, chunk_size)
        self.gate_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        y = self.forward_scan(u) + self.backward_scan(u.flip(-2)).flip(-2)
        y = y * F.silu(self.gate_proj(u))
        return self.out_proj(y)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(-2)) + shift.unsqueeze(-2)


class Block(nn.Module):
    def __init__(self, dim: int, state_dim: int, head_dim: int = 16, chunk_size: int = 16):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mixer = BidirectionalMixer(dim, state_dim, head_dim, chunk_size)
        self.modulation = nn.Linear(dim, 3 * dim)
        nn.init.zeros_(self.modulation.weight)  # gate starts at 0, so the block starts as the identity
        nn.init.zeros_(self.modulation.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != cond.shape[-1]:
            raise ValueError(f"token width {x.shape[-1]} != conditioning width {cond.shape[-1]}")
        shift, scale, gate = self.modulation(F.silu(cond)).chunk(3, dim=-1)
        h = self.mixer(modulate(self.norm(x), shift, scale))
        return x + gate.unsqueeze(-2) * h


class FinalLayer(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.modulation = nn.Linear(dim, 2 * dim)
        self.linear = nn.Linear(dim, out_dim)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        shift, scale = self.modulation(F.silu(cond)).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


class Denoiser(nn.Module):
    """Noise predictor ``eps_theta(x_t, t, labels)`` for batched latents ``(B, c, b, b)``."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.hidden_width
        self.patch_embed = nn.Linear(config.token_dim, d)
        self.pos_embed = nn.Parameter(torch.zeros(1, config.num_tokens, d))
        self.time_embed = TimestepEmbedder(d)
        self.label_embed = LabelEmbedder(config)
        self.blocks = nn.ModuleList(
            Block(d, config.state_dim, config.head_dim, config.chunk_size) for _ in range(config.depth)
        )
        self.final = FinalLayer(d, config.token_dim)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.xavier_uniform_(module.weight)
                nn.init.zeros_(module.bias)
        nn.init.normal_(self.pos_embed, std=0.02)
        # unit-scale label rows: the zero-initialised modulations only learn as fast as cond is large
        for table in (self.label_embed.calligrapher, self.label_embed.font, self.label_embed.character):
            nn.init.normal_(table.weight, std=1.0)
        for block in self.blocks:
            block.mixer.forward_scan.reset_scan_parameters()
            block.mixer.backward_scan.reset_scan_parameters()
            nn.init.zeros_(block.modulation.weight)
            nn.init.zeros_(block.modulation.bias)
        nn.init.zeros_(self.final.modulation.weight)
        nn.init.zeros_(self.final.modulation.bias)

    def condition(self, t: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        return self.label_embed(labels) + self.time_embed(t)

    def forward(self, x: torch.Tensor, t: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if x.ndim != 4 or tuple(x.shape[1:]) != cfg.latent_shape:
            raise ValueError(f"expected latents of shape (B, {cfg.latent_shape}), got {tuple(x.shape)}")
        if t.shape != (x.shape[0],) or labels.shape[0] != x.shape[0]:
            raise ValueError("t and labels must have one entry per batch element")
        h = self.patch_embed(patchify(x, cfg.patch_side)) + self.pos_embed
        cond = self.condition(t, labels)
        for block in self.blocks:
            h = block(h, cond)
        out = self.final(h, cond)
        return unpatchify(out, cfg.patch_side, cfg.latent_side, cfg.latent_channels)


def build_model(config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> Denoiser:
    """Deterministically initialised model; the global RNG state is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Denoiser(config)
    return model.to(dtype)


def embed_labels(labels: LabelTriple, t: int, model: Denoiser) -> torch.Tensor:
    """Conditioning vector of width ``hidden_width`` for a single triple and timestep."""
    lab = torch.tensor([tuple(labels)], dtype=torch.long)
    tt = torch.tensor([int(t)], dtype=torch.long)
    return model.condition(tt, lab)[0]


def block_forward(tokens: torch.Tensor, cond: torch.Tensor, block: Block) -> torch.Tensor:
    return block(tokens, cond)


def denoise_forward(x_t: torch.Tensor, t: int, labels: LabelTriple, model: Denoiser) -> torch.Tensor:
    """Single-sample convenience wrapper: ``(c, b, b) -> (c, b, b)``."""
    lab = torch.tensor([tuple(labels)], dtype=torch.long)
    tt = torch.tensor([int(t)], dtype=torch.long)
    return model(x_t.unsqueeze(0), tt, lab)[0]
