"""HEALPix window-attention UNet built on :mod:`healswin.autodiff`.

Tokens live in nested order with shape ``(batch, tokens, channels)``. Patch
embedding, windowing, merging and expansion are all reshapes of consecutive
runs; shifting is a precomputed gather.
"""
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import windows as W
from .autodiff import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    nside: int = 256
    in_channels: int = 3
    out_channels: int = 1
    patch_size: int = 4
    window_size: int = 64
    shift: int = 4
    shift_strategy: str = "spiral"
    depths: tuple = (2, 2, 2, 2)
    dims: tuple = (32, 64, 128, 256)
    heads: tuple = (1, 2, 4, 8)
    mlp_ratio: float = 2.0
    num_faces: int = 8
    seed: int = 0

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.dims = tuple(int(d) for d in self.dims)
        self.heads = tuple(int(h) for h in self.heads)
        self.validate()

    def validate(self):
        try:
            grid = W.build_patches(self.nside, self.patch_size, self.num_faces)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not W.is_power_of_four(self.window_size):
            raise ConfigError(f"window_size must be a power of four, got {self.window_size}")
        if not (len(self.depths) == len(self.dims) == len(self.heads)) or not self.depths:
            raise ConfigError("depths, dims and heads must be nonempty and of equal length")
        if any(d < 1 for d in self.depths):
            raise ConfigError("every stage needs at least one block")
        for d, h in zip(self.dims, self.heads):
            if h < 1 or d % h:
                raise ConfigError(f"dim {d} is not divisible by {h} heads")
        if grid.nside >> (len(self.depths) - 1) < 1:
            raise ConfigError(f"{len(self.depths)} stages need patch-level nside >= {1 << (len(self.depths) - 1)}")
        if self.shift_strategy not in ("spiral", "grid"):
            raise ConfigError(f"unknown shift_strategy {self.shift_strategy!r}")
        if self.shift < 0:
            raise ConfigError("shift must be nonnegative")

    @property
    def num_stages(self):
        return len(self.depths)

    @property
    def num_pixels(self):
        return self.num_faces * self.nside * self.nside

    def stage_grids(self):
        grids = [W.build_patches(self.nside, self.patch_size, self.num_faces)]
        for _ in range(self.num_stages - 1):
            grids.append(W.merge_index(grids[-1]))
        return grids

    def to_dict(self):
        d = asdict(self)
        for k in ("depths", "dims", "heads"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        fields = set(cls.__dataclass_fields__)
        unknown = set(d) - fields
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def full_config(out_channels=1):
    """Full-size layout: nside 256, patch 4, window 64, spiral shift 4, four stages."""
    return ModelConfig(nside=256, out_channels=out_channels, depths=(2, 2, 6, 2), dims=(96, 192, 384, 768), heads=(3, 6, 12, 24), mlp_ratio=4.0)


# --- layers -------------------------------------------------------------------------


def _trunc_normal(rng, shape, std=0.02):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


class Module:
    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True):
        self.weight = Tensor(_trunc_normal(rng, (d_in, d_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim):
        self.weight = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x):
        return ad.layer_norm(x, self.weight, self.bias)


class WindowAttention(Module):
    """Cosine self-attention inside windows of ``window_size`` consecutive tokens."""

    def __init__(self, rng, dim, heads, window_size):
        self.heads = heads
        self.window_size = window_size
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.proj = Linear(rng, dim, dim)
        side = math.isqrt(window_size)
        self.bias_table = Tensor(np.zeros(((2 * side - 1) ** 2, heads)), requires_grad=True)
        self.log_tau = Tensor(np.full((heads, 1, 1), math.log(0.1 - ad.TAU_MIN)), requires_grad=True)
        self.rel_index = W.rel_pos_index(window_size)

    def tau(self):
        return ad.exp(self.log_tau) + ad.TAU_MIN

    def position_bias(self):
        b = ad.gather(self.bias_table, self.rel_index, axis=0)
        return b.transpose(2, 0, 1)

    def __call__(self, x, mask=None):
        B, N, C = x.shape
        ws = self.window_size
        nw = N // ws
        hd = C // self.heads

        def split(t):
            return t.reshape(B, nw, ws, self.heads, hd).transpose(0, 1, 3, 2, 4)

        out = ad.cosine_attention(split(self.q(x)), split(self.k(x)), split(self.v(x)), self.tau(), self.position_bias(), mask)
        return self.proj(out.transpose(0, 1, 3, 2, 4).reshape(B, N, C))


class Mlp(Module):
    def __init__(self, rng, dim, ratio):
        hidden = max(1, int(round(dim * ratio)))
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


class Block(Module):
    """Residual attention + MLP with the normalization at the end of each branch."""

    def __init__(self, rng, dim, heads, window_size, mlp_ratio, plan=None, mask=None):
        self.attn = WindowAttention(rng, dim, heads, window_size)
        self.norm1 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, mlp_ratio)
        self.norm2 = LayerNorm(dim)
        self.plan = plan
        self.mask = mask

    @property
    def shifted(self):
        return self.plan is not None

    def __call__(self, x):
        h = x
        if self.plan is not None:
            h = ad.gather(h, self.plan.forward, axis=1)
        h = self.attn(h, self.mask)
        if self.plan is not None:
            h = ad.gather(h, self.plan.inverse, axis=1)
        x = x + self.norm1(h)
        return x + self.norm2(self.mlp(x))


class PatchMerge(Module):
    def __init__(self, rng, dim, dim_out):
        self.reduce = Linear(rng, 4 * dim, dim_out, bias=False)
        self.norm = LayerNorm(dim_out)

    def __call__(self, x):
        B, N, C = x.shape
        return self.norm(self.reduce(x.reshape(B, N // 4, 4 * C)))


class PatchExpand(Module):
    def __init__(self, rng, dim, dim_out, factor=4):
        self.factor = factor
        self.dim_out = dim_out
        self.expand = Linear(rng, dim, factor * dim_out, bias=False)
        self.norm = LayerNorm(dim_out)

    def __call__(self, x):
        B, N, _ = x.shape
        return self.norm(self.expand(x).reshape(B, N * self.factor, self.dim_out))


class PatchEmbed(Module):
    def __init__(self, rng, in_channels, patch_size, dim):
        self.patch_size = patch_size
        self.proj = Linear(rng, patch_size * in_channels, dim)
        self.norm = LayerNorm(dim)

    def __call__(self, x):
        B, P, C = x.shape
        if P % self.patch_size:
            raise ad.ShapeError(f"{P} pixels are not divisible into patches of {self.patch_size}")
        return self.norm(self.proj(x.reshape(B, P // self.patch_size, self.patch_size * C)))


def stage_plan(cfg, grid):
    """Shift plan and attention mask for the shifted blocks of one stage."""
    ws = W.effective_window(grid.nside, cfg.window_size)
    if cfg.shift_strategy == "spiral":
        plan = W.spiral_shift_plan(grid, cfg.shift % grid.length)
    else:
        plan = W.grid_shift_plan(grid, min(cfg.shift, math.isqrt(ws) // 2))
    mask = W.attention_mask(plan, W.partition_windows(grid, ws))
    return plan, (None if mask.all() else mask)


class Stage(Module):
    def __init__(self, rng, cfg, grid, dim, heads, depth):
        self.grid = grid
        self.window_size = W.effective_window(grid.nside, cfg.window_size)
        plan, mask = stage_plan(cfg, grid)
        self.blocks = [
            Block(rng, dim, heads, self.window_size, cfg.mlp_ratio, *((plan, mask) if i % 2 else (None, None)))
            for i in range(depth)
        ]

    def __call__(self, x):
        for blk in self.blocks:
            x = blk(x)
        return x


class HealSwin(Module):
    """UNet of windowed-attention stages over the nested HEALPix token list."""

    def __init__(self, cfg):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        grids = cfg.stage_grids()
        S = cfg.num_stages
        self.embed = PatchEmbed(rng, cfg.in_channels, cfg.patch_size, cfg.dims[0])
        self.encoder = [Stage(rng, cfg, grids[i], cfg.dims[i], cfg.heads[i], cfg.depths[i]) for i in range(S)]
        self.merges = [PatchMerge(rng, cfg.dims[i], cfg.dims[i + 1]) for i in range(S - 1)]
        self.expands = [PatchExpand(rng, cfg.dims[i + 1], cfg.dims[i]) for i in range(S - 1)]
        self.fuse = [Linear(rng, 2 * cfg.dims[i], cfg.dims[i]) for i in range(S - 1)]
        self.decoder = [Stage(rng, cfg, grids[i], cfg.dims[i], cfg.heads[i], cfg.depths[i]) for i in range(S - 1)]
        self.final_expand = PatchExpand(rng, cfg.dims[0], cfg.dims[0], factor=cfg.patch_size)
        self.head = Linear(rng, cfg.dims[0], cfg.out_channels)
        self.trace = []

    def _record(self, name, tokens, window_size, followed_by):
        nside = math.isqrt(tokens // self.cfg.num_faces)
        ws = min(window_size, nside * nside)
        self.trace.append(
            {
                "layer": name,
                "pixels": tokens,
                "windows": tokens // ws,
                "windows_per_base_pixel": tokens // ws // self.cfg.num_faces,
                "nside": nside,
                "window_size": ws,
                "followed_by": followed_by,
            }
        )

    def __call__(self, x):
        cfg = self.cfg
        x = ad.as_tensor(x)
        if x.ndim != 3 or x.shape[1] != cfg.num_pixels or x.shape[2] != cfg.in_channels:
            raise ad.ShapeError(f"input shape {x.shape} does not match (batch, {cfg.num_pixels}, {cfg.in_channels})")
        self.trace = []
        S = cfg.num_stages
        self._record("input", x.shape[1], cfg.window_size, "patch embedding")
        h = self.embed(x)
        skips = []
        for i in range(S):
            h = self.encoder[i](h)
            self._record(f"block {i + 1}", h.shape[1], cfg.window_size, "patch merging" if i + 1 < S else "patch expansion")
            if i + 1 < S:
                skips.append(h)
                h = self.merges[i](h)
        for j, i in enumerate(range(S - 2, -1, -1)):
            h = self.expands[i](h)
            h = self.fuse[i](ad.concat([h, skips[i]], axis=-1))
            h = self.decoder[i](h)
            self._record(f"block {S + j + 1}", h.shape[1], cfg.window_size, "patch expansion")
        h = self.final_expand(h)
        self._record("output", h.shape[1], cfg.window_size, None)
        return self.head(h)

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.data.shape:
                raise ValueError(f"checkpoint tensor {name} has shape {value.shape}, expected {p.data.shape}")
            p.data = value.astype(p.data.dtype)

    def num_parameters(self):
        return sum(p.size for p in self.parameters())
