"""U-shaped spherical transformer: config, network, parameter and FLOP counts."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from .attention import SAB, AttentionTables, build_attention_tables
from .numerics import Linear, Module, Parameter, Tensor, ops
from .numerics.ops import SparseOp
from .posenc import SinusoidSpec
from .sphere import NodeType, PoolMode, icosphere, mean_neighborhood_size, pool_map

TablesProvider = Callable[..., AttentionTables]


@dataclass(frozen=True)
class ModelConfig:
    rank: int = 7
    node_type: str = "hex"
    in_channels: int = 3
    out_channels: int = 1
    base_dim: int = 32
    num_stages: int = 4
    depth: int = 2  # SABs per stage and in the bottleneck
    enc_heads: tuple[int, ...] = (2, 4, 8, 16)
    dec_heads: tuple[int, ...] = (4, 8, 16, 16)
    bottleneck_heads: int = 16
    c_head: int = 1
    c_win: int = 1
    pos_freqs: int = 16
    pos_max_freq: float = 10.0
    qk_norm: str = "l2"
    symmetric_bias: bool = True
    use_abs_pos: bool = True
    use_rel_pos: bool = True
    pool_mode: str = "center"

    def __post_init__(self):
        object.__setattr__(self, "node_type", NodeType.parse(self.node_type).value)
        object.__setattr__(self, "enc_heads", tuple(int(h) for h in self.enc_heads))
        object.__setattr__(self, "dec_heads", tuple(int(h) for h in self.dec_heads))

    def validate(self) -> None:
        n = self.num_stages
        if n < 1 or self.depth < 1:
            raise ValueError("num_stages and depth must be >= 1")
        if self.rank < n + 2:
            raise ValueError(f"rank {self.rank} too small for {n} stages: need rank >= {n + 2} "
                             f"so the bottleneck rank {self.rank - n - 1} is >= 1")
        if len(self.enc_heads) < n or len(self.dec_heads) < n:
            raise ValueError(f"head lists need at least {n} entries")
        if self.c_head < 1 or self.c_win < 0:
            raise ValueError("c_head must be >= 1 and c_win >= 0")
        for dim, heads in list(zip(self.stage_dims, self.enc_heads)) + list(zip(self.stage_dims, self.dec_heads)) \
                + [(self.bottleneck_dim, self.bottleneck_heads)]:
            if dim % heads:
                raise ValueError(f"{heads} heads do not divide stage dimension {dim}")
        if NodeType(self.node_type) is NodeType.VERTEX and PoolMode(self.pool_mode) is not PoolMode.CENTER:
            raise ValueError("vertex node type only supports center pooling")
        SinusoidSpec(self.pos_freqs, self.pos_max_freq)

    @property
    def stage_dims(self) -> list[int]:
        return [self.base_dim * 2**i for i in range(self.num_stages)]

    @property
    def bottleneck_dim(self) -> int:
        return self.base_dim * 2**self.num_stages

    @property
    def stage_ranks(self) -> list[int]:
        """Rank of encoder/decoder stage n = 1..N."""
        return [self.rank - n for n in range(1, self.num_stages + 1)]

    @property
    def bottleneck_rank(self) -> int:
        return self.rank - self.num_stages - 1

    @property
    def pos_spec(self) -> SinusoidSpec:
        return SinusoidSpec(self.pos_freqs, self.pos_max_freq)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_heads"] = list(self.enc_heads)
        d["dec_heads"] = list(self.dec_heads)
        return d

    def non_rank_dict(self) -> dict:
        d = self.to_dict()
        d.pop("rank")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "ModelConfig":
        return cls.from_dict(json.loads(s))

    def with_rank(self, rank: int) -> "ModelConfig":
        return replace(self, rank=rank)


class EncoderStage(Module):
    def __init__(self, blocks: list[SAB], down: Linear):
        self.blocks = blocks
        self.down = down


class DecoderStage(Module):
    def __init__(self, up: Linear, blocks: list[SAB]):
        self.up = up
        self.blocks = blocks


class _Resampler:
    """Pooling (rank r -> r-1) and unpooling (r-1 -> r) operators for one rank."""

    def __init__(self, fine, coarse, node_type, mode):
        pm = pool_map(fine, coarse, node_type, mode)
        self.mode = pm.mode
        self.groups = pm.groups
        self.pool_op = None if pm.mode is PoolMode.MAX else SparseOp(pm.pool_matrix())
        self.unpool_op = SparseOp(pm.unpool)

    def pool(self, x: Tensor) -> Tensor:
        if self.pool_op is None:
            return ops.group_max(x, self.groups)
        return self.pool_op(x)

    def unpool(self, x: Tensor) -> Tensor:
        return self.unpool_op(x)


class SphereUNet(Module):
    """Encoder / bottleneck / decoder of spherical attention blocks.

    Parameters depend only on the non-rank config fields, so weights trained
    at one rank load into a model built at another.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32, build_tables: bool = True,
                 tables_provider: TablesProvider | None = None, tilt: float = 0.0):
        cfg.validate()
        self.tilt = tilt  # nonzero only for negative-control geometry
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        pos_dim = cfg.pos_spec.dim
        dims = cfg.stage_dims
        blk_kw = dict(qk_norm=cfg.qk_norm, use_abs_pos=cfg.use_abs_pos, use_rel_pos=cfg.use_rel_pos)

        def sab(dim, heads):
            return SAB(dim, heads, cfg.c_head, pos_dim, rng, dtype, **blk_kw)

        self.input_proj = Linear(cfg.in_channels, dims[0], rng, dtype)
        self.input_pos = Linear(pos_dim, dims[0], rng, dtype)
        self.encoder = []
        for n, d in enumerate(dims):
            d_next = dims[n + 1] if n + 1 < len(dims) else cfg.bottleneck_dim
            self.encoder.append(EncoderStage([sab(d, cfg.enc_heads[n]) for _ in range(cfg.depth)],
                                             Linear(d, d_next, rng, dtype)))
        self.bottleneck = [sab(cfg.bottleneck_dim, cfg.bottleneck_heads) for _ in range(cfg.depth)]
        self.decoder = []
        for n, d in enumerate(dims):
            d_in = 2 * dims[n + 1] if n + 1 < len(dims) else cfg.bottleneck_dim
            self.decoder.append(DecoderStage(Linear(d_in, d, rng, dtype),
                                             [sab(d, cfg.dec_heads[n]) for _ in range(cfg.depth)]))
        self.output_proj = Linear(2 * dims[0], cfg.out_channels, rng, dtype)
        self.assign_names()

        self.levels: dict[int, AttentionTables] = {}
        self.resamplers: dict[int, _Resampler] = {}
        if build_tables:
            self._build_tables(tables_provider)

    # -- tables ---------------------------------------------------------
    def _build_tables(self, provider: TablesProvider | None) -> None:
        cfg = self.cfg
        provider = provider or build_attention_tables
        nt = NodeType(cfg.node_type)
        for r in range(cfg.bottleneck_rank, cfg.rank):
            self.levels[r] = provider(icosphere(r, self.tilt), nt, cfg.c_win, spec=cfg.pos_spec,
                                      symmetric_bias=cfg.symmetric_bias)
        for r in range(cfg.bottleneck_rank + 1, cfg.rank + 1):
            self.resamplers[r] = _Resampler(icosphere(r, self.tilt), icosphere(r - 1, self.tilt), nt,
                                            cfg.pool_mode)

    @property
    def num_input_nodes(self) -> int:
        return icosphere(self.cfg.rank).node_count(self.cfg.node_type)

    @property
    def dtype(self):
        return self.input_proj.weight.dtype

    def to(self, dtype) -> "SphereUNet":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"parameter names differ: missing={missing} extra={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    # -- forward --------------------------------------------------------
    def __call__(self, x, trace: list | None = None) -> Tensor:
        if not self.levels:
            raise RuntimeError("model was built without tables")
        cfg = self.cfg
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 2 or x.shape != (self.num_input_nodes, cfg.in_channels):
            raise ValueError(f"expected input ({self.num_input_nodes}, {cfg.in_channels}), got {x.shape}")

        def log(name, t):
            if trace is not None:
                trace.append((name, t.data))
            return t

        r = cfg.rank
        e = log("input", ops.gelu(self.input_proj(x)))
        e = self.resamplers[r].pool(e)
        r -= 1
        if cfg.use_abs_pos:
            pos = Tensor(self.levels[r].positional.astype(e.dtype))
            e = e + self.input_pos(pos)
        skips = []
        for n, stage in enumerate(self.encoder):
            for b, blk in enumerate(stage.blocks):
                e = log(f"encoder.{n}.{b}", blk(e, self.levels[r]))
            skips.append(e)
            e = stage.down(self.resamplers[r].pool(e))
            r -= 1
        for b, blk in enumerate(self.bottleneck):
            e = log(f"bottleneck.{b}", blk(e, self.levels[r]))
        d = e
        for n in reversed(range(len(self.decoder))):
            stage = self.decoder[n]
            r += 1
            d = self.resamplers[r].unpool(stage.up(d))
            for b, blk in enumerate(stage.blocks):
                d = log(f"decoder.{n}.{b}", blk(d, self.levels[r]))
            d = ops.concat([d, skips[n]], axis=-1)
        r += 1
        return log("output", self.output_proj(self.resamplers[r].unpool(d)))

    def predict(self, x) -> np.ndarray:
        return self(x).data


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32, **kw) -> SphereUNet:
    return SphereUNet(cfg, seed=seed, dtype=dtype, **kw)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    m = SphereUNet(cfg, build_tables=False)
    return {name: p.shape for name, p in m.named_parameters()}


def param_count(cfg: ModelConfig) -> int:
    return int(sum(int(np.prod(s)) for s in param_shapes(cfg).values()))


FLOP_CONVENTION = (
    "one multiply-accumulate counted as one flop; counted: input/positional/down/up/output "
    "projections, q/k/v/out and q/k positional projections, MLPs, q.k logits and weighted "
    "value sums over mean neighborhood sizes, 4-tap bias interpolation per head and neighbor, "
    "unpool interpolation; not counted: GELU, LayerNorm, softmax, normalization, residual adds"
)


@dataclass
class FlopReport:
    total: int
    breakdown: dict[str, int] = field(default_factory=dict)
    convention: str = FLOP_CONVENTION
    flops_per_mac: int = 1

    def to_dict(self) -> dict:
        return {"total": self.total, "breakdown": self.breakdown,
                "convention": self.convention, "flops_per_mac": self.flops_per_mac}


def flop_estimate(cfg: ModelConfig, flops_per_mac: int = 1) -> FlopReport:
    """Analytic forward cost of one sample (see ``FLOP_CONVENTION``)."""
    cfg.validate()
    nt = NodeType(cfg.node_type)
    pos_dim = cfg.pos_spec.dim

    def nodes(r):
        return (10 * 4**r + 2) if nt is NodeType.VERTEX else 20 * 4**r

    def sab_macs(r, dim, heads):
        inner = cfg.c_head * dim
        k = mean_neighborhood_size(r, nt, cfg.c_win)
        per_node = 3 * dim * inner + dim * inner + 8 * dim * dim + 2 * k * inner
        if cfg.use_abs_pos:
            per_node += 2 * pos_dim * inner
        if cfg.use_rel_pos:
            per_node += 4 * k * heads
        return nodes(r) * per_node

    dims = cfg.stage_dims
    b = {"input": nodes(cfg.rank) * cfg.in_channels * dims[0]}
    if cfg.use_abs_pos:
        b["input_pos"] = nodes(cfg.rank - 1) * pos_dim * dims[0]
    enc = dec = down = up = 0
    for n, (r, d) in enumerate(zip(cfg.stage_ranks, dims)):
        d_next = dims[n + 1] if n + 1 < len(dims) else cfg.bottleneck_dim
        enc += cfg.depth * sab_macs(r, d, cfg.enc_heads[n])
        down += nodes(r - 1) * d * d_next
        d_in = 2 * dims[n + 1] if n + 1 < len(dims) else cfg.bottleneck_dim
        up += nodes(r - 1) * d_in * d + nodes(r) * d
        dec += cfg.depth * sab_macs(r, d, cfg.dec_heads[n])
    b["encoder"] = enc
    b["downsample"] = down
    b["bottleneck"] = cfg.depth * sab_macs(cfg.bottleneck_rank, cfg.bottleneck_dim, cfg.bottleneck_heads)
    b["upsample"] = up
    b["decoder"] = dec
    b["output"] = nodes(cfg.rank) * 2 * dims[0] * (1 + cfg.out_channels)
    b = {k: int(round(v * flops_per_mac)) for k, v in b.items()}
    return FlopReport(sum(b.values()), b, flops_per_mac=flops_per_mac)


def equivariance_error(model: SphereUNet, x: np.ndarray, perm) -> float:
    """max |f(P x) - P f(x)| for a node permutation ``perm`` (SymmetryPermutation)."""
    fx = model.predict(x)
    fpx = model.predict(perm.apply(np.asarray(x)))
    return float(np.max(np.abs(fpx - perm.apply(fx))))
