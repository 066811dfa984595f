"""Spherical local self-attention and the residual block wrapping it."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import LayerNorm, Linear, Module, Parameter, Tensor, ops
from .numerics.ops import SparseOp, gather_matrix
from .posenc import GRID_SIZE, RelPosTable, SinusoidSpec, bias_sampling_matrix, relative_angles, sinusoid_phi
from .sphere import NeighborTable, NodeType, SphereGraph, neighbor_table, node_coords


@dataclass(eq=False)
class AttentionTables:
    """Everything SLSA needs about one (graph, node type, window) triple.

    Built once and shared by every block that runs at this resolution.
    """

    rank: int
    node_type: NodeType
    window: int
    neighbors: NeighborTable
    relpos: RelPosTable
    positional: np.ndarray  # (N, 2 * num_freqs) sinusoid features of phi
    gather: SparseOp  # (N * W, N) neighbor selection, pad rows empty
    bias: SparseOp  # (N * W, 49) bilinear grid sampling

    @property
    def num_nodes(self) -> int:
        return self.neighbors.indices.shape[0]

    @property
    def width(self) -> int:
        return self.neighbors.width

    @property
    def mask(self) -> np.ndarray:
        return self.neighbors.mask


def build_attention_tables(g: SphereGraph, node_type, window: int,
                           spec: SinusoidSpec = SinusoidSpec(), symmetric_bias: bool = True,
                           neighbors: NeighborTable | None = None,
                           relpos: RelPosTable | None = None) -> AttentionTables:
    node_type = NodeType.parse(node_type)
    if neighbors is None:
        neighbors = neighbor_table(g, node_type, window)
    if relpos is None:
        relpos = relative_angles(g, node_type, window, table=neighbors)
    n = neighbors.indices.shape[0]
    phi = node_coords(g, node_type)[:, 1]
    return AttentionTables(
        rank=g.rank,
        node_type=node_type,
        window=window,
        neighbors=neighbors,
        relpos=relpos,
        positional=sinusoid_phi(phi, spec),
        gather=SparseOp(gather_matrix(neighbors.indices, neighbors.mask, n)),
        bias=SparseOp(bias_sampling_matrix(relpos, symmetric=symmetric_bias)),
    )


class SLSA(Module):
    """Multi-head attention of every node over its K-order graph ball.

    q/k/v have width ``c_head * dim`` split into ``heads`` heads. The vertical
    sinusoid is projected and added to q and k, which are then normalized per
    head (cosine attention with a learned per-head scale). A relative bias
    sampled from a 7x7 grid per head is added to each logit.
    """

    def __init__(self, dim: int, heads: int, c_head: int, pos_dim: int, rng: np.random.Generator,
                 dtype=np.float32, qk_norm: str = "l2", use_abs_pos: bool = True,
                 use_rel_pos: bool = True):
        if dim % heads:
            raise ValueError(f"{heads} heads do not divide dimension {dim}")
        if qk_norm not in ("l2", "layernorm"):
            raise ValueError(f"unknown qk_norm {qk_norm!r}")
        inner = c_head * dim
        self.heads = heads
        self.head_dim = inner // heads
        self.qk_norm = qk_norm
        self.use_abs_pos = use_abs_pos
        self.use_rel_pos = use_rel_pos
        self.q_proj = Linear(dim, inner, rng, dtype)
        self.k_proj = Linear(dim, inner, rng, dtype)
        self.v_proj = Linear(dim, inner, rng, dtype)
        self.q_pos = Linear(pos_dim, inner, rng, dtype)
        self.k_pos = Linear(pos_dim, inner, rng, dtype)
        self.out_proj = Linear(inner, dim, rng, dtype)
        self.rel_bias = Parameter(np.zeros((heads, GRID_SIZE, GRID_SIZE), dtype=dtype))
        # l2-normalized q.k lies in [-1, 1]; sqrt(d) restores the usual logit range
        scale0 = np.sqrt(self.head_dim) if qk_norm == "l2" else 1.0 / np.sqrt(self.head_dim)
        self.logit_scale = Parameter(np.full(heads, scale0, dtype=dtype))

    def _attend(self, x: Tensor, tables: AttentionTables) -> tuple[Tensor, Tensor]:
        n = x.shape[0]
        if n != tables.num_nodes:
            raise ValueError(f"signal has {n} nodes, tables are for {tables.num_nodes}")
        h, dh, w = self.heads, self.head_dim, tables.width
        q = self.q_proj(x)
        k = self.k_proj(x)
        v = self.v_proj(x)
        if self.use_abs_pos:
            pos = Tensor(tables.positional.astype(x.dtype))
            q = q + self.q_pos(pos)
            k = k + self.k_pos(pos)
        q = ops.reshape(q, (n, h, dh))
        k = ops.reshape(k, (n, h, dh))
        if self.qk_norm == "l2":
            q, k = ops.l2_normalize(q), ops.l2_normalize(k)
        else:
            q, k = ops.layer_norm(q, None, None), ops.layer_norm(k, None, None)
        k_nb = ops.reshape(tables.gather(ops.reshape(k, (n, h * dh))), (n, w, h, dh))
        v_nb = ops.reshape(tables.gather(v), (n, w, h, dh))

        logits = ops.einsum("nhd,nwhd->nhw", q, k_nb)
        logits = logits * ops.reshape(self.logit_scale, (1, h, 1))
        if self.use_rel_pos:
            grid = ops.transpose(ops.reshape(self.rel_bias, (h, GRID_SIZE * GRID_SIZE)), (1, 0))
            bias = ops.reshape(tables.bias(grid), (n, w, h))
            logits = logits + ops.transpose(bias, (0, 2, 1))
        return ops.masked_softmax(logits, tables.mask[:, None, :]), v_nb

    def __call__(self, x: Tensor, tables: AttentionTables) -> Tensor:
        attn, v_nb = self._attend(x, tables)
        out = ops.einsum("nhw,nwhd->nhd", attn, v_nb)
        return self.out_proj(ops.reshape(out, (x.shape[0], self.heads * self.head_dim)))

    def attention_weights(self, x: Tensor, tables: AttentionTables) -> np.ndarray:
        """(N, H, W) softmax weights, for inspection and tests."""
        return self._attend(x, tables)[0].data


class SAB(Module):
    """h = x + SLSA(x); out = h + MLP(LayerNorm(h)), MLP hidden width 4 * dim."""

    def __init__(self, dim: int, heads: int, c_head: int, pos_dim: int, rng: np.random.Generator,
                 dtype=np.float32, **attn_kwargs):
        self.attn = SLSA(dim, heads, c_head, pos_dim, rng, dtype, **attn_kwargs)
        self.norm = LayerNorm(dim, dtype)
        self.fc1 = Linear(dim, 4 * dim, rng, dtype)
        self.fc2 = Linear(4 * dim, dim, rng, dtype)

    def __call__(self, x: Tensor, tables: AttentionTables) -> Tensor:
        h = x + self.attn(x, tables)
        return h + self.fc2(ops.gelu(self.fc1(self.norm(h))))
