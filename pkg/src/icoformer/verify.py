"""Self-checks shared by the CLI and the test-suite: finite-difference gradient
checks of every op and the full model, and horizontal-symmetry equivariance.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import SAB, SLSA, build_attention_tables
from .model import ModelConfig, SphereUNet, equivariance_error
from .numerics import LayerNorm, Linear, Parameter, Tensor, grad_check, ops
from .numerics.ops import SparseOp
from .sphere import NodeType, SymmetryError, icosphere, pool_map, z_symmetry_permutation
from .training import berhu_loss, cross_entropy_loss, synth_scene

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
EQUIVARIANCE_TOLERANCE = 1e-3


def _rand_param(rng, *shape, name=""):
    return Parameter(rng.normal(size=shape), name=name)


def _fixed_projection(rng, shape):
    """Scalar <out, R> with a fixed random R, so every output entry matters."""
    r = Tensor(rng.normal(size=shape))
    return lambda out: ops.sum_all(ops.mul(out, r))


def _name(params: dict[str, Parameter]) -> list[Parameter]:
    for k, p in params.items():
        p.name = k
    return list(params.values())


def op_cases(seed: int = 0):
    """(name, loss_fn, params) for each differentiable op and block."""
    rng = np.random.default_rng(seed)
    cases = []

    x = _rand_param(rng, 6, 5)
    w = _rand_param(rng, 4, 5)
    b = _rand_param(rng, 4)
    proj = _fixed_projection(rng, (6, 4))
    cases.append(("linear", lambda: proj(ops.linear(x, w, b)), _name({"x": x, "w": w, "b": b})))

    xg = _rand_param(rng, 7, 3)
    proj_g = _fixed_projection(rng, (7, 3))
    cases.append(("gelu", lambda: proj_g(ops.gelu(xg)), _name({"x": xg})))

    xl = _rand_param(rng, 5, 6)
    gam = _rand_param(rng, 6)
    bet = _rand_param(rng, 6)
    proj_l = _fixed_projection(rng, (5, 6))
    cases.append(("layer_norm", lambda: proj_l(ops.layer_norm(xl, gam, bet)),
                  _name({"x": xl, "gamma": gam, "beta": bet})))

    xn = _rand_param(rng, 4, 3, 5)
    proj_n = _fixed_projection(rng, (4, 3, 5))
    cases.append(("l2_normalize", lambda: proj_n(ops.l2_normalize(xn)), _name({"x": xn})))

    xs = _rand_param(rng, 5, 2, 6)
    mask = rng.random((5, 1, 6)) > 0.4
    mask[:, :, 0] = True
    proj_s = _fixed_projection(rng, (5, 2, 6))
    cases.append(("masked_softmax", lambda: proj_s(ops.masked_softmax(xs, mask)), _name({"logits": xs})))

    qa = _rand_param(rng, 4, 2, 3)
    kb = _rand_param(rng, 4, 5, 2, 3)
    proj_e = _fixed_projection(rng, (4, 2, 5))
    cases.append(("einsum", lambda: proj_e(ops.einsum("nhd,nwhd->nhw", qa, kb)), _name({"a": qa, "b": kb})))

    g2 = icosphere(2)
    pm = pool_map(g2, icosphere(1), "hex")
    up = SparseOp(pm.unpool)
    xu = _rand_param(rng, icosphere(1).vertex_count, 3)
    proj_u = _fixed_projection(rng, (g2.vertex_count, 3))
    cases.append(("sparse_unpool", lambda: proj_u(up(xu)), _name({"x": xu})))

    xm = _rand_param(rng, icosphere(2).face_count, 2)
    groups = pool_map(icosphere(2), icosphere(1), "ico", "max").groups
    proj_m = _fixed_projection(rng, (icosphere(1).face_count, 2))
    cases.append(("group_max", lambda: proj_m(ops.group_max(xm, groups)), _name({"x": xm})))

    xc = _rand_param(rng, 3, 4)
    yc = _rand_param(rng, 3, 4)
    proj_c = _fixed_projection(rng, (4, 3, 2))
    cases.append(("concat_reshape_transpose",
                  lambda: proj_c(ops.transpose(ops.reshape(ops.concat([xc, yc], -1), (3, 2, 4)), (2, 0, 1))),
                  _name({"x": xc, "y": yc})))

    pred = _rand_param(rng, 30, 1)
    gt = rng.random((30, 1)) + 0.5
    c_fixed = 0.2 * float(np.abs(pred.data - gt).max())
    # move residuals away from the |r| = c kink
    r = pred.data - gt
    near = np.abs(np.abs(r) - c_fixed) < 1e-3
    pred.data = np.where(near, pred.data + 3e-3 * np.sign(r), pred.data)
    cases.append(("berhu", lambda: berhu_loss(pred, gt, c=c_fixed), _name({"pred": pred})))

    logits = _rand_param(rng, 12, 5)
    labels = rng.integers(0, 5, 12)
    labels[:2] = -1
    cases.append(("cross_entropy", lambda: cross_entropy_loss(logits, labels, ignore_index=-1),
                  _name({"logits": logits})))

    for nt in ("hex", "ico"):
        g1 = icosphere(1)
        tables = build_attention_tables(g1, nt, 1)
        n = tables.num_nodes
        slsa = SLSA(8, 2, 2, 32, rng, np.float64)
        slsa.rel_bias.data = rng.normal(size=slsa.rel_bias.shape)
        slsa.assign_names()
        xa = _rand_param(rng, n, 8, name="x")
        proj_a = _fixed_projection(rng, (n, 8))
        cases.append((f"slsa_{nt}", lambda s=slsa, t=tables, x_=xa, p_=proj_a: p_(s(x_, t)),
                      slsa.parameters() + [xa]))

        sab = SAB(8, 2, 1, 32, rng, np.float64)
        sab.attn.rel_bias.data = rng.normal(size=sab.attn.rel_bias.shape)
        sab.assign_names()
        xb = _rand_param(rng, n, 8, name="x")
        proj_b = _fixed_projection(rng, (n, 8))
        cases.append((f"sab_{nt}", lambda s=sab, t=tables, x_=xb, p_=proj_b: p_(s(x_, t)),
                      sab.parameters() + [xb]))

    ln = LayerNorm(6, np.float64)
    lin = Linear(6, 3, rng, np.float64)
    ln.assign_names("norm.")
    lin.assign_names("fc.")
    xq = _rand_param(rng, 4, 6, name="x")
    proj_q = _fixed_projection(rng, (4, 3))
    cases.append(("layer_modules", lambda: proj_q(lin(ln(xq))), ln.parameters() + lin.parameters() + [xq]))
    return cases


@dataclass
class GradReport:
    results: dict[str, tuple[float, str, int]] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max((r[0] for r in self.results.values()), default=0.0)


def op_gradcheck_suite(seed: int = 0) -> GradReport:
    rep = GradReport()
    for name, fn, params in op_cases(seed):
        res = grad_check(fn, params, h=1e-5, seed=seed)
        rep.results[name] = (res.max_rel_error, res.worst_param, res.checked)
    return rep


def model_gradcheck(rank: int = 4, num_stages: int = 2, seed: int = 0, max_coords: int = 2,
                    tasks=("depth", "seg")) -> GradReport:
    """Loss gradients through the whole network, float64, subsampled coordinates."""
    rep = GradReport()
    rng = np.random.default_rng(seed)
    scene = synth_scene(icosphere(rank), "hex")
    for task in tasks:
        out = 1 if task == "depth" else 6
        cfg = ModelConfig(rank=rank, num_stages=num_stages, out_channels=out)
        model = SphereUNet(cfg, seed=seed, dtype=np.float64)
        for name, p in model.named_parameters():
            if name.endswith("rel_bias"):
                p.data = 0.5 * rng.normal(size=p.shape)
        x = Tensor(scene.rgb.astype(np.float64))
        if task == "depth":
            r0 = model.predict(x)[:, 0] - scene.depth
            c = 0.2 * float(np.abs(r0).max())
            gt = scene.depth[:, None]
            fn = lambda: berhu_loss(model(x), gt, c=c)  # noqa: E731
        else:
            fn = lambda: cross_entropy_loss(model(x), scene.labels)  # noqa: E731
        res = grad_check(fn, model.parameters(), h=1e-5, max_coords=max_coords, seed=seed)
        rep.results[f"model_{task}"] = (res.max_rel_error, res.worst_param, res.checked)
    return rep


@dataclass
class EquivarianceReport:
    deviations: dict[str, float]
    error: str | None = None

    @property
    def worst(self) -> float:
        if self.error is not None:
            return float("inf")
        return max(self.deviations.values(), default=0.0)


def equivariance_suite(rank: int = 5, num_stages: int = 3, seed: int = 0, node_type="hex",
                       tilt: float = 0.0, bias_scale: float = 0.5, **cfg_kw) -> EquivarianceReport:
    """Forward with random weights commutes with the four nontrivial C5
    rotations and the reflection (and their compositions) about the z axis.

    The permutations always come from the pole-oriented graph; ``tilt``
    builds the model on a rotated icosphere, where they are no symmetry
    (negative control).
    """
    node_type = NodeType.parse(node_type)
    cfg = ModelConfig(rank=rank, num_stages=num_stages, node_type=node_type.value, **cfg_kw)
    model = SphereUNet(cfg, seed=seed, tilt=tilt)
    rng = np.random.default_rng(seed + 1)
    for name, p in model.named_parameters():
        if name.endswith("rel_bias"):
            p.data = (bias_scale * rng.normal(size=p.shape)).astype(p.dtype)
    x = rng.random((model.num_input_nodes, cfg.in_channels)).astype(np.float32)
    g = icosphere(rank)
    dev = {}
    try:
        for k in range(5):
            for reflect in (False, True):
                if k == 0 and not reflect:
                    continue
                perm = z_symmetry_permutation(g, node_type, k, reflect)
                dev[f"rot{k}{'_flip' if reflect else ''}"] = equivariance_error(model, x, perm)
    except SymmetryError as exc:
        return EquivarianceReport(dev, str(exc))
    return EquivarianceReport(dev)
