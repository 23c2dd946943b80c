"""Learnable dynamics models over particle graphs.

Five variants share one message-passing backbone:

- ``mlp``: transductive MLP baseline mapping flattened (q, qdot) to qddot.
- ``graph``: message passing, node decoder emits accelerations directly.
- ``constrained``: node decoder emits conservative forces; accelerations
  come from the explicit Lagrange-multiplier solve with learned masses.
- ``decoupled``: like ``constrained`` but only particle types and relative
  displacements enter message passing; absolute position/velocity feed a
  separate global stream concatenated before decoding.
- ``conserving``: forces are decoded per edge and applied with opposite
  signs to the two endpoints, so internal forces cancel pairwise and the
  predicted dynamics conserves total momentum when no external field head
  is active.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from . import autodiff as ad
from . import nn
from . import physics
from .autodiff import Tensor
from .physics import ConstraintBlock, SystemSpec


class ModelError(Exception):
    """Base class for model-layer errors."""


class UnknownVariantError(ModelError):
    pass


class TransductivityError(ModelError):
    """A fixed-size model was applied to a system of a different size."""


class UnknownTypeError(ModelError):
    """A particle type id lies outside the model's type vocabulary."""


GRAPH_VARIANTS = ("graph", "constrained", "decoupled", "conserving")
VARIANTS = ("mlp",) + GRAPH_VARIANTS
CONSTRAINED_VARIANTS = ("constrained", "decoupled", "conserving")
LOCAL_FEATURE_VARIANTS = ("decoupled", "conserving")


@dataclass(frozen=True)
class GraphTopology:
    """Particle graph: nodes are particles, edges are bars or springs.

    Edges are undirected and stored once in canonical (i < j) order.
    The pendulum pivot is not a node.
    """

    n: int
    kind: str
    edges: tuple[tuple[int, int], ...]
    types: tuple[int, ...]

    def __post_init__(self):
        for i, j in self.edges:
            if i == j:
                raise ModelError(f"self-loop edge ({i}, {j})")
            if not (0 <= i < j < self.n):
                raise ModelError(f"edge ({i}, {j}) not in canonical order for n={self.n}")
        if len(set(self.edges)) != len(self.edges):
            raise ModelError("duplicate edges in topology")


def build_topology(spec: SystemSpec) -> GraphTopology:
    """Chain for pendulums (pivot excluded), closed cycle for springs."""
    if spec.kind == physics.PENDULUM:
        edges = tuple((i, i + 1) for i in range(spec.n - 1))
    else:
        edges = tuple(physics.spring_edges(spec.n))
    return GraphTopology(n=spec.n, kind=spec.kind, edges=edges, types=tuple(spec.types))


@dataclass
class ModelParams:
    """All learnable weights of one model variant plus its metadata."""

    variant: str
    dim: int
    type_vocab: int
    embed_dim: int
    hidden: int
    msg_layers: int
    arrays: dict[str, np.ndarray]
    external_field: bool = False
    fixed_n: Optional[int] = None
    baseline_hidden: int = 16
    init_seed: int = 0

    def copy(self) -> "ModelParams":
        return replace(self, arrays={k: v.copy() for k, v in self.arrays.items()})

    def n_parameters(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def checksum(self) -> float:
        return float(sum(np.abs(a).sum() for a in self.arrays.values()))


def init_params(
    variant: str,
    spec: SystemSpec,
    seed: int,
    embed_dim: int = 5,
    hidden: int = 5,
    msg_layers: int = 1,
    baseline_hidden: int = 16,
) -> ModelParams:
    """Seeded weight initialization for one variant on one system kind."""
    if variant not in VARIANTS:
        raise UnknownVariantError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    rng = np.random.default_rng(seed)
    d = spec.dim
    vocab = spec.type_vocab
    arrays: dict[str, np.ndarray] = {}
    external_field = spec.kind == physics.PENDULUM
    fixed_n = None

    if variant == "mlp":
        fixed_n = spec.n
        nd = spec.n * d
        arrays.update(nn.init_mlp(
            nn.MlpSpec((2 * nd, baseline_hidden, baseline_hidden, nd)), rng, "core"))
        return ModelParams(
            variant=variant, dim=d, type_vocab=vocab, embed_dim=embed_dim,
            hidden=hidden, msg_layers=msg_layers, arrays=arrays,
            external_field=external_field, fixed_n=fixed_n,
            baseline_hidden=baseline_hidden, init_seed=seed,
        )

    node_in = vocab if variant in LOCAL_FEATURE_VARIANTS else vocab + 2 * d
    arrays.update(nn.init_mlp(nn.MlpSpec((node_in, hidden, hidden, embed_dim)), rng, "node_enc"))
    arrays.update(nn.init_mlp(nn.MlpSpec((d, hidden, hidden, embed_dim)), rng, "edge_enc"))
    for l in range(msg_layers):
        bound = np.sqrt(6.0 / (3 * embed_dim))
        arrays[f"msg/WV{l}"] = rng.uniform(-bound, bound, size=(embed_dim, 2 * embed_dim))
        arrays[f"msg/WE{l}"] = rng.uniform(-bound, bound, size=(embed_dim, 2 * embed_dim))

    if variant == "graph":
        arrays.update(nn.init_mlp(nn.MlpSpec((embed_dim, hidden, hidden, d)), rng, "dec_node"))
    elif variant == "constrained":
        arrays.update(nn.init_mlp(nn.MlpSpec((embed_dim, hidden, hidden, d)), rng, "dec_node"))
    elif variant == "decoupled":
        arrays.update(nn.init_mlp(nn.MlpSpec((2 * d, hidden, hidden, embed_dim)), rng, "glob"))
        arrays.update(nn.init_mlp(nn.MlpSpec((2 * embed_dim, hidden, hidden, d)), rng, "dec_node"))
    elif variant == "conserving":
        arrays.update(nn.init_mlp(nn.MlpSpec((embed_dim, hidden, hidden, d)), rng, "dec_edge"))
        arrays.update(nn.init_mlp(nn.MlpSpec((2 * d, hidden, hidden, d)), rng, "glob"))
    if variant in CONSTRAINED_VARIANTS:
        arrays["log_mass"] = np.zeros(vocab)

    return ModelParams(
        variant=variant, dim=d, type_vocab=vocab, embed_dim=embed_dim,
        hidden=hidden, msg_layers=msg_layers, arrays=arrays,
        external_field=external_field, fixed_n=fixed_n,
        baseline_hidden=baseline_hidden, init_seed=seed,
    )


@dataclass(frozen=True)
class _BatchPlan:
    """Precomputed index arrays for a (topology, batch size) pair."""

    n: int
    n_edges: int
    batch: int
    src_idx: np.ndarray  # (2EB,) directed source nodes
    dst_idx: np.ndarray  # (2EB,) directed destination nodes
    dir_edge_idx: np.ndarray  # (2EB,) into the B*E edge rows
    ci_idx: np.ndarray  # (EB,) canonical first endpoints
    cj_idx: np.ndarray  # (EB,) canonical second endpoints
    ci_local: np.ndarray  # (E,)
    cj_local: np.ndarray  # (E,)
    onehot: np.ndarray  # (Bn, vocab)
    type_coord_idx: np.ndarray  # (Bnd,) type id per coordinate


@lru_cache(maxsize=64)
def _batch_plan(topo: GraphTopology, batch: int, vocab: int, dim: int) -> _BatchPlan:
    n, E = topo.n, len(topo.edges)
    if any(t >= vocab for t in topo.types):
        raise UnknownTypeError(
            f"particle type ids {topo.types} exceed vocabulary size {vocab}"
        )
    ci = np.array([e[0] for e in topo.edges], dtype=np.intp)
    cj = np.array([e[1] for e in topo.edges], dtype=np.intp)
    node_off = np.repeat(np.arange(batch) * n, E)
    edge_off = np.repeat(np.arange(batch) * E, E)
    ci_idx = np.tile(ci, batch) + node_off
    cj_idx = np.tile(cj, batch) + node_off
    eidx = np.tile(np.arange(E, dtype=np.intp), batch) + edge_off
    # both directions share the canonical edge embedding
    src_idx = np.concatenate([cj_idx, ci_idx]) if E else np.zeros(0, dtype=np.intp)
    dst_idx = np.concatenate([ci_idx, cj_idx]) if E else np.zeros(0, dtype=np.intp)
    dir_edge_idx = np.concatenate([eidx, eidx]) if E else np.zeros(0, dtype=np.intp)
    onehot_one = np.zeros((n, vocab))
    onehot_one[np.arange(n), np.asarray(topo.types)] = 1.0
    onehot = np.tile(onehot_one, (batch, 1))
    type_coord_idx = np.repeat(np.tile(np.asarray(topo.types, dtype=np.intp), batch), dim)
    return _BatchPlan(
        n=n, n_edges=E, batch=batch, src_idx=src_idx, dst_idx=dst_idx,
        dir_edge_idx=dir_edge_idx, ci_idx=ci_idx, cj_idx=cj_idx,
        ci_local=ci, cj_local=cj, onehot=onehot, type_coord_idx=type_coord_idx,
    )


def _message_passing(pt, meta: ModelParams, plan: _BatchPlan,
                     h_nodes: Tensor, h_edges: Optional[Tensor]):
    for l in range(meta.msg_layers):
        if plan.n_edges == 0:
            h_nodes = ad.squareplus(h_nodes)
            continue
        wv = ad.as_tensor(pt[f"msg/WV{l}"])
        we = ad.as_tensor(pt[f"msg/WE{l}"])
        h_j = ad.take_rows(h_nodes, plan.src_idx)
        h_e = ad.take_rows(h_edges, plan.dir_edge_idx)
        msgs = ad.matmul(ad.concat([h_j, h_e], axis=1), ad.transpose(wv))
        agg = ad.scatter_rows(msgs, plan.dst_idx, plan.batch * plan.n)
        h_i = ad.take_rows(h_nodes, plan.ci_idx)
        h_jc = ad.take_rows(h_nodes, plan.cj_idx)
        edge_upd = ad.matmul(ad.concat([h_i, h_jc], axis=1), ad.transpose(we))
        h_nodes = ad.squareplus(h_nodes + agg)
        h_edges = ad.squareplus(h_edges + edge_upd)
    return h_nodes, h_edges


def _block_constraints(cons_list: Sequence[ConstraintBlock],
                       qdot: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stack per-sample constraint Jacobians into one block-diagonal solve."""
    A_bd = scipy.linalg.block_diag(*[c.A for c in cons_list])
    adq = np.concatenate([
        c.Adot @ v.reshape(-1) for c, v in zip(cons_list, qdot)
    ])
    return A_bd, adq


def forward_batch(
    pt: dict[str, Tensor],
    meta: ModelParams,
    topo: GraphTopology,
    q: np.ndarray,
    qdot: np.ndarray,
    cons_list: Optional[Sequence[ConstraintBlock]] = None,
) -> Tensor:
    """Predicted accelerations, shape (B, n, d), differentiable in pt.

    ``q`` and ``qdot`` are (B, n, d) arrays. For the variants with an
    explicit constraint path, ``cons_list`` supplies one ConstraintBlock
    per sample (may be omitted for unconstrained systems).
    """
    q = np.asarray(q, dtype=np.float64)
    qdot = np.asarray(qdot, dtype=np.float64)
    B, n, d = q.shape
    if meta.variant == "mlp":
        if meta.fixed_n != n:
            raise TransductivityError(
                f"baseline model is bound to n={meta.fixed_n}, got n={n}"
            )
        x = np.concatenate([q.reshape(B, -1), qdot.reshape(B, -1)], axis=1)
        out = nn.mlp_apply(pt, "core", ad.constant(x))
        return ad.reshape(out, (B, n, d))

    plan = _batch_plan(topo, B, meta.type_vocab, d)
    if meta.variant in LOCAL_FEATURE_VARIANTS:
        node_feat = plan.onehot
    else:
        node_feat = np.concatenate(
            [plan.onehot, q.reshape(B * n, d), qdot.reshape(B * n, d)], axis=1
        )
    h_nodes = nn.mlp_apply(pt, "node_enc", ad.constant(node_feat), output_squareplus=True)
    h_edges = None
    if plan.n_edges:
        w = (q[:, plan.ci_local, :] - q[:, plan.cj_local, :]).reshape(-1, d)
        h_edges = nn.mlp_apply(pt, "edge_enc", ad.constant(w), output_squareplus=True)
    h_nodes, h_edges = _message_passing(pt, meta, plan, h_nodes, h_edges)

    if meta.variant == "graph":
        acc = nn.mlp_apply(pt, "dec_node", h_nodes)
        return ad.reshape(acc, (B, n, d))

    qv = np.concatenate([q.reshape(B * n, d), qdot.reshape(B * n, d)], axis=1)
    if meta.variant == "constrained":
        n_hat = nn.mlp_apply(pt, "dec_node", h_nodes)
    elif meta.variant == "decoupled":
        g = nn.mlp_apply(pt, "glob", ad.constant(qv), output_squareplus=True)
        n_hat = nn.mlp_apply(pt, "dec_node", ad.concat([h_nodes, g], axis=1))
    else:  # conserving
        if plan.n_edges:
            f_edge = nn.mlp_apply(pt, "dec_edge", h_edges)
            f_int = ad.scatter_rows(f_edge, plan.ci_idx, B * n) - ad.scatter_rows(
                f_edge, plan.cj_idx, B * n
            )
        else:
            f_int = ad.constant(np.zeros((B * n, d)))
        if meta.external_field:
            f_ext = nn.mlp_apply(pt, "glob", ad.constant(qv))
            force = f_int + f_ext
        else:
            force = f_int
        n_hat = -force

    log_mass = ad.as_tensor(pt["log_mass"])
    minv = ad.reciprocal(ad.exp(ad.take_rows(log_mass, plan.type_coord_idx)))
    F = -ad.reshape(n_hat, (B * n * d,))
    total_k = sum(c.k for c in cons_list) if cons_list is not None else 0
    if total_k:
        A_bd, adq = _block_constraints(cons_list, qdot)
        X = ad.mul(ad.constant(A_bd), minv)
        S = ad.matmul(X, ad.constant(A_bd.T))
        b = ad.matmul(X, F) + ad.constant(adq)
        lam = ad.solve(S, b)
        acc = minv * (F - ad.matmul(ad.constant(A_bd.T), lam))
    else:
        acc = minv * F
    return ad.reshape(acc, (B, n, d))


def needs_constraints(variant: str) -> bool:
    return variant in CONSTRAINED_VARIANTS


def acceleration_fn(params: ModelParams, spec: SystemSpec):
    """Closure (q, qdot) -> qddot for rollouts with a trained model."""
    topo = build_topology(spec)
    pt = {k: ad.constant(v) for k, v in params.arrays.items()}
    use_cons = needs_constraints(params.variant) and spec.kind == physics.PENDULUM

    def accel(q: np.ndarray, qdot: np.ndarray) -> np.ndarray:
        state = physics.State(q, qdot)
        cons = [physics.constraint_block(spec, state)] if use_cons else None
        out = forward_batch(pt, params, topo, q[None], qdot[None], cons)
        return out.value[0]

    return accel


CHECKPOINT_VERSION = 1


def params_to_json(params: ModelParams) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "variant": params.variant,
        "dim": params.dim,
        "type_vocab": params.type_vocab,
        "embed_dim": params.embed_dim,
        "hidden": params.hidden,
        "msg_layers": params.msg_layers,
        "external_field": params.external_field,
        "fixed_n": params.fixed_n,
        "baseline_hidden": params.baseline_hidden,
        "init_seed": params.init_seed,
        "arrays": {
            name: {"shape": list(a.shape), "data": a.reshape(-1).tolist()}
            for name, a in sorted(params.arrays.items())
        },
    }


def params_from_json(doc: dict) -> ModelParams:
    arrays = {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["arrays"].items()
    }
    return ModelParams(
        variant=doc["variant"], dim=int(doc["dim"]),
        type_vocab=int(doc["type_vocab"]), embed_dim=int(doc["embed_dim"]),
        hidden=int(doc["hidden"]), msg_layers=int(doc["msg_layers"]),
        arrays=arrays, external_field=bool(doc["external_field"]),
        fixed_n=doc.get("fixed_n"), baseline_hidden=int(doc.get("baseline_hidden", 16)),
        init_seed=int(doc.get("init_seed", 0)),
    )


def save_checkpoint(params: ModelParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_json(params), fh)


def load_checkpoint(path) -> ModelParams:
    with open(path) as fh:
        return params_from_json(json.load(fh))
