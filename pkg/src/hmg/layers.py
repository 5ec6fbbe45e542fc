"""Heterogeneous message passing.

The main layer is graph attention with edge attributes: for every node the
update is x'_i = alpha_ii * Theta x_i + sum_j alpha_ij * Theta x_j, with
attention logits LeakyReLU(a_s . Theta x_i + a_t . Theta x_j + a_e . Theta_e e_ij)
softmax-normalized over the node's in-neighborhood plus itself.  The edge
term exists only on views/viewed-by edges (the relations that carry comment
attributes) and is zero for connects edges and self terms.

Two ablation aggregators (mean- and sum-style, no attention, no edge
attributes) share the same plan machinery, and ``stack_forward`` wires
per-type input projections plus [layer -> batch norm -> ReLU] * L.

A ``SubgraphPlan`` flattens one node subset's incoming edges into
destination-sorted arrays so each layer is a handful of vectorized ops.  Edges
are canonically ordered by (destination, relation, source), which pins the
accumulation order everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hmg import tensor as T
from hmg.graph import DimensionMismatchError, GraphError, HeteroGraph
from hmg.tensor import BatchNormState, ParamStore, Tensor

REL_CONNECTS, REL_VIEWS, REL_VIEWED_BY, REL_SELF = 0, 1, 2, 3


@dataclass
class RelSlice:
    """One relation's edges inside a destination plan, in canonical order."""

    rel: int
    pos: np.ndarray      # positions within the combined sorted edge array
    src_loc: np.ndarray  # local row in the source type's feature matrix
    dst_loc: np.ndarray  # local row in the destination type's feature matrix
    eid: np.ndarray | None = None  # global views-edge ids (attribute rows)


@dataclass
class DestPlan:
    num_edges: int
    indptr: np.ndarray       # (n_dst + 1,) segment pointers, ascending dst
    src_stacked: np.ndarray  # (E,) rows into vstack(H_user, H_image)
    rels: list[RelSlice]


@dataclass
class SubgraphPlan:
    users: np.ndarray   # global user ids, ascending
    images: np.ndarray  # global image ids, ascending
    user_dest: DestPlan
    image_dest: DestPlan
    user_loc: np.ndarray   # global -> local (-1 outside plan)
    image_loc: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_users(self) -> int:
        return self.users.shape[0]

    @property
    def n_images(self) -> int:
        return self.images.shape[0]

    def neighbor_weights(self, kind: str) -> dict:
        """Constant per-edge aggregation weights (self edges weighted zero)."""
        key = f"w:{kind}"
        if key not in self._cache:
            out = {}
            for name, dest in (("user", self.user_dest), ("image", self.image_dest)):
                w = np.ones(dest.num_edges)
                self_slice = next(r for r in dest.rels if r.rel == REL_SELF)
                w[self_slice.pos] = 0.0
                if kind == "mean":
                    deg = np.diff(dest.indptr) - 1  # every node carries one self edge
                    dst_of_edge = np.repeat(np.arange(dest.indptr.shape[0] - 1),
                                            np.diff(dest.indptr))
                    nonzero = deg[dst_of_edge] > 0
                    w[nonzero] /= deg[dst_of_edge][nonzero]
                    w[self_slice.pos] = 0.0
                out[name] = Tensor(w)
            self._cache[key] = out
        return self._cache[key]


def _segments(dst: np.ndarray, n_dst: int) -> np.ndarray:
    indptr = np.zeros(n_dst + 1, dtype=np.int64)
    np.cumsum(np.bincount(dst, minlength=n_dst), out=indptr[1:])
    return indptr


def _dest_plan(parts: list[tuple], n_dst: int) -> DestPlan:
    """parts: (rel_id, dst_loc, src_loc, src_stacked, eid_or_None) per relation."""
    dst = np.concatenate([p[1] for p in parts])
    rel = np.concatenate([np.full(p[1].shape[0], p[0], dtype=np.int8) for p in parts])
    src_loc = np.concatenate([p[2] for p in parts])
    stacked = np.concatenate([p[3] for p in parts])
    eid = np.concatenate([p[4] if p[4] is not None else np.full(p[1].shape[0], -1, np.int64)
                          for p in parts])
    order = np.lexsort((stacked, rel, dst))
    dst, rel, src_loc, stacked, eid = (a[order] for a in (dst, rel, src_loc, stacked, eid))
    rels = []
    for rid in (REL_CONNECTS, REL_VIEWS, REL_VIEWED_BY, REL_SELF):
        pos = np.flatnonzero(rel == rid)
        if pos.size == 0 and rid != REL_SELF:
            continue
        rels.append(RelSlice(rel=rid, pos=pos, src_loc=src_loc[pos], dst_loc=dst[pos],
                             eid=eid[pos] if rid in (REL_VIEWS, REL_VIEWED_BY) else None))
    return DestPlan(num_edges=dst.shape[0], indptr=_segments(dst, n_dst),
                    src_stacked=stacked, rels=rels)


def build_plan(graph: HeteroGraph, users=None, images=None) -> SubgraphPlan:
    """Flatten the (sub)graph induced on the given node sets for layer math."""
    users = np.arange(graph.user_count, dtype=np.int64) if users is None \
        else np.asarray(users, dtype=np.int64)
    images = np.arange(graph.image_count, dtype=np.int64) if images is None \
        else np.asarray(images, dtype=np.int64)
    n_u, n_i = users.shape[0], images.shape[0]
    u_loc = np.full(graph.user_count, -1, dtype=np.int64)
    u_loc[users] = np.arange(n_u)
    i_loc = np.full(graph.image_count, -1, dtype=np.int64)
    i_loc[images] = np.arange(n_i)

    cu = graph.connects[:, 0].astype(np.int64)
    cv = graph.connects[:, 1].astype(np.int64)
    both = np.concatenate([np.stack([cu, cv], 1), np.stack([cv, cu], 1)])
    keep = (u_loc[both[:, 0]] >= 0) & (u_loc[both[:, 1]] >= 0)
    conn_dst = u_loc[both[keep, 0]]
    conn_src = u_loc[both[keep, 1]]

    vu = graph.views_user.astype(np.int64)
    vi = graph.views_image.astype(np.int64)
    vkeep = (u_loc[vu] >= 0) & (i_loc[vi] >= 0)
    eids = np.flatnonzero(vkeep)
    v_user = u_loc[vu[vkeep]]
    v_image = i_loc[vi[vkeep]]

    self_u = np.arange(n_u, dtype=np.int64)
    self_i = np.arange(n_i, dtype=np.int64)

    user_dest = _dest_plan([
        (REL_CONNECTS, conn_dst, conn_src, conn_src, None),
        (REL_VIEWED_BY, v_user, v_image, n_u + v_image, eids),
        (REL_SELF, self_u, self_u, self_u, None),
    ], n_u)
    image_dest = _dest_plan([
        (REL_VIEWS, v_image, v_user, v_user, eids),
        (REL_SELF, self_i, self_i, n_u + self_i, None),
    ], n_i)
    return SubgraphPlan(users=users, images=images, user_dest=user_dest,
                        image_dest=image_dest, user_loc=u_loc, image_loc=i_loc)


def full_plan(graph: HeteroGraph) -> SubgraphPlan:
    plan = graph._adj.get("_full_plan")
    if plan is None:
        plan = build_plan(graph)
        graph._adj["_full_plan"] = plan
    return plan


def _take_ranges(cols: np.ndarray, indptr: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """Concatenate cols[indptr[n]:indptr[n+1]] over nodes, vectorized."""
    counts = indptr[nodes + 1] - indptr[nodes]
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=cols.dtype)
    offsets = np.repeat(indptr[nodes], counts)
    inner = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    return cols[offsets + inner]


def lhop_closure(graph: HeteroGraph, seed_users, seed_images, hops: int):
    """Nodes whose input features can reach the seeds within ``hops`` message steps."""
    users = np.zeros(graph.user_count, dtype=bool)
    images = np.zeros(graph.image_count, dtype=bool)
    users[np.asarray(seed_users, dtype=np.int64)] = True
    images[np.asarray(seed_images, dtype=np.int64)] = True
    fu = np.flatnonzero(users)
    fi = np.flatnonzero(images)
    conn_ptr, conn_cols, _ = graph._adjacency("connects")
    views_ptr, views_cols, _ = graph._adjacency("views")        # user -> images viewed
    seen_ptr, seen_cols, _ = graph._adjacency("viewed-by")      # image -> its viewers
    for _ in range(hops):
        if fu.size == 0 and fi.size == 0:
            break
        nu = np.unique(np.concatenate([_take_ranges(conn_cols, conn_ptr, fu),
                                       _take_ranges(seen_cols, seen_ptr, fi)]))
        ni = np.unique(_take_ranges(views_cols, views_ptr, fu))
        fu = nu[~users[nu]] if nu.size else nu
        fi = ni[~images[ni]] if ni.size else ni
        users[fu] = True
        images[fi] = True
    return np.flatnonzero(users), np.flatnonzero(images)


# ---------------------------------------------------------------------------
# Parameters.
# ---------------------------------------------------------------------------

ATTR_RELS = ("views", "viewed-by")
REL_NAMES = ("connects", "views", "viewed-by")


@dataclass
class GatLayerParams:
    theta: Tensor                       # shared node transform
    theta_e: Tensor | None              # edge-attribute transform (None = no comments)
    a_s: dict[str, Tensor]              # per-relation destination attention vectors
    a_t: dict[str, Tensor]              # per-relation source attention vectors
    a_e: dict[str, Tensor]              # only for relations carrying attributes


@dataclass
class LinearAggParams:
    w_self: Tensor
    w_nbr: Tensor


@dataclass
class StackConfig:
    num_layers: int = 5
    hidden_dim: int = 64
    user_dim: int = 128
    image_dim: int = 128
    attr_dim: int = 256
    leaky_slope: float = 0.2
    heads: int = 1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    backbone: str = "gat"
    use_comments: bool = True

    def validate(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if min(self.hidden_dim, self.user_dim, self.image_dim) <= 0:
            raise ValueError("feature dims must be positive")
        if self.heads != 1:
            raise ValueError("only single-head attention is supported")
        if self.backbone not in ("gat", "sage", "conv"):
            raise ValueError(f"unknown backbone {self.backbone!r}")


@dataclass
class BnSite:
    gamma: Tensor
    beta: Tensor
    state: BatchNormState


@dataclass
class StackParams:
    config: StackConfig
    proj: dict[str, Tensor]
    layers: list
    bn: list[dict[str, BnSite]]


def init_gat_layer(store: ParamStore, prefix: str, d: int, d_attr: int,
                   rng: np.random.Generator, with_attrs: bool) -> GatLayerParams:
    theta = store.add(f"{prefix}.theta", T.glorot(rng, d, d, (d, d)))
    theta_e = None
    if with_attrs:
        theta_e = store.add(f"{prefix}.theta_e", T.glorot(rng, d_attr, d, (d_attr, d)))
    a_s, a_t, a_e = {}, {}, {}
    for rel in REL_NAMES:
        a_s[rel] = store.add(f"{prefix}.a_s.{rel}", T.glorot(rng, d, 1, (d,)))
        a_t[rel] = store.add(f"{prefix}.a_t.{rel}", T.glorot(rng, d, 1, (d,)))
    if with_attrs:
        for rel in ATTR_RELS:
            a_e[rel] = store.add(f"{prefix}.a_e.{rel}", T.glorot(rng, d, 1, (d,)))
    return GatLayerParams(theta=theta, theta_e=theta_e, a_s=a_s, a_t=a_t, a_e=a_e)


def init_stack_params(cfg: StackConfig, store: ParamStore,
                      rng: np.random.Generator) -> StackParams:
    cfg.validate()
    d = cfg.hidden_dim
    proj = {
        "user": store.add("proj.user", T.glorot(rng, cfg.user_dim, d, (cfg.user_dim, d))),
        "image": store.add("proj.image", T.glorot(rng, cfg.image_dim, d, (cfg.image_dim, d))),
    }
    layers: list = []
    bn: list[dict[str, BnSite]] = []
    for l in range(cfg.num_layers):
        if cfg.backbone == "gat":
            layers.append(init_gat_layer(store, f"gat.{l}", d, cfg.attr_dim, rng,
                                         with_attrs=cfg.use_comments))
        else:
            layers.append(LinearAggParams(
                w_self=store.add(f"{cfg.backbone}.{l}.w_self", T.glorot(rng, d, d, (d, d))),
                w_nbr=store.add(f"{cfg.backbone}.{l}.w_nbr", T.glorot(rng, d, d, (d, d))),
            ))
        sites = {}
        for typ in ("user", "image"):
            gamma = store.add(f"bn.{l}.{typ}.gamma", np.ones(d))
            beta = store.add(f"bn.{l}.{typ}.beta", np.zeros(d))
            state = BatchNormState(d)
            store.add_buffer(f"bn.{l}.{typ}.running_mean", state.mean)
            store.add_buffer(f"bn.{l}.{typ}.running_var", state.var)
            sites[typ] = BnSite(gamma=gamma, beta=beta, state=state)
        bn.append(sites)
    return StackParams(config=cfg, proj=proj, layers=layers, bn=bn)


# ---------------------------------------------------------------------------
# Layer math.
# ---------------------------------------------------------------------------

def _resolve_plan(graph) -> SubgraphPlan:
    if isinstance(graph, SubgraphPlan):
        return graph
    if isinstance(graph, HeteroGraph):
        return full_plan(graph)
    raise TypeError(f"expected HeteroGraph or SubgraphPlan, got {type(graph).__name__}")


def _as_feats(feats: dict) -> tuple[Tensor, Tensor]:
    return T.as_tensor(feats["user"]), T.as_tensor(feats["image"])


def _attr_scalars(attr: Tensor | None, params: GatLayerParams, plan: SubgraphPlan):
    """Per-views-edge attention scalars a_e . Theta_e e, one vector per relation."""
    if params.theta_e is None:
        return None
    top_eid = -1
    for dest in (plan.user_dest, plan.image_dest):
        for r in dest.rels:
            if r.eid is not None and r.pos.size:
                top_eid = max(top_eid, int(r.eid.max()))
    if top_eid < 0:
        return None
    if attr is None:
        raise DimensionMismatchError("graph has views edges but no edge attribute table")
    if attr.data.shape[0] <= top_eid:
        raise DimensionMismatchError(
            f"edge attribute table has {attr.data.shape[0]} rows but views edge "
            f"{top_eid} needs one")
    proj = T.matmul(attr, params.theta_e)
    return {rel: T.matmul(proj, params.a_e[rel]) for rel in ATTR_RELS}


_REL_KEY = {REL_CONNECTS: "connects", REL_VIEWS: "views", REL_VIEWED_BY: "viewed-by"}


def _gat_dest(dest: DestPlan, th_dst: Tensor, th_by_type: dict, self_rel: str,
              attr_scalars, params: GatLayerParams, slope: float, th_all: Tensor,
              src_type_of: dict, self_type: str):
    """Attention + aggregation for one destination type; returns (out, alpha)."""
    pieces = []
    scalar_cache: dict[tuple, Tensor] = {}

    def scalar(kind: str, rel: str, typ: str) -> Tensor:
        vecs = params.a_s if kind == "s" else params.a_t
        key = (kind, rel, typ)
        if key not in scalar_cache:
            mat = th_dst if kind == "s" else th_by_type[typ]
            scalar_cache[key] = T.matmul(mat, vecs[rel])
        return scalar_cache[key]

    for sl in dest.rels:
        if sl.pos.size == 0:
            continue
        rel = self_rel if sl.rel == REL_SELF else _REL_KEY[sl.rel]
        src_type = self_type if sl.rel == REL_SELF else src_type_of[rel]
        term = T.add(T.gather_rows(scalar("s", rel, self_type), sl.dst_loc),
                     T.gather_rows(scalar("t", rel, src_type), sl.src_loc))
        if sl.rel != REL_SELF and attr_scalars is not None and sl.eid is not None:
            term = T.add(term, T.gather_rows(attr_scalars[rel], sl.eid))
        pieces.append(T.scatter_add_rows(term, sl.pos, dest.num_edges))
    if not pieces:
        logits = T.as_tensor(np.zeros(0))
    else:
        logits = pieces[0]
        for p in pieces[1:]:
            logits = T.add(logits, p)
    alpha = T.segment_softmax(T.leaky_relu(logits, slope=slope), dest.indptr)
    out = T.edge_weighted_sum(th_all, alpha, dest.src_stacked, dest.indptr)
    return out, alpha


def gat_layer_forward(graph, node_feats: dict, edge_attrs, params: GatLayerParams,
                      slope: float = 0.2, return_attention: bool = False):
    """One edge-attributed attention hop; returns per-type updated features.

    ``edge_attrs`` must cover every views edge (row e = attributes of views
    edge e) whenever the layer carries an edge transform; pass None otherwise.
    """
    plan = _resolve_plan(graph)
    x_u, x_i = _as_feats(node_feats)
    d_in = params.theta.data.shape[0]
    if x_u.data.shape[1] != d_in or x_i.data.shape[1] != d_in:
        raise DimensionMismatchError(
            f"node features must have {d_in} columns, got "
            f"{x_u.data.shape} / {x_i.data.shape}")
    attr = None
    if edge_attrs is not None:
        attr = T.as_tensor(edge_attrs)
        if params.theta_e is not None and attr.data.shape[1] != params.theta_e.data.shape[0]:
            raise DimensionMismatchError(
                f"edge attributes must have {params.theta_e.data.shape[0]} columns, "
                f"got {attr.data.shape}")

    th_u = T.matmul(x_u, params.theta)
    th_i = T.matmul(x_i, params.theta)
    th_all = T.concat([th_u, th_i], axis=0)
    th_by_type = {"user": th_u, "image": th_i}
    attr_scalars = _attr_scalars(attr, params, plan)
    src_type_of = {"connects": "user", "views": "user", "viewed-by": "image"}

    # The self term needs attention vectors from some relation: a user's self
    # loop borrows the user-to-user (connects) vectors, an image's borrows the
    # views vectors, applied to its own transformed features.
    out_u, alpha_u = _gat_dest(plan.user_dest, th_u, th_by_type, "connects",
                               attr_scalars, params, slope, th_all, src_type_of, "user")
    out_i, alpha_i = _gat_dest(plan.image_dest, th_i, th_by_type, "views",
                               attr_scalars, params, slope, th_all, src_type_of, "image")
    feats = {"user": out_u, "image": out_i}
    if return_attention:
        return feats, {"user": (alpha_u.data, plan.user_dest.indptr),
                       "image": (alpha_i.data, plan.image_dest.indptr)}
    return feats


def _linear_agg_forward(graph, node_feats, params: LinearAggParams, kind: str):
    plan = _resolve_plan(graph)
    x_u, x_i = _as_feats(node_feats)
    d_in = params.w_self.data.shape[0]
    if x_u.data.shape[1] != d_in or x_i.data.shape[1] != d_in:
        raise DimensionMismatchError(
            f"node features must have {d_in} columns, got "
            f"{x_u.data.shape} / {x_i.data.shape}")
    h_all = T.concat([T.matmul(x_u, params.w_nbr), T.matmul(x_i, params.w_nbr)], axis=0)
    weights = plan.neighbor_weights(kind)
    out = {}
    for typ, dest, x in (("user", plan.user_dest, x_u), ("image", plan.image_dest, x_i)):
        agg = T.edge_weighted_sum(h_all, weights[typ], dest.src_stacked, dest.indptr)
        out[typ] = T.add(T.matmul(x, params.w_self), agg)
    return out


def sage_layer_forward(graph, node_feats: dict, params: LinearAggParams):
    """x'_i = W1 x_i + W2 * mean of in-neighbors (zero when isolated)."""
    return _linear_agg_forward(graph, node_feats, params, "mean")


def conv_layer_forward(graph, node_feats: dict, params: LinearAggParams):
    """x'_i = W1 x_i + W2 * sum of in-neighbors."""
    return _linear_agg_forward(graph, node_feats, params, "sum")


def stack_forward(graph, inputs: dict, stack: StackParams, mode: str,
                  plan: SubgraphPlan | None = None) -> dict:
    """Project per-type inputs, then run [layer -> BN -> ReLU] * num_layers.

    ``inputs`` holds full-graph tables: "user" (user_count, user_dim),
    "image" (image_count, image_dim) and "attr" (num_views, attr_dim) or None;
    the plan picks out the rows it needs.  Batch norm uses batch statistics in
    train mode and running statistics in eval mode.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = stack.config
    if plan is None:
        plan = _resolve_plan(graph)

    def rows(table, idx):
        arr = table.data if isinstance(table, Tensor) else np.asarray(table, np.float64)
        return arr if idx.shape[0] == arr.shape[0] else arr[idx]

    x_u = Tensor(rows(inputs["user"], plan.users))
    x_i = Tensor(rows(inputs["image"], plan.images))
    if x_u.data.shape[1] != cfg.user_dim or x_i.data.shape[1] != cfg.image_dim:
        raise DimensionMismatchError(
            f"input dims {x_u.data.shape[1]}/{x_i.data.shape[1]} do not match the "
            f"configured {cfg.user_dim}/{cfg.image_dim}")
    attr = inputs.get("attr")
    if attr is None:
        attr_t = None
    elif isinstance(attr, Tensor):
        attr_t = attr
    else:
        attr_t = Tensor(np.asarray(attr, dtype=np.float64))

    feats = {"user": T.matmul(x_u, stack.proj["user"]),
             "image": T.matmul(x_i, stack.proj["image"])}
    for l, layer in enumerate(stack.layers):
        if cfg.backbone == "gat":
            feats = gat_layer_forward(plan, feats, attr_t, layer, slope=cfg.leaky_slope)
        elif cfg.backbone == "sage":
            feats = sage_layer_forward(plan, feats, layer)
        else:
            feats = conv_layer_forward(plan, feats, layer)
        for typ in ("user", "image"):
            site = stack.bn[l][typ]
            normed = T.batch_norm(feats[typ], site.gamma, site.beta, site.state,
                                  mode, eps=cfg.bn_eps, momentum=cfg.bn_momentum)
            feats[typ] = T.relu(normed)
    return feats
