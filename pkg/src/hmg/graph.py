"""Heterogeneous user/image graph: validation, adjacency, splits, sampling, IO.

Two node types (user, image) and two stored relations:

* ``connects`` - undirected user-user contact edges, kept as canonical
  (min, max) pairs and mirrored into both directions for message passing.
* ``views`` - user->image interaction edges carrying an emotion label and an
  optional comment-attribute row.  The reverse flow (``viewed-by``) is
  materialized from the same edges and shares their attribute rows; labels
  attach only to the forward direction.

The on-disk form is a bundle directory (``hmg-bundle/1``): a JSON manifest,
little-endian binary edge tables, and HMGE feature files (magic ``HMGE``,
u32 version/rows/dim header, float32 row-major payload).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np


class GraphError(ValueError):
    """Base class for graph construction and IO failures."""


class IndexRangeError(GraphError):
    """An edge endpoint or attribute row points outside its table."""


class DuplicateEdgeError(GraphError):
    """The same edge appears twice in the input."""


class DimensionMismatchError(GraphError):
    """A feature table's shape disagrees with the node/edge counts."""


class SampleInfeasibleError(GraphError):
    """More negative pairs requested than the complement contains."""


class BundleFormatError(GraphError):
    """A bundle file is malformed, truncated, or inconsistent."""


class EmotionLabel(IntEnum):
    AMUSEMENT = 0
    ANGER = 1
    AWE = 2
    CONTENTMENT = 3
    DISGUST = 4
    EXCITEMENT = 5
    FEAR = 6
    SADNESS = 7


#: Extra class code used only when training with negative sampling; it never
#: appears in a stored graph.
NON_EXISTENT_CLASS = 8

NUM_EMOTIONS = 8

BUNDLE_FORMAT = "hmg-bundle/1"
HMGE_MAGIC = b"HMGE"

VIEWS_DTYPE = np.dtype([("user", "<u4"), ("image", "<u4"), ("label", "u1"),
                        ("missing", "u1"), ("attr", "<u4")])

RELATIONS = ("connects", "views", "viewed-by")


def _csr(dst, src, n_dst, payload=None):
    """Group (dst, src) pairs by dst; neighbor lists come out ascending."""
    order = np.lexsort((src, dst))
    indptr = np.zeros(n_dst + 1, dtype=np.int64)
    np.cumsum(np.bincount(dst, minlength=n_dst), out=indptr[1:])
    cols = src[order]
    extra = payload[order] if payload is not None else None
    return indptr, cols, extra


@dataclass(frozen=True)
class HeteroGraph:
    user_count: int
    image_count: int
    connects: np.ndarray        # (M, 2) u32 canonical undirected pairs, u < v
    views_user: np.ndarray      # (V,) u32
    views_image: np.ndarray     # (V,) u32
    views_label: np.ndarray     # (V,) u8, codes 0..7
    views_attr_missing: np.ndarray  # (V,) bool
    views_attr_row: np.ndarray  # (V,) u32, meaningful where not missing
    feat_user: np.ndarray       # (user_count, du) f32
    feat_image: np.ndarray      # (image_count, di) f32
    attr_comment: np.ndarray    # (rows, da) f32
    _adj: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_views(self) -> int:
        return self.views_user.shape[0]

    @property
    def num_connects(self) -> int:
        return self.connects.shape[0]

    def _adjacency(self, key: str):
        adj = self._adj.get(key)
        if adj is not None:
            return adj
        if key == "connects":
            u = np.concatenate([self.connects[:, 0], self.connects[:, 1]]).astype(np.int64)
            v = np.concatenate([self.connects[:, 1], self.connects[:, 0]]).astype(np.int64)
            indptr, cols, _ = _csr(u, v, self.user_count)
            adj = (indptr, cols, None)
        elif key == "views":
            eid = np.arange(self.num_views, dtype=np.int64)
            indptr, cols, eids = _csr(self.views_user.astype(np.int64),
                                      self.views_image.astype(np.int64),
                                      self.user_count, eid)
            adj = (indptr, cols, eids)
        elif key == "viewed-by":
            eid = np.arange(self.num_views, dtype=np.int64)
            indptr, cols, eids = _csr(self.views_image.astype(np.int64),
                                      self.views_user.astype(np.int64),
                                      self.image_count, eid)
            adj = (indptr, cols, eids)
        else:
            raise GraphError(f"unknown relation {key!r}")
        self._adj[key] = adj
        return adj

    def neighbors(self, node: int, relation: str) -> np.ndarray:
        """Ascending, duplicate-free neighbor indices of ``node`` under ``relation``.

        ``views`` maps a user to the images they view; ``viewed-by`` is the
        reverse; ``connects`` maps a user to their contacts.
        """
        if relation not in RELATIONS:
            raise GraphError(f"unknown relation {relation!r}")
        source_count = self.image_count if relation == "viewed-by" else self.user_count
        if not 0 <= node < source_count:
            raise IndexRangeError(
                f"node {node} is not a valid {'image' if relation == 'viewed-by' else 'user'} "
                f"index for relation {relation!r}")
        indptr, cols, _ = self._adjacency(relation)
        return cols[indptr[node]:indptr[node + 1]].copy()

    def stats(self) -> dict:
        present = int((~self.views_attr_missing).sum())
        return {
            "user_count": self.user_count,
            "image_count": self.image_count,
            "connects_count": self.num_connects,
            "views_count": self.num_views,
            "user_dim": self.feat_user.shape[1],
            "image_dim": self.feat_image.shape[1],
            "attr_dim": self.attr_comment.shape[1],
            "attr_rows": self.attr_comment.shape[0],
            "comments_present": present,
        }

    def equal(self, other: "HeteroGraph") -> bool:
        """Field-by-field equality with bit-exact feature payloads."""
        def same(a, b):
            return a.shape == b.shape and a.tobytes() == b.tobytes()

        return (self.user_count == other.user_count
                and self.image_count == other.image_count
                and same(self.connects, other.connects)
                and same(self.views_user, other.views_user)
                and same(self.views_image, other.views_image)
                and same(self.views_label, other.views_label)
                and same(self.views_attr_missing, other.views_attr_missing)
                and same(self.views_attr_row, other.views_attr_row)
                and same(self.feat_user, other.feat_user)
                and same(self.feat_image, other.feat_image)
                and same(self.attr_comment, other.attr_comment))


def _lock(*arrays):
    for a in arrays:
        a.setflags(write=False)


def _check_features(name: str, table, rows: int) -> np.ndarray:
    table = np.zeros((rows, 0), dtype=np.float32) if table is None \
        else np.ascontiguousarray(table, dtype=np.float32)
    if table.ndim != 2 or table.shape[0] != rows:
        raise DimensionMismatchError(
            f"{name} table must have {rows} rows, got shape {table.shape}")
    if table.size and not np.isfinite(table).all():
        raise GraphError(f"{name} table contains non-finite values")
    return table


def build_graph(users: int, images: int, connects_list, views_list,
                feature_tables: dict | None = None) -> HeteroGraph:
    """Validate inputs and assemble an immutable graph.

    ``connects_list`` is a (M, 2) user-pair array; either one direction per
    contact or both (mirrors collapse to one undirected edge).  ``views_list``
    is a (V,) sequence/recarray of (user, image, label, attr_missing,
    attr_row).  Duplicate views pairs and duplicate directed connects are
    hard errors: deduplication is the ingester's job.
    """
    if users < 0 or images < 0:
        raise GraphError("node counts must be nonnegative")
    feature_tables = feature_tables or {}

    conn = np.asarray(connects_list, dtype=np.int64).reshape(-1, 2)
    if conn.size:
        if conn.min() < 0 or conn.max() >= users:
            raise IndexRangeError("connects endpoint outside [0, user_count)")
        if (conn[:, 0] == conn[:, 1]).any():
            raise GraphError("connects self-loops are not allowed")
        directed_keys = conn[:, 0] * users + conn[:, 1]
        if np.unique(directed_keys).shape[0] != conn.shape[0]:
            raise DuplicateEdgeError("duplicate connects pair in input")
        canon = np.sort(conn, axis=1)
        canon = np.unique(canon, axis=0)  # collapses mirrored directions
    else:
        canon = np.zeros((0, 2), dtype=np.int64)

    views = np.asarray(views_list)
    if views.dtype != VIEWS_DTYPE:
        rows = [tuple(r) for r in views] if views.size else []
        views = np.array(rows, dtype=VIEWS_DTYPE)
    vu = views["user"].astype(np.int64)
    vi = views["image"].astype(np.int64)
    if views.size:
        if vu.min() < 0 or vu.max() >= users:
            raise IndexRangeError("views user endpoint outside [0, user_count)")
        if vi.min() < 0 or vi.max() >= images:
            raise IndexRangeError("views image endpoint outside [0, image_count)")
        pair_keys = vu * images + vi
        if np.unique(pair_keys).shape[0] != views.shape[0]:
            raise DuplicateEdgeError("duplicate views (user, image) pair in input")
        if views["label"].max() >= NUM_EMOTIONS:
            raise GraphError("views label outside the 8 emotion classes")

    feat_user = _check_features("user feature", feature_tables.get("user"), users)
    feat_image = _check_features("image feature", feature_tables.get("image"), images)
    attr = feature_tables.get("comment")
    attr = np.zeros((0, 0), dtype=np.float32) if attr is None \
        else np.ascontiguousarray(attr, dtype=np.float32)
    if attr.ndim != 2:
        raise DimensionMismatchError("comment attribute table must be 2-d")
    if attr.size and not np.isfinite(attr).all():
        raise GraphError("comment attribute table contains non-finite values")

    missing = views["missing"].astype(bool)
    attr_row = views["attr"].astype(np.int64)
    attr_row[missing] = 0  # canonical value for absent rows
    if (~missing).any():
        used = attr_row[~missing]
        if used.size and (used.min() < 0 or used.max() >= attr.shape[0]):
            raise IndexRangeError("views attribute row outside the comment table")

    g = HeteroGraph(
        user_count=int(users),
        image_count=int(images),
        connects=canon.astype(np.uint32),
        views_user=vu.astype(np.uint32),
        views_image=vi.astype(np.uint32),
        views_label=views["label"].astype(np.uint8).copy(),
        views_attr_missing=missing,
        views_attr_row=attr_row.astype(np.uint32),
        feat_user=feat_user,
        feat_image=feat_image,
        attr_comment=attr,
    )
    _lock(g.connects, g.views_user, g.views_image, g.views_label,
          g.views_attr_missing, g.views_attr_row, g.feat_user, g.feat_image,
          g.attr_comment)
    return g


def views_record(user, image, label, attr_row=None) -> tuple:
    """One row for build_graph's views input; ``attr_row=None`` marks a
    missing comment."""
    missing = attr_row is None
    return (user, image, int(label), int(missing), 0 if missing else int(attr_row))


# ---------------------------------------------------------------------------
# Splits and negative sampling.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EdgeSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int
    ratios: tuple


def split_edges(graph: HeteroGraph, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> EdgeSplit:
    """Seeded uniform shuffle, then partition.

    Val and test sizes are floor(ratio * n); the remainder goes to train, so
    10 edges at 80:10:10 split as (8, 1, 1).
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise GraphError(f"split ratios must be three nonnegative values summing to 1, "
                         f"got {ratios}")
    n = graph.num_views
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(np.floor(ratios[1] * n))
    n_test = int(np.floor(ratios[2] * n))
    n_train = n - n_val - n_test
    split = EdgeSplit(
        train=np.sort(perm[:n_train]),
        val=np.sort(perm[n_train:n_train + n_val]),
        test=np.sort(perm[n_train + n_val:]),
        seed=seed,
        ratios=ratios,
    )
    _lock(split.train, split.val, split.test)
    return split


def sample_negative_edges(graph: HeteroGraph, count: int, seed: int) -> np.ndarray:
    """Uniform (user, image) pairs absent from views, without replacement.

    Rejection-samples in chunks; deterministic for a given seed.  Returns an
    (count, 2) int64 array in draw order.
    """
    if count < 0:
        raise GraphError("negative sample count must be nonnegative")
    total = graph.user_count * graph.image_count
    existing = np.sort(graph.views_user.astype(np.int64) * graph.image_count
                       + graph.views_image.astype(np.int64))
    free = total - existing.shape[0]
    if count > free:
        raise SampleInfeasibleError(
            f"requested {count} negative pairs but only {free} pairs are absent")
    if count == 0:
        return np.zeros((0, 2), dtype=np.int64)

    rng = np.random.default_rng(seed)
    accepted: list[int] = []
    seen = set()
    while len(accepted) < count:
        chunk = max(2 * (count - len(accepted)), 256)
        keys = (rng.integers(0, graph.user_count, chunk) * graph.image_count
                + rng.integers(0, graph.image_count, chunk))
        if existing.size:
            pos = np.clip(np.searchsorted(existing, keys), 0, existing.shape[0] - 1)
            keys = keys[keys != existing[pos]]
        for k in keys.tolist():
            if k in seen:
                continue
            seen.add(k)
            accepted.append(k)
            if len(accepted) == count:
                break
    keys = np.asarray(accepted, dtype=np.int64)
    return np.stack([keys // graph.image_count, keys % graph.image_count], axis=1)


# ---------------------------------------------------------------------------
# Bundle IO.
# ---------------------------------------------------------------------------

def write_hmge(path: Path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype="<f4")
    if array.ndim != 2:
        raise BundleFormatError("HMGE files hold 2-d row-major float32 tables")
    header = HMGE_MAGIC + np.array([1, array.shape[0], array.shape[1]],
                                   dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(array.tobytes())


def read_hmge(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != HMGE_MAGIC:
        raise BundleFormatError(f"{path}: bad magic, not an HMGE file")
    version, rows, dim = np.frombuffer(raw[4:16], dtype="<u4")
    if version != 1:
        raise BundleFormatError(f"{path}: unsupported HMGE version {version}")
    expected = 16 + int(rows) * int(dim) * 4
    if len(raw) != expected:
        raise BundleFormatError(f"{path}: truncated payload "
                                f"({len(raw)} bytes, expected {expected})")
    return np.frombuffer(raw[16:], dtype="<f4").reshape(int(rows), int(dim)).copy()


def save_graph(graph: HeteroGraph, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": BUNDLE_FORMAT,
        "user_count": graph.user_count,
        "image_count": graph.image_count,
        "connects_count": graph.num_connects,
        "views_count": graph.num_views,
        "user_dim": graph.feat_user.shape[1],
        "image_dim": graph.feat_image.shape[1],
        "attr_dim": graph.attr_comment.shape[1],
        "attr_rows": graph.attr_comment.shape[0],
        "labels": {str(int(l)): l.name.capitalize() for l in EmotionLabel},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    graph.connects.astype("<u4").tofile(path / "edges_connects.bin")
    views = np.empty(graph.num_views, dtype=VIEWS_DTYPE)
    views["user"] = graph.views_user
    views["image"] = graph.views_image
    views["label"] = graph.views_label
    views["missing"] = graph.views_attr_missing
    views["attr"] = graph.views_attr_row
    views.tofile(path / "edges_views.bin")
    write_hmge(path / "feat_user.bin", graph.feat_user)
    write_hmge(path / "feat_image.bin", graph.feat_image)
    write_hmge(path / "attr_comment.bin", graph.attr_comment)


def load_graph(path) -> HeteroGraph:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise BundleFormatError(f"{path}: no manifest.json")
    except json.JSONDecodeError as exc:
        raise BundleFormatError(f"{path}: manifest is not valid JSON: {exc}")
    if manifest.get("format") != BUNDLE_FORMAT:
        raise BundleFormatError(f"{path}: unsupported bundle format "
                                f"{manifest.get('format')!r}")

    conn_raw = np.fromfile(path / "edges_connects.bin", dtype="<u4")
    if conn_raw.size % 2:
        raise BundleFormatError("edges_connects.bin has a partial row")
    conn = conn_raw.reshape(-1, 2)
    views = np.fromfile(path / "edges_views.bin", dtype=VIEWS_DTYPE)
    if conn.shape[0] != manifest["connects_count"]:
        raise BundleFormatError(f"connects payload has {conn.shape[0]} rows, "
                                f"manifest says {manifest['connects_count']}")
    if views.shape[0] != manifest["views_count"]:
        raise BundleFormatError(f"views payload has {views.shape[0]} rows, "
                                f"manifest says {manifest['views_count']}")

    tables = {
        "user": read_hmge(path / "feat_user.bin"),
        "image": read_hmge(path / "feat_image.bin"),
        "comment": read_hmge(path / "attr_comment.bin"),
    }
    for key, want_rows, want_dim in (("user", manifest["user_count"], manifest["user_dim"]),
                                     ("image", manifest["image_count"], manifest["image_dim"]),
                                     ("comment", manifest["attr_rows"], manifest["attr_dim"])):
        if tables[key].shape != (want_rows, want_dim):
            raise BundleFormatError(f"{key} table shape {tables[key].shape} disagrees "
                                    f"with manifest ({want_rows}, {want_dim})")
    return build_graph(manifest["user_count"], manifest["image_count"], conn, views, tables)
