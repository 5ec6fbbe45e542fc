"""Node and edge feature assembly.

User node features come from averaging the embeddings of the special-interest
groups a user joined; comment embeddings attach to views edges, and absent
comments are filled with seeded uniform noise so every edge ends up with an
attribute row.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hmg.graph import (DimensionMismatchError, GraphError, HeteroGraph,
                       build_graph, read_hmge)


@dataclass(frozen=True)
class GroupTable:
    """Group-description embeddings plus per-user membership index sets."""

    embeddings: np.ndarray          # (num_groups, dim)
    memberships: tuple              # per user: sorted int array of group rows

    def __post_init__(self):
        for rows in self.memberships:
            if rows.size and (rows.min() < 0 or rows.max() >= self.embeddings.shape[0]):
                raise GraphError("membership references a group row outside the table")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def aggregate_group_context(table: GroupTable, user: int) -> np.ndarray:
    """Mean of the user's group embeddings; zero vector for users in no groups."""
    if not 0 <= user < len(table.memberships):
        raise GraphError(f"user {user} outside membership table")
    rows = table.memberships[user]
    if rows.size == 0:
        return np.zeros(table.dim, dtype=np.float64)
    return table.embeddings[rows].mean(axis=0).astype(np.float64)


def group_context_matrix(table: GroupTable) -> np.ndarray:
    return np.stack([aggregate_group_context(table, u)
                     for u in range(len(table.memberships))])


def load_group_table(groups_path, memberships_path, embeddings_path,
                     user_count: int) -> GroupTable:
    """Read the groups.json / memberships.json pair plus an HMGE embedding file.

    groups.json is an array of {"group_id", "embedding_file_row"}; memberships
    maps user id (as a string key) to a list of group ids.
    """
    groups = json.loads(Path(groups_path).read_text())
    row_of = {}
    for entry in groups:
        row_of[int(entry["group_id"])] = int(entry["embedding_file_row"])
    embeddings = read_hmge(embeddings_path).astype(np.float64)
    if row_of and max(row_of.values()) >= embeddings.shape[0]:
        raise GraphError("groups.json references an embedding row past the file end")

    raw = json.loads(Path(memberships_path).read_text())
    memberships = []
    for u in range(user_count):
        ids = raw.get(str(u), [])
        try:
            rows = sorted(row_of[int(g)] for g in ids)
        except KeyError as exc:
            raise GraphError(f"membership of user {u} names unknown group {exc}")
        memberships.append(np.asarray(rows, dtype=np.int64))
    return GroupTable(embeddings=embeddings, memberships=tuple(memberships))


def fill_missing_comment_attrs(graph: HeteroGraph, seed: int) -> np.ndarray:
    """Dense per-edge attribute table with every missing row filled in.

    Row e of the result is edge e's comment embedding when present, otherwise
    an i.i.d. Uniform[0,1) float32 vector.  Fills are keyed by edge index
    through one seeded stream, so the same seed always produces the same
    table and present rows are never touched.
    """
    dim = graph.attr_comment.shape[1]
    n = graph.num_views
    rng = np.random.default_rng(seed)
    table = rng.random((n, dim), dtype=np.float32)
    present = ~graph.views_attr_missing
    table[present] = graph.attr_comment[graph.views_attr_row[present]]
    return table


def attach_embeddings(graph: HeteroGraph, user_vecs, image_vecs, comment_vecs,
                      expected_dims: tuple = (128, 128, 256)) -> HeteroGraph:
    """Install feature tables on a graph, validating dims against the config."""
    user_vecs = np.ascontiguousarray(user_vecs, dtype=np.float32)
    image_vecs = np.ascontiguousarray(image_vecs, dtype=np.float32)
    comment_vecs = np.ascontiguousarray(comment_vecs, dtype=np.float32)
    for name, arr, dim in (("user", user_vecs, expected_dims[0]),
                           ("image", image_vecs, expected_dims[1]),
                           ("comment", comment_vecs, expected_dims[2])):
        if arr.ndim != 2 or arr.shape[1] != dim:
            raise DimensionMismatchError(
                f"{name} vectors must be (rows, {dim}), got {arr.shape}")

    views = np.empty(graph.num_views, dtype=np.dtype(
        [("user", "<u4"), ("image", "<u4"), ("label", "u1"),
         ("missing", "u1"), ("attr", "<u4")]))
    views["user"] = graph.views_user
    views["image"] = graph.views_image
    views["label"] = graph.views_label
    views["missing"] = graph.views_attr_missing
    views["attr"] = graph.views_attr_row
    return build_graph(graph.user_count, graph.image_count, graph.connects, views,
                       {"user": user_vecs, "image": image_vecs, "comment": comment_vecs})
