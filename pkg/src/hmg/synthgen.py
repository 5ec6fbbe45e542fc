"""Deterministic synthetic bundles with a planted multimodal label signal.

Users and images get uniform cluster ids; a views edge's label is
(cluster(user) + cluster(image)) mod 8, so neither endpoint alone determines
it and a learner must combine both sides.  Node features carry their
cluster as a one-hot (amplitude 1 - signal_mix) plus Gaussian noise; a
``comment_availability`` fraction of views edges carries the label one-hot
inside its 256-dim comment attribute, the rest are flagged missing.  Contact
edges prefer same-cluster endpoints and grow by preferential attachment, so
degrees come out heavy-tailed.

Default counts are the reference graph shape (108899 / 85157 / 1649058 /
197561) multiplied by ``scale``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from hmg.graph import (GraphError, HeteroGraph, VIEWS_DTYPE, build_graph,
                       load_graph, save_graph)

BASE_USERS = 108899
BASE_IMAGES = 85157
BASE_CONNECTS = 1649058
BASE_VIEWS = 197561


@dataclass
class SynthConfig:
    scale: float = 1.0 / 20.0
    clusters: int = 8
    noise_sigma: float = 0.1
    comment_availability: float = 0.34
    signal_mix: float = 0.0        # 0: full label signal in node features
    intra_cluster: float = 0.85    # fraction of contact edges within a cluster
    user_dim: int = 128
    image_dim: int = 128
    attr_dim: int = 256
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if self.scale <= 0:
            raise GraphError("scale must be positive")
        if not 0.0 <= self.comment_availability <= 1.0:
            raise GraphError("comment_availability must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise GraphError("noise_sigma must be nonnegative")
        if not 0.0 <= self.signal_mix <= 1.0:
            raise GraphError("signal_mix must lie in [0, 1]")
        if self.clusters < 1 or self.clusters > min(self.user_dim, self.image_dim,
                                                    self.attr_dim):
            raise GraphError("clusters must fit inside the feature dims")
        return self

    def counts(self) -> dict:
        return {"users": int(round(BASE_USERS * self.scale)),
                "images": int(round(BASE_IMAGES * self.scale)),
                "connects": int(round(BASE_CONNECTS * self.scale)),
                "views": int(round(BASE_VIEWS * self.scale))}

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        raw = json.loads(Path(path).read_text())
        known = set(cls.__dataclass_fields__)
        for key in raw:
            if key not in known:
                raise GraphError(f"unknown synth config key {key!r}")
        return cls(**raw).validate()


def _node_features(rng, n, dim, cluster, sigma, amplitude) -> np.ndarray:
    feats = sigma * rng.standard_normal((n, dim))
    feats[np.arange(n), cluster] += amplitude
    return feats.astype(np.float32)


def _pa_edges(rng, members: np.ndarray, count: int, taken: set) -> list[tuple]:
    """Preferential-attachment pairs within one member list; no dups/self-loops."""
    urn = list(members)
    edges = []
    while len(edges) < count:
        # small chunks keep the urn snapshot fresh, otherwise attachment
        # degenerates to uniform sampling and degrees lose their heavy tail
        chunk = min(256, max(32, 2 * (count - len(edges))))
        pool = np.asarray(urn)
        a = pool[rng.integers(0, len(pool), chunk)]
        b = pool[rng.integers(0, len(pool), chunk)]
        for u, v in zip(a.tolist(), b.tolist()):
            if u == v:
                continue
            key = (u, v) if u < v else (v, u)
            if key in taken:
                continue
            taken.add(key)
            edges.append(key)
            urn.append(u)  # endpoints accumulate draws: rich get richer
            urn.append(v)
            if len(edges) == count:
                break
    return edges


def _contact_edges(rng, user_cluster: np.ndarray, count: int, intra: float,
                   clusters: int) -> np.ndarray:
    n = user_cluster.shape[0]
    if count > n * (n - 1) // 2:
        raise GraphError("more contact edges requested than distinct pairs exist")
    taken: set = set()
    edges: list[tuple] = []
    groups = [np.flatnonzero(user_cluster == c) for c in range(clusters)]
    n_intra = int(round(intra * count))
    sizes = np.array([g.shape[0] for g in groups], dtype=np.float64)
    quota = np.floor(n_intra * sizes / n).astype(np.int64)
    cap = (sizes * (sizes - 1) // 2).astype(np.int64)
    quota = np.minimum(quota, cap)
    for c in range(clusters):
        if quota[c] > 0:
            edges.extend(_pa_edges(rng, groups[c], int(quota[c]), taken))
    while len(edges) < count:  # cross-cluster (plus any intra shortfall): uniform
        chunk = max(64, 2 * (count - len(edges)))
        a = rng.integers(0, n, chunk)
        b = rng.integers(0, n, chunk)
        for u, v in zip(a.tolist(), b.tolist()):
            if u == v:
                continue
            key = (u, v) if u < v else (v, u)
            if key in taken:
                continue
            taken.add(key)
            edges.append(key)
            if len(edges) == count:
                break
    return np.asarray(edges, dtype=np.int64)


def _view_pairs(rng, n_users: int, n_images: int, count: int) -> np.ndarray:
    if count > n_users * n_images:
        raise GraphError("more views edges requested than user-image pairs exist")
    taken: set = set()
    pairs: list[int] = []
    while len(pairs) < count:
        chunk = max(64, 2 * (count - len(pairs)))
        keys = (rng.integers(0, n_users, chunk) * n_images
                + rng.integers(0, n_images, chunk))
        for k in keys.tolist():
            if k in taken:
                continue
            taken.add(k)
            pairs.append(k)
            if len(pairs) == count:
                break
    keys = np.asarray(pairs, dtype=np.int64)
    return np.stack([keys // n_images, keys % n_images], axis=1)


def generate(config: SynthConfig, out_dir) -> HeteroGraph:
    """Write a bundle (plus synth_meta.json) and return the validated graph."""
    config.validate()
    counts = config.counts()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed]))
    k = config.clusters

    user_cluster = rng.integers(0, k, counts["users"])
    image_cluster = rng.integers(0, k, counts["images"])
    node_amp = 1.0 - config.signal_mix
    feat_user = _node_features(rng, counts["users"], config.user_dim,
                               user_cluster, config.noise_sigma, node_amp)
    feat_image = _node_features(rng, counts["images"], config.image_dim,
                                image_cluster, config.noise_sigma, node_amp)

    connects = _contact_edges(rng, user_cluster, counts["connects"],
                              config.intra_cluster, k)
    pairs = _view_pairs(rng, counts["users"], counts["images"], counts["views"])
    labels = (user_cluster[pairs[:, 0]] + image_cluster[pairs[:, 1]]) % k

    present = rng.random(counts["views"]) < config.comment_availability
    n_present = int(present.sum())
    attr = (config.noise_sigma
            * rng.standard_normal((n_present, config.attr_dim))).astype(np.float32)
    attr[np.arange(n_present), labels[present]] += 1.0

    views = np.zeros(counts["views"], dtype=VIEWS_DTYPE)
    views["user"] = pairs[:, 0]
    views["image"] = pairs[:, 1]
    views["label"] = labels
    views["missing"] = ~present
    views["attr"][present] = np.arange(n_present)

    graph = build_graph(counts["users"], counts["images"], connects, views,
                        {"user": feat_user, "image": feat_image, "comment": attr})
    out_dir = Path(out_dir)
    save_graph(graph, out_dir)
    meta = {"config": asdict(config), "seed": config.seed}
    (out_dir / "synth_meta.json").write_text(json.dumps(meta, indent=2))
    return graph


def describe(bundle_path) -> dict:
    """Counts, label histogram, comment availability, and degree summaries."""
    graph = load_graph(bundle_path)
    stats = graph.stats()
    hist = np.bincount(graph.views_label, minlength=8)
    deg_connects = np.bincount(
        np.concatenate([graph.connects[:, 0], graph.connects[:, 1]]).astype(np.int64),
        minlength=graph.user_count)
    views_per_user = np.bincount(graph.views_user.astype(np.int64),
                                 minlength=graph.user_count)
    viewers_per_image = np.bincount(graph.views_image.astype(np.int64),
                                    minlength=graph.image_count)

    def summary(deg):
        return {"min": int(deg.min()) if deg.size else 0,
                "mean": float(deg.mean()) if deg.size else 0.0,
                "max": int(deg.max()) if deg.size else 0}

    stats.update({
        "label_histogram": hist.tolist(),
        "comment_availability": (stats["comments_present"] / stats["views_count"]
                                 if stats["views_count"] else 0.0),
        "degree_connects": summary(deg_connects),
        "degree_views_per_user": summary(views_per_user),
        "degree_viewers_per_image": summary(viewers_per_image),
    })
    return stats
