"""End-to-end training: config, Adam + cosine schedule, CV, model IO.

One training run is sequential and fully seeded: parameter init, epoch
shuffles, dropout masks, and per-epoch negative samples each draw from their
own stream keyed off the run seed, so a fixed seed reproduces losses and
parameters bit for bit.  Cross-validation launches ``folds`` independent runs
with seeds seed+0..folds-1 (fresh split per run) and reports mean +- std of
the test metrics; folds may run in parallel (``HMG_THREADS``) without
changing any numbers.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from hmg import fusion, layers
from hmg import tensor as T
from hmg.features import fill_missing_comment_attrs
from hmg.graph import (BundleFormatError, EdgeSplit, GraphError, HeteroGraph,
                       NON_EXISTENT_CLASS, NUM_EMOTIONS, sample_negative_edges,
                       split_edges)
from hmg.metrics import accuracy, confusion, macro_scores, weighted_scores
from hmg.tensor import ParamStore, Tape, Tensor


class ConfigError(ValueError):
    """A config file or dict contains an unknown or invalid key."""


class TrainingAbortedError(RuntimeError):
    """Training hit a non-finite loss."""

    def __init__(self, epoch: int, batch: int, last_good_epoch: int):
        self.epoch = epoch
        self.batch = batch
        self.last_good_epoch = last_good_epoch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch} "
                         f"(last completed epoch: {last_good_epoch})")


ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8

MODEL_MAGIC = b"HMGM"
MODEL_FORMAT = "hmg-model/1"
REPORT_SCHEMA = "hmg-report/1"


@dataclass
class TrainConfig:
    # model
    backbone: str = "gat"
    num_layers: int = 5
    hidden_dim: int = 64
    user_dim: int = 128
    image_dim: int = 128
    attr_dim: int = 256
    leaky_slope: float = 0.2
    heads: int = 1
    dropout: float = 0.5
    mlp_hidden: tuple = (64, 32, 16)
    combine: str = "concat"
    use_comments: bool = True
    use_ac: bool = True
    comments_only: bool = False
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    # train
    epochs: int = 20
    batch_size: int = 512
    base_lr: float = 0.005
    seed: int = 0
    folds: int = 3
    split: tuple = (0.8, 0.1, 0.1)
    negative_sampling: bool = False
    neg_ratio: float = 1.0
    class_weighted_loss: bool = False
    grad_clip: float | None = None

    _MODEL_KEYS = ("backbone", "num_layers", "hidden_dim", "user_dim", "image_dim",
                   "attr_dim", "leaky_slope", "heads", "dropout", "mlp_hidden",
                   "combine", "use_comments", "use_ac", "comments_only", "bn_eps",
                   "bn_momentum")
    _TRAIN_KEYS = ("epochs", "batch_size", "base_lr", "seed", "folds", "split",
                   "negative_sampling", "neg_ratio", "class_weighted_loss", "grad_clip")

    def validate(self) -> "TrainConfig":
        if min(self.epochs, self.batch_size, self.folds) <= 0 or self.base_lr <= 0:
            raise ConfigError("epochs, batch_size, folds and base_lr must be positive")
        if self.negative_sampling and self.neg_ratio <= 0:
            raise ConfigError("neg_ratio must be positive when negative_sampling is on")
        if self.backbone not in ("gat", "sage", "conv"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.combine not in fusion.COMBINE_MECHANISMS:
            raise ConfigError(f"unknown combine mechanism {self.combine!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.heads != 1:
            raise ConfigError("only single-head attention is supported")
        return self

    @property
    def num_classes(self) -> int:
        return NUM_EMOTIONS + 1 if self.negative_sampling else NUM_EMOTIONS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        d["split"] = list(self.split)
        return {"model": {k: d[k] for k in self._MODEL_KEYS},
                "train": {k: d[k] for k in self._TRAIN_KEYS},
                "data": {}}

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known_sections = {"model": cls._MODEL_KEYS, "train": cls._TRAIN_KEYS, "data": ()}
        kwargs = {}
        for section, payload in raw.items():
            if section not in known_sections:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(payload, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            for key, value in payload.items():
                if key not in known_sections[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                kwargs[key] = value
        if "mlp_hidden" in kwargs:
            kwargs["mlp_hidden"] = tuple(kwargs["mlp_hidden"])
        if "split" in kwargs:
            kwargs["split"] = tuple(kwargs["split"])
        return cls(**kwargs).validate()

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}")
        return cls.from_dict(raw)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Cosine annealing from base_lr at epoch 0 to exactly 0 at epoch == epochs."""
    if not 0 <= epoch <= config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs}]")
    return 0.5 * config.base_lr * (1.0 + math.cos(math.pi * epoch / config.epochs))


class Adam:
    def __init__(self, store: ParamStore):
        self.m = {k: np.zeros_like(t.data) for k, t in store.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in store.params.items()}
        self.t = 0

    def step(self, store: ParamStore, grads: dict, lr: float,
             clip: float | None = None) -> None:
        if clip is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > clip:
                grads = {k: g * (clip / norm) for k, g in grads.items()}
        self.t += 1
        c1 = 1.0 - ADAM_BETA1 ** self.t
        c2 = 1.0 - ADAM_BETA2 ** self.t
        for name, p in store.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * (g * g)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


# ---------------------------------------------------------------------------
# Model assembly.
# ---------------------------------------------------------------------------

@dataclass
class Model:
    config: TrainConfig
    store: ParamStore
    stack: layers.StackParams | None
    head: fusion.ClassifierHead
    ac: fusion.AcParams | None
    fill_seed: int = 0


def build_model(config: TrainConfig, rng: np.random.Generator) -> Model:
    config.validate()
    store = ParamStore()
    stack = None
    if not config.comments_only:
        stack_cfg = layers.StackConfig(
            num_layers=config.num_layers, hidden_dim=config.hidden_dim,
            user_dim=config.user_dim, image_dim=config.image_dim,
            attr_dim=config.attr_dim, leaky_slope=config.leaky_slope,
            heads=config.heads, bn_eps=config.bn_eps, bn_momentum=config.bn_momentum,
            backbone=config.backbone,
            use_comments=config.use_comments and config.backbone == "gat")
        stack = layers.init_stack_params(stack_cfg, store, rng)
    ac = fusion.init_ac_params(store) if (config.use_ac and not config.comments_only) \
        else None
    if config.comments_only:
        # plain MLP on edge attributes: same head shape, input dim = attr_dim
        head = fusion.init_classifier_head(
            store, rng, embed_dim=config.attr_dim, num_classes=config.num_classes,
            hidden=config.mlp_hidden, combine="add", dropout=config.dropout)
    else:
        head = fusion.init_classifier_head(
            store, rng, embed_dim=config.hidden_dim, num_classes=config.num_classes,
            hidden=config.mlp_hidden, combine=config.combine, dropout=config.dropout)
    return Model(config=config, store=store, stack=stack, head=head, ac=ac)


def _class_weights(labels: np.ndarray, num_classes: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    w = np.zeros(num_classes)
    seen = counts > 0
    w[seen] = counts[seen].sum() / (seen.sum() * counts[seen])
    return w


def _model_inputs(model: Model, graph: HeteroGraph):
    inputs = {
        "user": np.asarray(graph.feat_user, dtype=np.float64),
        "image": np.asarray(graph.feat_image, dtype=np.float64),
        "attr": None,
    }
    cfg = model.config
    if cfg.backbone == "gat" and cfg.use_comments and not cfg.comments_only:
        table = fill_missing_comment_attrs(graph, seed=model.fill_seed)
        inputs["attr"] = Tensor(np.asarray(table, dtype=np.float64))
    return inputs


class _PlanCache:
    """Batches almost always saturate to the same node set; keep the last plan."""

    def __init__(self, graph: HeteroGraph):
        self.graph = graph
        self.key = None
        self.plan = None

    def get(self, users: np.ndarray, images: np.ndarray) -> layers.SubgraphPlan:
        if (self.key is not None
                and np.array_equal(self.key[0], users)
                and np.array_equal(self.key[1], images)):
            return self.plan
        if users.shape[0] == self.graph.user_count and \
                images.shape[0] == self.graph.image_count:
            plan = layers.full_plan(self.graph)
        else:
            plan = layers.build_plan(self.graph, users, images)
        self.key = (users, images)
        self.plan = plan
        return plan


def _batch_logits(model: Model, graph, inputs, plan_cache: _PlanCache,
                  pairs: np.ndarray, mode: str, rng=None):
    """Stack + head logits for an array of (user, image) global pairs."""
    hops = model.config.num_layers
    users, images = layers.lhop_closure(graph, np.unique(pairs[:, 0]),
                                        np.unique(pairs[:, 1]), hops)
    plan = plan_cache.get(users, images)
    feats = layers.stack_forward(graph, inputs, model.stack, mode, plan=plan)
    xu = T.gather_rows(feats["user"], plan.user_loc[pairs[:, 0]])
    xi = T.gather_rows(feats["image"], plan.image_loc[pairs[:, 1]])
    return fusion.classify_edge(xu, xi, model.head, model.ac, mode, rng)


def _comment_logits(model: Model, attr_table: np.ndarray, edge_idx: np.ndarray,
                    mode: str, rng=None):
    feats = Tensor(attr_table[edge_idx])
    return fusion.head_logits(model.head, feats, mode, rng)


@dataclass
class FoldRecord:
    fold: int
    seed: int
    train_loss: list
    val_loss: list
    best_epoch: int
    test: dict

    def to_dict(self) -> dict:
        return {"fold": self.fold, "seed": self.seed, "train_loss": self.train_loss,
                "val_loss": self.val_loss, "best_epoch": self.best_epoch,
                "test": self.test}


def _rng(seed: int, tag: int, extra: int | None = None) -> np.random.Generator:
    entropy = [seed, tag] if extra is None else [seed, tag, extra]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def train(graph: HeteroGraph, split: EdgeSplit, config: TrainConfig,
          run_seed: int | None = None, fold: int = 0, batch_hook=None,
          select_best: bool = True) -> tuple[Model, FoldRecord]:
    """One seeded training run; returns the best-validation-loss model.

    Mini-batches walk the labeled train edges (plus per-epoch negative pairs
    labeled as class 8 when enabled); each batch runs the stack over the
    batch's L-hop in-neighborhood and takes one Adam step at the cosine-
    annealed rate for the current epoch.  ``select_best=False`` keeps the
    final-epoch parameters instead of the best-validation snapshot.
    """
    config.validate()
    seed = config.seed if run_seed is None else run_seed
    if split.train.size == 0:
        raise GraphError("empty train split")

    model = build_model(config, _rng(seed, 0))
    model.fill_seed = seed
    adam = Adam(model.store)
    inputs = _model_inputs(model, graph)
    attr_table = None
    if config.comments_only:
        attr_table = np.asarray(fill_missing_comment_attrs(graph, seed=seed),
                                dtype=np.float64)
    plan_cache = _PlanCache(graph)
    shuffle_rng = _rng(seed, 1)
    drop_rng = _rng(seed, 2)

    labels_all = graph.views_label.astype(np.int64)
    pos_pairs = np.stack([graph.views_user[split.train].astype(np.int64),
                          graph.views_image[split.train].astype(np.int64)], axis=1)
    cw = _class_weights(labels_all[split.train], config.num_classes) \
        if config.class_weighted_loss else None

    train_losses: list[float] = []
    val_losses: list[float] = []
    best = (np.inf, None, -1)
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        pairs = pos_pairs
        labels = labels_all[split.train]
        edge_idx = split.train
        if config.negative_sampling:
            n_neg = int(round(config.neg_ratio * split.train.size))
            neg = sample_negative_edges(graph, n_neg, seed=[seed, 3, epoch])
            pairs = np.concatenate([pos_pairs, neg])
            labels = np.concatenate([labels, np.full(n_neg, NON_EXISTENT_CLASS,
                                                     dtype=np.int64)])
            edge_idx = None  # mixed real/negative: index-based lookup is off
        order = shuffle_rng.permutation(labels.shape[0])

        total, count = 0.0, 0
        for lo in range(0, order.size, config.batch_size):
            sel = order[lo:lo + config.batch_size]
            with Tape() as tape:
                if config.comments_only:
                    logits = _comment_logits(model, attr_table, edge_idx[sel],
                                             "train", drop_rng)
                else:
                    logits = _batch_logits(model, graph, inputs, plan_cache,
                                           pairs[sel], "train", drop_rng)
                loss = T.cross_entropy_with_logits(logits, labels[sel],
                                                   class_weights=cw)
                if batch_hook is not None:
                    batch_hook(epoch, pairs[sel], labels[sel], float(loss.data))
                if not np.isfinite(loss.data):
                    raise TrainingAbortedError(epoch, lo // config.batch_size,
                                               epoch - 1)
                grads = T.backward(loss, tape, model.store)
            adam.step(model.store, grads, lr, clip=config.grad_clip)
            total += float(loss.data) * sel.size
            count += sel.size
        train_losses.append(total / count)

        val_losses.append(_dataset_loss(model, graph, inputs, plan_cache,
                                        attr_table, split.val, cw))
        if val_losses[-1] < best[0]:
            best = (val_losses[-1], model.store.snapshot() if select_best else None,
                    epoch)

    if best[1] is not None:
        model.store.restore(best[1])
    test_eval = evaluate(model, graph, split.test)
    record = FoldRecord(fold=fold, seed=seed, train_loss=train_losses,
                        val_loss=val_losses, best_epoch=best[2],
                        test=test_eval.to_dict())
    return model, record


def _dataset_loss(model, graph, inputs, plan_cache, attr_table, edge_idx,
                  cw) -> float:
    """Eval-mode mean cross entropy over a set of labeled views edges."""
    if edge_idx.size == 0:
        return float("nan")
    labels = graph.views_label[edge_idx].astype(np.int64)
    total = 0.0
    bs = model.config.batch_size
    for lo in range(0, edge_idx.size, bs):
        sel = edge_idx[lo:lo + bs]
        if model.config.comments_only:
            logits = _comment_logits(model, attr_table, sel, "eval")
        else:
            pairs = np.stack([graph.views_user[sel].astype(np.int64),
                              graph.views_image[sel].astype(np.int64)], axis=1)
            logits = _batch_logits(model, graph, inputs, plan_cache, pairs, "eval")
        loss = T.cross_entropy_with_logits(logits, labels[lo:lo + bs],
                                           class_weights=cw)
        total += float(loss.data) * sel.size
    return total / edge_idx.size


@dataclass
class EvalResult:
    weighted: tuple
    macro: tuple
    accuracy: float
    count: int

    def to_dict(self) -> dict:
        keys = ("f1", "precision", "recall")
        return {"weighted": dict(zip(keys, self.weighted)),
                "macro": dict(zip(keys, self.macro)),
                "accuracy": self.accuracy, "count": self.count}


def predict(model: Model, graph: HeteroGraph, edge_idx: np.ndarray) -> np.ndarray:
    """Eval-mode argmax class predictions for labeled views edges."""
    edge_idx = np.asarray(edge_idx, dtype=np.int64)
    if edge_idx.size == 0:
        raise GraphError("empty edge set")
    inputs = None if model.config.comments_only else _model_inputs(model, graph)
    attr_table = None
    if model.config.comments_only:
        attr_table = np.asarray(fill_missing_comment_attrs(graph, seed=model.fill_seed),
                                dtype=np.float64)
    plan_cache = _PlanCache(graph)
    preds = []
    bs = model.config.batch_size
    for lo in range(0, edge_idx.size, bs):
        sel = edge_idx[lo:lo + bs]
        if model.config.comments_only:
            logits = _comment_logits(model, attr_table, sel, "eval")
        else:
            pairs = np.stack([graph.views_user[sel].astype(np.int64),
                              graph.views_image[sel].astype(np.int64)], axis=1)
            logits = _batch_logits(model, graph, inputs, plan_cache, pairs, "eval")
        preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds)


def evaluate(model: Model, graph: HeteroGraph, edge_idx) -> EvalResult:
    """Weighted and macro F1/precision/recall over real labeled edges.

    In negative-sampling mode predictions may fall on the extra class; on a
    real edge that counts as a miss for the true class (it has no support of
    its own, so it never enters the averages as a class).
    """
    edge_idx = np.asarray(edge_idx, dtype=np.int64)
    preds = predict(model, graph, edge_idx)
    labels = graph.views_label[edge_idx].astype(np.int64)
    cm = confusion(labels, preds, num_classes=model.config.num_classes)
    return EvalResult(weighted=weighted_scores(cm), macro=macro_scores(cm),
                      accuracy=accuracy(cm), count=int(edge_idx.size))


def majority_baseline(graph: HeteroGraph, split: EdgeSplit) -> EvalResult:
    """Constant most-frequent-train-class predictor, scored on the test split."""
    train_labels = graph.views_label[split.train].astype(np.int64)
    test_labels = graph.views_label[split.test].astype(np.int64)
    majority = int(np.bincount(train_labels, minlength=NUM_EMOTIONS).argmax())
    preds = np.full(test_labels.shape, majority, dtype=np.int64)
    cm = confusion(test_labels, preds, num_classes=NUM_EMOTIONS)
    return EvalResult(weighted=weighted_scores(cm), macro=macro_scores(cm),
                      accuracy=accuracy(cm), count=int(test_labels.size))


# ---------------------------------------------------------------------------
# Cross-validation and reports.
# ---------------------------------------------------------------------------

@dataclass
class TrainReport:
    schema: str
    config: dict
    seed: int
    folds: list
    aggregate: dict
    wall_clock_sec: float

    def to_json(self, path=None) -> str:
        text = json.dumps({"schema": self.schema, "config": self.config,
                           "seed": self.seed, "folds": self.folds,
                           "aggregate": self.aggregate,
                           "wall_clock_sec": self.wall_clock_sec}, indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, path) -> "TrainReport":
        raw = json.loads(Path(path).read_text())
        if raw.get("schema") != REPORT_SCHEMA:
            raise ConfigError(f"unsupported report schema {raw.get('schema')!r}")
        return cls(schema=raw["schema"], config=raw["config"], seed=raw["seed"],
                   folds=raw["folds"], aggregate=raw["aggregate"],
                   wall_clock_sec=raw["wall_clock_sec"])

    def mean(self, key: str = "weighted_f1") -> float:
        return self.aggregate[key]["mean"]

    def summary_rows(self) -> list[str]:
        rows = []
        for avg in ("weighted", "macro"):
            cells = []
            for metric in ("f1", "precision", "recall"):
                agg = self.aggregate[f"{avg}_{metric}"]
                cells.append(f"{agg['mean']:.3f} ± {agg['std']:.3f}")
            rows.append(f"{avg:>9}: F1 {cells[0]}  P {cells[1]}  R {cells[2]}")
        return rows


def _aggregate(folds: list[FoldRecord]) -> dict:
    agg = {}
    for avg in ("weighted", "macro"):
        for metric in ("f1", "precision", "recall"):
            vals = np.array([f.test[avg][metric] for f in folds])
            agg[f"{avg}_{metric}"] = {"mean": float(vals.mean()),
                                      "std": float(vals.std())}
    return agg


def _fold_count() -> int:
    raw = os.environ.get("HMG_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def cross_validate(graph: HeteroGraph, config: TrainConfig, fold_seeds=None,
                   model_sink=None) -> TrainReport:
    """``folds`` independent seeded runs, each with a fresh split.

    ``fold_seeds`` overrides the default seed+k sequence (useful for forcing
    degenerate identical folds in tests); ``model_sink(fold, model)`` receives
    each trained model as its fold finishes.
    """
    config.validate()
    if config.folds < 2:
        raise ConfigError("cross-validation needs folds >= 2")
    if fold_seeds is None:
        fold_seeds = [config.seed + k for k in range(config.folds)]
    start = time.perf_counter()

    def run(k: int) -> FoldRecord:
        s = fold_seeds[k]
        split = split_edges(graph, config.split, seed=s)
        model, record = train(graph, split, config, run_seed=s, fold=k)
        if model_sink is not None:
            model_sink(k, model)
        return record

    workers = min(_fold_count(), config.folds)
    if workers == 1:
        records = [run(k) for k in range(config.folds)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run, range(config.folds)))
    return TrainReport(schema=REPORT_SCHEMA, config=config.to_dict(),
                       seed=config.seed, folds=[r.to_dict() for r in records],
                       aggregate=_aggregate(records),
                       wall_clock_sec=time.perf_counter() - start)


# ---------------------------------------------------------------------------
# Model serialization: HMGE-style binary with a named-tensor manifest.
# ---------------------------------------------------------------------------

def save_model(model: Model, path) -> None:
    names = [("param", n) for n in model.store.params]
    names += [("buffer", n) for n in model.store.buffers]
    manifest = {
        "format": MODEL_FORMAT,
        "config": model.config.to_dict(),
        "fill_seed": model.fill_seed,
        "tensors": [{"kind": kind, "name": n,
                     "shape": list(_model_array(model, kind, n).shape)}
                    for kind, n in names],
    }
    blob = json.dumps(manifest).encode()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(np.array([1, len(blob)], dtype="<u4").tobytes())
        fh.write(blob)
        for kind, n in names:
            fh.write(np.ascontiguousarray(_model_array(model, kind, n),
                                          dtype="<f8").tobytes())


def _model_array(model: Model, kind: str, name: str) -> np.ndarray:
    return model.store.params[name].data if kind == "param" else model.store.buffers[name]


def load_model(path) -> Model:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MODEL_MAGIC:
        raise BundleFormatError(f"{path}: bad magic, not a model file")
    version, blob_len = np.frombuffer(raw[4:12], dtype="<u4")
    if version != 1:
        raise BundleFormatError(f"{path}: unsupported model version {version}")
    manifest = json.loads(raw[12:12 + int(blob_len)].decode())
    if manifest.get("format") != MODEL_FORMAT:
        raise BundleFormatError(f"{path}: unsupported format {manifest.get('format')!r}")
    config = TrainConfig.from_dict(manifest["config"])
    model = build_model(config, np.random.default_rng(0))
    model.fill_seed = int(manifest["fill_seed"])
    offset = 12 + int(blob_len)
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n
        if end > len(raw):
            raise BundleFormatError(f"{path}: truncated tensor payload")
        arr = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
        if entry["kind"] == "param":
            if entry["name"] not in model.store.params:
                raise BundleFormatError(f"{path}: unexpected tensor {entry['name']!r}")
            if model.store.params[entry["name"]].data.shape != shape:
                raise BundleFormatError(f"{path}: shape mismatch for {entry['name']!r}")
            model.store.params[entry["name"]].data = arr
        else:
            if entry["name"] not in model.store.buffers:
                raise BundleFormatError(f"{path}: unexpected buffer {entry['name']!r}")
            model.store.buffers[entry["name"]][...] = arr
    if offset != len(raw):
        raise BundleFormatError(f"{path}: trailing bytes after tensor payload")
    return model
