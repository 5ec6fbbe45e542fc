"""Adaptive combination of user/image embeddings and the edge classifier head.

The gate weight comes from a single-layer feed-forward score on the two
embeddings: z = w_u * sum(x_u) + w_i * sum(x_i), beta_raw = exp(LeakyReLU(z)).
Because exp alone is unbounded while the combiner needs a complementary pair
(beta, 1 - beta), we normalize beta = beta_raw / (1 + beta_raw), which is a
sigmoid of the rectified score and stays strictly inside (0, 1); the score is
clamped to +-30 first so float64 rounding can never push it onto the
boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hmg import tensor as T
from hmg.graph import DimensionMismatchError
from hmg.tensor import ParamStore, Tensor

COMBINE_MECHANISMS = ("concat", "add", "mul")

BETA_CLAMP = 30.0


@dataclass
class AcParams:
    w_user: Tensor  # learnable scalar
    w_image: Tensor


@dataclass
class ClassifierHead:
    """3 hidden affine+ReLU layers (dropout after the first two) into C logits."""

    weights: list[Tensor]   # 4 affine weight matrices
    biases: list[Tensor]
    combine: str = "concat"
    dropout: float = 0.5

    @property
    def num_classes(self) -> int:
        return self.weights[-1].data.shape[1]

    @property
    def input_dim(self) -> int:
        return self.weights[0].data.shape[0]


def init_ac_params(store: ParamStore, prefix: str = "ac") -> AcParams:
    return AcParams(w_user=store.add(f"{prefix}.w_user", 0.0),
                    w_image=store.add(f"{prefix}.w_image", 0.0))


def init_classifier_head(store: ParamStore, rng: np.random.Generator,
                         embed_dim: int, num_classes: int,
                         hidden=(64, 32, 16), combine: str = "concat",
                         dropout: float = 0.5, prefix: str = "mlp") -> ClassifierHead:
    if combine not in COMBINE_MECHANISMS:
        raise ValueError(f"unknown combine mechanism {combine!r}")
    in_dim = 2 * embed_dim if combine == "concat" else embed_dim
    dims = [in_dim, *hidden, num_classes]
    weights, biases = [], []
    for k in range(len(dims) - 1):
        weights.append(store.add(f"{prefix}.w{k}", T.glorot(rng, dims[k], dims[k + 1],
                                                            (dims[k], dims[k + 1]))))
        biases.append(store.add(f"{prefix}.b{k}", np.zeros(dims[k + 1])))
    return ClassifierHead(weights=weights, biases=biases, combine=combine,
                          dropout=dropout)


def adaptive_beta(x_user, x_image, params: AcParams) -> Tensor:
    """Gate weight in (0, 1); 0.5 when both scalar weights are zero.

    Accepts a single embedding pair ((D,) each -> scalar) or a batch
    ((B, D) -> (B,)).
    """
    xu, xi = T.as_tensor(x_user), T.as_tensor(x_image)
    if xu.data.shape != xi.data.shape:
        raise DimensionMismatchError(
            f"embeddings must share a shape, got {xu.data.shape} vs {xi.data.shape}")
    if xu.data.ndim == 1:
        su, si = T.sum_all(xu), T.sum_all(xi)
    elif xu.data.ndim == 2:
        su, si = T.row_sum(xu), T.row_sum(xi)
    else:
        raise DimensionMismatchError(f"embeddings must be 1-d or 2-d, got {xu.data.shape}")
    z = T.add(T.scale(su, params.w_user), T.scale(si, params.w_image))
    score = T.clip(T.leaky_relu(z, slope=0.2), -BETA_CLAMP, BETA_CLAMP)
    return T.sigmoid(score)


def combine(x_user, x_image, beta, mechanism: str = "concat") -> Tensor:
    """c(beta * x_u, (1 - beta) * x_i) for c in {concat, add, mul}."""
    if mechanism not in COMBINE_MECHANISMS:
        raise ValueError(f"unknown combine mechanism {mechanism!r}")
    xu, xi = T.as_tensor(x_user), T.as_tensor(x_image)
    beta = T.as_tensor(beta)
    if xu.data.ndim == 2 and beta.data.ndim == 1:
        beta = T.reshape(beta, (beta.data.shape[0], 1))
    one_minus = T.add(T.scale(beta, Tensor(-1.0)), Tensor(1.0))
    left = T.mul(xu, beta)
    right = T.mul(xi, one_minus)
    if mechanism == "concat":
        return T.concat([left, right], axis=left.data.ndim - 1)
    if mechanism == "add":
        return T.add(left, right)
    return T.mul(left, right)


def head_logits(head: ClassifierHead, fused: Tensor, mode: str,
                rng: np.random.Generator | None = None) -> Tensor:
    h = fused
    last_hidden = len(head.weights) - 2
    for k in range(len(head.weights) - 1):
        h = T.relu(T.add(T.matmul(h, head.weights[k]), head.biases[k]))
        if k < last_hidden:  # dropout after the first two hidden layers only
            h = T.dropout(h, head.dropout, mode, rng)
    return T.add(T.matmul(h, head.weights[-1]), head.biases[-1])


def classify_edge(x_user, x_image, head: ClassifierHead, ac: AcParams | None,
                  mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
    """Logits for (user, image) embedding pairs.

    With ``ac=None`` (the no-adaptive-combination ablation) the gate is fixed
    at 0.5, which is exactly what the learnable gate produces at w_u = w_i = 0.
    """
    xu, xi = T.as_tensor(x_user), T.as_tensor(x_image)
    single = xu.data.ndim == 1
    if single:
        xu = T.reshape(xu, (1, xu.data.shape[0]))
        xi = T.reshape(xi, (1, xi.data.shape[0]))
    if ac is None:
        beta = Tensor(np.full(xu.data.shape[0], 0.5))
    else:
        beta = adaptive_beta(xu, xi, ac)
    fused = combine(xu, xi, beta, head.combine)
    if fused.data.shape[1] != head.input_dim:
        raise DimensionMismatchError(
            f"classifier expects {head.input_dim}-dim input, got {fused.data.shape[1]}")
    logits = head_logits(head, fused, mode, rng)
    return T.reshape(logits, (head.num_classes,)) if single else logits
