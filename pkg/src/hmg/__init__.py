"""Heterogeneous multimodal graph engine.

Builds user/image interaction graphs, runs edge-attributed graph attention
over them with a hand-rolled reverse-mode autodiff core, adaptively fuses
user and image embeddings, and classifies user-views-image edges into eight
evoked-emotion classes.
"""

from hmg.tensor import Tensor, Tape, ParamStore, forward, backward, finite_diff_grad

__all__ = [
    "Tensor",
    "Tape",
    "ParamStore",
    "forward",
    "backward",
    "finite_diff_grad",
]
