"""Task-vector extraction and merge operators over encoder parameters.

Merging only ever touches encoder layers; per-task heads are carried along
unchanged. A coefficient matrix holds one scalar per (task, encoder layer),
and that scalar weights the whole layer delta, bias included.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .engine import LayerParams, ParamSet, ShapeError, UnknownTaskError


@dataclass(frozen=True)
class TaskVector:
    """Per-layer deltas between a fine-tuned expert encoder and the pre-trained one."""

    deltas: tuple

    def __post_init__(self):
        object.__setattr__(self, "deltas", tuple(self.deltas))

    def __len__(self) -> int:
        return len(self.deltas)


@dataclass(frozen=True)
class CoefficientMatrix:
    """Merge weights, one real per (task, encoder layer); unconstrained sign/magnitude."""

    task_ids: tuple
    values: np.ndarray  # (K, L-1)

    def __post_init__(self):
        object.__setattr__(self, "task_ids", tuple(str(t) for t in self.task_ids))
        vals = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if vals.ndim != 2 or vals.shape[0] != len(self.task_ids):
            raise ShapeError(
                f"coefficient matrix must be (K={len(self.task_ids)}, L-1), got {vals.shape}"
            )
        if not np.isfinite(vals).all():
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, task_ids: Sequence[str], num_layers: int, value: float) -> "CoefficientMatrix":
        return cls(tuple(task_ids), np.full((len(task_ids), num_layers), float(value)))

    @property
    def num_tasks(self) -> int:
        return len(self.task_ids)

    @property
    def num_layers(self) -> int:
        return self.values.shape[1]

    def row(self, task: str) -> np.ndarray:
        try:
            i = self.task_ids.index(task)
        except ValueError:
            raise UnknownTaskError(f"no coefficient row for task '{task}'") from None
        return self.values[i]


def _check_same_shape(a: LayerParams, b: LayerParams, what: str):
    if a.weight.shape != b.weight.shape or a.bias.shape != b.bias.shape:
        raise ShapeError(f"{what}: layer shapes differ ({a.weight.shape} vs {b.weight.shape})")


def _encoder_of(p) -> tuple:
    return tuple(p.encoder) if isinstance(p, ParamSet) else tuple(p)


def compute_task_vector(expert: ParamSet, pre: ParamSet) -> TaskVector:
    """delta[l] = expert.encoder[l] - pre.encoder[l]."""
    e, p = _encoder_of(expert), _encoder_of(pre)
    if len(e) != len(p):
        raise ShapeError(f"encoder depth differs: {len(e)} vs {len(p)}")
    deltas = []
    for le, lp in zip(e, p):
        _check_same_shape(le, lp, "compute_task_vector")
        deltas.append(LayerParams(le.weight - lp.weight, le.bias - lp.bias))
    return TaskVector(tuple(deltas))


def merge_uniform(experts: Sequence[ParamSet]) -> tuple:
    """Elementwise mean of the experts' encoders."""
    if not experts:
        raise ValueError("merge_uniform needs at least one expert")
    encoders = [_encoder_of(e) for e in experts]
    depth = len(encoders[0])
    if any(len(enc) != depth for enc in encoders):
        raise ShapeError("experts have different encoder depths")
    merged = []
    for layer_idx in range(depth):
        layers = [enc[layer_idx] for enc in encoders]
        for l in layers[1:]:
            _check_same_shape(layers[0], l, "merge_uniform")
        w = np.mean([l.weight for l in layers], axis=0)
        b = np.mean([l.bias for l in layers], axis=0)
        merged.append(LayerParams(w, b))
    return tuple(merged)


def merge_task_arithmetic(pre, vectors: Sequence[TaskVector], lam: float) -> tuple:
    """theta[l] = pre[l] + lam * sum_k delta_k[l]."""
    pre_enc = _encoder_of(pre)
    merged = []
    for l, base in enumerate(pre_enc):
        w = base.weight.copy()
        b = base.bias.copy()
        for vec in vectors:
            if len(vec) != len(pre_enc):
                raise ShapeError("task vector depth != encoder depth")
            _check_same_shape(base, vec.deltas[l], "merge_task_arithmetic")
            w += lam * vec.deltas[l].weight
            b += lam * vec.deltas[l].bias
        merged.append(LayerParams(w, b))
    return tuple(merged)


def merge_layerwise(pre, vectors: Sequence[TaskVector], coeffs: CoefficientMatrix) -> tuple:
    """theta[l] = pre[l] + sum_k coeff[k, l] * delta_k[l]."""
    pre_enc = _encoder_of(pre)
    if coeffs.num_tasks != len(vectors):
        raise ShapeError(f"coeff rows {coeffs.num_tasks} != task vectors {len(vectors)}")
    if coeffs.num_layers != len(pre_enc):
        raise ShapeError(f"coeff columns {coeffs.num_layers} != encoder depth {len(pre_enc)}")
    merged = []
    for l, base in enumerate(pre_enc):
        w = base.weight.copy()
        b = base.bias.copy()
        for k, vec in enumerate(vectors):
            _check_same_shape(base, vec.deltas[l], "merge_layerwise")
            lam = coeffs.values[k, l]
            w += lam * vec.deltas[l].weight
            b += lam * vec.deltas[l].bias
        merged.append(LayerParams(w, b))
    return tuple(merged)


def coefficient_grad(encoder_grads: Sequence[LayerParams],
                     vectors: Sequence[TaskVector]) -> np.ndarray:
    """Chain rule through merge_layerwise: grad[k, l] = <dL/dtheta[l], delta_k[l]>.

    The inner product runs over the whole layer, weights and bias together,
    because one coefficient scales both.
    """
    depth = len(encoder_grads)
    out = np.zeros((len(vectors), depth))
    for k, vec in enumerate(vectors):
        if len(vec) != depth:
            raise ShapeError("task vector depth != gradient depth")
        for l in range(depth):
            g, d = encoder_grads[l], vec.deltas[l]
            _check_same_shape(g, d, "coefficient_grad")
            out[k, l] = float((g.weight * d.weight).sum() + (g.bias * d.bias).sum())
    return out


@dataclass
class TrainableLayer:
    """A per-task replacement layer: the head, one encoder layer, or several.

    selector is "head", an encoder layer index, or a tuple of indices; params
    matches (a single LayerParams, or a tuple of them for the multi case).
    """

    selector: object
    params: object

    def layer_indices(self) -> tuple:
        if self.selector == "head":
            return ()
        if isinstance(self.selector, int):
            return (self.selector,)
        return tuple(self.selector)


@dataclass
class MergedAssembly:
    """Pre-trained encoder + task vectors + coefficients + per-task layers.

    Materializes the multi-task parameters on demand: the shared encoder is
    the layer-wise merge, except that a task's trainable encoder layer (when
    selected) replaces the merged layer for that task's own forward pass.
    The head is the task's trainable head if selected, otherwise the frozen
    expert head.
    """

    pre_encoder: tuple
    vectors: tuple
    coeffs: CoefficientMatrix
    heads: dict  # task -> frozen expert LayerParams
    trainable: dict  # task -> TrainableLayer

    def __post_init__(self):
        if self.coeffs.num_tasks != len(self.vectors):
            raise ShapeError("coefficient rows != number of task vectors")
        if self.coeffs.num_layers != len(self.pre_encoder):
            raise ShapeError("coefficient columns != encoder depth")

    def merged_encoder(self) -> tuple:
        return merge_layerwise(self.pre_encoder, self.vectors, self.coeffs)

    def materialize(self, task: str) -> ParamSet:
        encoder = list(self.merged_encoder())
        head = self.heads.get(task)
        tr = self.trainable.get(task)
        if tr is not None:
            if tr.selector == "head":
                head = tr.params
            else:
                layers = (tr.params,) if isinstance(tr.selector, int) else tuple(tr.params)
                for idx, layer in zip(tr.layer_indices(), layers):
                    encoder[idx] = layer
        if head is None:
            raise UnknownTaskError(f"no head for task '{task}'")
        return ParamSet(encoder=tuple(encoder), heads={task: head})
