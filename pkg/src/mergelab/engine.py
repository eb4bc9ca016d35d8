"""Minimal feed-forward network engine with exact hand-derived gradients.

Everything runs in 64-bit floats. The model is a chain of affine encoder
layers with tanh activations, followed by one affine head per task (no
activation on the head). All functions here are pure: parameters go in,
new values come out, nothing is mutated in place.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Array dimensions do not line up."""


class UnknownTaskError(KeyError):
    """Requested task id has no head in the parameter set."""


def _as_f64(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64))


@dataclass(frozen=True)
class LayerParams:
    """One affine layer: weight (out_dim, in_dim) and bias (out_dim,)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weight", _as_f64(self.weight))
        object.__setattr__(self, "bias", _as_f64(self.bias))
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError(
                f"layer expects 2-D weight and 1-D bias, got {self.weight.shape} / {self.bias.shape}"
            )
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ShapeError(
                f"weight rows {self.weight.shape[0]} != bias length {self.bias.shape[0]}"
            )
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise ValueError("layer parameters must be finite")

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class ParamSet:
    """Full weight collection: shared encoder layers plus one head per task."""

    encoder: tuple
    heads: dict

    def __post_init__(self):
        object.__setattr__(self, "encoder", tuple(self.encoder))
        object.__setattr__(self, "heads", dict(self.heads))
        if not self.encoder:
            raise ShapeError("encoder must have at least one layer")
        for a, b in zip(self.encoder, self.encoder[1:]):
            if b.in_dim != a.out_dim:
                raise ShapeError(
                    f"encoder layers incompatible: {a.out_dim} -> expected in_dim, got {b.in_dim}"
                )
        feat = self.encoder[-1].out_dim
        for task, head in self.heads.items():
            if head.in_dim != feat:
                raise ShapeError(
                    f"head '{task}' in_dim {head.in_dim} != encoder output {feat}"
                )

    @property
    def input_dim(self) -> int:
        return self.encoder[0].in_dim

    @property
    def feature_dim(self) -> int:
        return self.encoder[-1].out_dim

    def head(self, task: str) -> LayerParams:
        try:
            return self.heads[task]
        except KeyError:
            raise UnknownTaskError(f"no head for task '{task}'") from None


# Gradients share the ParamSet shape tree; entries for heads not touched by
# a backward pass are zero.
Gradients = ParamSet


LOSS_KINDS = (
    "cross_entropy_hard",
    "cross_entropy_soft",
    "entropy",
    "kl",
    "js",
    "l1",
    "l2",
    "smooth_l1",
    "cosine",
)

_DIST_KINDS = frozenset({"cross_entropy_soft", "kl", "js"})

SMOOTH_L1_DELTA = 1.0


@dataclass(frozen=True)
class LossSpec:
    """Loss selector; reduction is always the mean over the batch."""

    kind: str

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind '{self.kind}'; expected one of {LOSS_KINDS}")

    @property
    def target_arity(self) -> str:
        if self.kind == "entropy":
            return "none"
        if self.kind == "cross_entropy_hard":
            return "labels"
        if self.kind in _DIST_KINDS:
            return "distribution"
        return "vector"


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _xlogx(p: np.ndarray) -> np.ndarray:
    # 0 * log 0 := 0
    return np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)


def _check_outputs(outputs: np.ndarray) -> np.ndarray:
    outputs = _as_f64(outputs)
    if outputs.ndim != 2:
        raise ShapeError(f"outputs must be 2-D (batch, dim), got shape {outputs.shape}")
    if not np.isfinite(outputs).all():
        raise ValueError("outputs contain non-finite values")
    return outputs


def _check_targets(outputs: np.ndarray, targets, spec: LossSpec):
    arity = spec.target_arity
    if arity == "none":
        if targets is not None:
            raise ValueError(f"loss '{spec.kind}' takes no targets")
        return None
    if targets is None:
        raise ValueError(f"loss '{spec.kind}' requires targets")
    if arity == "labels":
        t = np.asarray(targets)
        if t.ndim != 1 or t.shape[0] != outputs.shape[0]:
            raise ShapeError(f"labels must be 1-D of length {outputs.shape[0]}")
        if not np.issubdtype(t.dtype, np.integer):
            raise ValueError("class labels must be integers")
        t = t.astype(np.int64)
        if t.min() < 0 or t.max() >= outputs.shape[1]:
            raise ValueError("class label out of range")
        return t
    t = _as_f64(targets)
    if t.shape != outputs.shape:
        raise ShapeError(f"targets shape {t.shape} != outputs shape {outputs.shape}")
    if not np.isfinite(t).all():
        raise ValueError("targets contain non-finite values")
    if arity == "distribution":
        if (t < 0.0).any() or not np.allclose(t.sum(axis=1), 1.0, atol=1e-8):
            raise ValueError("distribution targets must be nonnegative and sum to 1")
    return t


def loss_eval(outputs: np.ndarray, targets, spec: LossSpec) -> float:
    """Mean-over-batch scalar loss of `outputs` against `targets`."""
    z = _check_outputs(outputs)
    t = _check_targets(z, targets, spec)
    n = z.shape[0]
    kind = spec.kind

    if kind == "cross_entropy_hard":
        ls = log_softmax(z)
        return float(-ls[np.arange(n), t].mean())
    if kind == "cross_entropy_soft":
        ls = log_softmax(z)
        return float(-(t * ls).sum(axis=1).mean())
    if kind == "entropy":
        q = softmax(z)
        ls = log_softmax(z)
        return float(-(q * ls).sum(axis=1).mean())
    if kind == "kl":
        ls = log_softmax(z)
        return float((_xlogx(t) - t * ls).sum(axis=1).mean())
    if kind == "js":
        q = softmax(z)
        m = 0.5 * (t + q)
        logm = np.log(np.where(m > 0.0, m, 1.0))
        kl_pm = (_xlogx(t) - t * logm).sum(axis=1)
        kl_qm = (_xlogx(q) - q * logm).sum(axis=1)
        return float((0.5 * kl_pm + 0.5 * kl_qm).mean())

    d = z - t
    if kind == "l1":
        return float(np.abs(d).sum(axis=1).mean())
    if kind == "l2":
        return float((d * d).sum(axis=1).mean())
    if kind == "smooth_l1":
        a = np.abs(d)
        per = np.where(a <= SMOOTH_L1_DELTA, 0.5 * d * d, SMOOTH_L1_DELTA * (a - 0.5 * SMOOTH_L1_DELTA))
        return float(per.sum(axis=1).mean())
    # cosine: 1 - cos similarity, averaged; in [0, 2]
    un = np.linalg.norm(z, axis=1)
    vn = np.linalg.norm(t, axis=1)
    if (un == 0.0).any() or (vn == 0.0).any():
        raise ValueError("cosine loss undefined for zero-norm vectors")
    cos = (z * t).sum(axis=1) / (un * vn)
    return float((1.0 - cos).mean())


def loss_output_grad(outputs: np.ndarray, targets, spec: LossSpec) -> np.ndarray:
    """Gradient of `loss_eval` with respect to `outputs` (includes the 1/batch factor)."""
    z = _check_outputs(outputs)
    t = _check_targets(z, targets, spec)
    n = z.shape[0]
    kind = spec.kind

    if kind == "cross_entropy_hard":
        q = softmax(z)
        q[np.arange(n), t] -= 1.0
        return q / n
    if kind in ("cross_entropy_soft", "kl"):
        # both reduce to (softmax - target) / n for normalized targets
        return (softmax(z) - t) / n
    if kind == "entropy":
        q = softmax(z)
        ls = log_softmax(z)
        h = -(q * ls).sum(axis=1, keepdims=True)
        return -(q * (ls + h)) / n
    if kind == "js":
        q = softmax(z)
        m = 0.5 * (t + q)
        g = np.where(q > 0.0, 0.5 * (np.log(np.where(q > 0.0, q, 1.0)) - np.log(np.where(m > 0.0, m, 1.0))), 0.0)
        inner = (g * q).sum(axis=1, keepdims=True)
        return (q * (g - inner)) / n

    d = z - t
    if kind == "l1":
        return np.sign(d) / n
    if kind == "l2":
        return 2.0 * d / n
    if kind == "smooth_l1":
        return np.clip(d, -SMOOTH_L1_DELTA, SMOOTH_L1_DELTA) / n
    un = np.linalg.norm(z, axis=1, keepdims=True)
    vn = np.linalg.norm(t, axis=1, keepdims=True)
    if (un == 0.0).any() or (vn == 0.0).any():
        raise ValueError("cosine loss undefined for zero-norm vectors")
    cos = (z * t).sum(axis=1, keepdims=True) / (un * vn)
    return -(t / (un * vn) - cos * z / (un * un)) / n


def encode(encoder: Sequence[LayerParams], inputs: np.ndarray) -> np.ndarray:
    """Push a batch through the encoder chain (tanh after every layer)."""
    h = _as_f64(inputs)
    if h.ndim != 2:
        raise ShapeError(f"inputs must be 2-D (batch, dim), got {h.shape}")
    if h.shape[1] != encoder[0].in_dim:
        raise ShapeError(f"input dim {h.shape[1]} != first layer in_dim {encoder[0].in_dim}")
    for layer in encoder:
        h = np.tanh(h @ layer.weight.T + layer.bias)
    return h


def forward(params: ParamSet, task: str, inputs: np.ndarray) -> np.ndarray:
    """Logits of `task`'s head over encoder features."""
    head = params.head(task)
    h = encode(params.encoder, inputs)
    return h @ head.weight.T + head.bias


def _forward_cached(params: ParamSet, task: str, inputs: np.ndarray):
    head = params.head(task)
    h = _as_f64(inputs)
    if h.ndim != 2:
        raise ShapeError(f"inputs must be 2-D (batch, dim), got {h.shape}")
    if h.shape[1] != params.input_dim:
        raise ShapeError(f"input dim {h.shape[1]} != encoder in_dim {params.input_dim}")
    acts = [h]
    for layer in params.encoder:
        h = np.tanh(h @ layer.weight.T + layer.bias)
        acts.append(h)
    logits = h @ head.weight.T + head.bias
    return logits, acts


def zeros_like_layer(layer: LayerParams) -> LayerParams:
    return LayerParams(np.zeros_like(layer.weight), np.zeros_like(layer.bias))


def zeros_like_params(params: ParamSet) -> Gradients:
    return ParamSet(
        encoder=tuple(zeros_like_layer(l) for l in params.encoder),
        heads={t: zeros_like_layer(h) for t, h in params.heads.items()},
    )


def backward(params: ParamSet, task: str, inputs: np.ndarray, targets, spec: LossSpec):
    """Loss and its exact gradient with respect to every parameter.

    Heads other than `task` receive zero gradients (they do not enter the
    forward pass).
    """
    logits, acts = _forward_cached(params, task, inputs)
    loss = loss_eval(logits, targets, spec)
    g = loss_output_grad(logits, targets, spec)

    head = params.head(task)
    feats = acts[-1]
    head_grad = LayerParams(g.T @ feats, g.sum(axis=0))
    gh = g @ head.weight

    enc_grads = [None] * len(params.encoder)
    for i in range(len(params.encoder) - 1, -1, -1):
        post = acts[i + 1]
        da = gh * (1.0 - post * post)  # d tanh
        enc_grads[i] = LayerParams(da.T @ acts[i], da.sum(axis=0))
        gh = da @ params.encoder[i].weight

    heads = {t: zeros_like_layer(h) for t, h in params.heads.items()}
    heads[task] = head_grad
    return loss, ParamSet(encoder=tuple(enc_grads), heads=heads)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Moment estimates for one list of parameter arrays."""

    first_moment: list
    second_moment: list
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(arrays: Sequence[np.ndarray], beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(
        first_moment=[np.zeros_like(a) for a in arrays],
        second_moment=[np.zeros_like(a) for a in arrays],
        step_count=0,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(values: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState, lr: float):
    """One bias-corrected Adam update; returns (new values, new state)."""
    if lr <= 0.0:
        raise ValueError("learning rate must be positive")
    if len(values) != len(grads) or len(values) != len(state.first_moment):
        raise ShapeError("values / grads / state length mismatch")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_vals, new_m, new_v = [], [], []
    for x, g, m, v in zip(values, grads, state.first_moment, state.second_moment):
        if x.shape != g.shape:
            raise ShapeError(f"grad shape {g.shape} != value shape {x.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_vals.append(x - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_vals, AdamState(new_m, new_v, t, b1, b2, state.eps)


# ---------------------------------------------------------------------------
# Flattening between ParamSet trees and array lists (for the optimizer)


def params_to_arrays(params: ParamSet) -> list:
    out = []
    for layer in params.encoder:
        out.extend([layer.weight, layer.bias])
    for task in sorted(params.heads):
        head = params.heads[task]
        out.extend([head.weight, head.bias])
    return out


def arrays_to_params(template: ParamSet, arrays: Sequence[np.ndarray]) -> ParamSet:
    it = iter(arrays)
    enc = tuple(LayerParams(next(it), next(it)) for _ in template.encoder)
    heads = {task: LayerParams(next(it), next(it)) for task in sorted(template.heads)}
    return ParamSet(encoder=enc, heads=heads)


def init_params(encoder_dims: Sequence[int], head_dims: Mapping[str, int],
                rng: np.random.Generator) -> ParamSet:
    """Random Gaussian init scaled by 1/sqrt(in_dim); heads drawn after encoder,
    in sorted task order, so layouts with the same dims are reproducible."""
    enc = []
    for d_in, d_out in zip(encoder_dims, encoder_dims[1:]):
        enc.append(LayerParams(rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_out, d_in)),
                               np.zeros(d_out)))
    feat = encoder_dims[-1]
    heads = {}
    for task in sorted(head_dims):
        d_out = head_dims[task]
        heads[task] = LayerParams(rng.normal(0.0, 1.0 / np.sqrt(feat), (d_out, feat)),
                                  np.zeros(d_out))
    return ParamSet(encoder=tuple(enc), heads=heads)
