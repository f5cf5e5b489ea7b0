"""Affine backbone + identity-classifier head on flat parameter vectors.

The model is deliberately tiny: an affine map into feature space followed by
an affine softmax classifier over local identities.  Parameters live in flat
float64 vectors so that federation code can ship, average and checkpoint
them without caring about layer structure.  The backbone part is what
clients share; the head stays local.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from . import kernels


@dataclass(frozen=True)
class ModelSpec:
    """Dimensions of one client model."""

    input_dim: int
    feature_dim: int
    num_ids: int

    def __post_init__(self):
        for name in ("input_dim", "feature_dim", "num_ids"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{name} must be a positive int, got {value!r}")

    @property
    def backbone_size(self) -> int:
        return self.input_dim * self.feature_dim + self.feature_dim

    @property
    def head_size(self) -> int:
        return self.feature_dim * self.num_ids + self.num_ids

    @property
    def backbone_bytes(self) -> int:
        """Size of one serialized backbone (float64)."""
        return self.backbone_size * 8

    @property
    def model_bytes(self) -> int:
        return (self.backbone_size + self.head_size) * 8


@dataclass(frozen=True)
class OptimizerConfig:
    """SGD settings; the step schedule decays both learning rates."""

    lr_head: float = 0.05
    lr_backbone: float = 0.005
    step_size: int = 40
    gamma: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9

    def __post_init__(self):
        if self.lr_head <= 0 or self.lr_backbone <= 0:
            raise ValueError("learning rates must be positive")
        if self.step_size < 1:
            raise ValueError("step_size must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.weight_decay < 0 or self.momentum < 0:
            raise ValueError("weight_decay and momentum must be >= 0")


@dataclass
class ModelParams:
    """Flat float64 parameter vectors for one model."""

    backbone: np.ndarray
    head: np.ndarray

    def copy(self) -> "ModelParams":
        return ModelParams(self.backbone.copy(), self.head.copy())


@dataclass
class MomentumState:
    """SGD momentum buffers, same layout as the parameters."""

    backbone: np.ndarray
    head: np.ndarray

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "MomentumState":
        return cls(np.zeros(spec.backbone_size), np.zeros(spec.head_size))

    def copy(self) -> "MomentumState":
        return MomentumState(self.backbone.copy(), self.head.copy())


def backbone_views(spec: ModelSpec, backbone: np.ndarray):
    """Weight matrix and bias views into a flat backbone vector (no copy)."""
    if backbone.shape != (spec.backbone_size,):
        raise ValueError(
            f"backbone length {backbone.shape} does not match spec "
            f"({spec.backbone_size},)"
        )
    split = spec.input_dim * spec.feature_dim
    return (
        backbone[:split].reshape(spec.input_dim, spec.feature_dim),
        backbone[split:],
    )


def head_views(spec: ModelSpec, head: np.ndarray):
    if head.shape != (spec.head_size,):
        raise ValueError(
            f"head length {head.shape} does not match spec ({spec.head_size},)"
        )
    split = spec.feature_dim * spec.num_ids
    return head[:split].reshape(spec.feature_dim, spec.num_ids), head[split:]


def init_backbone(input_dim: int, feature_dim: int, seed) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in)) backbone weights, zero bias."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(input_dim)
    flat = np.zeros(input_dim * feature_dim + feature_dim)
    flat[: input_dim * feature_dim] = rng.uniform(
        -bound, bound, input_dim * feature_dim
    )
    return flat


def init_head(spec: ModelSpec, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(spec.feature_dim)
    flat = np.zeros(spec.head_size)
    flat[: spec.feature_dim * spec.num_ids] = rng.uniform(
        -bound, bound, spec.feature_dim * spec.num_ids
    )
    return flat


def init_model(spec: ModelSpec, seed) -> ModelParams:
    """Fresh parameters; the backbone draw matches init_backbone(seed) bitwise."""
    rng = np.random.default_rng(seed)
    bound_b = 1.0 / math.sqrt(spec.input_dim)
    bound_h = 1.0 / math.sqrt(spec.feature_dim)
    backbone = np.zeros(spec.backbone_size)
    head = np.zeros(spec.head_size)
    backbone[: spec.input_dim * spec.feature_dim] = rng.uniform(
        -bound_b, bound_b, spec.input_dim * spec.feature_dim
    )
    head[: spec.feature_dim * spec.num_ids] = rng.uniform(
        -bound_h, bound_h, spec.feature_dim * spec.num_ids
    )
    return ModelParams(backbone, head)


def _check_inputs(spec: ModelSpec, inputs: np.ndarray):
    if inputs.ndim != 2 or inputs.shape[1] != spec.input_dim:
        raise ValueError(
            f"inputs must have shape (n, {spec.input_dim}), got {inputs.shape}"
        )


def forward(spec: ModelSpec, params: ModelParams, inputs: np.ndarray):
    """Return (features, logits) for a batch of row vectors."""
    _check_inputs(spec, inputs)
    w_b, b_b = backbone_views(spec, params.backbone)
    w_h, b_h = head_views(spec, params.head)
    features = inputs @ w_b + b_b
    logits = features @ w_h + b_h
    return features, logits


def extract_features(backbone: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Backbone-only forward pass; feature width is inferred from the vector."""
    if inputs.ndim != 2:
        raise ValueError(f"inputs must be 2-d, got shape {inputs.shape}")
    d = inputs.shape[1]
    if backbone.ndim != 1 or backbone.size % (d + 1) != 0:
        raise ValueError(
            f"backbone of length {backbone.size} does not factor over "
            f"input_dim={d}"
        )
    f = backbone.size // (d + 1)
    return inputs @ backbone[: d * f].reshape(d, f) + backbone[d * f :]


def loss_and_grad(spec: ModelSpec, params: ModelParams, inputs: np.ndarray,
                  labels: np.ndarray):
    """Mean softmax cross-entropy over the batch and its parameter gradient.

    Returns (loss, ModelParams-of-gradients).  Weight decay is not part of
    the loss; the optimizer adds it to the gradient (coupled decay).
    """
    _check_inputs(spec, inputs)
    labels = np.asarray(labels)
    if labels.shape != (inputs.shape[0],):
        raise ValueError("labels must be 1-d and match the batch size")
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_ids):
        raise ValueError(f"labels must lie in [0, {spec.num_ids})")
    if inputs.shape[0] == 0:
        raise ValueError("batch must be non-empty")

    w_b, b_b = backbone_views(spec, params.backbone)
    w_h, b_h = head_views(spec, params.head)
    m = inputs.shape[0]
    rows = np.arange(m)
    feats = inputs @ w_b + b_b
    logits = feats @ w_h + b_h
    zmax = logits.max(axis=1)
    ez = np.exp(logits - zmax[:, None])
    denom = ez.sum(axis=1)
    loss = float(np.mean(np.log(denom) + zmax - logits[rows, labels]))
    dz = ez / denom[:, None]
    dz[rows, labels] -= 1.0
    dz /= m
    g_wh = feats.T @ dz
    g_bh = dz.sum(axis=0)
    dfeat = dz @ w_h.T
    g_wb = inputs.T @ dfeat
    g_bb = dfeat.sum(axis=0)
    grad = ModelParams(
        np.concatenate([g_wb.ravel(), g_bb]),
        np.concatenate([g_wh.ravel(), g_bh]),
    )
    return loss, grad


def effective_lr(base_lr: float, opt: OptimizerConfig, round_index: int) -> float:
    """Step decay: base * gamma ** floor(round / step_size)."""
    if round_index < 0:
        raise ValueError("round_index must be >= 0")
    return base_lr * opt.gamma ** (round_index // opt.step_size)


def sgd_step(spec: ModelSpec, params: ModelParams, grad: ModelParams,
             momentum: MomentumState, opt: OptimizerConfig,
             round_index: int):
    """One momentum-SGD update; returns fresh (params, momentum).

    u <- momentum * u + (grad + weight_decay * p); p <- p - lr * u, with the
    round's scheduled learning rate per parameter group.
    """
    lr_b = effective_lr(opt.lr_backbone, opt, round_index)
    lr_h = effective_lr(opt.lr_head, opt, round_index)
    u_b = opt.momentum * momentum.backbone + (
        grad.backbone + opt.weight_decay * params.backbone
    )
    u_h = opt.momentum * momentum.head + (grad.head + opt.weight_decay * params.head)
    new = ModelParams(params.backbone - lr_b * u_b, params.head - lr_h * u_h)
    return new, MomentumState(u_b, u_h)


def epoch_order(n: int, seed: int, round_index: int, epoch: int) -> np.ndarray:
    """Deterministic sample order for one local epoch."""
    return np.random.default_rng([seed, round_index, epoch]).permutation(n)


def local_train(spec: ModelSpec, params: ModelParams, inputs: np.ndarray,
                labels: np.ndarray, *, epochs: int, batch_size: int,
                opt: OptimizerConfig, round_index: int, seed: int,
                momentum: MomentumState | None = None):
    """Minibatch SGD for a fixed number of epochs.

    Pure in its arguments: returns (params, per-batch losses, momentum)
    without touching the inputs.  Epoch shuffles come from epoch_order, so
    the whole call is determined by (seed, round_index).  The last batch of
    an epoch may be short.
    """
    _check_inputs(spec, inputs)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if labels.shape != (inputs.shape[0],):
        raise ValueError("labels must be 1-d and match inputs")
    if inputs.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_ids):
        raise ValueError(f"labels must lie in [0, {spec.num_ids})")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")

    out = params.copy()
    state = MomentumState.zeros(spec) if momentum is None else momentum.copy()
    n = inputs.shape[0]
    n_batches = -(-n // batch_size)
    losses = np.zeros(epochs * n_batches)
    if epochs == 0:
        return out, losses, state

    inputs = np.ascontiguousarray(inputs)
    w_b, b_b = backbone_views(spec, out.backbone)
    w_h, b_h = head_views(spec, out.head)
    m_wb, m_bb = backbone_views(spec, state.backbone)
    m_wh, m_bh = head_views(spec, state.head)
    lr_b = effective_lr(opt.lr_backbone, opt, round_index)
    lr_h = effective_lr(opt.lr_head, opt, round_index)
    for epoch in range(epochs):
        order = epoch_order(n, seed, round_index, epoch)
        kernels.sgd_epoch(
            w_b, b_b, w_h, b_h, m_wb, m_bb, m_wh, m_bh,
            inputs, labels, order, batch_size,
            lr_b, lr_h, opt.momentum, opt.weight_decay,
            losses[epoch * n_batches:(epoch + 1) * n_batches],
        )
    return out, losses, state
