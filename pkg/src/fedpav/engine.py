"""Federated round machine.

One round: the server ships the shared parameters to a cohort of clients,
each client trains locally (keeping its classifier head and momentum between
rounds), and the server recombines the returned backbones under the chosen
weighting.  Optionally the server then refines the aggregate against the
clients' averaged soft labels on a shared unlabeled set.

Under the partial protocol (fedpav) only backbones travel; under fedavg the
full model does, which requires every client to have the same head shape.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
import struct

import numpy as np

from . import model
from .aggregation import (KdConfig, aggregate_arrays, average_soft_labels,
                          cdw_weights, cdw_weights_literal, feature_mse,
                          kd_finetune, size_weights)
from .data import ClientData, SyntheticFederation, build_shared_dataset
from .metrics import CommCost, EvalResult, communication_cost, evaluate
from .model import (ModelParams, ModelSpec, MomentumState, OptimizerConfig,
                    init_backbone, init_head, init_model)

# entropy tags under the run seed; data streams use their own range
_TAG_SELECT = 0
_TAG_CLIENT = 1
_TAG_SHUFFLE = 2
_TAG_KD = 3
_TAG_PROBE = 4
_TAG_GLOBAL = 5

_PROTOCOLS = ("fedpav", "fedavg")
_WEIGHTINGS = ("size", "cdw", "cdw_literal")


@dataclass(frozen=True)
class FederationConfig:
    """Everything a training run needs besides the data."""

    feature_dim: int = 8
    rounds: int = 300
    local_epochs: int = 1
    batch_size: int = 32
    eval_every: int = 10
    clients_per_round: int | None = None  # None selects every client
    protocol: str = "fedpav"
    weighting: str = "size"
    kd: bool = False
    kd_config: KdConfig = KdConfig()
    shared_size: int = 7264
    optimizer: OptimizerConfig = OptimizerConfig()
    eval_metric: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.feature_dim, int) or self.feature_dim < 1:
            raise ValueError("feature_dim must be a positive int")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.clients_per_round is not None and self.clients_per_round < 1:
            raise ValueError("clients_per_round must be >= 1")
        if self.protocol not in _PROTOCOLS:
            raise ValueError(f"protocol must be one of {_PROTOCOLS}")
        if self.weighting not in _WEIGHTINGS:
            raise ValueError(f"weighting must be one of {_WEIGHTINGS}")
        if self.shared_size < 1:
            raise ValueError("shared_size must be >= 1")
        if self.eval_metric not in ("cosine", "euclidean"):
            raise ValueError("eval_metric must be cosine or euclidean")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ValueError("seed must be a non-negative int")


@dataclass
class ClientState:
    """Per-client carryover: head, momentum and the fixed probe batch."""

    client_id: int
    data: ClientData
    spec: ModelSpec
    head: np.ndarray
    momentum: MomentumState
    train_seed: int
    probe_idx: np.ndarray


@dataclass
class ClientUpdate:
    """What one client sends back after a round of local work."""

    client_id: int
    n_samples: int
    backbone: np.ndarray
    head: np.ndarray
    losses: np.ndarray
    distance: float | None = None
    soft_labels: np.ndarray | None = None


@dataclass
class RoundRecord:
    """Aggregation bookkeeping for one round (1-based round counter)."""

    round: int
    selected: list
    sizes: list
    weights: list
    distances: list | None
    client_losses: list
    kd_loss_before: float | None
    kd_loss_after: float | None
    payload_bytes: int


@dataclass
class RunHistory:
    config: FederationConfig
    client_names: list
    records: list
    evals: list
    checkpoints: dict
    comm: CommCost
    final_backbone: np.ndarray


@dataclass
class LocalRunResult:
    """Outcome of a purely local training run (no federation)."""

    eval: EvalResult
    params: ModelParams
    losses: np.ndarray


class RoundFailure(RuntimeError):
    """A client failed mid-round; nothing from that round was aggregated."""

    def __init__(self, round_index: int, client_id: int, reason: str):
        super().__init__(
            f"round {round_index}: client {client_id} failed: {reason}"
        )
        self.round = round_index
        self.client = client_id


def _derive_seed(*entropy) -> int:
    return int(np.random.SeedSequence(list(entropy)).generate_state(
        1, np.uint64)[0])


_CKPT_MAGIC = b"FPAV"
_CKPT_HEADER = "<4sIIIIQ"  # magic, format version, round, dims, length


def save_checkpoint(path, backbone: np.ndarray, round_index: int,
                    input_dim: int, feature_dim: int) -> None:
    """Write a backbone as little-endian float64 behind a fixed header."""
    if backbone.shape != (input_dim * feature_dim + feature_dim,):
        raise ValueError("backbone length does not match the stated dims")
    with open(path, "wb") as fh:
        fh.write(struct.pack(_CKPT_HEADER, _CKPT_MAGIC, 1, round_index,
                             input_dim, feature_dim, backbone.size))
        fh.write(np.ascontiguousarray(backbone, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (backbone, round, input_dim, feature_dim)."""
    with open(path, "rb") as fh:
        raw = fh.read(struct.calcsize(_CKPT_HEADER))
        magic, version, round_index, input_dim, feature_dim, length = (
            struct.unpack(_CKPT_HEADER, raw))
        if magic != _CKPT_MAGIC or version != 1:
            raise ValueError(f"{path}: not a recognized checkpoint")
        if length != input_dim * feature_dim + feature_dim:
            raise ValueError(f"{path}: header length mismatch")
        payload = fh.read(length * 8)
        if len(payload) != length * 8:
            raise ValueError(f"{path}: truncated payload")
    backbone = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return backbone, round_index, input_dim, feature_dim


def select_clients(n_clients: int, cohort: int, rng) -> np.ndarray:
    """Uniform sample without replacement, returned in ascending order."""
    if not 1 <= cohort <= n_clients:
        raise ValueError(f"cohort must be in [1, {n_clients}], got {cohort}")
    return np.sort(rng.choice(n_clients, size=cohort, replace=False))


def make_client_state(data: ClientData, cfg: FederationConfig,
                      input_dim: int) -> ClientState:
    spec = ModelSpec(input_dim, cfg.feature_dim, data.num_ids)
    head = init_head(spec, [cfg.seed, _TAG_CLIENT, data.client_id])
    probe_rng = np.random.default_rng([cfg.seed, _TAG_PROBE, data.client_id])
    n_probe = min(cfg.batch_size, len(data.train))
    probe_idx = probe_rng.permutation(len(data.train))[:n_probe]
    return ClientState(
        client_id=data.client_id,
        data=data,
        spec=spec,
        head=head,
        momentum=MomentumState.zeros(spec),
        train_seed=_derive_seed(cfg.seed, _TAG_SHUFFLE, data.client_id),
        probe_idx=probe_idx,
    )


def _mean_logit_distance(pre: np.ndarray, post: np.ndarray) -> float:
    """Mean cosine distance between paired logit rows, in [0, 2].

    Bitwise-identical rows count as exactly zero (so an untrained round
    reports zero movement instead of rounding noise); zero-norm rows also
    count as zero.
    """
    num = np.sum(pre * post, axis=1)
    den = np.linalg.norm(pre, axis=1) * np.linalg.norm(post, axis=1)
    cos = np.where(den == 0.0, 1.0, num / np.where(den == 0.0, 1.0, den))
    dist = np.maximum(1.0 - cos, 0.0)
    dist[np.all(pre == post, axis=1)] = 0.0
    return float(np.mean(dist))


def client_execute(state: ClientState, backbone: np.ndarray,
                   head: np.ndarray, cfg: FederationConfig,
                   round_index: int, *, want_distance: bool = False,
                   shared: np.ndarray | None = None) -> ClientUpdate:
    """One client's round: receive parameters, train, report back.

    Mutates the state's head and momentum carryover.  round_index is 0-based
    and drives the learning-rate schedule and the epoch shuffles.
    """
    params = ModelParams(backbone.copy(), head.copy())
    probe = state.data.train.x[state.probe_idx]
    pre_logits = None
    if want_distance:
        _, pre_logits = model.forward(state.spec, params, probe)
    new_params, losses, momentum = model.local_train(
        state.spec, params, state.data.train.x, state.data.train_labels,
        epochs=cfg.local_epochs, batch_size=cfg.batch_size,
        opt=cfg.optimizer, round_index=round_index, seed=state.train_seed,
        momentum=state.momentum,
    )
    state.head = new_params.head
    state.momentum = momentum
    distance = None
    if want_distance:
        _, post_logits = model.forward(state.spec, new_params, probe)
        distance = _mean_logit_distance(pre_logits, post_logits)
    soft = None
    if shared is not None:
        soft = model.extract_features(new_params.backbone, shared)
    return ClientUpdate(
        client_id=state.client_id,
        n_samples=len(state.data.train),
        backbone=new_params.backbone,
        head=new_params.head,
        losses=losses,
        distance=distance,
        soft_labels=soft,
    )


def _round_weights(cfg: FederationConfig, sizes, distances):
    """Aggregation weights for one round, with the degenerate fallback.

    Distance weighting needs signal; if every client reports zero movement
    (or, for the literal variant, any client reports zero) the round falls
    back to size weights.
    """
    if cfg.weighting == "size":
        return size_weights(sizes)
    arr = np.asarray(distances, dtype=np.float64)
    if cfg.weighting == "cdw":
        if arr.sum() == 0.0:
            return size_weights(sizes)
        return cdw_weights(arr)
    if (arr <= 0.0).any():
        return size_weights(sizes)
    return cdw_weights_literal(arr)


def run_federation(fed: SyntheticFederation,
                   cfg: FederationConfig) -> RunHistory:
    """Train for cfg.rounds rounds and collect history.

    Evaluation runs whenever the 1-based round count is a multiple of
    eval_every: the aggregated (and possibly refined) backbone is scored on
    each client's protocol, with identical protocols scored once.  Backbone
    checkpoints are kept for the same rounds.  Any client exception aborts
    the run via RoundFailure; nothing from the failed round is aggregated.
    """
    n_clients = len(fed.clients)
    if n_clients == 0:
        raise ValueError("federation has no clients")
    if fed.config.n_clients != n_clients:
        raise ValueError("federation does not match its scenario config")
    cohort = cfg.clients_per_round or n_clients
    if cohort > n_clients:
        raise ValueError(
            f"clients_per_round={cohort} exceeds the {n_clients} clients"
        )
    input_dim = fed.config.input_dim

    if cfg.protocol == "fedavg":
        num_ids = {c.num_ids for c in fed.clients}
        if len(num_ids) != 1:
            raise ValueError(
                "fedavg requires a uniform head: client identity counts "
                f"differ ({sorted(num_ids)})"
            )
        spec = ModelSpec(input_dim, cfg.feature_dim, fed.clients[0].num_ids)
        global_params = init_model(spec, [cfg.seed, _TAG_GLOBAL])
        payload = spec.model_bytes
    else:
        global_params = ModelParams(
            init_backbone(input_dim, cfg.feature_dim, [cfg.seed, _TAG_GLOBAL]),
            np.zeros(0),
        )
        payload = (input_dim * cfg.feature_dim + cfg.feature_dim) * 8

    states = [make_client_state(c, cfg, input_dim) for c in fed.clients]
    shared = build_shared_dataset(fed.config, cfg.shared_size) if cfg.kd else None
    select_rng = np.random.default_rng([cfg.seed, _TAG_SELECT])
    want_distance = cfg.weighting in ("cdw", "cdw_literal")

    records = []
    evals = []
    checkpoints = {}
    for t in range(cfg.rounds):
        selected = select_clients(n_clients, cohort, select_rng)
        updates = []
        for k in selected:
            state = states[k]
            head = state.head if cfg.protocol == "fedpav" else global_params.head
            try:
                updates.append(client_execute(
                    state, global_params.backbone, head, cfg, t,
                    want_distance=want_distance, shared=shared,
                ))
            except Exception as exc:
                raise RoundFailure(t + 1, int(k), str(exc)) from exc

        sizes = [u.n_samples for u in updates]
        distances = [u.distance for u in updates] if want_distance else None
        weights = _round_weights(cfg, sizes, distances)
        backbone = aggregate_arrays([u.backbone for u in updates], weights)
        if cfg.protocol == "fedavg":
            global_params = ModelParams(
                backbone, aggregate_arrays([u.head for u in updates], weights)
            )
        else:
            global_params = ModelParams(backbone, global_params.head)

        kd_before = kd_after = None
        if cfg.kd:
            targets = average_soft_labels([u.soft_labels for u in updates])
            kd_before = feature_mse(global_params.backbone, shared, targets)
            refined = kd_finetune(global_params.backbone, shared, targets,
                                  cfg.kd_config, [cfg.seed, _TAG_KD, t])
            kd_after = feature_mse(refined, shared, targets)
            global_params = ModelParams(refined, global_params.head)

        records.append(RoundRecord(
            round=t + 1,
            selected=[int(k) for k in selected],
            sizes=sizes,
            weights=[float(w) for w in weights],
            distances=None if distances is None else
            [float(d) for d in distances],
            client_losses=[
                float(u.losses.mean()) if u.losses.size else None
                for u in updates
            ],
            kd_loss_before=kd_before,
            kd_loss_after=kd_after,
            payload_bytes=payload,
        ))

        if (t + 1) % cfg.eval_every == 0:
            cache = {}
            for c in fed.clients:
                key = (id(c.query), id(c.gallery))
                if key not in cache:
                    cache[key] = evaluate(
                        global_params.backbone, c.query, c.gallery,
                        metric=cfg.eval_metric, round_index=t + 1,
                        client=c.client_id,
                    )
                evals.append(replace(cache[key], client=c.client_id))
            checkpoints[t + 1] = global_params.backbone.copy()

    return RunHistory(
        config=cfg,
        client_names=[c.name for c in fed.clients],
        records=records,
        evals=evals,
        checkpoints=checkpoints,
        comm=communication_cost(cfg.rounds, payload, cohort),
        final_backbone=global_params.backbone,
    )


def run_local_baseline(data: ClientData, cfg: FederationConfig,
                       input_dim: int) -> LocalRunResult:
    """Train one client alone for the same round/epoch budget.

    Matches a single-client federation bitwise: same initialization streams,
    same per-round schedule and shuffles, and aggregation over one update is
    the identity.
    """
    spec = ModelSpec(input_dim, cfg.feature_dim, data.num_ids)
    params = ModelParams(
        init_backbone(input_dim, cfg.feature_dim, [cfg.seed, _TAG_GLOBAL]),
        init_head(spec, [cfg.seed, _TAG_CLIENT, data.client_id]),
    )
    momentum = MomentumState.zeros(spec)
    train_seed = _derive_seed(cfg.seed, _TAG_SHUFFLE, data.client_id)
    all_losses = []
    for t in range(cfg.rounds):
        params, losses, momentum = model.local_train(
            spec, params, data.train.x, data.train_labels,
            epochs=cfg.local_epochs, batch_size=cfg.batch_size,
            opt=cfg.optimizer, round_index=t, seed=train_seed,
            momentum=momentum,
        )
        all_losses.append(losses)
    result = evaluate(params.backbone, data.query, data.gallery,
                      metric=cfg.eval_metric, round_index=cfg.rounds,
                      client=data.client_id)
    return LocalRunResult(
        eval=result,
        params=params,
        losses=np.concatenate(all_losses) if all_losses else np.zeros(0),
    )
