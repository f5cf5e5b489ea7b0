"""Deterministic federated training simulator for retrieval models.

Synthetic multi-domain identity data, partial or full parameter averaging,
optional cosine-distance weighting and server-side distillation, plus the
standard retrieval metrics (CMC, mAP) and communication-cost accounting.
"""

from .aggregation import (KdConfig, aggregate_arrays, average_soft_labels,
                          cdw_weights, cdw_weights_literal, kd_finetune,
                          size_weights)
from .config import ConfigError, RunConfig, load_run_config, parse_run_config
from .data import (PROFILES, ClientData, DatasetProfile, SampleSet,
                   ScenarioConfig, SyntheticFederation, build_federation,
                   build_shared_dataset, export_federation, load_profiles,
                   size_fractions)
from .engine import (ClientState, ClientUpdate, FederationConfig,
                     LocalRunResult, RoundFailure, RoundRecord, RunHistory,
                     client_execute, load_checkpoint, make_client_state,
                     run_federation, run_local_baseline, save_checkpoint,
                     select_clients)
from .metrics import (CommCost, EvalResult, average_precision, best3_average,
                      communication_cost, evaluate, similarity_matrix,
                      volatility, write_eval_csv)
from .model import (ModelParams, ModelSpec, MomentumState, OptimizerConfig,
                    effective_lr, extract_features, forward, init_backbone,
                    init_head, init_model, local_train, loss_and_grad,
                    sgd_step)

__version__ = "0.1.0"
