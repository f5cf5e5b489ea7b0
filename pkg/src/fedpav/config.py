"""Run configuration files.

A run spec is a small YAML document (schema version 1).  Parsing collects
every violation with its line number instead of stopping at the first, so
``fedpav validate`` can report all problems in one pass.  Unknown keys are
errors: a typo should never silently fall back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import yaml

from .aggregation import KdConfig
from .data import PROFILES, ScenarioConfig, profile_from_mapping
from .engine import FederationConfig
from .model import OptimizerConfig

SCHEMA_VERSION = 1
COMPARISONS = ("none", "local_baseline", "batch_sweep", "epoch_sweep")
BATCH_SWEEP = (32, 64, 128)
EPOCH_SWEEP = (1, 5, 10)


class ConfigError(ValueError):
    """One message per violation, each with a line number when known."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("\n".join(self.violations))


def _fmt_path(path) -> str:
    if not path:
        return "<top>"
    out = []
    for part in path:
        if isinstance(part, int):
            out[-1] += f"[{part}]"
        else:
            out.append(str(part))
    return ".".join(out)


def _line_map(text: str):
    """Map config paths to 1-based line numbers; also spot duplicate keys."""
    node = yaml.compose(text, Loader=yaml.SafeLoader)
    lines = {}
    dups = []

    def walk(node, path):
        lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            seen = set()
            for key_node, value_node in node.value:
                key = key_node.value
                if key in seen:
                    dups.append((path + (key,), key_node.start_mark.line + 1))
                seen.add(key)
                walk(value_node, path + (key,))
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                walk(item, path + (i,))

    if node is not None:
        walk(node, ())
    return lines, dups


_KINDS = {
    "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "str": lambda v: isinstance(v, str),
    "bool": lambda v: isinstance(v, bool),
    "list": lambda v: isinstance(v, list),
    "null": lambda v: v is None,
}


class _Section:
    """One mapping in the config, with violation collection."""

    def __init__(self, data, lines, path, col):
        self.data = data if isinstance(data, dict) else {}
        self.lines = lines
        self.path = path
        self.col = col
        self.seen = set()

    def line(self, key=None):
        path = self.path if key is None else self.path + (key,)
        return self.lines.get(path)

    def note(self, key, message):
        path = self.path if key is None else self.path + (key,)
        line = self.lines.get(path) or self.lines.get(self.path)
        where = f" (line {line})" if line else ""
        self.col.append(f"{_fmt_path(path)}: {message}{where}")

    def get(self, key, kinds, default=None, required=False):
        self.seen.add(key)
        if key not in self.data:
            if required:
                self.note(key, "is required")
            return default
        value = self.data[key]
        if not any(_KINDS[k](value) for k in kinds):
            names = " or ".join(kinds)
            self.note(key, f"must be {names}, got {type(value).__name__}")
            return default
        return value

    def sub(self, key) -> "_Section":
        self.seen.add(key)
        value = self.data.get(key)
        if value is not None and not isinstance(value, dict):
            self.note(key, "must be a mapping")
            value = None
        return _Section(value or {}, self.lines, self.path + (key,), self.col)

    def reject_unknown(self):
        for key in self.data:
            if key not in self.seen:
                self.note(key, "unknown key")


@dataclass(frozen=True)
class RunConfig:
    """A fully validated run specification."""

    scenario: ScenarioConfig
    federation: FederationConfig
    comparison: str
    output_dir: str
    seeds: tuple
    kd_batch: int | None  # raw value; None tracks the variant batch size

    def for_seed(self, seed: int):
        """Scenario and federation configs specialized to one seed."""
        return (replace(self.scenario, seed=seed),
                replace(self.federation, seed=seed))

    def variants(self):
        """(name, federation) pairs this spec expands to."""
        fed = self.federation
        if self.comparison == "batch_sweep":
            out = []
            for b in BATCH_SWEEP:
                kd_cfg = replace(fed.kd_config,
                                 batch_size=self.kd_batch or b)
                out.append((f"B{b}", replace(fed, batch_size=b,
                                             kd_config=kd_cfg)))
            return out
        if self.comparison == "epoch_sweep":
            budget = fed.rounds * fed.local_epochs
            return [
                (f"E{e}_T{budget // e}",
                 replace(fed, local_epochs=e, rounds=budget // e))
                for e in EPOCH_SWEEP
            ]
        return [("main", fed)]


def _check_min(section: _Section, key, value, minimum, exclusive=False):
    if value is None:
        return value
    ok = value > minimum if exclusive else value >= minimum
    if not ok:
        op = ">" if exclusive else ">="
        section.note(key, f"must be {op} {minimum}, got {value}")
    return value


def _check_choice(section: _Section, key, value, choices, fallback):
    if value is None or value in choices:
        return value if value is not None else fallback
    section.note(key,
                 f"must be one of {', '.join(choices)}, got {value!r}")
    return fallback


def _parse_profiles(scen: _Section, kind: str):
    raw = scen.get("profiles", ("list",))
    if raw is None:
        if kind == "by_dataset":
            return tuple(PROFILES.values())
        return (PROFILES["Market-1501"],)
    profiles = []
    for i, entry in enumerate(raw):
        path = scen.path + ("profiles", i)
        line = scen.lines.get(path)
        where = f" (line {line})" if line else ""
        if isinstance(entry, str):
            if entry in PROFILES:
                profiles.append(PROFILES[entry])
            else:
                scen.col.append(
                    f"{_fmt_path(path)}: unknown preset {entry!r}; known "
                    f"presets: {', '.join(PROFILES)}{where}"
                )
        elif isinstance(entry, dict):
            try:
                profiles.append(profile_from_mapping(entry))
            except ValueError as exc:
                scen.col.append(f"{_fmt_path(path)}: {exc}{where}")
        else:
            scen.col.append(
                f"{_fmt_path(path)}: must be a preset name or a profile "
                f"mapping{where}"
            )
    return tuple(profiles)


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse and validate a YAML run spec; raises ConfigError on problems."""
    col = []
    try:
        data = yaml.safe_load(text)
        lines, dups = _line_map(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"{source}: invalid YAML: {exc}"]) from exc
    for path, line in dups:
        col.append(f"{_fmt_path(path)}: duplicate key (line {line})")
    if not isinstance(data, dict):
        raise ConfigError([f"{source}: top level must be a mapping"])

    top = _Section(data, lines, (), col)
    version = top.get("version", ("int",), required=True)
    if version is not None and version != SCHEMA_VERSION:
        top.note("version", f"unsupported schema version {version!r}; "
                            f"this build reads version {SCHEMA_VERSION}")

    scen = top.sub("scenario")
    kind = _check_choice(scen, "kind",
                         scen.get("kind", ("str",), default="by_dataset"),
                         ("by_dataset", "by_camera", "by_identity"),
                         "by_dataset")
    profiles = _parse_profiles(scen, kind)
    scenario_kwargs = dict(
        kind=kind,
        profiles=profiles,
        clients=_check_min(scen, "clients",
                           scen.get("clients", ("int",), default=6), 1),
        input_dim=_check_min(scen, "input_dim",
                             scen.get("input_dim", ("int",), default=16), 1),
        sigma=_check_min(scen, "sigma", float(
            scen.get("sigma", ("number",), default=0.1)), 0),
        domain_separation=_check_min(scen, "domain_separation", float(
            scen.get("domain_separation", ("number",), default=6.0)), 0),
        camera_strength=_check_min(scen, "camera_strength", float(
            scen.get("camera_strength", ("number",), default=0.5)), 0),
    )
    scen.reject_unknown()

    model_sec = top.sub("model")
    feature_dim = _check_min(
        model_sec, "feature_dim",
        model_sec.get("feature_dim", ("int",), default=8), 1)
    model_sec.reject_unknown()

    fed_sec = top.sub("federation")
    opt_sec = fed_sec.sub("optimizer")
    opt_kwargs = dict(
        lr_head=_check_min(opt_sec, "lr_head", float(
            opt_sec.get("lr_head", ("number",), default=0.05)), 0,
            exclusive=True),
        lr_backbone=_check_min(opt_sec, "lr_backbone", float(
            opt_sec.get("lr_backbone", ("number",), default=0.005)), 0,
            exclusive=True),
        step_size=_check_min(opt_sec, "step_size",
                             opt_sec.get("step_size", ("int",), default=40),
                             1),
        gamma=float(opt_sec.get("gamma", ("number",), default=0.1)),
        weight_decay=_check_min(opt_sec, "weight_decay", float(
            opt_sec.get("weight_decay", ("number",), default=5e-4)), 0),
        momentum=_check_min(opt_sec, "momentum", float(
            opt_sec.get("momentum", ("number",), default=0.9)), 0),
    )
    if not 0 < opt_kwargs["gamma"] <= 1:
        opt_sec.note("gamma", f"must be in (0, 1], got {opt_kwargs['gamma']}")
    opt_sec.reject_unknown()

    rounds = _check_min(fed_sec, "rounds",
                        fed_sec.get("rounds", ("int",), default=300), 1)
    local_epochs = _check_min(
        fed_sec, "local_epochs",
        fed_sec.get("local_epochs", ("int",), default=1), 1)
    batch_size = _check_min(
        fed_sec, "batch_size",
        fed_sec.get("batch_size", ("int",), default=32), 1)
    eval_every = _check_min(
        fed_sec, "eval_every",
        fed_sec.get("eval_every", ("int",), default=10), 1)
    clients_per_round = _check_min(
        fed_sec, "clients_per_round",
        fed_sec.get("clients_per_round", ("int", "null")), 1)
    eval_metric = _check_choice(
        fed_sec, "eval_metric",
        fed_sec.get("eval_metric", ("str",), default="cosine"),
        ("cosine", "euclidean"), "cosine")
    fed_sec.reject_unknown()

    strat = top.sub("strategy")
    protocol = _check_choice(strat, "protocol",
                             strat.get("protocol", ("str",),
                                       default="fedpav"),
                             ("fedpav", "fedavg"), "fedpav")
    weighting = _check_choice(strat, "weighting",
                              strat.get("weighting", ("str",),
                                        default="size"),
                              ("size", "cdw", "cdw_literal"), "size")
    kd = strat.get("kd", ("bool",), default=False)
    kd_lr = _check_min(strat, "kd_lr", float(
        strat.get("kd_lr", ("number",), default=0.0005)), 0, exclusive=True)
    kd_epochs = _check_min(strat, "kd_epochs",
                           strat.get("kd_epochs", ("int",), default=1), 1)
    kd_batch = _check_min(strat, "kd_batch",
                          strat.get("kd_batch", ("int", "null")), 1)
    shared_size = _check_min(strat, "shared_size",
                             strat.get("shared_size", ("int",),
                                       default=7264), 1)
    strat.reject_unknown()

    comparison = top.get("comparison", ("str",), default="none")
    if comparison not in COMPARISONS:
        top.note("comparison",
                 f"must be one of {', '.join(COMPARISONS)}, got {comparison!r}")
        comparison = "none"
    output_dir = top.get("output_dir", ("str",), default="runs/run")
    if output_dir is not None and not output_dir:
        top.note("output_dir", "must be non-empty")
        output_dir = "runs/run"

    seeds = top.get("seeds", ("list",), default=[0])
    clean_seeds = []
    for i, s in enumerate(seeds if isinstance(seeds, list) else []):
        if not _KINDS["int"](s) or s < 0:
            top.col.append(
                f"seeds[{i}]: must be a non-negative int, got {s!r}"
            )
        elif s in clean_seeds:
            top.col.append(f"seeds[{i}]: duplicate seed {s}")
        else:
            clean_seeds.append(s)
    if not clean_seeds:
        top.note("seeds", "needs at least one seed")
        clean_seeds = [0]
    top.reject_unknown()

    # Construct the dataclasses only once field parsing is clean; their own
    # constructors act as a backstop for anything the checks above missed,
    # attributed to the owning section.
    scenario = optimizer = kd_config = federation = None
    if not col:
        try:
            scenario = ScenarioConfig(**scenario_kwargs)
        except ValueError as exc:
            scen.note(None, str(exc))
        try:
            optimizer = OptimizerConfig(**opt_kwargs)
        except ValueError as exc:
            opt_sec.note(None, str(exc))
        try:
            kd_config = KdConfig(
                lr=kd_lr, epochs=kd_epochs,
                batch_size=kd_batch if kd_batch is not None else batch_size)
        except ValueError as exc:
            strat.note(None, str(exc))
    if optimizer is not None and kd_config is not None:
        try:
            federation = FederationConfig(
                feature_dim=feature_dim,
                rounds=rounds,
                local_epochs=local_epochs,
                batch_size=batch_size,
                eval_every=eval_every,
                clients_per_round=clients_per_round,
                protocol=protocol,
                weighting=weighting,
                kd=kd,
                kd_config=kd_config,
                shared_size=shared_size,
                optimizer=optimizer,
                eval_metric=eval_metric,
            )
        except ValueError as exc:
            fed_sec.note(None, str(exc))

    if scenario is not None and federation is not None:
        if (federation.clients_per_round is not None
                and federation.clients_per_round > scenario.n_clients):
            fed_sec.note(
                "clients_per_round",
                f"exceeds the scenario's {scenario.n_clients} clients",
            )
        if federation.protocol == "fedavg":
            head_sizes = _head_id_counts(scenario)
            if len(head_sizes) != 1:
                strat.note("protocol",
                           "fedavg needs a uniform identity count per "
                           f"client, scenario gives {sorted(head_sizes)}")
        if comparison == "epoch_sweep":
            budget = federation.rounds * federation.local_epochs
            if budget % 10 != 0 or budget < 10:
                top.note("comparison",
                         f"epoch_sweep needs rounds*local_epochs divisible "
                         f"by 10, got {budget}")

    if col:
        raise ConfigError(col)
    return RunConfig(
        scenario=scenario,
        federation=federation,
        comparison=comparison,
        output_dir=output_dir,
        seeds=tuple(clean_seeds),
        kd_batch=kd_batch,
    )


def _head_id_counts(scenario: ScenarioConfig):
    """Distinct per-client identity counts a scenario will produce."""
    if scenario.kind == "by_dataset":
        return {p.train_ids for p in scenario.profiles}
    if scenario.kind == "by_identity":
        ids = scenario.profiles[0].train_ids
        n = scenario.clients
        quota = ids // n
        return {quota, ids - quota * (n - 1)}
    # by_camera head sizes depend on which identities each camera sees;
    # with round-robin assignment every camera sees every identity unless
    # the dataset is tiny, so treat it as uniform here and let the engine
    # enforce the real counts.
    return {scenario.profiles[0].train_ids}


def load_run_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc
    return parse_run_config(text, source=str(path))
