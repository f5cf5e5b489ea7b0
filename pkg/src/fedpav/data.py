"""Synthetic multi-domain, multi-camera identity data.

Each dataset profile becomes a "domain": a cluster of identity prototypes in
input space.  Cameras are mild orthogonal distortions of the domain, so two
images of one identity from different cameras are nearby but not identical.
Sample counts, identity counts and camera counts follow the profile; images
are dealt round-robin over identities and cameras so every preset matches
its stated totals exactly.

Identity labels are globally unique across domains.  Train and evaluation
identities within a domain are disjoint; gallery camera assignment starts
one camera later than the query split so that every evaluation identity has
cross-camera matches.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
import os

import numpy as np

import yaml

# leading entropy tags, keeping data streams away from the engine's
_DOMAIN_TAG = 100
_SHARED_TAG = 101

_SCENARIOS = ("by_dataset", "by_camera", "by_identity")


@dataclass(frozen=True)
class DatasetProfile:
    """Census of one dataset: cameras, identity counts and image counts."""

    name: str
    cameras: int
    train_ids: int
    train_images: int
    query_ids: int
    query_images: int
    gallery_images: int

    def __post_init__(self):
        if not self.name:
            raise ValueError("profile name must be non-empty")
        for key in ("cameras", "train_ids", "train_images", "query_ids",
                    "query_images", "gallery_images"):
            value = getattr(self, key)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValueError(
                    f"profile {self.name!r}: {key} must be a positive int, "
                    f"got {value!r}"
                )


#: Preset profiles for the nine-dataset federation, largest first.
PROFILES = {
    p.name: p
    for p in (
        DatasetProfile("MSMT17", 15, 1041, 32621, 3060, 11659, 82161),
        DatasetProfile("DukeMTMC-reID", 8, 702, 16522, 702, 2228, 17611),
        DatasetProfile("Market-1501", 6, 751, 12936, 750, 3368, 19732),
        DatasetProfile("CUHK03-NP", 2, 767, 7365, 700, 1400, 5332),
        DatasetProfile("PRID2011", 2, 285, 3744, 100, 100, 649),
        DatasetProfile("CUHK01", 2, 485, 1940, 486, 972, 972),
        DatasetProfile("VIPeR", 2, 316, 632, 316, 316, 316),
        DatasetProfile("3DPeS", 2, 93, 450, 86, 246, 316),
        DatasetProfile("iLIDS-VID", 2, 59, 248, 60, 98, 130),
    )
}

_PROFILE_FIELDS = ("name", "cameras", "train_ids", "train_images",
                   "query_ids", "query_images", "gallery_images")


def profile_from_mapping(mapping: dict) -> DatasetProfile:
    """Build a profile from a plain mapping, rejecting unknown keys."""
    if not isinstance(mapping, dict):
        raise ValueError(f"profile entry must be a mapping, got {mapping!r}")
    unknown = sorted(set(mapping) - set(_PROFILE_FIELDS))
    if unknown:
        raise ValueError(f"unknown profile keys: {', '.join(unknown)}")
    missing = [k for k in _PROFILE_FIELDS if k not in mapping]
    if missing:
        raise ValueError(f"profile is missing keys: {', '.join(missing)}")
    return DatasetProfile(**mapping)


def load_profiles(path: str | os.PathLike) -> list[DatasetProfile]:
    """Read a YAML list of dataset profiles."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, list) or not raw:
        raise ValueError(f"{path}: expected a non-empty YAML list of profiles")
    return [profile_from_mapping(entry) for entry in raw]


@dataclass
class SampleSet:
    """A batch of vectors with identity, camera and domain labels."""

    x: np.ndarray
    ids: np.ndarray
    cams: np.ndarray
    domains: np.ndarray

    def __post_init__(self):
        n = self.x.shape[0]
        if self.x.ndim != 2:
            raise ValueError("x must be 2-d")
        for name in ("ids", "cams", "domains"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx) -> "SampleSet":
        return SampleSet(self.x[idx], self.ids[idx], self.cams[idx],
                         self.domains[idx])


@dataclass
class ClientData:
    """One client's training split plus its evaluation protocol.

    train_labels are dense local labels in [0, num_ids); ids in the sample
    sets stay global.  Clients created from the same domain share the query
    and gallery objects.
    """

    client_id: int
    name: str
    domain: int
    train: SampleSet
    train_labels: np.ndarray
    num_ids: int
    query: SampleSet
    gallery: SampleSet


@dataclass(frozen=True)
class ScenarioConfig:
    """How to carve the synthetic world into federated clients."""

    kind: str = "by_dataset"
    profiles: tuple = tuple(PROFILES.values())
    clients: int = 6  # only used by by_identity
    input_dim: int = 16
    sigma: float = 0.1
    domain_separation: float = 6.0
    camera_strength: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _SCENARIOS:
            raise ValueError(
                f"kind must be one of {', '.join(_SCENARIOS)}, got {self.kind!r}"
            )
        profiles = tuple(self.profiles)
        object.__setattr__(self, "profiles", profiles)
        if not profiles:
            raise ValueError("at least one profile is required")
        if self.kind in ("by_camera", "by_identity") and len(profiles) != 1:
            raise ValueError(f"{self.kind} takes exactly one profile")
        names = [p.name for p in profiles]
        if len(set(names)) != len(names):
            raise ValueError("profile names must be unique")
        if self.kind == "by_camera" and profiles[0].cameras < 2:
            raise ValueError("by_camera needs a profile with >= 2 cameras")
        if self.kind == "by_identity":
            if self.clients < 1:
                raise ValueError("clients must be >= 1")
            if profiles[0].train_ids < self.clients:
                raise ValueError("cannot split fewer identities than clients")
        if not isinstance(self.input_dim, int) or self.input_dim < 1:
            raise ValueError("input_dim must be a positive int")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.domain_separation < 0 or self.camera_strength < 0:
            raise ValueError("domain_separation and camera_strength must be >= 0")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ValueError("seed must be a non-negative int")

    @property
    def n_clients(self) -> int:
        if self.kind == "by_dataset":
            return len(self.profiles)
        if self.kind == "by_camera":
            return self.profiles[0].cameras
        return self.clients


@dataclass
class SyntheticFederation:
    config: ScenarioConfig
    clients: list

    @property
    def sizes(self) -> list:
        return [len(c.train) for c in self.clients]


def _camera_maps(rng, cameras: int, dim: int, strength: float):
    """Per-camera orthogonal transform (polar factor) and bias."""
    maps = []
    eye = np.eye(dim)
    for _ in range(cameras):
        g = rng.standard_normal((dim, dim))
        u, _, vt = np.linalg.svd(eye + strength * g / math.sqrt(dim))
        maps.append((u @ vt, strength * rng.standard_normal(dim)))
    return maps


def _emit(rng, protos, maps, cfg, domain_id, n_images, pool_base, pool_size,
          cam_offset, id_base):
    """Round-robin images over a pool of identities and the camera ring."""
    cameras = len(maps)
    idx = np.arange(n_images)
    local = idx % pool_size
    cams = ((idx // pool_size) + cam_offset) % cameras
    x = np.empty((n_images, cfg.input_dim))
    base = protos[pool_base + local]
    for c in range(cameras):
        mask = cams == c
        a, b = maps[c]
        x[mask] = base[mask] @ a.T + b
    x += cfg.sigma * rng.standard_normal((n_images, cfg.input_dim))
    return SampleSet(
        x,
        (id_base + pool_base + local).astype(np.int64),
        cams.astype(np.int64),
        np.full(n_images, domain_id, dtype=np.int64),
    )


def generate_domain(profile: DatasetProfile, domain_id: int,
                    cfg: ScenarioConfig, id_base: int):
    """Materialize one domain: (train, query, gallery) sample sets.

    Draw order from the domain stream is fixed: center, prototypes, camera
    maps, then noise for train, query and gallery in that order.  Gallery
    camera assignment starts one camera after the query assignment.
    """
    rng = np.random.default_rng([cfg.seed, _DOMAIN_TAG, domain_id])
    d = cfg.input_dim
    center = cfg.domain_separation * rng.standard_normal(d) / math.sqrt(d)
    n_ids = profile.train_ids + profile.query_ids
    protos = center + rng.standard_normal((n_ids, d))
    maps = _camera_maps(rng, profile.cameras, d, cfg.camera_strength)
    train = _emit(rng, protos, maps, cfg, domain_id, profile.train_images,
                  0, profile.train_ids, 0, id_base)
    query = _emit(rng, protos, maps, cfg, domain_id, profile.query_images,
                  profile.train_ids, profile.query_ids, 0, id_base)
    gallery = _emit(rng, protos, maps, cfg, domain_id, profile.gallery_images,
                    profile.train_ids, profile.query_ids, 1, id_base)
    return train, query, gallery


def _dense_labels(global_ids: np.ndarray):
    uniq, labels = np.unique(global_ids, return_inverse=True)
    return labels.astype(np.int64), len(uniq)


def build_federation(cfg: ScenarioConfig) -> SyntheticFederation:
    """Generate every domain and carve it into clients per the scenario."""
    clients = []
    if cfg.kind == "by_dataset":
        id_base = 0
        for k, profile in enumerate(cfg.profiles):
            train, query, gallery = generate_domain(profile, k, cfg, id_base)
            labels, num_ids = _dense_labels(train.ids)
            clients.append(ClientData(k, profile.name, k, train, labels,
                                      num_ids, query, gallery))
            id_base += profile.train_ids + profile.query_ids
        return SyntheticFederation(cfg, clients)

    profile = cfg.profiles[0]
    train, query, gallery = generate_domain(profile, 0, cfg, 0)
    if cfg.kind == "by_camera":
        for c in range(profile.cameras):
            part = train.take(train.cams == c)
            if len(part) == 0:
                raise ValueError(f"camera {c} received no training images")
            labels, num_ids = _dense_labels(part.ids)
            clients.append(ClientData(c, f"{profile.name}/cam{c}", 0, part,
                                      labels, num_ids, query, gallery))
    else:  # by_identity
        n = cfg.clients
        quota = profile.train_ids // n
        for k in range(n):
            lo = k * quota
            hi = (k + 1) * quota if k < n - 1 else profile.train_ids
            part = train.take((train.ids >= lo) & (train.ids < hi))
            if len(part) == 0:
                raise ValueError(f"identity shard {k} received no images")
            clients.append(ClientData(k, f"{profile.name}/ids{k}", 0, part,
                                      (part.ids - lo).astype(np.int64),
                                      hi - lo, query, gallery))
    return SyntheticFederation(cfg, clients)


def build_shared_dataset(cfg: ScenarioConfig, n_images: int) -> np.ndarray:
    """Unlabeled vectors for server-side refinement, from a domain of its own.

    Structured like the labelled domains (one prototype per four images,
    four cameras) but only the raw vectors are returned.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    rng = np.random.default_rng([cfg.seed, _SHARED_TAG])
    d = cfg.input_dim
    center = cfg.domain_separation * rng.standard_normal(d) / math.sqrt(d)
    n_ids = max(1, n_images // 4)
    protos = center + rng.standard_normal((n_ids, d))
    maps = _camera_maps(rng, 4, d, cfg.camera_strength)
    sample = _emit(rng, protos, maps, cfg, -1, n_images, 0, n_ids, 0, 0)
    return sample.x


def size_fractions(sizes) -> np.ndarray:
    """Each client's share of the total training images."""
    arr = np.asarray(sizes, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0 or (arr <= 0).any():
        raise ValueError("sizes must be a non-empty vector of positive counts")
    return arr / arr.sum()


def _write_split(path, sample: SampleSet, clients: np.ndarray):
    dim = sample.x.shape[1]
    header = ["domain", "client", "identity", "camera"]
    header += [f"x{j}" for j in range(dim)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(len(sample)):
            row = [str(sample.domains[i]), str(clients[i]),
                   str(sample.ids[i]), str(sample.cams[i])]
            row += [repr(float(v)) for v in sample.x[i]]
            fh.write(",".join(row) + "\n")


def export_federation(fed: SyntheticFederation, directory: str | os.PathLike):
    """Write train/query/gallery CSVs (full float precision, round-trips).

    Columns: domain, client, identity, camera, x0..x{d-1}.  Evaluation rows
    shared by several clients carry client = -1.
    """
    os.makedirs(directory, exist_ok=True)
    train_parts = [c.train for c in fed.clients]
    train_clients = np.concatenate(
        [np.full(len(c.train), c.client_id, dtype=np.int64)
         for c in fed.clients]
    )
    joined = SampleSet(
        np.concatenate([p.x for p in train_parts]),
        np.concatenate([p.ids for p in train_parts]),
        np.concatenate([p.cams for p in train_parts]),
        np.concatenate([p.domains for p in train_parts]),
    )
    _write_split(os.path.join(directory, "train.csv"), joined, train_clients)
    for split in ("query", "gallery"):
        seen = {}
        parts = []
        owners = []
        for c in fed.clients:
            sample = getattr(c, split)
            key = id(sample)
            if key in seen:
                owners[seen[key]] = -1
                continue
            seen[key] = len(parts)
            parts.append(sample)
            owners.append(c.client_id)
        whole = SampleSet(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.ids for p in parts]),
            np.concatenate([p.cams for p in parts]),
            np.concatenate([p.domains for p in parts]),
        )
        labels = np.concatenate(
            [np.full(len(p), owner, dtype=np.int64)
             for p, owner in zip(parts, owners)]
        )
        _write_split(os.path.join(directory, f"{split}.csv"), whole, labels)


def load_samples(path: str | os.PathLike):
    """Read a split written by export_federation; returns (SampleSet, client)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[:4] != ["domain", "client", "identity", "camera"]:
            raise ValueError(f"{path}: unexpected header {header[:4]}")
        dim = len(header) - 4
        rows = [line.strip().split(",") for line in fh if line.strip()]
    n = len(rows)
    x = np.empty((n, dim))
    meta = np.empty((n, 4), dtype=np.int64)
    for i, row in enumerate(rows):
        meta[i] = [int(v) for v in row[:4]]
        x[i] = [float(v) for v in row[4:]]
    sample = SampleSet(x, meta[:, 2], meta[:, 3], meta[:, 0])
    return sample, meta[:, 1]
