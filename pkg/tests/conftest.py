import numpy as np
import pytest

from fedpav import DatasetProfile, ScenarioConfig


def tiny_profile(name="tiny", cameras=3, train_ids=8, train_images=48,
                 query_ids=4, query_images=8, gallery_images=16):
    return DatasetProfile(name, cameras, train_ids, train_images,
                          query_ids, query_images, gallery_images)


@pytest.fixture
def toy_scenario():
    profiles = (
        tiny_profile("toy-a", cameras=3, train_ids=10, train_images=60,
                     query_ids=5, query_images=10, gallery_images=20),
        tiny_profile("toy-b", cameras=2, train_ids=6, train_images=30,
                     query_ids=4, query_images=8, gallery_images=16),
    )
    return ScenarioConfig(kind="by_dataset", profiles=profiles,
                          input_dim=6, seed=3)


def random_batch(rng, n, spec):
    x = rng.standard_normal((n, spec.input_dim))
    y = rng.integers(0, spec.num_ids, n).astype(np.int64)
    return x, y
