import numpy as np
import pytest

from fedpav import (PROFILES, DatasetProfile, ScenarioConfig,
                    build_federation, build_shared_dataset,
                    export_federation, load_profiles, size_fractions)
from fedpav.data import (generate_domain, load_samples, profile_from_mapping)

from conftest import tiny_profile


class TestProfiles:
    def test_nine_presets(self):
        assert len(PROFILES) == 9
        assert list(PROFILES)[0] == "MSMT17"
        market = PROFILES["Market-1501"]
        assert (market.cameras, market.train_ids, market.train_images) == \
            (6, 751, 12936)
        assert (market.query_ids, market.query_images,
                market.gallery_images) == (750, 3368, 19732)

    def test_total_train_volume(self):
        assert sum(p.train_images for p in PROFILES.values()) == 76458

    def test_mapping_round_trip(self):
        p = profile_from_mapping(dict(name="x", cameras=2, train_ids=3,
                                      train_images=6, query_ids=2,
                                      query_images=2, gallery_images=4))
        assert p == DatasetProfile("x", 2, 3, 6, 2, 2, 4)

    def test_mapping_rejects_unknown_and_missing(self):
        with pytest.raises(ValueError, match="unknown profile keys: camaras"):
            profile_from_mapping(dict(name="x", camaras=2, train_ids=3,
                                      train_images=6, query_ids=2,
                                      query_images=2, gallery_images=4))
        with pytest.raises(ValueError, match="missing keys"):
            profile_from_mapping(dict(name="x"))

    def test_load_profiles_yaml(self, tmp_path):
        path = tmp_path / "profiles.yaml"
        path.write_text(
            "- {name: a, cameras: 2, train_ids: 4, train_images: 8,\n"
            "   query_ids: 2, query_images: 2, gallery_images: 4}\n"
            "- {name: b, cameras: 3, train_ids: 6, train_images: 18,\n"
            "   query_ids: 3, query_images: 6, gallery_images: 9}\n"
        )
        profiles = load_profiles(path)
        assert [p.name for p in profiles] == ["a", "b"]
        assert profiles[1].cameras == 3


class TestDomainGeneration:
    def setup_method(self):
        self.profile = tiny_profile(cameras=3, train_ids=8, train_images=48,
                                    query_ids=4, query_images=8,
                                    gallery_images=16)
        self.cfg = ScenarioConfig(kind="by_dataset",
                                  profiles=(self.profile,), input_dim=5,
                                  seed=1)

    def test_counts_and_shapes(self):
        train, query, gallery = generate_domain(self.profile, 0, self.cfg, 0)
        assert train.x.shape == (48, 5)
        assert len(query) == 8 and len(gallery) == 16

    def test_train_and_eval_identities_disjoint(self):
        train, query, gallery = generate_domain(self.profile, 0, self.cfg, 0)
        train_ids = set(train.ids.tolist())
        eval_ids = set(query.ids.tolist()) | set(gallery.ids.tolist())
        assert train_ids == set(range(8))
        assert eval_ids == set(range(8, 12))
        assert not (train_ids & eval_ids)

    def test_round_robin_cameras(self):
        train, query, gallery = generate_domain(self.profile, 0, self.cfg, 0)
        # image i -> id i % n_ids, camera (i // n_ids) % cameras
        assert np.array_equal(train.ids, np.arange(48) % 8)
        assert np.array_equal(train.cams, (np.arange(48) // 8) % 3)
        # gallery cameras start one later than query cameras
        assert np.array_equal(gallery.cams, ((np.arange(16) // 4) + 1) % 3)

    def test_every_eval_identity_has_cross_camera_gallery(self):
        for profile in PROFILES.values():
            small = DatasetProfile(
                profile.name, profile.cameras, profile.train_ids,
                profile.train_ids, profile.query_ids, profile.query_images,
                profile.gallery_images)
            n, c = small.query_ids, small.cameras
            q_cam = (np.arange(small.query_images) // n) % c
            g_cam = ((np.arange(small.gallery_images) // n) + 1) % c
            q_id = np.arange(small.query_images) % n
            g_id = np.arange(small.gallery_images) % n
            for i in range(small.query_images):
                mask = (g_id == q_id[i]) & (g_cam != q_cam[i])
                assert mask.any(), (profile.name, i)

    def test_deterministic_per_seed(self):
        a = generate_domain(self.profile, 0, self.cfg, 0)
        b = generate_domain(self.profile, 0, self.cfg, 0)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.x, sb.x)
        other = ScenarioConfig(kind="by_dataset", profiles=(self.profile,),
                               input_dim=5, seed=2)
        c = generate_domain(self.profile, 0, other, 0)
        assert not np.array_equal(a[0].x, c[0].x)

    def test_id_base_offsets_globally(self):
        _, query, _ = generate_domain(self.profile, 1, self.cfg, 100)
        assert query.ids.min() >= 108  # 100 + 8 train ids


class TestScenarios:
    def test_by_dataset_one_client_per_profile(self, ):
        profiles = (tiny_profile("a"), tiny_profile("b", train_ids=4,
                                                    train_images=20))
        cfg = ScenarioConfig(kind="by_dataset", profiles=profiles,
                             input_dim=4, seed=0)
        fed = build_federation(cfg)
        assert [c.name for c in fed.clients] == ["a", "b"]
        assert fed.sizes == [48, 20]
        assert [c.num_ids for c in fed.clients] == [8, 4]
        # global ids never collide across domains
        ids_a = set(fed.clients[0].train.ids.tolist())
        ids_b = set(fed.clients[1].train.ids.tolist())
        assert not (ids_a & ids_b)

    def test_by_dataset_labels_dense(self):
        cfg = ScenarioConfig(kind="by_dataset", profiles=(tiny_profile(),),
                             input_dim=4, seed=0)
        client = build_federation(cfg).clients[0]
        assert set(client.train_labels.tolist()) == set(range(client.num_ids))

    def test_by_camera_partitions_training(self):
        profile = tiny_profile(cameras=3)
        cfg = ScenarioConfig(kind="by_camera", profiles=(profile,),
                             input_dim=4, seed=0)
        fed = build_federation(cfg)
        assert len(fed.clients) == 3
        for c in fed.clients:
            assert np.all(c.train.cams == c.client_id)
        assert sum(fed.sizes) == profile.train_images
        # all clients evaluate on the same multi-camera protocol
        assert len({id(c.query) for c in fed.clients}) == 1
        assert len({id(c.gallery) for c in fed.clients}) == 1

    def test_by_identity_quota_split(self):
        profile = tiny_profile(train_ids=13, train_images=78)
        cfg = ScenarioConfig(kind="by_identity", profiles=(profile,),
                             clients=4, input_dim=4, seed=0)
        fed = build_federation(cfg)
        assert [c.num_ids for c in fed.clients] == [3, 3, 3, 4]
        assert sum(fed.sizes) == 78
        owned = [set(c.train.ids.tolist()) for c in fed.clients]
        assert set().union(*owned) == set(range(13))
        for i in range(4):
            for j in range(i + 1, 4):
                assert not (owned[i] & owned[j])
        for c in fed.clients:
            assert c.train_labels.min() == 0
            assert c.train_labels.max() == c.num_ids - 1

    def test_by_identity_market_shape(self):
        # the canonical split: 751 identities over 6 clients
        cfg = ScenarioConfig(kind="by_identity",
                             profiles=(PROFILES["Market-1501"],),
                             clients=6, input_dim=4, seed=0)
        fed = build_federation(cfg)
        assert [c.num_ids for c in fed.clients] == [125] * 5 + [126]

    def test_scenario_validation(self):
        with pytest.raises(ValueError, match="exactly one profile"):
            ScenarioConfig(kind="by_camera",
                           profiles=(tiny_profile("a"), tiny_profile("b")))
        with pytest.raises(ValueError, match="fewer identities"):
            ScenarioConfig(kind="by_identity", profiles=(tiny_profile(),),
                           clients=100)
        with pytest.raises(ValueError, match="kind"):
            ScenarioConfig(kind="by_magic", profiles=(tiny_profile(),))
        with pytest.raises(ValueError, match="seed"):
            ScenarioConfig(profiles=(tiny_profile(),), seed=-1)


class TestSharedDataset:
    def test_shape_and_determinism(self):
        cfg = ScenarioConfig(kind="by_dataset", profiles=(tiny_profile(),),
                             input_dim=7, seed=4)
        a = build_shared_dataset(cfg, 100)
        b = build_shared_dataset(cfg, 100)
        assert a.shape == (100, 7)
        assert np.array_equal(a, b)

    def test_independent_of_domain_streams(self):
        cfg = ScenarioConfig(kind="by_dataset", profiles=(tiny_profile(),),
                             input_dim=7, seed=4)
        before = build_shared_dataset(cfg, 64)
        build_federation(cfg)
        after = build_shared_dataset(cfg, 64)
        assert np.array_equal(before, after)


class TestSizeFractions:
    def test_fractions(self):
        np.testing.assert_allclose(size_fractions([1, 3]), [0.25, 0.75])

    def test_rejects_empty_and_nonpositive(self):
        with pytest.raises(ValueError):
            size_fractions([])
        with pytest.raises(ValueError):
            size_fractions([3, 0])


class TestExport:
    def test_round_trip(self, tmp_path):
        profiles = (tiny_profile("a"), tiny_profile("b", train_ids=4,
                                                    train_images=20))
        cfg = ScenarioConfig(kind="by_dataset", profiles=profiles,
                             input_dim=4, seed=9)
        fed = build_federation(cfg)
        export_federation(fed, tmp_path)
        train, clients = load_samples(tmp_path / "train.csv")
        assert len(train) == sum(fed.sizes)
        assert set(clients.tolist()) == {0, 1}
        whole_x = np.concatenate([c.train.x for c in fed.clients])
        assert np.array_equal(train.x, whole_x)  # full precision round-trip
        query, q_clients = load_samples(tmp_path / "query.csv")
        assert len(query) == sum(len(c.query) for c in fed.clients)
        assert set(q_clients.tolist()) == {0, 1}

    def test_shared_eval_marked(self, tmp_path):
        cfg = ScenarioConfig(kind="by_camera", profiles=(tiny_profile(),),
                             input_dim=4, seed=9)
        fed = build_federation(cfg)
        export_federation(fed, tmp_path)
        query, q_clients = load_samples(tmp_path / "query.csv")
        assert np.all(q_clients == -1)
        assert len(query) == len(fed.clients[0].query)
