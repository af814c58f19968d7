"""Dataset pipeline: channel statistics, LS estimation against an elimination
oracle, traffic synthesis, assembly invariants and file round-trips."""

import hashlib

import numpy as np
import pytest

from wvae.simdata import (
    ChannelClass,
    CsiConfig,
    MultiViewDataset,
    TrafficClassProfile,
    assemble_dataset,
    gen_class_channel,
    gen_traffic,
    load_dataset,
    ls_estimate,
    make_channels,
    make_pilots,
    make_profiles,
    perturb_channel,
    pnr_from_db,
    pnr_to_db,
    save_dataset,
)


class TestChannel:
    def test_same_seed_identical(self):
        assert np.array_equal(gen_class_channel(42, 72), gen_class_channel(42, 72))

    def test_uses_m_by_2_standard_normals(self):
        # 72 complex taps come from 72x2 standard-normal draws.
        seed = np.random.SeedSequence(9)
        h = gen_class_channel(seed, 72)
        draws = np.random.default_rng(np.random.SeedSequence(9)).standard_normal((72, 2))
        assert np.array_equal(h.real, draws[:, 0])
        assert np.array_equal(h.imag, draws[:, 1])

    def test_mean_power_is_two(self):
        rng_seeds = range(10_000)
        total = 0.0
        for s in rng_seeds:
            h = gen_class_channel(np.random.SeedSequence([77, s]), 4)
            total += float(np.mean(np.abs(h) ** 2))
        mean_power = total / len(rng_seeds)
        assert abs(mean_power - 2.0) / 2.0 < 0.05

    def test_bad_m(self):
        with pytest.raises(ValueError):
            gen_class_channel(0, 0)


class TestPerturb:
    def test_zero_variance_exact(self):
        h = gen_class_channel(1, 16)
        assert np.array_equal(perturb_channel(h, 0.0, 5), h)

    def test_empirical_variance(self):
        h = np.zeros(2, dtype=complex)
        var = 0.37
        reals, imags = [], []
        for s in range(50_000):
            eps = perturb_channel(h, var, np.random.SeedSequence([3, s]))
            reals.extend(eps.real)
            imags.extend(eps.imag)
        assert abs(np.var(reals) - var) / var < 0.03
        assert abs(np.var(imags) - var) / var < 0.03

    def test_distinct_seeds_differ(self):
        h = gen_class_channel(1, 8)
        assert not np.array_equal(perturb_channel(h, 1.0, 1), perturb_channel(h, 1.0, 2))

    def test_negative_variance(self):
        with pytest.raises(ValueError):
            perturb_channel(np.zeros(2, dtype=complex), -1.0, 0)


def _complex_gauss_solve(a, b):
    """Gaussian elimination with partial pivoting on a complex system (oracle)."""
    a = a.astype(complex).copy()
    b = b.astype(complex).copy()
    n = a.shape[0]
    for col in range(n):
        p = np.argmax(np.abs(a[col:, col])) + col
        if p != col:
            a[[col, p]] = a[[p, col]]
            b[[col, p]] = b[[p, col]]
        b[col] = b[col] / a[col, col]
        a[col] = a[col] / a[col, col]
        for row in range(n):
            if row != col:
                b[row] -= a[row, col] * b[col]
                a[row] -= a[row, col] * a[col]
    return b


class TestLsEstimate:
    def test_noiseless_recovery(self, rng):
        x = np.diag(rng.normal(size=6) + 1j * rng.normal(size=6))
        h = rng.normal(size=6) + 1j * rng.normal(size=6)
        assert np.max(np.abs(ls_estimate(x, x @ h) - h)) < 1e-9

    def test_identity_pilots_return_y(self, rng):
        y = rng.normal(size=5) + 1j * rng.normal(size=5)
        assert np.max(np.abs(ls_estimate(np.eye(5), y) - y)) < 1e-12

    def test_matches_normal_equations_oracle(self, rng):
        for _ in range(30):
            x = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
            x += 4.0 * np.eye(4)  # keep it well conditioned
            y = rng.normal(size=4) + 1j * rng.normal(size=4)
            c = rng.normal(size=(4, 4))
            c = c @ c.T + 4.0 * np.eye(4)  # real SPD noise covariance
            ci = np.linalg.inv(c)
            a = x.conj().T @ ci @ x
            b = x.conj().T @ ci @ y
            expected = _complex_gauss_solve(a, b)
            got = ls_estimate(x, y, noise_cov=c)
            assert np.max(np.abs(got - expected)) < 1e-8

    def test_linear_in_y(self, rng):
        x = rng.normal(size=(5, 5)) + 1j * rng.normal(size=(5, 5)) + 3 * np.eye(5)
        y1 = rng.normal(size=5) + 1j * rng.normal(size=5)
        y2 = rng.normal(size=5) + 1j * rng.normal(size=5)
        lhs = ls_estimate(x, y1 + y2)
        rhs = ls_estimate(x, y1) + ls_estimate(x, y2)
        assert np.max(np.abs(lhs - rhs)) < 1e-9

    def test_rank_deficient_rejected(self):
        x = np.zeros((3, 3), dtype=complex)
        with pytest.raises(ValueError):
            ls_estimate(x, np.ones(3, dtype=complex))

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            ls_estimate(np.eye(3), np.ones(2, dtype=complex))
        with pytest.raises(ValueError):
            ls_estimate(np.ones((2, 3)), np.ones(2, dtype=complex))


class TestPnr:
    def test_ratio_ten_is_ten_db(self):
        assert pnr_to_db(10.0) == pytest.approx(10.0, abs=1e-12)

    def test_zero_db_is_ratio_one(self):
        assert pnr_from_db(0.0) == pytest.approx(1.0, abs=1e-12)

    def test_three_db(self):
        assert pnr_from_db(3.0) == pytest.approx(1.9952623149688795, rel=1e-12)

    def test_roundtrip(self):
        assert pnr_to_db(pnr_from_db(7.3)) == pytest.approx(7.3, abs=1e-12)

    def test_nonpositive_ratio(self):
        with pytest.raises(ValueError):
            pnr_to_db(0.0)


class TestTraffic:
    def test_low_rate_mean_count(self):
        profile = TrafficClassProfile(np.full(400, 0.02), 0)
        counts = [
            gen_traffic(profile, np.random.SeedSequence([5, s])).sum()
            for s in range(3000)
        ]
        # binomial(400, 0.02): mean 8, sd ~2.8; the MC mean is tight
        assert abs(np.mean(counts) - 8.0) < 0.3

    def test_same_seed_identical(self):
        profile = TrafficClassProfile(np.full(100, 0.5), 0)
        assert np.array_equal(gen_traffic(profile, 3), gen_traffic(profile, 3))

    def test_disjoint_bands_hamming_distance(self):
        profiles = make_profiles(11, 2, length=400, band_rate=0.8, base_rate=0.05)
        # exact expected disagreement per position as the oracle
        p0, p1 = profiles[0].rate_profile, profiles[1].rate_profile
        expected = float(np.sum(p0 * (1 - p1) + p1 * (1 - p0)))
        dists = []
        for s in range(2000):
            a = gen_traffic(profiles[0], np.random.SeedSequence([8, s, 0]))
            b = gen_traffic(profiles[1], np.random.SeedSequence([8, s, 1]))
            dists.append(np.sum(a != b))
        assert abs(np.mean(dists) - expected) < 2.0
        # the band contribution dominates: distance concentrates near band size
        assert expected > 2 * 40 * 0.7

    def test_profile_rate_bounds(self):
        with pytest.raises(ValueError):
            TrafficClassProfile(np.array([0.5, 0.999]), 0)
        with pytest.raises(ValueError):
            make_profiles(0, 4, band_rate=0.999)

    def test_bands_tile_disjointly(self):
        profiles = make_profiles(3, 10, length=400)
        starts = set()
        for p in profiles:
            (band,) = np.where(p.rate_profile > 0.5)
            assert band.size == 40
            assert np.all(np.diff(band) == 1)
            starts.add(band[0])
        assert len(starts) == 10  # every class occupies its own slot


class TestAssemble:
    def test_class_counts_uniform_within_one(self):
        train, test = assemble_dataset(
            k=10, n_train=103, n_test=38, csi=CsiConfig(), seed=0
        )
        for ds, n in ((train, 103), (test, 38)):
            counts = np.bincount(ds.labels, minlength=10)
            assert counts.sum() == n
            assert counts.max() - counts.min() <= 1

    def test_views_and_dims(self):
        train, _ = assemble_dataset(k=3, n_train=12, n_test=6, seed=1)
        assert train.families == ["bernoulli", "gaussian-diag"]
        assert train.views[0][1].shape == (12, 400)
        assert train.views[1][1].shape == (12, 144)
        assert set(np.unique(train.views[0][1])) <= {0.0, 1.0}

    def test_noiseless_limit_duplicates_class_csi(self):
        csi = CsiConfig(perturb_var=0.0, noise_var=1e-30, m=8)
        train, _ = assemble_dataset(k=2, n_train=8, n_test=2, csi=csi, seed=3)
        feats = train.views[1][1]
        for c in (0, 1):
            rows = feats[train.labels == c]
            assert np.max(np.abs(rows - rows[0])) < 1e-9

    def test_determinism_bitwise(self):
        a_train, a_test = assemble_dataset(k=4, n_train=20, n_test=8, seed=9)
        b_train, b_test = assemble_dataset(k=4, n_train=20, n_test=8, seed=9)
        for a, b in ((a_train, b_train), (a_test, b_test)):
            for (fam_a, mat_a), (fam_b, mat_b) in zip(a.views, b.views):
                assert fam_a == fam_b
                assert np.array_equal(mat_a, mat_b)
            assert np.array_equal(a.labels, b.labels)

    def test_exchangeability_of_class_ids(self):
        # Swapping which (channel, profile) pair sits at which slot permutes
        # the labels while leaving each class's samples identical.
        k, n = 4, 40  # divisible: every slot gets the same count
        chans = make_channels(5, k, 8)
        profs = make_profiles(5, k)
        csi = CsiConfig(m=8)
        base, _ = assemble_dataset(
            k=k, n_train=n, n_test=k, csi=csi, seed=5, channels=chans, profiles=profs
        )
        perm = [2, 0, 3, 1]
        swapped, _ = assemble_dataset(
            k=k,
            n_train=n,
            n_test=k,
            csi=csi,
            seed=5,
            channels=[chans[i] for i in perm],
            profiles=[profs[i] for i in perm],
        )
        for c in range(k):
            base_rows = base.views[1][1][base.labels == c]
            swapped_rows = swapped.views[1][1][swapped.labels == c]
            assert np.array_equal(base_rows, swapped_rows)

    def test_within_class_variance_increases_with_pnr(self):
        variances = []
        for pnr_db in (3.0, 5.0, 7.0, 9.0, 11.0):
            csi = CsiConfig.from_pnr_db(pnr_db, m=16)
            train, _ = assemble_dataset(k=3, n_train=240, n_test=3, csi=csi, seed=13)
            feats = train.views[1][1]
            within = np.mean(
                [feats[train.labels == c].var(axis=0).mean() for c in range(3)]
            )
            variances.append(within)
        assert all(b > a for a, b in zip(variances, variances[1:]))

    def test_needs_one_sample_per_class(self):
        with pytest.raises(ValueError):
            assemble_dataset(k=10, n_train=5, n_test=10)

    def test_default_sizes(self):
        train, test = assemble_dataset(seed=0)
        assert (train.n, test.n) == (2557, 638)
        assert train.views[0][1].shape == (2557, 400)
        assert train.views[1][1].shape == (2557, 144)
        counts = np.bincount(train.labels, minlength=10)
        assert counts.max() - counts.min() <= 1


class TestFiles:
    def _hash_dir(self, path):
        import os

        digest = hashlib.sha256()
        for name in sorted(os.listdir(path)):
            digest.update(name.encode())
            digest.update((path / name).read_bytes())
        return digest.hexdigest()

    def test_bit_exact_roundtrip(self, tmp_path):
        csi = CsiConfig(m=8)
        train, test = assemble_dataset(k=3, n_train=15, n_test=6, csi=csi, seed=2)
        pilots = make_pilots(2, csi)
        save_dataset(tmp_path / "ds", train, test, csi, pilots)
        train2, test2, manifest = load_dataset(tmp_path / "ds")
        for orig, back in ((train, train2), (test, test2)):
            for (fam_a, mat_a), (fam_b, mat_b) in zip(orig.views, back.views):
                assert fam_a == fam_b
                assert np.array_equal(mat_a, mat_b)
            assert np.array_equal(orig.labels, back.labels)
        assert manifest["k"] == 3
        assert manifest["pilot_matrix"]["kind"] == "diagonal"
        assert len(manifest["pilot_matrix"]["entries"]) == 8

    def test_same_seed_identical_files(self, tmp_path):
        for sub in ("a", "b"):
            csi = CsiConfig(m=8)
            train, test = assemble_dataset(k=3, n_train=15, n_test=6, csi=csi, seed=4)
            save_dataset(tmp_path / sub, train, test, csi, make_pilots(4, csi))
        assert self._hash_dir(tmp_path / "a") == self._hash_dir(tmp_path / "b")

    def test_unlabeled_roundtrip(self, tmp_path):
        csi = CsiConfig(m=4)
        train, test = assemble_dataset(k=2, n_train=6, n_test=4, csi=csi, seed=1)
        train = MultiViewDataset(train.views, None, "train", train.seed_info)
        test = MultiViewDataset(test.views, None, "test", test.seed_info)
        save_dataset(tmp_path / "ds", train, test, csi, make_pilots(1, csi))
        train2, test2, _ = load_dataset(tmp_path / "ds")
        assert train2.labels is None and test2.labels is None
