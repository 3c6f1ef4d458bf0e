import math

import numpy as np
import pytest
import torch

from freda_lab import model as M
from freda_lab.baselines import TentAdapter, probs_for
from freda_lab.core import Rng
from freda_lab.freda import ConfigError, FredaAdapter, FredaConfig, select_samples
from freda_lab.harness import run
from freda_lab.stream import CorruptionSpec, batch, images_of, mixed_stream

MIXED = CorruptionSpec.parse("gaussian_noise,gaussian_blur,contrast,pixelate")


def stream(data, n, seed=0, specs=MIXED):
    return list(mixed_stream(data[1], specs, n, Rng(seed).child("stream")))


def select_oracle(probs, ybar, h0, eps, m=0.1):
    keep = []
    ybar = list(ybar)
    for y in probs:
        h = -sum(p * math.log(p) for p in y if p > 0)
        dot = sum(a * b for a, b in zip(y, ybar))
        cos = dot / (math.sqrt(sum(a * a for a in y)) * math.sqrt(sum(b * b for b in ybar)))
        ok = h < h0 and abs(cos) < eps
        keep.append(ok)
        if ok:
            ybar = [(1 - m) * b + m * a for a, b in zip(y, ybar)]
    return keep, ybar


class TestConfig:
    def test_defaults(self):
        c = FredaConfig()
        assert (c.clusters, c.kmeans_size, c.comm_interval, c.alpha, c.sigma, c.lam) == (4, 512, 10, 0.1, 1.0, 0.5)
        assert c.resolved_h0(4) == pytest.approx(0.4 * math.log(4))

    @pytest.mark.parametrize(
        "kw,key",
        [({"clusters": 0}, "clusters"), ({"kmeans_size": 2}, "kmeans_size"), ({"comm_interval": 0}, "comm_interval"),
         ({"alpha": -1.0}, "alpha"), ({"lam": -0.1}, "lam"), ({"eps": 0.0}, "eps"), ({"eps": 1.5}, "eps"),
         ({"h0": 2.0}, "h0"), ({"h0": 0.0}, "h0"), ({"sigma": 0.0}, "sigma")],
    )
    def test_violations_name_key(self, kw, key):
        with pytest.raises(ConfigError) as err:
            FredaConfig(**kw).validate(4)
        assert err.value.key == key and key in str(err.value)

    def test_disable_fd_forces_one_cluster(self):
        assert FredaConfig(clusters=8, disable_fd=True).effective_clusters == 1


class TestSelection:
    def test_binary_entropy_example(self):
        import mpmath

        mpmath.mp.dps = 40
        h = -(mpmath.mpf("0.9") * mpmath.log("0.9") + mpmath.mpf("0.1") * mpmath.log("0.1"))
        assert float(h) == pytest.approx(0.3251, abs=5e-5)
        h0 = 0.4 * math.log(2)
        assert h0 == pytest.approx(0.2773, abs=5e-5) and float(h) > h0
        keep, _ = select_samples(np.array([[0.9, 0.1]]), np.array([0.1, 0.9]), h0, 1.0)
        assert not keep[0]

    def test_eps_one_reduces_to_entropy_test(self):
        probs = np.array([[0.99, 0.01], [0.6, 0.4], [0.02, 0.98]])
        keep, _ = select_samples(probs, np.array([0.0, 1.0]), 0.2773, 1.0)
        assert keep.tolist() == [True, False, True]

    def test_self_similarity_rejected(self):
        y = np.array([0.97, 0.01, 0.01, 0.01])
        for eps in (0.05, 0.5, 0.999):
            keep, ybar = select_samples(y[None], y.copy(), 1.0, eps)
            assert not keep[0] and np.array_equal(ybar, y)

    def test_matches_sequential_oracle(self):
        g = np.random.default_rng(0)
        logits = 4 * g.normal(size=(200, 4))
        probs = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
        ybar = np.full(4, 0.25)
        keep, out = select_samples(probs, ybar, 0.4 * math.log(4), 0.6)
        ref_keep, ref_bar = select_oracle(probs, ybar, 0.4 * math.log(4), 0.6)
        assert keep.tolist() == ref_keep
        assert np.allclose(out, ref_bar, atol=1e-14)
        assert out.sum() == pytest.approx(1.0, abs=1e-12) and 0 < keep.sum() < 200

    def test_literal_cosine_is_restrictive_on_simplex(self):
        # nonnegative vectors have cos >= 0, and vs the uniform start cos >= 1/sqrt(C)
        one_hot = np.eye(4)
        keep, _ = select_samples(one_hot, np.full(4, 0.25), 0.9, 0.05)
        assert not keep.any()
        keep, _ = select_samples(one_hot, np.full(4, 0.25), 0.9, 0.05, centered=True)
        assert keep[0]


class TestAggregation:
    @staticmethod
    def _adapter(ck, k):
        return FredaAdapter(ck, FredaConfig(clusters=k), rng=Rng(0))

    def test_two_branch_example(self, std_checkpoint):
        a = self._adapter(std_checkpoint, 2)
        for b, val, n in zip(a.branches, (2.0, 4.0), (1, 3)):
            b.params = {k: torch.full_like(v, val) for k, v in b.params.items()}
            b.seen = n
        assert a.aggregate()
        for b in a.branches:
            assert all(torch.all(v == 3.5) for v in b.params.values())
            assert b.seen == 0

    def test_identical_branches_noop(self, std_checkpoint):
        a = self._adapter(std_checkpoint, 3)
        for i, b in enumerate(a.branches):
            b.seen = i + 1
        a.aggregate()
        for b in a.branches:
            assert all(torch.allclose(b.params[n], a.params[n], rtol=0, atol=1e-6) for n in a.params)

    def test_conservation_bounds(self, std_checkpoint):
        a = self._adapter(std_checkpoint, 3)
        g = torch.Generator().manual_seed(0)
        for i, b in enumerate(a.branches):
            b.params = {k: v + torch.randn(v.shape, generator=g) for k, v in b.params.items()}
            b.seen = [5, 1, 7][i]
        before = [dict(b.params) for b in a.branches]
        a.aggregate()
        for n in a.params:
            stack = torch.stack([p[n] for p in before])
            base = a.branches[0].params[n]
            assert torch.all(base >= stack.min(0).values - 1e-6) and torch.all(base <= stack.max(0).values + 1e-6)

    def test_zero_counts_skip(self, std_checkpoint):
        a = self._adapter(std_checkpoint, 2)
        assert not a.aggregate()

    def test_interval_longer_than_stream(self, std_checkpoint, std_data):
        cfg = FredaConfig(clusters=2, comm_interval=1000)
        a = FredaAdapter(std_checkpoint, cfg, rng=Rng(0))
        rep = run(a, stream(std_data, 640), 64)
        assert a.aggregations == 0 and rep.n_samples == 640
        diff = max(float(torch.max(torch.abs(a.branches[0].params[n] - a.branches[1].params[n])))
                   for n in M.bn_affine_names())
        assert diff > 0

    def test_fires_every_f_steps(self, std_checkpoint, std_data):
        a = FredaAdapter(std_checkpoint, FredaConfig(clusters=2, comm_interval=3), rng=Rng(0))
        fired = [a.step(images_of(c)).info["aggregated"] for c in batch(stream(std_data, 64 * 7), 64)]
        assert fired == [False, False, True, False, False, True, False]


class TestStep:
    def test_degenerates_to_tent(self, std_checkpoint, std_data):
        cfg = FredaConfig(clusters=1, disable_fa=True, disable_selection=True, comm_interval=1, lr=0.01)
        fr = FredaAdapter(std_checkpoint, cfg, rng=Rng(0))
        te = TentAdapter(std_checkpoint, lr=0.01)
        for chunk in batch(stream(std_data, 300), 64):  # includes a partial last batch
            x = images_of(chunk)
            assert np.array_equal(fr.step(x).probs, te.step(x).probs)

    def test_empty_cluster_keeps_params(self, std_checkpoint, std_data):
        a = FredaAdapter(std_checkpoint, FredaConfig(clusters=2), rng=Rng(0))
        a.cluster = lambda images: np.zeros(len(images), dtype=np.int64)
        before = dict(a.branches[1].params)
        out = a.step(images_of(stream(std_data, 32)))
        assert len(out) == 32 and a.branches[1].pool is None
        assert all(a.branches[1].params[n] is before[n] for n in before)
        assert 1 not in out.info["losses"]

    def test_branch_order_irrelevant(self, std_checkpoint, std_data):
        chunks = [images_of(c) for c in batch(stream(std_data, 64 * 3), 64)]
        a = FredaAdapter(std_checkpoint, FredaConfig(clusters=3), rng=Rng(1))
        b = FredaAdapter(std_checkpoint, FredaConfig(clusters=3), rng=Rng(1))
        for x in chunks:
            a.step(x)
            labels = b.cluster(x)
            b.t += 1
            for k in reversed(range(3)):
                idx = np.flatnonzero(labels == k)
                if len(idx):
                    b._branch_step(b.branches[k], x[idx], capacity=len(x))
        for ba, bb in zip(a.branches, b.branches):
            assert all(torch.equal(ba.params[n], bb.params[n]) for n in ba.params)

    def test_memory_bounds_and_outputs(self, std_checkpoint, std_data):
        a = FredaAdapter(std_checkpoint, FredaConfig(clusters=4, kmeans_size=100), rng=Rng(0))
        for chunk in batch(stream(std_data, 64 * 4), 64):
            out = a.step(images_of(chunk))
            assert len(out) == 64 and out.clusters.shape == (64,)
            assert np.allclose(out.probs.sum(1), 1, atol=1e-5)
        assert len(a.repo) == 100
        assert all(b.pool is None or len(b.pool) <= 64 for b in a.branches)
        assert all(abs(b.ybar.sum() - 1) < 1e-6 for b in a.branches)  # f32 softmax rows

    def test_order_restoration(self, std_checkpoint, std_data):
        x = images_of(stream(std_data, 64, seed=4))
        perm = np.random.default_rng(0).permutation(64)
        cfg = FredaConfig(clusters=2, disable_fa=True)
        a = FredaAdapter(std_checkpoint, cfg, rng=Rng(0)).step(x)
        b = FredaAdapter(std_checkpoint, cfg, rng=Rng(0)).step(x[perm])
        inv = np.argsort(perm)
        if len(set(zip(a.clusters.tolist(), b.clusters[inv].tolist()))) == 2:
            assert np.array_equal(a.labels, b.labels[inv])

    def test_batch_size_one(self, std_checkpoint, std_data):
        a = FredaAdapter(std_checkpoint, FredaConfig(clusters=2), rng=Rng(0))
        rep = run(a, stream(std_data, 12), 1)
        assert rep.n_samples == 12 and len(a.repo) == 12
        assert all(b.pool is None or len(b.pool) <= 1 for b in a.branches)

    def test_deterministic(self, std_checkpoint, std_data):
        ev = stream(std_data, 64 * 3)
        r1 = run(FredaAdapter(std_checkpoint, FredaConfig(), rng=Rng(2)), ev, 64)
        r2 = run(FredaAdapter(std_checkpoint, FredaConfig(), rng=Rng(2)), ev, 64)
        assert r1.samples == r2.samples

    def test_non_finite_loss_rolls_back(self, std_checkpoint, std_data):
        a = FredaAdapter(std_checkpoint, FredaConfig(clusters=1, disable_fa=True), rng=Rng(0))
        before = dict(a.branches[0].params)
        bad = images_of(stream(std_data, 8)).copy()
        bad[0, 0, 0, 0] = np.nan
        loss = a.local_train(a.branches[0], bad)
        assert math.isnan(loss) and all(a.branches[0].params[n] is before[n] for n in before)

    def test_lambda_zero_matches_no_fa(self, std_checkpoint, std_data):
        x = images_of(stream(std_data, 32))
        a = FredaAdapter(std_checkpoint, FredaConfig(clusters=1, lam=0.0), rng=Rng(0))
        b = FredaAdapter(std_checkpoint, FredaConfig(clusters=1, disable_fa=True), rng=Rng(0))
        a.local_train(a.branches[0], x)
        b.local_train(b.branches[0], x)
        assert all(torch.equal(a.branches[0].params[n], b.branches[0].params[n]) for n in a.params)

    def test_stationary_entropy_decreases(self, std_checkpoint, std_data):
        # measured on a fixed held-out batch so only the parameter updates vary
        spec = CorruptionSpec.parse("gaussian_noise")
        for seed in range(3):
            ev = stream(std_data, 64 * 51, seed, spec)
            hold = images_of(ev[-64:])
            a = FredaAdapter(std_checkpoint, FredaConfig(), rng=Rng(seed))

            def held_entropy():
                vals = []
                for b in a.branches:
                    p = probs_for(b.params, a.batch(hold)).double().numpy()
                    vals.append(-(p * np.log(np.clip(p, 1e-300, 1))).sum(1).mean())
                return float(np.mean(vals))

            h_start = held_entropy()
            for chunk in batch(ev[:64 * 50], 64):
                a.step(images_of(chunk))
            assert held_entropy() < h_start
