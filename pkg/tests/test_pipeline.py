import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import runs
from samix import engine as E
from samix import pipeline as P
from samix.clustering import ClusterState, cluster_update, init_clusters
from samix.data import stack, synth_shapes, two_view_batch
from samix.encoder import EncoderConfig
from samix.engine import ContractError
from samix.mixer import MixerConfig
from samix.pipeline import (
    ConfigurationError,
    PipelineConfig,
    QueueColdError,
    freeze_mixer,
    init_state,
    pair_permutation,
    parse_metrics_line,
    train_pretrained,
    train_step_baseline,
    train_step_sl,
    train_step_ssl,
    warmup_queue,
)

SMALL_ENC = EncoderConfig(channels=(4, 6, 8, 8), proj_hidden=8, proj_dim=8, num_classes=4)
SMALL_MIX = MixerConfig(channels=8)


def _data(n=64, seed=0):
    return stack(synth_shapes(n, 4, size=16, seed=seed))


def _state(cfg=None, seed=0, variant=None, n=0):
    cfg = cfg or PipelineConfig(total_steps=50)
    return init_state(SMALL_ENC, SMALL_MIX, cfg, seed, ssl_variant=variant, n_samples=n), cfg


def _snapshot(enc):
    return {k: v.copy() for k, v in enc.state().items()}


class TestInit:
    def test_momentum_equals_online_bit_exact(self):
        state, _ = _state()
        on, mo = state.online.state(), state.momentum.state()
        assert on.keys() == mo.keys()
        assert all(np.array_equal(on[k], mo[k]) for k in on)
        assert all(not p.requires_grad for p in state.momentum.params.values())
        # separate storage, not aliases
        assert all(on[k] is not mo[k] for k in on)

    def test_bad_policy(self):
        with pytest.raises(ContractError):
            PipelineConfig(mix_policy="manifold")

    def test_bad_momentum(self):
        with pytest.raises(ContractError):
            PipelineConfig(m=1.5)


class TestSupervisedStep:
    def test_ema_identity_every_step(self):
        state, cfg = _state(PipelineConfig(m=0.9, total_steps=10))
        x, y = _data(16)
        for _ in range(5):
            old = _snapshot(state.momentum)
            train_step_sl(x, y, state, cfg)
            new_online = state.online.state()
            for k, v in state.momentum.state().items():
                want = 0.9 * old[k] + 0.1 * new_online[k]
                assert np.abs(v - want).max() <= 1e-12, k

    def test_stop_gradient_separation(self):
        state, cfg = _state()
        x, y = _data(16)
        for _ in range(5):
            met = train_step_sl(x, y, state, cfg, check=True)
            assert met.extras["mixer_grads_clear"] and met.extras["online_grads_clear"]
            assert all(p.grad is None for p in state.momentum.params.values())

    def test_mixer_and_online_both_move(self):
        state, cfg = _state()
        x, y = _data(16)
        mixer0 = {k: v.copy() for k, v in state.mixer.state().items()}
        online0 = _snapshot(state.online)
        for _ in range(3):
            train_step_sl(x, y, state, cfg)
        assert any(not np.array_equal(mixer0[k], v) for k, v in state.mixer.state().items())
        assert any(not np.array_equal(online0[k], v) for k, v in state.online.state().items())
        assert 0.0 <= state.mixer.gamma.data[0] <= 1.0

    def test_deterministic_traces(self):
        x, y = _data(32)
        lines = []
        for _ in range(2):
            state, cfg = _state(seed=3)
            lines.append([train_step_sl(x[i : i + 16], y[i : i + 16], state, cfg).line() for i in (0, 16, 0)])
        assert lines[0] == lines[1]

    def test_metrics_line_round_trip(self):
        state, cfg = _state()
        x, y = _data(16)
        met = train_step_sl(x, y, state, cfg)
        line = met.line()
        assert line.split()[0] == "step=1"
        assert list(parse_metrics_line(line)) == ["step", "loss_cls", "loss_gen", "loss_mask", "mask_mean", "mask_var", "beta"]

    @pytest.mark.parametrize("policy", ["mixup", "cutmix", "none"])
    def test_baselines_keep_mixer_idle(self, policy):
        state, cfg = _state(PipelineConfig(mix_policy=policy, total_steps=10))
        x, y = _data(16)
        mixer0 = {k: v.copy() for k, v in state.mixer.state().items()}
        old = _snapshot(state.momentum)
        met = train_step_sl(x, y, state, cfg)
        assert np.isfinite(met.loss_cls)
        assert all(np.array_equal(mixer0[k], v) for k, v in state.mixer.state().items())
        assert any(not np.array_equal(old[k], v) for k, v in state.momentum.state().items())

    @pytest.mark.slow
    def test_mixup_ce_decreases_over_200_steps(self):
        x, y = runs.synth(2000)
        cfg = PipelineConfig(total_steps=200)
        state = runs.sl_state(cfg, seed=0)
        hist = []
        while len(hist) < 200:
            for idx in P.iterate_batches(len(x), runs.BATCH, state.rng):
                hist.append(train_step_sl(x[idx], y[idx], state, cfg).loss_cls)
                if len(hist) == 200:
                    break
        start, end = np.mean(hist[:10]), np.mean(hist[-10:])
        assert end <= 0.7 * start, (start, end)


class TestPretrained:
    def test_requires_frozen_mixer(self):
        state, cfg = _state()
        x, y = _data(16)
        with pytest.raises(ConfigurationError):
            train_pretrained(x, y, state, cfg)

    def test_mixer_unchanged_over_100_steps(self):
        state, cfg = _state(PipelineConfig(total_steps=100))
        freeze_mixer(state)
        phi = {k: v.copy() for k, v in state.mixer.state().items()}
        x, y = _data(64)
        online0 = _snapshot(state.online)
        for s in range(100):
            i = (s % 4) * 16
            train_pretrained(x[i : i + 16], y[i : i + 16], state, cfg)
            assert all(p.grad is None for p in state.mixer.params.values())
        assert all(np.array_equal(phi[k], v) for k, v in state.mixer.state().items())
        assert any(not np.array_equal(online0[k], v) for k, v in state.online.state().items())

    def test_masks_are_lambda_exact(self, monkeypatch):
        captured = []
        real = P.lambda_adjust

        def spy(mask):
            out = real(mask)
            captured.append(out)
            return out

        monkeypatch.setattr(P, "lambda_adjust", spy)
        state, cfg = _state()
        freeze_mixer(state)
        x, y = _data(16)
        train_pretrained(x, y, state, cfg)
        (mask,) = captured
        s = mask.s_i.data
        assert s.min() >= 0.0 and s.max() <= 1.0
        assert np.array_equal(mask.s_j.data, 1.0 - s)
        assert np.abs(mask.means() - mask.lam).max() < 1e-9


def _ssl_state(variant="I", k=32, n=64, eta=0.5, seed=0):
    cfg = PipelineConfig(queue_len=k, total_steps=20, eta=eta, clusters=3, lr=0.03)
    return init_state(SMALL_ENC, SMALL_MIX, cfg, seed, ssl_variant=variant, n_samples=n), cfg


def _views(state, x, idx):
    return two_view_batch(x[idx], state.rng)


class TestSelfSupervised:
    def test_cold_queue(self):
        state, cfg = _ssl_state()
        x, _ = _data(16)
        with pytest.raises(QueueColdError, match="warmup"):
            train_step_ssl(x, x, np.arange(16), state, cfg)

    def test_queue_length_stays_at_capacity(self):
        state, cfg = _ssl_state(k=24)
        x, _ = _data(64)
        warmup_queue(state, x, 8)
        assert len(state.queue) >= 6
        lengths = []
        for s in range(6):
            idx = np.arange(8) + 8 * s
            xq, xk = _views(state, x, idx)
            train_step_ssl(xq, xk, idx, state, cfg)
            lengths.append(len(state.queue))
        assert lengths[-3:] == [24, 24, 24]
        keys = state.queue.snapshot()[0]
        np.testing.assert_allclose(np.linalg.norm(keys, axis=1), 1.0, atol=1e-6)

    def test_eta_zero_gives_instance_bce(self, monkeypatch):
        seen = []
        real = P.bce_instance

        def spy(*a, **kw):
            out = real(*a, **kw)
            seen.append(out.item())
            return out

        monkeypatch.setattr(P, "bce_instance", spy)
        state, cfg = _ssl_state(eta=0.0)
        x, _ = _data(32)
        warmup_queue(state, x, 8)
        idx = np.arange(8)
        met = train_step_ssl(*_views(state, x, idx), idx, state, cfg)
        assert met.loss_gen == seen[-1]

    @pytest.mark.parametrize("variant", ["I", "C"])
    def test_stop_gradient_and_ema(self, variant):
        state, cfg = _ssl_state(variant)
        x, _ = _data(64)
        warmup_queue(state, x, 8)
        for s in range(3):
            idx = np.arange(8) + 8 * s
            old = _snapshot(state.momentum)
            met = train_step_ssl(*_views(state, x, idx), idx, state, cfg, variant, check=True)
            assert met.extras["mixer_grads_clear"] and met.extras["online_grads_clear"]
            new = state.online.state()
            for k, v in state.momentum.state().items():
                assert np.abs(v - (cfg.m * old[k] + (1 - cfg.m) * new[k])).max() <= 1e-12

    def test_cluster_head_is_outside_online_optimiser(self):
        state, cfg = _ssl_state("C")
        head = {id(p) for p in state.cluster_head.params.values()}
        assert not head & {id(p) for p in state.opt_online.params}
        assert head <= {id(p) for p in state.opt_mixer.params}

    def test_cluster_head_moves_online_does_not_see_it(self, monkeypatch):
        # zero the head's contribution and the online update must not change
        x, _ = _data(64)
        idx = np.arange(8)
        finals = []
        for scale in (1.0, 0.0):
            state, cfg = _ssl_state("C", seed=2)
            warmup_queue(state, x, 8)
            for p in state.cluster_head.params.values():
                p.data *= scale
            train_step_ssl(*_views(state, x, idx), idx, state, cfg, "C")
            finals.append(_snapshot(state.online))
        assert all(np.array_equal(finals[0][k], finals[1][k]) for k in finals[0])

    def test_variant_c_needs_head(self):
        state, cfg = _ssl_state("I")
        x, _ = _data(32)
        warmup_queue(state, x, 8)
        with pytest.raises(ConfigurationError):
            train_step_ssl(x[:8], x[:8], np.arange(8), state, cfg, "C")

    def test_pseudo_labels_fill_queue_labels(self):
        state, cfg = _ssl_state("C")
        x, _ = _data(64)
        warmup_queue(state, x, 8)
        idx = np.arange(8)
        train_step_ssl(*_views(state, x, idx), idx, state, cfg, "C")
        labels = state.queue.snapshot()[1]
        assert labels.min() >= 0 and labels.max() < 3
        np.testing.assert_allclose(np.linalg.norm(state.clusters.centroids, axis=1), 1.0, atol=1e-12)

    @pytest.mark.slow
    def test_probe_beats_random_encoder(self):
        run = runs.ssl_run()
        assert run["probe"] >= run["random_probe"] + 0.10, (run["probe"], run["random_probe"])


def _spherical_cost(emb, labels):
    cost = 0.0
    for c in np.unique(labels):
        members = emb[labels == c]
        centre = members.sum(axis=0)
        centre /= np.linalg.norm(centre)
        cost += (1.0 - members @ centre).sum()
    return cost


class TestClustering:
    def test_two_clouds_match_brute_force(self):
        rng = np.random.default_rng(0)
        axes = np.eye(6)[:2]
        emb = np.concatenate([axes[0] + 0.1 * rng.standard_normal((6, 6)), axes[1] + 0.1 * rng.standard_normal((6, 6))])
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        best = min(
            (np.array(bits) for bits in itertools.product((0, 1), repeat=len(emb)) if 0 < sum(bits) < len(emb)),
            key=lambda lab: _spherical_cost(emb, lab),
        )
        state = init_clusters(emb, 2, len(emb), np.random.default_rng(1))
        for _ in range(20):
            got = cluster_update(emb, state, np.arange(len(emb)))
        assert np.array_equal(got, best) or np.array_equal(got, 1 - best)

    def test_single_point_fixed_point(self):
        p = np.array([[0.6, 0.8, 0.0]])
        state = ClusterState(np.array([[0.0, 0.0, 1.0]]), np.full(1, -1))
        for _ in range(3000):
            cluster_update(p, state)
        np.testing.assert_allclose(state.centroids[0], p[0], atol=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 6))
    def test_no_empty_clusters(self, seed, k):
        rng = np.random.default_rng(seed)
        n = 4 * k
        emb = rng.standard_normal((n, 5))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        # seed from a tight clump so most centroids start far from the data
        clump = emb[:1] + 1e-3 * rng.standard_normal((k, 5))
        state = init_clusters(clump, k, n, rng)
        for start in range(0, n, k):
            cluster_update(emb[start : start + k], state, np.arange(start, start + k), rng)
        assert np.all(np.bincount(state.assignments, minlength=k) > 0)
        np.testing.assert_allclose(np.linalg.norm(state.centroids, axis=1), 1.0, atol=1e-12)


class TestPairs:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 300), st.integers(0, 2**32 - 1))
    def test_permutation_without_fixed_points(self, n, seed):
        perm = pair_permutation(n, np.random.default_rng(seed))
        assert sorted(perm) == list(range(n))
        assert not np.any(perm == np.arange(n))

    def test_too_small(self):
        with pytest.raises(ContractError):
            pair_permutation(1, np.random.default_rng(0))


def test_baseline_step_direct():
    state, cfg = _state(PipelineConfig(mix_policy="mixup", total_steps=5))
    x, y = _data(16)
    met = train_step_baseline(x, y, state, cfg)
    assert met.step == 1 and met.mask_var < 1e-20  # constant mask
    assert E.grad_enabled()
