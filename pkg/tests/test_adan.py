"""Tests for the embedding network, attractor equations, PIT and beam separation."""

import itertools

import numpy as np
import pytest

from src.services import network
from src.services.adan import (EmbeddingModel, apply_masks, attractor_candidates, attractors,
                               forward_backward, in_set_similarity, masks, pit_loss, presegment,
                               residual_reference, select_attractor_set, separate_beam)
from src.services.baselines import irm_baseline, irm_masks
from src.services.dsp import StftConfig, istft, stft
from src.services.metrics import sdr
from src.services.network import ModelHyper
from src.utils.errors import DegenerateWeightError, ShapeError


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


class TestEquationOracles:
    def test_presegment(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            C, T, F, K = rng.integers(2, 4), rng.integers(1, 4), rng.integers(1, 4), rng.integers(2, 4)
            H, V = rng.standard_normal((C, K)), rng.standard_normal((T, F, K))
            W = presegment(H, V)
            for c, t, f in itertools.product(range(C), range(T), range(F)):
                scores = [np.exp(sum(H[j, k] * V[t, f, k] for k in range(K))) for j in range(C)]
                assert _rel(W[c, t, f], scores[c] / sum(scores)) <= 1e-9

    def test_attractors(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            C, T, F, K = 3, rng.integers(1, 4), rng.integers(1, 4), 2
            V = rng.standard_normal((T, F, K))
            W = rng.uniform(0.1, 1.0, (C, T, F))
            A = attractors(V, W)
            for c, k in itertools.product(range(C), range(K)):
                num = sum(W[c, t, f] * V[t, f, k] for t in range(T) for f in range(F))
                den = sum(W[c, t, f] for t in range(T) for f in range(F))
                assert _rel(A[c, k], num / den) <= 1e-9

    def test_masks(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            E, T, F, K = rng.integers(2, 4), 2, 3, rng.integers(2, 4)
            A, V = rng.standard_normal((E, K)), rng.standard_normal((T, F, K))
            M = masks(A, V).masks
            for e, t, f in itertools.product(range(E), range(T), range(F)):
                logits = [float(A[j] @ V[t, f]) for j in range(E)]
                expected = np.exp(logits[e]) / sum(np.exp(x) for x in logits)
                assert _rel(M[e, t, f], expected) <= 1e-9
            np.testing.assert_allclose(M.sum(axis=0), 1.0)

    def test_in_set_selection(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            N, E, K = rng.integers(3, 6), 2, 3
            anchors, V = rng.standard_normal((N, K)), rng.standard_normal((3, 4, K))
            candidates = attractor_candidates(anchors, V, E)
            index, A = select_attractor_set(candidates)
            best, best_sim = None, np.inf
            for p, combo in enumerate(itertools.combinations(range(N), E)):
                W = presegment(anchors[list(combo)], V)
                Ap = attractors(V, W)
                sim = max(float(Ap[i] @ Ap[j]) for i, j in itertools.combinations(range(E), 2))
                if sim < best_sim:
                    best, best_sim = p, sim
            assert index == best
            assert candidates.combos[index] == tuple(itertools.combinations(range(N), E))[best]
            np.testing.assert_allclose(A, candidates.attractors[best])

    def test_pit_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            C = int(rng.integers(2, 4))
            G = int(rng.integers(1, C + 1)) if C < 3 else 2
            E = G + 1
            outputs = rng.uniform(0, 1, (E, 2, 3))
            refs = rng.uniform(0, 1, (C, 2, 3))
            mix = refs.sum(axis=0) + rng.uniform(0, 0.2, (2, 3))
            result = pit_loss(outputs, refs, mix, G)
            best, best_pairs = np.inf, None
            for order in itertools.permutations(range(E)):
                for chosen in itertools.permutations(range(C), G):
                    residual = np.maximum(mix - refs[list(chosen)].sum(axis=0), 0.0)
                    total = sum(np.sum((outputs[order[i]] - refs[chosen[i]]) ** 2) for i in range(G))
                    total += np.sum((outputs[order[G]] - residual) ** 2)
                    if total < best:
                        best = total
                        best_pairs = {(order[i], chosen[i]) for i in range(G)}
            assert _rel(result.loss, best) <= 1e-9
            assert set(result.pairs) == best_pairs

    def test_residual_reference_is_floored(self):
        mix = np.array([[1.0, 0.5]])
        refs = np.array([[[0.4, 0.7]]])
        np.testing.assert_allclose(residual_reference(mix, refs), [[0.6, 0.0]])


class TestEquationErrors:
    def test_zero_weights(self):
        with pytest.raises(DegenerateWeightError):
            attractors(np.ones((2, 2, 3)), np.zeros((2, 2, 2)))

    def test_too_few_anchors(self):
        with pytest.raises(ShapeError, match="anchors"):
            attractor_candidates(np.ones((2, 3)), np.ones((2, 2, 3)), 3)

    def test_pit_output_count(self):
        with pytest.raises(ShapeError, match="G \\+ 1"):
            pit_loss(np.ones((2, 1, 1)), np.ones((2, 1, 1)), np.ones((1, 1)), 2)

    def test_single_attractor_similarity(self):
        assert in_set_similarity(np.ones((1, 3))) == -np.inf


def _numeric_gradient(model, name, loss_fn, eps=1e-6):
    tensor = model.tensors()[name]
    grad = np.zeros_like(tensor)
    for idx in np.ndindex(tensor.shape):
        old = tensor[idx]
        tensor[idx] = old + eps
        plus = loss_fn()
        tensor[idx] = old - eps
        minus = loss_fn()
        tensor[idx] = old
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


class TestGradients:
    @pytest.mark.parametrize("recurrent", [True, False])
    def test_matches_finite_differences(self, recurrent):
        rng = np.random.default_rng(5)
        T, F = 4, 5
        hyper = ModelHyper(num_freq=F, embedding_dim=3, num_anchors=3, hidden=4, layers=2, recurrent=recurrent)
        model = EmbeddingModel.create(hyper, seed=11)
        features = rng.standard_normal((T, F))
        beam = rng.uniform(0.2, 1.0, (T, F))
        refs = rng.uniform(0.0, 0.6, (2, T, F))

        def loss_fn():
            return forward_backward(model, features, beam, refs, salient=2, compute_grads=False).loss

        analytic = forward_backward(model, features, beam, refs, salient=2).grads
        assert set(analytic) == set(model.tensors())
        for name in model.tensors():
            numeric = _numeric_gradient(model, name, loss_fn)
            err = np.linalg.norm(analytic[name] - numeric) / max(
                np.linalg.norm(analytic[name]) + np.linalg.norm(numeric), 1e-12)
            assert err <= 1e-4, name

    def test_network_shapes(self):
        hyper = ModelHyper(num_freq=6, embedding_dim=4, hidden=5, layers=2)
        params = network.init_params(hyper, np.random.default_rng(0))
        V, _ = network.forward(params, hyper, np.zeros((7, 6)))
        assert V.shape == (7, 6, 4)
        assert np.all(np.abs(V) < 1.0)

    def test_network_rejects_wrong_width(self):
        hyper = ModelHyper(num_freq=6)
        params = network.init_params(hyper, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            network.forward(params, hyper, np.zeros((3, 5)))


class TestSeparateBeam:
    def _model(self, num_freq):
        return EmbeddingModel.create(ModelHyper(num_freq=num_freq, embedding_dim=4, num_anchors=4,
                                                hidden=6, layers=1), seed=0)

    def test_outputs_partition_the_beam(self):
        cfg = StftConfig(64, 16)
        spec = stft(np.random.default_rng(0).standard_normal(1600), cfg)
        sep = separate_beam(self._model(cfg.num_bins), spec, num_speakers=2)
        assert sep.num_outputs == 3
        np.testing.assert_allclose(sep.masks.sum(axis=0), 1.0)
        np.testing.assert_allclose(sep.magnitudes.sum(axis=0), spec.magnitude)
        np.testing.assert_allclose(np.sum(sep.waveforms, axis=0), istft(spec), atol=1e-10)

    def test_single_speaker_uses_two_outputs(self):
        cfg = StftConfig(64, 16)
        spec = stft(np.random.default_rng(1).standard_normal(800), cfg)
        assert separate_beam(self._model(cfg.num_bins), spec, num_speakers=1).num_outputs == 2

    def test_four_speakers_keep_two_salient(self):
        cfg = StftConfig(64, 16)
        spec = stft(np.random.default_rng(2).standard_normal(800), cfg)
        assert separate_beam(self._model(cfg.num_bins), spec, num_speakers=4).num_outputs == 3

    def test_apply_masks_uses_beam_phase(self):
        cfg = StftConfig(64, 16)
        spec = stft(np.random.default_rng(3).standard_normal(800), cfg)
        half = np.full((2,) + spec.bins.shape, 0.5)
        sep = apply_masks(spec, half)
        np.testing.assert_allclose(sep.spectrograms[0].bins, 0.5 * spec.bins)

    def test_ratio_masks_reproduce_irm_baseline(self):
        cfg = StftConfig(64, 16)
        rng = np.random.default_rng(7)
        sources = [rng.standard_normal(2400), np.sin(2 * np.pi * 700 * np.arange(2400) / 8000.0)]
        mix = stft(sources[0] + sources[1], cfg)
        ref_specs = [stft(s, cfg) for s in sources]
        masks = irm_masks(np.stack([r.magnitude for r in ref_specs]))
        sep = apply_masks(mix, masks)
        irm = irm_baseline(mix, ref_specs)
        inner = slice(cfg.frame_len, 2400 - cfg.frame_len)
        for c, ref in enumerate(sources):
            ours = sdr(sep.waveforms[c][inner], ref[inner])
            baseline = sdr(irm.waveforms[c][inner], ref[inner])
            assert abs(ours - baseline) <= 0.1

    def test_attractor_masks_reproduce_irm_baseline(self):
        # one embedding axis per source holding its log ratio mask; unit attractors pick the axes
        cfg = StftConfig(64, 16)
        rng = np.random.default_rng(8)
        sources = [rng.standard_normal(2400), np.sin(2 * np.pi * 700 * np.arange(2400) / 8000.0)]
        mix = stft(sources[0] + sources[1], cfg)
        ref_specs = [stft(s, cfg) for s in sources]
        irm = irm_masks(np.stack([r.magnitude for r in ref_specs]))
        V = np.moveaxis(np.log(np.maximum(irm, 1e-12)), 0, -1)
        mask_set = masks(np.eye(2), V)
        np.testing.assert_allclose(mask_set.masks, irm, atol=1e-9)
        sep = apply_masks(mix, mask_set.masks)
        irm_out = irm_baseline(mix, ref_specs)
        inner = slice(cfg.frame_len, 2400 - cfg.frame_len)
        for c, ref in enumerate(sources):
            assert abs(sdr(sep.waveforms[c][inner], ref[inner]) - sdr(irm_out.waveforms[c][inner], ref[inner])) <= 0.1

    def test_forward_reports_choices(self):
        rng = np.random.default_rng(6)
        model = EmbeddingModel.create(ModelHyper(num_freq=5, embedding_dim=3, num_anchors=4, hidden=3,
                                                 layers=1), seed=2)
        result = forward_backward(model, rng.standard_normal((3, 5)), rng.uniform(0, 1, (3, 5)),
                                  rng.uniform(0, 0.5, (2, 3, 5)), salient=2, compute_grads=False)
        assert result.grads is None
        assert len(result.anchor_set) == 3
        assert result.masks.shape == (3, 3, 5)
        assert result.loss == pytest.approx(result.pit.loss / 15)
