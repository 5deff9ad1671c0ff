"""Euler ODE solver and the audio-to-audio generation pipeline."""

import numpy as np
import pytest

from flowsr.audio import AudioSignal
from flowsr.flowpath import (FlowPathConfig, conditional_vector_field,
                             target_vector_field)
from flowsr.sampler import (FieldDivergenceError, SolverConfig, SolverMethod,
                            euler_solve, generate, sample_features)
from flowsr.masking import ConditionInput
from flowsr.spectral import CompressionParams, FeatureGrid, StftParams
from flowsr.tasks import TaskKind
from flowsr.vectorfield import ModelConfig, init_parameters, segment_shapes

CFG = FlowPathConfig(sigma_min=1e-4)

TINY = ModelConfig(num_layers=2, model_dim=16, num_heads=2,
                   feature_channels=8, time_embed_dim=16, feedforward_dim=32)


def tiny_model(seed=0, randomize=False, scale=0.05):
    model = init_parameters(TINY, np.random.default_rng(seed))
    if randomize:
        rng = np.random.default_rng(seed + 1)
        for name, shape in segment_shapes(TINY).items():
            model.params[name] = scale * rng.standard_normal(shape)
    return model


def test_solver_config_validation():
    assert SolverConfig(0.2).num_steps == 5
    assert SolverConfig(1.0).num_steps == 1
    assert SolverConfig(0.05).num_steps == 20
    for bad in (0.0, -0.1, 1.5, 0.3):  # 1/0.3 is not an integer
        with pytest.raises(ValueError):
            SolverConfig(bad)


def test_solver_method_enum():
    assert SolverConfig(0.2).method is SolverMethod.EULER
    assert SolverConfig(0.2, method="euler").method is SolverMethod.EULER
    with pytest.raises(ValueError):
        SolverConfig(0.2, method="rk4")


def test_zero_field_returns_start():
    x0 = np.random.default_rng(0).standard_normal((4, 7))
    out, evals = euler_solve(lambda x, t: np.zeros_like(x), x0, SolverConfig(0.2))
    assert evals == 5
    assert np.array_equal(out, x0)


def test_evaluation_count_and_times():
    seen = []

    def field(x, t):
        seen.append(t)
        return np.zeros_like(x)

    euler_solve(field, np.zeros(3), SolverConfig(0.1))
    assert len(seen) == 10
    assert seen == pytest.approx([k / 10 for k in range(10)])
    assert max(seen) < 1.0  # the field is never evaluated at t=1


def test_exact_on_constant_target_field():
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal((8, 20))
    x1 = rng.standard_normal((8, 20))
    v = target_vector_field(x0, x1, CFG)
    out, evals = euler_solve(lambda x, t: v, x0, SolverConfig(0.2))
    assert evals == 5
    assert np.max(np.abs(out - (x1 + CFG.sigma_min * x0))) < 1e-10


def test_exact_on_conditional_field():
    """The per-sample field is affine in x with coefficients that telescope;
    fixed-step Euler lands on the path endpoint exactly."""
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal(50)
    x1 = rng.standard_normal(50)
    expected = x1 + CFG.sigma_min * x0
    for dt in (0.2, 0.1, 0.05):
        out, _ = euler_solve(
            lambda x, t: conditional_vector_field(x, x1, t, CFG),
            x0, SolverConfig(dt))
        assert np.max(np.abs(out - expected)) < 1e-10


def test_first_order_convergence_on_curved_field():
    """exp(sin t) flow: halving the step roughly halves the endpoint error."""
    x0 = np.full(4, 2.0)
    exact = x0 * np.exp(np.sin(1.0))
    errors = []
    for dt in (0.2, 0.1, 0.05):
        out, _ = euler_solve(lambda x, t: np.cos(t) * x, x0, SolverConfig(dt))
        errors.append(np.max(np.abs(out - exact)))
    assert errors[1] < 0.6 * errors[0]
    assert errors[2] < 0.6 * errors[1]


def test_divergence_diagnostics():
    def exploding(x, t):
        return np.full_like(x, np.inf) if t > 0.3 else np.zeros_like(x)

    with pytest.raises(FieldDivergenceError) as err:
        euler_solve(exploding, np.zeros(3), SolverConfig(0.2))
    assert "step 2" in str(err.value)

    def nan_field(x, t):
        v = np.ones_like(x)
        v[0] = np.nan
        return v

    with pytest.raises(FieldDivergenceError):
        euler_solve(nan_field, np.zeros(3), SolverConfig(0.5))


def test_field_shape_mismatch():
    with pytest.raises(ValueError):
        euler_solve(lambda x, t: np.zeros(5), np.zeros(3), SolverConfig(0.5))


def test_sample_features_zero_model_returns_prior_draw():
    model = tiny_model(seed=3)  # fresh init predicts a zero field
    cond = ConditionInput(FeatureGrid(np.random.default_rng(4).standard_normal((8, 12))))
    out = sample_features(model, cond, np.random.default_rng(7), SolverConfig(0.2))
    expected = np.random.default_rng(7).standard_normal((8, 12))
    assert np.max(np.abs(out.values - expected)) < 1e-12


def test_sample_features_deterministic():
    model = tiny_model(seed=5, randomize=True)
    cond = ConditionInput(FeatureGrid(np.random.default_rng(6).standard_normal((8, 9))))
    a = sample_features(model, cond, np.random.default_rng(42), SolverConfig(0.2))
    b = sample_features(model, cond, np.random.default_rng(42), SolverConfig(0.2))
    assert np.array_equal(a.values, b.values)


def small_stft():
    return StftParams(window_size=6, hop_size=3)


def test_generate_length_and_determinism():
    params = small_stft()
    model_cfg = ModelConfig(num_layers=1, model_dim=8, num_heads=2,
                            feature_channels=2 * params.num_bins,
                            time_embed_dim=8, feedforward_dim=16)
    model = init_parameters(model_cfg, np.random.default_rng(8))
    comp = CompressionParams()
    for n in (50, 161, 320):
        degraded = AudioSignal(np.random.default_rng(9).uniform(-0.5, 0.5, n), 16000)
        out = generate(model, TaskKind.DENOISE, degraded, np.random.default_rng(1),
                       params, comp, SolverConfig(0.5))
        again = generate(model, TaskKind.DENOISE, degraded, np.random.default_rng(1),
                         params, comp, SolverConfig(0.5))
        assert len(out) == n
        assert out.sample_rate == 16000
        assert np.all(np.isfinite(out.samples))
        assert np.array_equal(out.samples, again.samples)


def test_generate_tse_trims_to_mixture_length():
    from flowsr.tasks import TsePromptSpec
    params = small_stft()
    model_cfg = ModelConfig(num_layers=1, model_dim=8, num_heads=2,
                            feature_channels=2 * params.num_bins,
                            time_embed_dim=8, feedforward_dim=16)
    model = init_parameters(model_cfg, np.random.default_rng(10))
    rng = np.random.default_rng(11)
    prompt = TsePromptSpec(prompt_seconds=0.01, sample_rate=16000)  # 160 samples
    mixture = AudioSignal(rng.uniform(-0.5, 0.5, 435), 16000)
    reference = AudioSignal(rng.uniform(-0.5, 0.5, 600), 16000)
    out = generate(model, TaskKind.TARGET_SPEAKER_EXTRACT, mixture,
                   np.random.default_rng(12), params, CompressionParams(),
                   SolverConfig(0.5), reference=reference, prompt=prompt)
    assert len(out) == 435

    with pytest.raises(ValueError):
        generate(model, TaskKind.TARGET_SPEAKER_EXTRACT, mixture,
                 np.random.default_rng(13), params, CompressionParams(),
                 SolverConfig(0.5))  # reference is required
