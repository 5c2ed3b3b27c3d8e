import math

import numpy as np
import pytest

from cthdiff import autodiff as ad
from cthdiff.autodiff import Tape, Tensor
from cthdiff.cohort import N_ROI, NormalizationStats
from cthdiff.denoiser import (ArchConfig, Baseline, ConditionError, ConditionRaw, DenoiserParams,
                              decode_condition, denoise, denoise_tensor, encode_condition, init_params,
                              param_shapes, parameter_count, precond, raw_forward, score)
from cthdiff.diffusion import loss_weight

from _helpers import numeric_grad, rel_error

TINY = ArchConfig(widths=(8, 8, 8), emb_dim=16, fourier_dim=8)


def stats():
    r = np.random.default_rng(0)
    return NormalizationStats(2.5 + 0.1 * r.standard_normal(N_ROI), 0.2 + 0.01 * r.random(N_ROI),
                              -0.02 * r.random(N_ROI), 0.05 + 0.01 * r.random(N_ROI), 73.0, 7.0)


def raw(**kw):
    base = dict(baseline_cth=np.full(N_ROI, 2.5), age=73.0, sex=1, diagnosis="MCI", delta_months=12.0)
    base.update(kw)
    return ConditionRaw(**base)


def random_model(arch=TINY, seed=0, dtype=np.float64, sigma_data=0.8) -> DenoiserParams:
    """Fully random parameters (including the output conv) so every path carries gradient."""
    r = np.random.default_rng(seed)
    params = {k: (0.5 * r.standard_normal(s) / math.sqrt(max(1, int(np.prod(s[1:]))))
                  + (1.0 if k.endswith(".g") else 0.0)).astype(dtype)
              for k, s in param_shapes(arch).items()}
    return DenoiserParams(arch, params, sigma_data)


# ---------------------------------------------------------------- conditions

def test_one_hot_channels():
    for dx, hot in (("CN", (1, 0, 0)), ("MCI", (0, 1, 0)), ("AD", (0, 0, 1))):
        c = encode_condition(raw(diagnosis=dx), stats())
        assert c.shape == (7, N_ROI)
        for ch, v in zip((3, 4, 5), hot):
            assert np.all(c[ch] == v)


def test_encoding_deterministic_and_broadcast():
    a = encode_condition(raw(), stats())
    b = encode_condition(raw(), stats())
    assert a.tobytes() == b.tobytes()
    assert np.all(a[1:] == a[1:, :1])


def test_mean_age_encodes_to_zero():
    s = stats()
    assert np.all(encode_condition(raw(age=s.age_mean), s)[1] == 0.0)


def test_decode_round_trip():
    s = stats()
    r = raw(age=80.0, sex=0, diagnosis="AD", delta_months=24.0)
    d = decode_condition(encode_condition(r, s))
    np.testing.assert_array_equal(d["levels"], (r.baseline_cth - s.level_mean) / s.level_std)
    assert d["age_z"] == (80.0 - s.age_mean) / s.age_std
    assert d["sex"] == 0.0 and d["diagnosis"] == "AD" and d["delta_scaled"] == 24.0 / 36.0


@pytest.mark.parametrize("field,value", [("age", 30.0), ("age", 101.0), ("sex", 2), ("diagnosis", "SMC"),
                                         ("delta_months", 0.0), ("delta_months", 121.0)])
def test_condition_validation_names_field(field, value):
    with pytest.raises(ConditionError, match=field.split("_")[0]):
        encode_condition(raw(**{field: value}), stats())


def test_condition_rejects_bad_thickness():
    with pytest.raises(ConditionError, match="baseline_cth"):
        encode_condition(raw(baseline_cth=np.full(N_ROI, 6.5)), stats())
    with pytest.raises(ConditionError, match="baseline_cth"):
        encode_condition(raw(baseline_cth=np.ones(10)), stats())


def test_baseline_at():
    b = Baseline(np.full(N_ROI, 2.0), 70.0, 0, "CN")
    r = b.at(6)
    assert r.delta_months == 6 and r.diagnosis == "CN"


# ---------------------------------------------------------------- network

def test_default_arch_lengths_and_widths():
    shapes = param_shapes(ArchConfig())
    assert shapes["in_conv.w"] == (32, 8, 3)
    assert shapes["enc2.conv2.w"] == (128, 128, 3)
    assert shapes["mid.attn.wq"] == (128, 128)


def test_zero_init_output_is_zero():
    arch = ArchConfig(widths=(8, 16, 32))
    model = DenoiserParams(arch, init_params(arch, np.random.default_rng(0)), 1.0)
    r = np.random.default_rng(1)
    out = raw_forward(model, r.standard_normal((5, 1, N_ROI)), r.standard_normal(5), r.standard_normal((5, 7, N_ROI)))
    assert out.shape == (5, 1, N_ROI) and np.all(out == 0)


def test_zero_init_denoiser_is_skip_path():
    arch = ArchConfig(widths=(8, 16, 32))
    model = DenoiserParams(arch, init_params(arch, np.random.default_rng(0)), 0.7)
    x = np.random.default_rng(2).standard_normal((1, N_ROI))
    for sigma in (0.01, 1.0, 30.0):
        c_skip = precond(sigma, 0.7)[0]
        np.testing.assert_allclose(denoise(model, x, sigma, np.zeros((7, N_ROI))), c_skip * x, rtol=1e-6)


def test_output_shape_single_item():
    model = random_model()
    out = raw_forward(model, np.zeros((1, N_ROI)), 0.0, np.zeros((7, N_ROI)))
    assert out.shape == (1, N_ROI)


def test_input_shape_error():
    model = random_model()
    with pytest.raises(ad.DimensionError):
        raw_forward(model, np.zeros((1, 60)), 0.0, np.zeros((7, 60)))


def test_precond_constants_at_sigma_data():
    c_skip, c_out, c_in, c_noise = precond(0.5, 0.5)
    assert c_skip == pytest.approx(0.5, abs=1e-15)
    assert c_out == pytest.approx(0.5 / math.sqrt(2), abs=1e-15)
    assert c_in == pytest.approx(1 / math.sqrt(0.5), abs=1e-15)
    assert c_noise == pytest.approx(math.log(0.5) / 4, abs=1e-15)


def test_small_sigma_limit():
    c_skip, c_out, _, _ = precond(1e-8, 0.5)
    assert abs(c_skip - 1) < 1e-15 and c_out < 1e-7
    model = random_model()
    x = np.random.default_rng(3).standard_normal((1, N_ROI))
    np.testing.assert_allclose(denoise(model, x, 1e-9, np.zeros((7, N_ROI))), x, atol=1e-8)


def test_sigma_must_be_positive():
    with pytest.raises(ValueError):
        denoise(random_model(), np.zeros((1, N_ROI)), 0.0, np.zeros((7, N_ROI)))


def test_preconditioning_identity_from_recorded_raw_output():
    model = random_model()
    r = np.random.default_rng(4)
    x, cond, sigma = r.standard_normal((3, 1, N_ROI)), r.standard_normal((3, 7, N_ROI)), 1.7
    c_skip, c_out, c_in, c_noise = precond(sigma, model.sigma_data)
    f = raw_forward(model, c_in * x, c_noise, cond)
    assert np.array_equal(denoise(model, x, sigma, cond), c_skip * x + c_out * f)


def test_score_is_scaled_residual():
    model = random_model()
    r = np.random.default_rng(5)
    x, cond = r.standard_normal((1, N_ROI)), r.standard_normal((7, N_ROI))
    s = score(model, x, 0.3, cond)
    assert np.array_equal(s, (denoise(model, x, 0.3, cond) - x) / 0.09)


def test_condition_channel_sensitivity():
    model = random_model()
    r = np.random.default_rng(6)
    x, cond = r.standard_normal((100, 1, N_ROI)), r.standard_normal((100, 7, N_ROI))
    bumped = cond.copy()
    bumped[:, 6] += 0.5
    diff = np.abs(raw_forward(model, x, 0.1, cond) - raw_forward(model, x, 0.1, bumped)).mean()
    assert diff > 0


def test_batch_items_are_independent():
    model = random_model()
    r = np.random.default_rng(7)
    x, cond = r.standard_normal((4, 1, N_ROI)), r.standard_normal((4, 7, N_ROI))
    full = denoise(model, x, np.array([0.1, 0.5, 1.0, 2.0]), cond)
    one = denoise(model, x[2:3], 1.0, cond[2:3])
    np.testing.assert_allclose(full[2:3], one, rtol=1e-12, atol=1e-14)


def test_attention_variant_parameter_counts():
    with_attn = ArchConfig()
    without = ArchConfig(attention=False)
    diff = parameter_count(with_attn) - parameter_count(without)
    assert diff == parameter_count(with_attn, "mid.attn")
    assert diff == 4 * 128 * 128 + 2 * 128


def test_composed_denoiser_gradient_check():
    """Loss through preconditioning and the whole U-net, every parameter, 64-bit."""
    model = random_model(TINY, seed=11)
    r = np.random.default_rng(12)
    n = 2
    x0 = r.standard_normal((n, N_ROI))
    sigma = np.array([0.4, 1.5])
    noisy = x0 + sigma[:, None] * r.standard_normal((n, N_ROI))
    cond = r.standard_normal((n, 7, N_ROI))
    w = loss_weight(sigma, model.sigma_data)
    names = list(model.params)
    arrays = [model.params[k].copy() for k in names]

    def loss_of(*arrs):
        P = {k: Tensor(a) for k, a in zip(names, arrs)}
        d = denoise_tensor(TINY, P, noisy[:, None], sigma, cond, model.sigma_data).data
        return float(np.mean(w * np.sum((d[0] - x0) ** 2, axis=1)))

    P = {k: Tensor(a.copy(), requires_grad=True) for k, a in zip(names, arrays)}
    with Tape() as tape:
        d = denoise_tensor(TINY, P, noisy[:, None], sigma, cond, model.sigma_data)
        loss = ad.mean(ad.mul(ad.sum(ad.square(ad.sub(d, x0[None])), axis=(0, 2)), w))
    ad.backward(tape, loss, params=P.values())
    numeric = [numeric_grad(loss_of, arrays, i) for i in range(len(names))]
    # biases feeding a per-channel group norm have exactly zero gradient, so
    # the near-zero floor uses the scale of the whole gradient
    scale = max(float(np.abs(g).max()) for g in numeric)
    worst = max(rel_error(P[k].grad, g, scale) for k, g in zip(names, numeric))
    assert worst < 1e-4
