import math

import numpy as np
import pytest
import torch

from stainforge.errors import InputError
from stainforge.harbor import (
    NULL_CONDITION,
    DiffusionSchedule,
    DiffusionTrajectory,
    EnhanceWeights,
    build_predictor,
    build_trajectories,
    calibration_loss,
    class_condition,
    conditional_denoise,
    ddim_transfer,
    denoise_step,
    enhance_objective,
    invert,
    invert_step,
    load_diffusion,
    optimize_prompt_maps,
    predict_noise,
    save_diffusion,
    struct_loss,
    style_loss,
)
from stainforge.vlm_bridge import ToyBackend

from support import directional_check, model_image


@pytest.fixture(scope="module")
def schedule():
    return DiffusionSchedule()


@pytest.fixture(scope="module")
def random_predictor():
    return build_predictor(3, channels=8).double()


def latents(seed, k=3, b=2, size=8):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(k, b, 3, size, size, generator=gen, dtype=torch.float64) * 0.5


def test_schedule_grid(schedule):
    ab = schedule.alpha_bar
    assert len(ab) == 51 and ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert schedule.timesteps[1] == 19 and schedule.timesteps[50] == 999
    betas = np.linspace(1e-4, 0.02, 1000)
    assert ab[50] == pytest.approx(np.prod(1 - betas), rel=1e-12)
    with pytest.raises(InputError):
        DiffusionSchedule(train_steps=1000, steps=30)


def test_conditions():
    assert class_condition("H&E") == 1 and class_condition("PASM") == 4
    with pytest.raises(InputError):
        class_condition("XYZ")


def test_zero_noise_steps_are_pure_scaling(schedule, random_predictor):
    x = model_image(0, 8)
    eps = torch.zeros_like(x)
    ab = schedule.alpha_bar
    for k in (0, 10, 49):
        out = invert_step(x, k, 1, random_predictor, schedule, eps=eps)
        assert float((out - math.sqrt(ab[k + 1] / ab[k]) * x).abs().max()) < 1e-8
    out = denoise_step(x, 50, 1, random_predictor, schedule, eps=eps)
    assert float((out - math.sqrt(ab[49] / ab[50]) * x).abs().max()) < 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_invert_then_denoise_with_shared_noise_is_identity(seed, schedule, random_predictor):
    x = model_image(seed, 8)
    eps = torch.randn(x.shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    k = 7 * seed
    up = invert_step(x, k, 2, random_predictor, schedule, eps=eps)
    back = denoise_step(up, k + 1, 2, random_predictor, schedule, eps=eps)
    assert float((back - x).abs().max()) < 1e-10


@pytest.mark.parametrize("seed", range(3))
def test_invert_step_matches_scratch(seed, schedule, random_predictor):
    x = model_image(seed, 8, batch=2)
    k = 5 + seed * 11
    with torch.no_grad():
        eps = random_predictor(x, torch.full((2,), int(schedule.timesteps[k])),
                               torch.full((2,), 2, dtype=torch.long)).numpy()
        got = invert_step(x, k, 2, random_predictor, schedule).numpy()
    betas = np.linspace(1e-4, 0.02, 1000)
    abar = np.cumprod(1 - betas)
    a_from = 1.0 if k == 0 else abar[20 * k - 1]
    a_to = abar[20 * (k + 1) - 1]
    xn = x.numpy()
    want = np.sqrt(a_to) * (xn - np.sqrt(1 - a_from) * eps) / np.sqrt(a_from) + np.sqrt(1 - a_to) * eps
    np.testing.assert_allclose(got, want, atol=1e-8)


def test_step_range_errors(schedule, random_predictor):
    x = model_image(0, 8)
    with pytest.raises(InputError):
        invert_step(x, 50, 1, random_predictor, schedule)
    with pytest.raises(InputError):
        denoise_step(x, 0, 1, random_predictor, schedule)
    with pytest.raises(InputError):
        predict_noise(random_predictor, x, 3, 9, schedule)


def test_trajectories_have_one_latent_per_step(schedule, random_predictor):
    pre, post = model_image(1, 8), model_image(2, 8)
    x, y = build_trajectories(pre, post, random_predictor, schedule, class_condition("H&E"))
    assert len(x) == 50 and len(y) == 50 and x.latents.shape == (50, 1, 3, 8, 8)
    assert torch.equal(y.latents, invert(post, NULL_CONDITION, random_predictor, schedule))
    assert not torch.equal(x.latents, invert(pre, NULL_CONDITION, random_predictor, schedule))
    with pytest.raises(InputError):
        build_trajectories(pre, model_image(2, 16), random_predictor, schedule, 1)
    with pytest.raises(InputError):
        DiffusionTrajectory("W", x.latents)


def test_struct_examples():
    x = latents(0, k=50, b=1, size=16)
    assert float(struct_loss(x, x)) == pytest.approx(0.0, abs=1e-12)
    assert float(struct_loss(-x, x)) == pytest.approx(100.0, rel=1e-2)
    # contrast-structure ignores the mean offset
    assert float(struct_loss(x + 0.3, x)) == pytest.approx(0.0, abs=1e-12)
    y = latents(1, k=50, b=1, size=16)
    assert float(struct_loss(x - y, x, y, "y_plus_z")) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(InputError):
        struct_loss(x, x, comparand="y_plus_z")


def test_style_examples():
    y = latents(2, k=50)
    assert float(style_loss(y, y)) == 0.0
    assert float(style_loss(y + 0.1, y)) == pytest.approx(0.5, abs=1e-10)
    with pytest.raises(InputError):
        style_loss(y[:3], y)


def test_calibration_examples_and_oracle(backend):
    z, y = latents(3), latents(4)
    assert float(calibration_loss(y, y, backend)) == 0.0
    assert float(calibration_loss(z, y, backend, (0,) * 5)) == 0.0
    delta = (1.0, 0.5, 0.25, 2.0, 0.0)
    want = 0.0
    for k in range(z.shape[0]):
        fz, fy = backend.encode_pyramid(z[k]), backend.encode_pyramid(y[k])
        for lvl in range(5):
            per_image = [float((fz[lvl][b] - fy[lvl][b]).norm()) for b in range(z.shape[1])]
            want += delta[lvl] * sum(per_image) / len(per_image)
    assert float(calibration_loss(z, y, backend, delta)) == pytest.approx(want, rel=1e-12)
    with pytest.raises(InputError):
        calibration_loss(z, y, backend, (1.0,) * 4)


def test_objective_reductions(backend):
    z, x, y = latents(5), latents(6), latents(7)
    s, st = struct_loss(z, x), style_loss(z, y)
    cal = calibration_loss(z, y, backend)
    one = EnhanceWeights(mu=1.0, lam=0.0)
    zero = EnhanceWeights(mu=0.0, lam=0.0)
    assert float(enhance_objective(z, x, y, one)) == pytest.approx(float(s), abs=1e-12)
    assert float(enhance_objective(z, x, y, zero)) == pytest.approx(float(st), abs=1e-12)
    mixed = EnhanceWeights(mu=0.3, lam=0.01)
    total, parts = enhance_objective(z, x, y, mixed, backend, components=True)
    assert float(total) == pytest.approx(0.3 * float(s) + 0.7 * float(st) + 0.01 * float(cal), rel=1e-12)
    assert set(parts) == {"struct", "style", "calibration"}
    residual = EnhanceWeights(mu=0.3, lam=0.01, reading="residual")
    want = enhance_objective(z + y, x, y, mixed, backend)
    assert float(enhance_objective(z, x, y, residual, backend)) == pytest.approx(float(want), rel=1e-12)
    with pytest.raises(InputError):
        EnhanceWeights(mu=1.5)
    with pytest.raises(InputError):
        EnhanceWeights(lam=-1.0)
    with pytest.raises(InputError):
        enhance_objective(z, x, y, mixed, backend=None)


@pytest.mark.parametrize("seed", range(3))
def test_objective_gradients(seed, backend):
    x, y = latents(seed + 10), latents(seed + 20)
    z = latents(seed + 30)
    w = EnhanceWeights(mu=0.4, lam=0.05)
    assert directional_check(lambda v: struct_loss(v, x), z, seed) < 1e-4
    assert directional_check(lambda v: style_loss(v, y), z, seed) < 1e-4
    assert directional_check(lambda v: calibration_loss(v, y, backend), z, seed) < 1e-4
    assert directional_check(lambda v: enhance_objective(v, x, y, w, backend), z, seed) < 1e-4


def test_optimizer_monotone_and_deterministic(backend):
    x = DiffusionTrajectory("X", latents(40, k=4, b=1))
    y = DiffusionTrajectory("Y", latents(41, k=4, b=1))
    w = EnhanceWeights(mu=0.5, lam=0.001)
    one = optimize_prompt_maps(x, y, backend, w, steps=15)
    two = optimize_prompt_maps(x, y, backend, w, steps=15)
    assert one.trace == two.trace and torch.equal(one.z.latents, two.z.latents)
    assert all(b <= a for a, b in zip(one.trace, one.trace[1:]))
    assert one.final < 0.99 * one.initial
    assert one.trace[0] == pytest.approx(float(enhance_objective(torch.zeros_like(y.latents), x, y, w, backend)))


def test_zero_prompt_maps_leave_denoising_unchanged(schedule, random_predictor):
    y = DiffusionTrajectory("Y", invert(model_image(3, 8), NULL_CONDITION, random_predictor, schedule))
    z = DiffusionTrajectory.zeros_like(y)
    with torch.no_grad():
        s = y.latents[-1]
        for k in range(50, 0, -1):
            s = denoise_step(s, k, 2, random_predictor, schedule)
    assert torch.equal(conditional_denoise(y, z, 2, random_predictor, schedule), s.clamp(-1, 1))
    with pytest.raises(InputError):
        conditional_denoise(DiffusionTrajectory("Y", y.latents[:10]), DiffusionTrajectory("Z", z.latents[:10]),
                            2, random_predictor, schedule)


def test_diffusion_training_converges(diffusion):
    losses = diffusion["losses"]
    assert np.mean(losses[-50:]) < 0.5 * np.mean(losses[:10])


def test_target_condition_changes_sample(diffusion, domain_images):
    pred, sched = diffusion["predictor"], diffusion["schedule"]
    y = DiffusionTrajectory("Y", invert(domain_images["A_test"][:1], NULL_CONDITION, pred, sched))
    z = DiffusionTrajectory.zeros_like(y)
    he = conditional_denoise(y, z, class_condition("H&E"), pred, sched)
    mas = conditional_denoise(y, z, class_condition("MAS"), pred, sched)
    assert float((he - mas).abs().max()) > 1e-3


def test_diffusion_archive_round_trip(tmp_path, diffusion):
    path = tmp_path / "d.sfa"
    save_diffusion(path, diffusion["predictor"], diffusion["schedule"], {"seed": 0}, diffusion["losses"])
    pred, sched, payload = load_diffusion(path)
    assert sched == diffusion["schedule"] and payload["loss_curve"] == diffusion["losses"]
    x = model_image(0, 16).float()
    with torch.no_grad():
        assert torch.equal(predict_noise(pred, x, 4, 1, sched), predict_noise(diffusion["predictor"], x, 4, 1, sched))


def test_predictor_seeded():
    a, b = build_predictor(1, 8), build_predictor(1, 8)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_ddim_transfer_inverse_pair():
    x = model_image(9, 8)
    eps = model_image(10, 8)
    there = ddim_transfer(x, 0.9, 0.4, eps)
    assert float((ddim_transfer(there, 0.4, 0.9, eps) - x).abs().max()) < 1e-12


def test_calibration_on_tiny_latents():
    be = ToyBackend(16, 7)
    z = latents(0, k=2, b=1, size=4)
    assert float(calibration_loss(z, z * 0, be)) > 0
