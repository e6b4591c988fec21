"""DDIM-based inference enhancement with learnable noise prompt maps.

A small class-conditional noise predictor stands in for a pretrained
diffusion model. Source and translated images are inverted into 50-step
trajectories X and Y; a prompt-map trajectory Z (zero at start) is fitted
against X for structure, Y for style and the encoder pyramid for
calibration, then Y + Z is denoised under the target class.

Condition indices: 0 is the null condition, stain ``i`` is ``i + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import STAINS, archive, stain_index
from .errors import InputError, TrainingError
from .metrics import gaussian_window, _filter

NULL_CONDITION = 0
COMPARANDS = ("z", "y_plus_z")
READINGS = ("literal", "residual")


def class_condition(stain: str) -> int:
    return stain_index(stain) + 1


def _check_condition(cond: int) -> int:
    if not 0 <= int(cond) <= len(STAINS):
        raise InputError(f"condition index {cond} out of range")
    return int(cond)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear-beta training schedule and its uniform K-step inference grid.

    ``alpha_bar[k]`` for k = 0..K on the grid; ``alpha_bar[0] = 1`` is the
    clean image. ``timesteps[k]`` is the training step the predictor sees.
    """

    train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    steps: int = 50

    def __post_init__(self):
        if self.train_steps < 1 or self.steps < 1 or self.train_steps % self.steps:
            raise InputError("train_steps must be a positive multiple of steps")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise InputError("need 0 < beta_start <= beta_end < 1")

    @property
    def train_alpha_bar(self) -> np.ndarray:
        betas = np.linspace(self.beta_start, self.beta_end, self.train_steps, dtype=np.float64)
        return np.cumprod(1.0 - betas)

    @property
    def stride(self) -> int:
        return self.train_steps // self.steps

    @property
    def timesteps(self) -> np.ndarray:
        t = np.arange(self.steps + 1) * self.stride - 1
        t[0] = 0
        return t

    @property
    def alpha_bar(self) -> np.ndarray:
        ab = self.train_alpha_bar[self.timesteps]
        ab[0] = 1.0
        return ab

    def to_dict(self) -> dict:
        return {"train_steps": self.train_steps, "beta_start": self.beta_start,
                "beta_end": self.beta_end, "steps": self.steps}


def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double().unsqueeze(1) * freqs.unsqueeze(0)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _ResBlock(nn.Module):
    def __init__(self, ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, ch)
        self.norm2 = nn.GroupNorm(8, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class NoisePredictor(nn.Module):
    """Class-conditional noise predictor with one down/up level."""

    def __init__(self, channels: int = 32, n_conditions: int = len(STAINS) + 1):
        super().__init__()
        self.arch = {"channels": channels, "n_conditions": n_conditions}
        emb_dim = channels * 2
        self.time_dim = channels
        self.time_mlp = nn.Sequential(nn.Linear(channels, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.cond = nn.Embedding(n_conditions, emb_dim)
        self.inp = nn.Conv2d(3, channels, 3, padding=1)
        self.enc = _ResBlock(channels, emb_dim)
        self.down = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.mid = _ResBlock(channels, emb_dim)
        self.up = nn.Conv2d(channels, channels, 3, padding=1)
        self.dec = _ResBlock(channels, emb_dim)
        self.merge = nn.Conv2d(channels * 2, channels, 1)
        self.out = nn.Sequential(nn.GroupNorm(8, channels), nn.SiLU(), nn.Conv2d(channels, 3, 3, padding=1))

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        emb = self.time_mlp(_timestep_embedding(t, self.time_dim).to(x.dtype)) + self.cond(cond)
        h0 = self.enc(self.inp(x), emb)
        h = self.mid(self.down(h0), emb)
        h = self.up(F.interpolate(h, size=h0.shape[-2:], mode="nearest"))
        h = self.dec(self.merge(torch.cat([h, h0], dim=1)), emb)
        return self.out(h)


def build_predictor(seed: int, channels: int = 32) -> NoisePredictor:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return NoisePredictor(channels)


def predict_noise(predictor, x: torch.Tensor, k: int, cond: int, schedule: DiffusionSchedule):
    b = x.shape[0]
    t = torch.full((b,), int(schedule.timesteps[k]), dtype=torch.long)
    c = torch.full((b,), _check_condition(cond), dtype=torch.long)
    return predictor(x, t, c)


def train_toy_diffusion(images_by_stain: dict, schedule: DiffusionSchedule | None = None, *,
                        iterations: int = 600, batch_size: int = 16, lr: float = 2e-3,
                        channels: int = 16, cond_dropout: float = 0.1, crop: int | None = 32,
                        seed: int = 0, log: Callable[[dict], None] | None = None):
    """Noise-prediction regression on (N, 3, H, W) images in [-1, 1] keyed by stain.

    Training batches are random ``crop`` x ``crop`` windows; the predictor
    is fully convolutional, so it applies to full-size images afterwards.

    Returns ``(predictor, schedule, loss_curve)``.
    """
    schedule = schedule or DiffusionSchedule()
    if not images_by_stain:
        raise InputError("diffusion training needs at least one stain domain")
    xs, cs = [], []
    for stain, imgs in images_by_stain.items():
        if len(imgs) == 0:
            raise InputError(f"no images for stain {stain!r}")
        xs.append(imgs)
        cs.append(torch.full((len(imgs),), class_condition(stain), dtype=torch.long))
    data = torch.cat(xs).float()
    conds = torch.cat(cs)
    ab = torch.from_numpy(schedule.train_alpha_bar).float()

    predictor = build_predictor(seed, channels)
    opt = torch.optim.Adam(predictor.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed + 1)
    losses = []
    for it in range(iterations):
        idx = torch.randint(len(data), (batch_size,), generator=gen)
        x0, c = data[idx], conds[idx].clone()
        if crop is not None and crop < min(data.shape[-2:]):
            oy = int(torch.randint(data.shape[-2] - crop + 1, (1,), generator=gen))
            ox = int(torch.randint(data.shape[-1] - crop + 1, (1,), generator=gen))
            x0 = x0[..., oy:oy + crop, ox:ox + crop]
        drop = torch.rand(batch_size, generator=gen) < cond_dropout
        c[drop] = NULL_CONDITION
        t = torch.randint(schedule.train_steps, (batch_size,), generator=gen)
        noise = torch.randn(x0.shape, generator=gen)
        a = ab[t].view(-1, 1, 1, 1)
        xt = a.sqrt() * x0 + (1 - a).sqrt() * noise
        loss = F.mse_loss(predictor(xt, t, c), noise)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingError("non-finite diffusion loss", step=it, components={"loss": value})
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(value)
        if log is not None:
            log({"stage": "diffusion", "iteration": it, "loss": value})
    predictor.eval()
    return predictor, schedule, losses


def ddim_transfer(x: torch.Tensor, alpha_from: float, alpha_to: float, eps: torch.Tensor) -> torch.Tensor:
    """Move a latent between two noise levels along the predicted noise direction."""
    x0 = (x - math.sqrt(1 - alpha_from) * eps) / math.sqrt(alpha_from)
    return math.sqrt(alpha_to) * x0 + math.sqrt(1 - alpha_to) * eps


def invert_step(x_k: torch.Tensor, k: int, condition: int, predictor, schedule: DiffusionSchedule,
                eps: torch.Tensor | None = None) -> torch.Tensor:
    """Grid step k -> k + 1 using the noise predicted at (x_k, k)."""
    if not 0 <= k < schedule.steps:
        raise InputError(f"inversion step {k} outside [0, {schedule.steps - 1}]")
    if eps is None:
        eps = predict_noise(predictor, x_k, k, condition, schedule)
    ab = schedule.alpha_bar
    return ddim_transfer(x_k, ab[k], ab[k + 1], eps)


def denoise_step(x_k: torch.Tensor, k: int, condition: int, predictor, schedule: DiffusionSchedule,
                 eps: torch.Tensor | None = None) -> torch.Tensor:
    """Grid step k -> k - 1 using the noise predicted at (x_k, k)."""
    if not 0 < k <= schedule.steps:
        raise InputError(f"denoising step {k} outside [1, {schedule.steps}]")
    if eps is None:
        eps = predict_noise(predictor, x_k, k, condition, schedule)
    ab = schedule.alpha_bar
    return ddim_transfer(x_k, ab[k], ab[k - 1], eps)


@dataclass
class DiffusionTrajectory:
    """Latents at grid steps 1..K stacked as (K, B, 3, H, W)."""

    role: str
    latents: torch.Tensor

    def __post_init__(self):
        if self.role not in ("X", "Y", "Z"):
            raise InputError(f"unknown trajectory role {self.role!r}")
        if self.latents.dim() != 5:
            raise InputError("trajectory latents must be (K, B, 3, H, W)")

    def __len__(self):
        return self.latents.shape[0]

    @classmethod
    def zeros_like(cls, other: "DiffusionTrajectory") -> "DiffusionTrajectory":
        return cls("Z", torch.zeros_like(other.latents))


def invert(image: torch.Tensor, condition: int, predictor, schedule: DiffusionSchedule) -> torch.Tensor:
    x = image
    out = []
    with torch.no_grad():
        for k in range(schedule.steps):
            x = invert_step(x, k, condition, predictor, schedule)
            out.append(x)
    return torch.stack(out)


def _check_image(img: torch.Tensor, name: str):
    if img.dim() != 4 or img.shape[1] != 3:
        raise InputError(f"{name} must be (B, 3, H, W), got {tuple(img.shape)}")
    if img.min() < -1 or img.max() > 1:
        raise InputError(f"{name} must lie in [-1, 1]")


def build_trajectories(i_pre: torch.Tensor, i_post: torch.Tensor, predictor, schedule: DiffusionSchedule,
                       source_condition: int):
    """X from the source image under its class, Y from the translation under the null condition."""
    _check_image(i_pre, "I_pre")
    _check_image(i_post, "I_post")
    if i_pre.shape != i_post.shape:
        raise InputError("I_pre and I_post differ in shape")
    x = DiffusionTrajectory("X", invert(i_pre, source_condition, predictor, schedule))
    y = DiffusionTrajectory("Y", invert(i_post, NULL_CONDITION, predictor, schedule))
    return x, y


def _lat(t) -> torch.Tensor:
    return t.latents if isinstance(t, DiffusionTrajectory) else t


def _same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise InputError(f"trajectory shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def contrast_structure(a: torch.Tensor, b: torch.Tensor, data_range: float = 2.0,
                       k2: float = 0.03, sigma: float = 1.5) -> torch.Tensor:
    """Mean contrast-structure SSIM term per leading index of (..., 3, H, W) inputs."""
    lead = a.shape[:-3]
    x = a.reshape(-1, *a.shape[-3:])
    y = b.reshape(-1, *b.shape[-3:])
    win_size = min(11, *x.shape[-2:])
    if win_size % 2 == 0:
        win_size -= 1
    win = gaussian_window(win_size, sigma, x.dtype)
    c2 = (k2 * data_range) ** 2
    mx, my = _filter(x, win), _filter(y, win)
    sxx = _filter(x * x, win) - mx ** 2
    syy = _filter(y * y, win) - my ** 2
    sxy = _filter(x * y, win) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return cs.flatten(1).mean(1).reshape(lead)


def struct_loss(z, x, y=None, comparand: str = "z", data_range: float = 2.0) -> torch.Tensor:
    """Sum over steps of 1 - contrast-structure SSIM between Z (or Y + Z) and X."""
    z, x = _lat(z), _lat(x)
    _same_shape(z, x)
    if comparand == "y_plus_z":
        if y is None:
            raise InputError("comparand y_plus_z needs the Y trajectory")
        z = z + _lat(y)
    elif comparand != "z":
        raise InputError(f"unknown struct comparand {comparand!r}; expected one of {COMPARANDS}")
    cs = contrast_structure(z, x, data_range)  # (K, B)
    return (1 - cs.mean(dim=1)).sum()


def style_loss(z, y) -> torch.Tensor:
    """Sum over steps of the per-step mean squared error."""
    z, y = _lat(z), _lat(y)
    _same_shape(z, y)
    return ((z - y) ** 2).flatten(1).mean(1).sum()


def calibration_loss(z, y, backend, delta: Sequence[float] = (1.0,) * 5) -> torch.Tensor:
    """Sum over steps and pyramid levels of delta_l times the feature L2 distance (batch mean)."""
    z, y = _lat(z), _lat(y)
    _same_shape(z, y)
    delta = torch.as_tensor(list(delta), dtype=z.dtype)
    k, b = z.shape[:2]
    fz = backend.encode_pyramid(z.reshape(k * b, *z.shape[2:]))
    fy = backend.encode_pyramid(y.reshape(k * b, *y.shape[2:]))
    if len(delta) != len(fz):
        raise InputError(f"need {len(fz)} level weights, got {len(delta)}")
    total = z.new_zeros(())
    for lvl, (a, c) in enumerate(zip(fz, fy)):
        if float(delta[lvl]) == 0.0:
            continue
        dist = (a - c).reshape(k, b, -1).norm(dim=2)
        total = total + delta[lvl] * dist.mean(dim=1).sum()
    return total


@dataclass(frozen=True)
class EnhanceWeights:
    mu: float = 0.05
    lam: float = 0.001
    delta: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)
    comparand: str = "z"
    reading: str = "literal"

    def __post_init__(self):
        if not (math.isfinite(self.mu) and 0 <= self.mu <= 1):
            raise InputError(f"mu must lie in [0, 1], got {self.mu}")
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise InputError(f"lambda must be >= 0, got {self.lam}")
        if len(self.delta) != 5 or any(d < 0 for d in self.delta):
            raise InputError("delta needs five nonnegative level weights")
        if self.comparand not in COMPARANDS:
            raise InputError(f"unknown struct comparand {self.comparand!r}")
        if self.reading not in READINGS:
            raise InputError(f"unknown prompt-map reading {self.reading!r}; expected one of {READINGS}")


def enhance_objective(z, x, y, weights: EnhanceWeights, backend=None, components: bool = False):
    """mu * struct + (1 - mu) * style + lambda * calibration.

    Under the ``residual`` reading every term sees the injected latent Y + Z
    instead of Z, so Z becomes a correction on top of Y.
    """
    if not 0 <= weights.mu <= 1:
        raise InputError(f"mu must lie in [0, 1], got {weights.mu}")
    if weights.reading == "residual":
        z = _lat(z) + _lat(y)
        s = struct_loss(z, x)
    else:
        s = struct_loss(z, x, y, weights.comparand)
    st = style_loss(z, y)
    if weights.lam != 0:
        if backend is None:
            raise InputError("calibration term needs an encoder backend")
        cal = calibration_loss(z, y, backend, weights.delta)
    else:
        cal = torch.zeros((), dtype=s.dtype)
    total = weights.mu * s + (1 - weights.mu) * st + weights.lam * cal
    if components:
        return total, {"struct": s, "style": st, "calibration": cal}
    return total


@dataclass
class PromptMapResult:
    z: DiffusionTrajectory
    trace: list[float] = field(default_factory=list)
    rejected: int = 0

    @property
    def initial(self) -> float:
        return self.trace[0]

    @property
    def final(self) -> float:
        return self.trace[-1]


def optimize_prompt_maps(x: DiffusionTrajectory, y: DiffusionTrajectory, backend, weights: EnhanceWeights,
                         steps: int = 50, step_size: float = 0.1, max_halvings: int = 30,
                         log: Callable[[dict], None] | None = None) -> PromptMapResult:
    """Gradient descent on Z only, halving the step whenever the objective would rise.

    The raw step is ``step_size`` times the per-step element count, which
    makes it independent of image size for the mean-based terms.
    ``trace`` holds the objective at Z = 0 followed by every accepted step.
    """
    xl, yl = x.latents.detach(), y.latents.detach()
    z = torch.zeros_like(yl)
    scale = step_size * yl[0].numel()

    def objective(zv):
        return enhance_objective(zv, xl, yl, weights, backend)

    zg = z.clone().requires_grad_(True)
    f = objective(zg)
    trace = [float(f.detach())]
    rejected = 0
    for it in range(steps):
        if not math.isfinite(trace[-1]):
            raise TrainingError("non-finite enhancement objective", step=it, components={"objective": trace[-1]})
        (grad,) = torch.autograd.grad(f, zg)
        accepted = False
        for _ in range(max_halvings):
            cand = (z - scale * grad).requires_grad_(True)
            fc = objective(cand)
            value = float(fc.detach())
            if math.isfinite(value) and value <= trace[-1]:
                z, zg, f = cand.detach(), cand, fc
                trace.append(value)
                accepted = True
                break
            rejected += 1
            scale *= 0.5
        if log is not None:
            log({"stage": "harbor", "step": it, "objective": trace[-1], "step_scale": scale})
        if not accepted:
            break
    return PromptMapResult(DiffusionTrajectory("Z", z.detach()), trace, rejected)


def conditional_denoise(y: DiffusionTrajectory, z: DiffusionTrajectory, target_condition: int, predictor,
                        schedule: DiffusionSchedule) -> torch.Tensor:
    """Denoise from the last grid step, adding Z_k to the running latent before each step."""
    yl, zl = _lat(y), _lat(z)
    _same_shape(yl, zl)
    if yl.shape[0] != schedule.steps:
        raise InputError(f"trajectory length {yl.shape[0]} != schedule steps {schedule.steps}")
    s = yl[-1]
    with torch.no_grad():
        for k in range(schedule.steps, 0, -1):
            s = denoise_step(s + zl[k - 1], k, target_condition, predictor, schedule)
    return s.clamp(-1, 1)


@dataclass
class EnhanceResult:
    image: torch.Tensor
    z: DiffusionTrajectory
    trace: list[float]
    baseline: torch.Tensor


def enhance(i_pre: torch.Tensor, i_post: torch.Tensor, predictor, schedule: DiffusionSchedule, backend,
            source: str, target: str, weights: EnhanceWeights, steps: int = 50, step_size: float = 0.1,
            log=None) -> EnhanceResult:
    """Full enhancement of one translated batch; ``baseline`` is the Z = 0 output."""
    x, y = build_trajectories(i_pre, i_post, predictor, schedule, class_condition(source))
    res = optimize_prompt_maps(x, y, backend, weights, steps=steps, step_size=step_size, log=log)
    cond = class_condition(target)
    out = conditional_denoise(y, res.z, cond, predictor, schedule)
    base = conditional_denoise(y, DiffusionTrajectory.zeros_like(y), cond, predictor, schedule)
    return EnhanceResult(out, res.z, res.trace, base)


def save_diffusion(path, predictor: NoisePredictor, schedule: DiffusionSchedule, config: dict | None = None,
                   loss_curve: list | None = None) -> None:
    archive.save(path, "diffusion", {
        "arch": dict(predictor.arch), "state": predictor.state_dict(),
        "schedule": schedule.to_dict(), "config": config, "loss_curve": list(loss_curve or []),
    })


def load_diffusion(path):
    payload = archive.load(path, kind="diffusion")
    predictor = NoisePredictor(payload["arch"]["channels"], payload["arch"]["n_conditions"])
    predictor.load_state_dict(payload["state"])
    predictor.eval()
    return predictor, DiffusionSchedule(**payload["schedule"]), payload
