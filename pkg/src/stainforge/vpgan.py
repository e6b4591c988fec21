"""CycleGAN baseline plus the three prompt losses (CPT, CCA, ICR).

Images live in [-1, 1] as (B, 3, H, W) tensors inside this module. The
prompt losses are applied to the forward translation G_AB(a) only.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import archive
from .errors import InputError, TrainingError
from .prompt_lab import ConceptAnchorSet, PromptBank, negative_probability, prompt_embeddings
from .vlm_bridge import cosine, exp_cos

D_EPS = 1e-7
_ATANH_LIMIT = 1.0 - 1e-3


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect")
        self.norm1 = nn.InstanceNorm2d(ch, affine=True)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect")
        self.norm2 = nn.InstanceNorm2d(ch, affine=True)
        # zero gain on the last norm makes the block an identity at init
        nn.init.zeros_(self.norm2.weight)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        return x + self.norm2(self.conv2(h))


class Generator(nn.Module):
    """Residual translator with a global skip in atanh space.

    ``out = tanh(atanh(clip(x)) + head(body(x)))``; the head starts at zero,
    so an untrained generator reproduces its input up to the 1e-3 clip.
    """

    def __init__(self, ngf: int = 16, n_blocks: int = 3):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, ngf, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(ngf, affine=True),
            nn.ReLU(),
        )
        self.body = nn.Sequential(*[ResidualBlock(ngf) for _ in range(n_blocks)])
        self.head = nn.Conv2d(ngf, 3, 3, padding=1, padding_mode="reflect")
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        base = torch.atanh(x.clamp(-_ATANH_LIMIT, _ATANH_LIMIT))
        return torch.tanh(base + self.head(self.body(self.stem(x))))


class Discriminator(nn.Module):
    """Patch classifier returning per-patch probabilities of being real."""

    def __init__(self, ndf: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, ndf, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(ndf, ndf * 2, 4, stride=2, padding=1),
            nn.InstanceNorm2d(ndf * 2, affine=True),
            nn.LeakyReLU(0.2),
            nn.Conv2d(ndf * 2, 1, 4, stride=1, padding=1),
        )

    def forward(self, x):
        return torch.sigmoid(self.net(x))


class TranslatorPair(nn.Module):
    def __init__(self, ngf: int = 16, n_blocks: int = 3, ndf: int = 16):
        super().__init__()
        self.arch = {"ngf": ngf, "n_blocks": n_blocks, "ndf": ndf}
        self.G_AB = Generator(ngf, n_blocks)
        self.G_BA = Generator(ngf, n_blocks)
        self.D_A = Discriminator(ndf)
        self.D_B = Discriminator(ndf)

    def generator_parameters(self):
        return list(self.G_AB.parameters()) + list(self.G_BA.parameters())

    def discriminator_parameters(self):
        return list(self.D_A.parameters()) + list(self.D_B.parameters())


def build_translator_pair(seed: int, ngf: int = 16, n_blocks: int = 3, ndf: int = 16) -> TranslatorPair:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return TranslatorPair(ngf, n_blocks, ndf)


def translate(image: torch.Tensor, pair: TranslatorPair, direction: str = "A->B") -> torch.Tensor:
    if image.dim() != 4 or image.shape[1] != 3:
        raise InputError(f"expected (B, 3, H, W) images, got {tuple(image.shape)}")
    if image.min() < -1 or image.max() > 1:
        raise InputError("images must lie in [-1, 1]")
    gen = {"A->B": pair.G_AB, "B->A": pair.G_BA}.get(direction)
    if gen is None:
        raise InputError(f"unknown direction {direction!r}")
    return gen(image)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 30.0
    beta: float = 0.1
    gamma: float = 0.1
    nu: float = 10.0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise InputError(f"loss weight {name} must be finite and >= 0, got {v}")


def adversarial_value(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """E[log D(real)] + E[log(1 - D(fake))] with D clamped to [eps, 1 - eps]."""
    if d_real.numel() == 0 or d_fake.numel() == 0:
        raise InputError("adversarial loss needs non-empty batches")
    real = d_real.clamp(D_EPS, 1 - D_EPS)
    fake = d_fake.clamp(D_EPS, 1 - D_EPS)
    return torch.log(real).mean() + torch.log(1 - fake).mean()


def adversarial_loss(pair: TranslatorPair, real_batch: torch.Tensor, fake_batch: torch.Tensor,
                     side: str) -> torch.Tensor:
    disc = {"A": pair.D_A, "B": pair.D_B}[side]
    return adversarial_value(disc(real_batch), disc(fake_batch))


def l1_cycle(reconstruction: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    if reconstruction.shape != original.shape:
        raise InputError("reconstruction and original differ in shape")
    return (reconstruction - original).abs().mean()


def cycle_loss(pair, batch_a: torch.Tensor, batch_b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean per-pixel L1 of the A->B->A and B->A->B round trips."""
    rec_a = pair.G_BA(pair.G_AB(batch_a))
    rec_b = pair.G_AB(pair.G_BA(batch_b))
    return l1_cycle(rec_a, batch_a), l1_cycle(rec_b, batch_b)


def cpt_loss(translated: torch.Tensor, bank: PromptBank, backend, text_emb=None) -> torch.Tensor:
    """Mean negative-prompt probability of translated images."""
    emb = backend.encode_image(translated)
    return negative_probability(emb, bank, backend, text_emb=text_emb).mean()


def constant_similarity(images: torch.Tensor, anchors: ConceptAnchorSet, backend) -> torch.Tensor:
    emb = backend.encode_image(images)
    return exp_cos(emb, anchors.constant.to(emb.dtype))


def cca_loss(pre: torch.Tensor, post: torch.Tensor, anchors: ConceptAnchorSet, backend) -> torch.Tensor:
    """Batch-mean squared difference of e^cos similarity to the constant anchor."""
    s_pre = constant_similarity(pre, anchors, backend)
    s_post = constant_similarity(post, anchors, backend)
    return ((s_pre - s_post) ** 2).mean()


def icr_scores(post: torch.Tensor, anchors: ConceptAnchorSet, backend,
               softmax_on: str = "exp_cos") -> torch.Tensor:
    emb = backend.encode_image(post)
    stains = anchors.stains.to(emb.dtype)
    if softmax_on == "exp_cos":
        return exp_cos(emb.unsqueeze(1), stains.unsqueeze(0))
    if softmax_on == "cos":
        return cosine(emb.unsqueeze(1), stains.unsqueeze(0))
    raise InputError(f"unknown icr.softmax_on {softmax_on!r}")


def icr_probabilities(post, anchors, backend, softmax_on: str = "exp_cos") -> torch.Tensor:
    """(B, 4) softmax over the stain-anchor scores."""
    return torch.softmax(icr_scores(post, anchors, backend, softmax_on), dim=-1)


def icr_loss(post: torch.Tensor, anchors: ConceptAnchorSet, target: int, backend,
             softmax_on: str = "exp_cos") -> torch.Tensor:
    """Four-way cross-entropy toward the target stain, batch mean."""
    if not 0 <= target < anchors.stains.shape[0]:
        raise InputError(f"stain index {target} out of range")
    logp = torch.log_softmax(icr_scores(post, anchors, backend, softmax_on), dim=-1)
    return -logp[:, target].mean()


def vpgan_total_loss(components: dict, weights: LossWeights):
    """L_normal + alpha * L_cpt + beta * L_cca + gamma * L_icr."""
    return (components["normal"] + weights.alpha * components["cpt"]
            + weights.beta * components["cca"] + weights.gamma * components["icr"])


def cyclegan_objective(gan_a, gan_b, cyc_a, cyc_b, nu: float):
    return gan_a + gan_b + nu * cyc_a + nu * cyc_b


@dataclass
class PromptGuidance:
    """Everything the prompt losses need, bundled for the training loop."""

    bank: PromptBank
    anchors: ConceptAnchorSet
    backend: object
    target: int
    softmax_on: str = "exp_cos"

    def text_embeddings(self):
        with torch.no_grad():
            return prompt_embeddings(self.bank, self.backend)


def guidance_metrics(pair: TranslatorPair, images: torch.Tensor, guidance: PromptGuidance) -> dict:
    """Mean cpt and icr losses of G_AB translations of ``images``."""
    with torch.no_grad():
        fake = pair.G_AB(images)
        text = guidance.text_embeddings()
        return {
            "cpt": float(cpt_loss(fake, guidance.bank, guidance.backend, text)),
            "icr": float(icr_loss(fake, guidance.anchors, guidance.target, guidance.backend,
                                  guidance.softmax_on)),
        }


def _weighted_term(weight: float, fn: Callable[[], torch.Tensor]):
    # a zero weight keeps the term out of the graph so the update matches the baseline bit for bit
    if weight == 0:
        with torch.no_grad():
            return fn()
    return fn()


def train_vpgan(images_a: torch.Tensor, images_b: torch.Tensor, weights: LossWeights, *,
                guidance: PromptGuidance | None = None, iterations: int = 200, batch_size: int = 4,
                lr: float = 2e-4, betas=(0.5, 0.999), seed: int = 0, ngf: int = 16, n_blocks: int = 3,
                ndf: int = 16, eval_size: int = 32, log: Callable[[dict], None] | None = None,
                checkpoint_every: int = 0,
                on_checkpoint: Callable[[int, dict], None] | None = None):
    """Alternating generator/discriminator training.

    Returns ``(pair, report)``. ``report["trace"]`` holds one dict of loss
    components per iteration; with guidance, ``report["initial"]`` and
    ``report["final"]`` hold mean cpt/icr of G_AB outputs on the first
    ``eval_size`` source images. Without guidance the run is plain CycleGAN.
    """
    if len(images_a) == 0 or len(images_b) == 0:
        raise InputError("both domains need training images")
    pair = build_translator_pair(seed, ngf, n_blocks, ndf).to(images_a.dtype)
    opt_g = torch.optim.Adam(pair.generator_parameters(), lr=lr, betas=tuple(betas))
    opt_d = torch.optim.Adam(pair.discriminator_parameters(), lr=lr, betas=tuple(betas))
    gen = torch.Generator().manual_seed(seed + 1)
    eval_images = images_a[:eval_size]
    report: dict = {"trace": []}
    text = None
    if guidance is not None:
        report["initial"] = guidance_metrics(pair, eval_images, guidance)
        text = guidance.text_embeddings()

    for it in range(iterations):
        a = images_a[torch.randint(len(images_a), (batch_size,), generator=gen)]
        b = images_b[torch.randint(len(images_b), (batch_size,), generator=gen)]

        fake_b = pair.G_AB(a)
        fake_a = pair.G_BA(b)
        gan_b = adversarial_value(pair.D_B(b), pair.D_B(fake_b))
        gan_a = adversarial_value(pair.D_A(a), pair.D_A(fake_a))
        cyc_a = l1_cycle(pair.G_BA(fake_b), a)
        cyc_b = l1_cycle(pair.G_AB(fake_a), b)
        normal = cyclegan_objective(gan_a, gan_b, cyc_a, cyc_b, weights.nu)
        comps = {"normal": normal}
        total = normal
        if guidance is not None:
            g = guidance
            comps["cpt"] = _weighted_term(weights.alpha, lambda: cpt_loss(fake_b, g.bank, g.backend, text))
            comps["cca"] = _weighted_term(weights.beta, lambda: cca_loss(a, fake_b, g.anchors, g.backend))
            comps["icr"] = _weighted_term(
                weights.gamma, lambda: icr_loss(fake_b, g.anchors, g.target, g.backend, g.softmax_on))
            total = vpgan_total_loss(comps, weights)

        opt_g.zero_grad()
        total.backward()
        opt_g.step()

        d_loss = -(adversarial_value(pair.D_B(b), pair.D_B(fake_b.detach()))
                   + adversarial_value(pair.D_A(a), pair.D_A(fake_a.detach())))
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        values = {"gan_a": gan_a, "gan_b": gan_b, "cyc_a": cyc_a, "cyc_b": cyc_b, "normal": normal,
                  "total": total, "d_loss": d_loss, **comps}
        row = {"iteration": it, **{k: float(v.detach()) for k, v in values.items()}}
        if not all(math.isfinite(v) for v in row.values()):
            raise TrainingError("non-finite VPGAN loss", step=it, components=row)
        report["trace"].append(row)
        if log is not None:
            log({"stage": "vpgan", **row})
        if checkpoint_every and on_checkpoint is not None and (it + 1) % checkpoint_every == 0:
            on_checkpoint(it + 1, training_state(pair, opt_g, opt_d, gen, it + 1))

    if guidance is not None:
        report["final"] = guidance_metrics(pair, eval_images, guidance)
    report["state"] = training_state(pair, opt_g, opt_d, gen, iterations)
    return pair, report


def training_state(pair, opt_g, opt_d, gen, iteration: int) -> dict:
    return {
        "arch": dict(pair.arch),
        "G_AB": pair.G_AB.state_dict(),
        "G_BA": pair.G_BA.state_dict(),
        "D_A": pair.D_A.state_dict(),
        "D_B": pair.D_B.state_dict(),
        "opt_G": opt_g.state_dict(),
        "opt_D": opt_d.state_dict(),
        "rng": gen.get_state(),
        "iteration": iteration,
    }


def save_vpgan_checkpoint(path, state: dict, config: dict | None, provenance: dict | None,
                          trace: list | None = None) -> None:
    archive.save(path, "vpgan", {**state, "config": config, "provenance": provenance or {},
                                 "trace": trace or []})


def load_vpgan_checkpoint(path) -> tuple[TranslatorPair, dict]:
    payload = archive.load(path, kind="vpgan")
    arch = payload["arch"]
    pair = TranslatorPair(arch["ngf"], arch["n_blocks"], arch["ndf"])
    dtype = next(iter(payload["G_AB"].values())).dtype
    pair = pair.to(dtype)
    for name in ("G_AB", "G_BA", "D_A", "D_B"):
        getattr(pair, name).load_state_dict(payload[name])
    pair.eval()
    return pair, payload
