"""Contrastive prompt pairs and concept anchors.

A prompt bank holds two learnable token matrices, positive (target stain)
and negative (source stain). An image is classified by comparing e^cos
similarities of its embedding with the two encoded prompts; only the tokens
are trained, the encoders stay frozen.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import STAIN_KEYS, STAINS, archive
from .errors import InputError, TrainingError
from .vlm_bridge import exp_cos

PROB_EPS = 1e-7

LLM_QUERY_TEMPLATE = (
    "We want to study the effects of different staining agents on the same liver pathological "
    "section. We will use the histological images of human kidney at 40x magnification. Please "
    "tell me the visual characteristics of {Class} staining compared with other staining agents "
    "and the key observation areas."
)

CONCEPT_FILES = ("constant.txt",) + tuple(f"{k}.txt" for k in STAIN_KEYS)


@dataclass
class PromptBank:
    positive: torch.Tensor
    negative: torch.Tensor
    source: str | None = None
    target: str | None = None
    seed: int | None = None
    steps: int = 0
    loss_curve: list[float] = field(default_factory=list)
    accuracy_curve: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.positive.shape != self.negative.shape:
            raise InputError("positive and negative prompts must have the same shape")
        if not (torch.isfinite(self.positive).all() and torch.isfinite(self.negative).all()):
            raise InputError("prompt tokens must be finite")

    @property
    def n_tokens(self) -> int:
        return self.positive.shape[0]

    @property
    def final_loss(self) -> float | None:
        return self.loss_curve[-1] if self.loss_curve else None

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.positive.detach().numpy().tobytes())
        h.update(self.negative.detach().numpy().tobytes())
        return h.hexdigest()

    def to_payload(self) -> dict:
        return {
            "positive": self.positive.detach(),
            "negative": self.negative.detach(),
            "source": self.source,
            "target": self.target,
            "seed": self.seed,
            "steps": self.steps,
            "loss_curve": list(self.loss_curve),
            "accuracy_curve": list(self.accuracy_curve),
        }

    def save(self, path, config: dict | None = None) -> None:
        archive.save(path, "prompt_bank", {"bank": self.to_payload(), "config": config})

    @classmethod
    def load(cls, path) -> "PromptBank":
        return cls(**archive.load(path, kind="prompt_bank")["bank"])


def init_prompt_bank(n_tokens: int, dim: int, seed: int, std: float = 0.02) -> PromptBank:
    """Gaussian tokens (mean 0, ``std``); positive drawn before negative."""
    if n_tokens < 1 or dim < 1:
        raise InputError(f"prompt bank needs positive sizes, got ({n_tokens}, {dim})")
    gen = torch.Generator().manual_seed(seed)
    pos = torch.randn(n_tokens, dim, generator=gen, dtype=torch.float64) * std
    neg = torch.randn(n_tokens, dim, generator=gen, dtype=torch.float64) * std
    return PromptBank(pos, neg, seed=seed)


def prompt_embeddings(bank: PromptBank, backend, positive=None, negative=None):
    pos = bank.positive if positive is None else positive
    neg = bank.negative if negative is None else negative
    return backend.encode_text_tokens(pos), backend.encode_text_tokens(neg)


def _pair_scores(image_emb, text_pos, text_neg):
    s_pos = exp_cos(image_emb, text_pos.to(image_emb.dtype))
    s_neg = exp_cos(image_emb, text_neg.to(image_emb.dtype))
    return s_pos, s_neg


def classify_probability(image_emb: torch.Tensor, bank: PromptBank, backend,
                         text_emb: tuple | None = None) -> torch.Tensor:
    """Positive-class mass e^cos(I,Tp) / (e^cos(I,Tn) + e^cos(I,Tp))."""
    text_pos, text_neg = text_emb if text_emb is not None else prompt_embeddings(bank, backend)
    s_pos, s_neg = _pair_scores(image_emb, text_pos, text_neg)
    return s_pos / (s_neg + s_pos)


def negative_probability(image_emb: torch.Tensor, bank: PromptBank, backend,
                         text_emb: tuple | None = None) -> torch.Tensor:
    text_pos, text_neg = text_emb if text_emb is not None else prompt_embeddings(bank, backend)
    s_pos, s_neg = _pair_scores(image_emb, text_pos, text_neg)
    return s_neg / (s_neg + s_pos)


def prompt_bce_loss(a_hat: torch.Tensor, label) -> torch.Tensor:
    """Binary cross-entropy, batch mean; probabilities clamped to [1e-7, 1 - 1e-7]."""
    a_hat = torch.as_tensor(a_hat)
    label = torch.as_tensor(label, dtype=a_hat.dtype)
    p = a_hat.clamp(PROB_EPS, 1 - PROB_EPS)
    return -(label * torch.log(p) + (1 - label) * torch.log(1 - p)).mean()


def _embed_images(images: np.ndarray, backend, batch: int = 64) -> torch.Tensor:
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            x = torch.from_numpy(images[i:i + batch].astype(np.float64)).permute(0, 3, 1, 2) / 127.5 - 1
            out.append(backend.encode_image(x))
    return torch.cat(out)


def train_contrastive_prompts(source_images: np.ndarray, target_images: np.ndarray, backend, *,
                              n_tokens: int = 16, init_std: float = 0.02, steps: int = 200,
                              lr: float = 1e-3, seed: int = 0, source: str | None = None,
                              target: str | None = None,
                              log: Callable[[dict], None] | None = None) -> PromptBank:
    """Fit a prompt pair separating source (label 0) from target (label 1) patches.

    Images are N x H x W x 3 uint8 arrays. Embeddings are computed once with
    the frozen encoder; the tokens are optimized full-batch with Adam.
    ``loss_curve[i]`` is the loss before update ``i``; the last entry is the
    loss after the final update.
    """
    if len(source_images) == 0 or len(target_images) == 0:
        raise InputError("prompt training needs both source and target patches")
    checksum = backend.state_checksum()
    emb = torch.cat([_embed_images(source_images, backend), _embed_images(target_images, backend)])
    labels = torch.cat([torch.zeros(len(source_images)), torch.ones(len(target_images))]).double()

    bank = init_prompt_bank(n_tokens, backend.dim, seed, init_std)
    pos = bank.positive.clone().requires_grad_(True)
    neg = bank.negative.clone().requires_grad_(True)
    opt = torch.optim.Adam([pos, neg], lr=lr)
    losses, accs = [], []

    def evaluate():
        text = prompt_embeddings(bank, backend, pos, neg)
        a_hat = classify_probability(emb, bank, backend, text_emb=text)
        return prompt_bce_loss(a_hat, labels), a_hat

    for step in range(steps + 1):
        loss, a_hat = evaluate()
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingError("non-finite prompt loss", step=step, components={"loss": value})
        acc = float(((a_hat > 0.5).double() == labels).double().mean())
        losses.append(value)
        accs.append(acc)
        if log is not None:
            log({"stage": "prompts", "step": step, "loss": value, "accuracy": acc})
        if step == steps:
            break
        opt.zero_grad()
        loss.backward()
        opt.step()

    if backend.state_checksum() != checksum:
        raise TrainingError("encoder parameters changed during prompt training")
    return PromptBank(pos.detach().clone(), neg.detach().clone(), source=source, target=target,
                      seed=seed, steps=steps, loss_curve=losses, accuracy_curve=accs)


def prompt_accuracy(images: np.ndarray, labels, bank: PromptBank, backend) -> float:
    emb = _embed_images(images, backend)
    with torch.no_grad():
        a_hat = classify_probability(emb, bank, backend)
    return float(((a_hat > 0.5).double() == torch.as_tensor(labels).double()).double().mean())


def render_llm_query(stain_class: str) -> str:
    """The concept-elicitation query for one stain class."""
    if stain_class not in STAINS:
        raise InputError(f"unknown stain class {stain_class!r}; expected one of {STAINS}")
    return LLM_QUERY_TEMPLATE.replace("{Class}", stain_class)


@dataclass
class ConceptAnchorSet:
    constant: torch.Tensor
    stains: torch.Tensor
    digests: dict[str, str] = field(default_factory=dict)
    backend: str | None = None

    def __post_init__(self):
        if self.stains.shape[0] != len(STAINS):
            raise InputError(f"expected {len(STAINS)} stain anchors, got {self.stains.shape[0]}")
        if self.constant.shape[-1] != self.stains.shape[-1]:
            raise InputError("constant and stain anchors differ in dimension")

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.constant.detach().numpy().tobytes())
        h.update(self.stains.detach().numpy().tobytes())
        return h.hexdigest()

    def save(self, path, config: dict | None = None) -> None:
        archive.save(path, "concept_anchors", {
            "constant": self.constant, "stains": self.stains,
            "digests": dict(self.digests), "backend": self.backend, "config": config,
        })

    @classmethod
    def load(cls, path) -> "ConceptAnchorSet":
        payload = archive.load(path, kind="concept_anchors")
        payload.pop("config", None)
        return cls(**payload)


def default_concept_dir() -> Path:
    return Path(str(resources.files("stainforge") / "concepts"))


def build_concept_anchors(concept_dir, backend) -> ConceptAnchorSet:
    """Encode ``constant.txt`` and ``{he,mas,pas,pasm}.txt`` with the text encoder."""
    concept_dir = Path(concept_dir)
    texts = {}
    for name in CONCEPT_FILES:
        path = concept_dir / name
        if not path.is_file():
            raise InputError(f"missing concept file {name} in {concept_dir}")
        texts[name] = path.read_text(encoding="utf-8")
    digests = {n: hashlib.sha256(t.encode("utf-8")).hexdigest() for n, t in texts.items()}
    with torch.no_grad():
        constant = backend.encode_text(texts["constant.txt"])
        stains = torch.stack([backend.encode_text(texts[f"{k}.txt"]) for k in STAIN_KEYS])
    return ConceptAnchorSet(constant, stains, digests, backend.fingerprint())
