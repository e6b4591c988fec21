"""Image/text encoders behind one interface, plus the e^cos similarity kernel.

Two backends exist. ``ToyBackend`` is a small, deterministic, differentiable
stand-in used by every test and desk-scale run. ``PretrainedBackend`` is a
lazy seam for a real CLIP-style model and is never touched by the test suite.

Toy encoder, exactly
--------------------
All parameters come from ``numpy.random.default_rng(seed)`` drawn in this
order:

1. ``image_proj``: ``standard_normal((dim, 55)) / sqrt(55)``
2. ``text_rot``: ``Q`` from ``numpy.linalg.qr(standard_normal((dim, dim)))``
3. ``pyramid[l]`` for l = 0..4: ``standard_normal((8, 3)) / sqrt(3)``

*Image*: for a model-range image ``x`` (3, H, W) build the statistic vector
``s = [1, mean_c (3), var_c (3), 4x4 block means (48, channel-major)]`` with
population variance and adaptive average pooling for the blocks; the
embedding is ``normalize(image_proj @ s)``.

*Text tokens*: ``normalize(text_rot @ tokens.mean(axis=0))`` for an N x dim
token matrix.

*Text strings*: lower-cased words ``[a-z&]+``; each word maps to one token.
Words in ``COLOR_LEXICON`` are grounded: their token is
``LEXICON_GAIN * text_rot.T @ e`` where ``e`` is the image embedding of a
constant patch of that colour, so colour words point at the images they name.
Any other word gets ``standard_normal(dim) / sqrt(dim)`` from a generator
seeded by the first 8 bytes (little endian) of ``sha256(f"{seed}:{word}")``.

*Pyramid*: level l average-pools the image to ``(max(1, H >> l), max(1, W >> l))``
and applies the 8 x 3 map ``pyramid[l]`` as a 1x1 convolution.
"""

from __future__ import annotations

import hashlib
import math
import os
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CapabilityError, ConfigError, InputError

N_STATS = 55
PYRAMID_LEVELS = 5
PYRAMID_CHANNELS = 8
LEXICON_GAIN = 4.0

# RGB in [0, 1]; converted to model range [-1, 1] before encoding.
COLOR_LEXICON = {
    "pink": (0.93, 0.62, 0.78),
    "eosinophilic": (0.93, 0.58, 0.74),
    "purple": (0.52, 0.34, 0.66),
    "violet": (0.58, 0.40, 0.74),
    "basophilic": (0.45, 0.35, 0.68),
    "blue": (0.30, 0.42, 0.80),
    "red": (0.84, 0.24, 0.28),
    "magenta": (0.84, 0.30, 0.68),
    "black": (0.12, 0.12, 0.12),
    "gray": (0.62, 0.62, 0.62),
    "grey": (0.62, 0.62, 0.62),
    "brown": (0.55, 0.40, 0.26),
    "green": (0.36, 0.64, 0.40),
    "white": (0.96, 0.96, 0.96),
}

_WORD = re.compile(r"[a-z&]+")


@dataclass
class ImagePatch:
    """H x W x 3 raster with its declared value range."""

    pixels: np.ndarray
    value_range: tuple[float, float] = (0.0, 255.0)
    stain: str | None = None

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise InputError(f"expected H x W x 3 pixels, got shape {self.pixels.shape}")

    def to_model_tensor(self, dtype=torch.float32) -> torch.Tensor:
        """(1, 3, H, W) tensor rescaled to [-1, 1]."""
        px = np.asarray(self.pixels, dtype=np.float64)
        if not np.all(np.isfinite(px)):
            raise InputError("patch contains non-finite pixels")
        lo, hi = self.value_range
        if px.min() < lo or px.max() > hi:
            raise InputError(f"patch values outside declared range [{lo}, {hi}]")
        x = (px - lo) / (hi - lo) * 2.0 - 1.0
        return torch.from_numpy(x.transpose(2, 0, 1).copy()).to(dtype).unsqueeze(0)


def as_model_batch(image) -> torch.Tensor:
    """Coerce an ImagePatch or tensor into a finite (B, 3, H, W) tensor."""
    if isinstance(image, ImagePatch):
        x = image.to_model_tensor()
    elif isinstance(image, torch.Tensor):
        x = image.unsqueeze(0) if image.dim() == 3 else image
    else:
        raise InputError(f"unsupported image type {type(image).__name__}")
    if x.dim() != 4 or x.shape[1] != 3:
        raise InputError(f"expected (B, 3, H, W) images, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise InputError("image contains non-finite values")
    return x


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last axis (broadcasting)."""
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    if (na == 0).any() or (nb == 0).any():
        raise InputError("cosine undefined for a zero-norm vector")
    return (a * b).sum(-1) / (na * nb)


def exp_cos(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """e^{cos(a, b)}; lies in [1/e, e]."""
    if a.shape[-1] != b.shape[-1]:
        raise InputError(f"dimension mismatch {a.shape[-1]} vs {b.shape[-1]}")
    return torch.exp(cosine(a, b))


def _normalize(v: torch.Tensor) -> torch.Tensor:
    return v / v.norm(dim=-1, keepdim=True)


def image_statistics(x: torch.Tensor) -> torch.Tensor:
    """(B, 55) statistic vector fed to the toy image encoder."""
    b = x.shape[0]
    flat = x.reshape(b, 3, -1)
    mean = flat.mean(-1)
    var = ((flat - mean.unsqueeze(-1)) ** 2).mean(-1)
    blocks = F.adaptive_avg_pool2d(x, (4, 4)).reshape(b, 48)
    ones = torch.ones(b, 1, dtype=x.dtype)
    return torch.cat([ones, mean, var, blocks], dim=1)


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "toy"
    dim: int = 512
    seed: int = 7
    weights_path: str | None = None


class ToyBackend:
    kind = "toy"
    supports_pyramid = True

    def __init__(self, dim: int = 512, seed: int = 7):
        if dim < 1:
            raise ConfigError("encoder dimension must be positive", "encoder.dim")
        self.dim = dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        self._image_proj = rng.standard_normal((dim, N_STATS)) / math.sqrt(N_STATS)
        self._text_rot = np.linalg.qr(rng.standard_normal((dim, dim)))[0]
        self._pyramid = [
            rng.standard_normal((PYRAMID_CHANNELS, 3)) / math.sqrt(3) for _ in range(PYRAMID_LEVELS)
        ]
        for arr in (self._image_proj, self._text_rot, *self._pyramid):
            arr.setflags(write=False)
        self._cast: dict = {}
        self._token_cache: dict[str, np.ndarray] = {}

    def _param(self, name: str, dtype: torch.dtype) -> torch.Tensor:
        key = (name, dtype)
        if key not in self._cast:
            if name.startswith("pyr"):
                arr = self._pyramid[int(name[3:])]
            else:
                arr = getattr(self, f"_{name}")
            self._cast[key] = torch.from_numpy(np.array(arr)).to(dtype)
        return self._cast[key]

    def fingerprint(self) -> str:
        return f"toy:{self.dim}:{self.seed}"

    def state_checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self._image_proj, self._text_rot, *self._pyramid):
            h.update(arr.tobytes())
        return h.hexdigest()

    def encode_image(self, image) -> torch.Tensor:
        """Normalized (B, dim) embeddings of model-range images."""
        x = as_model_batch(image)
        s = image_statistics(x)
        return _normalize(s @ self._param("image_proj", x.dtype).T)

    def encode_text_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        """Normalized embedding of an (N, dim) or (B, N, dim) token matrix."""
        if tokens.dim() < 2 or tokens.shape[-2] == 0:
            raise InputError("token matrix must have at least one token")
        if tokens.shape[-1] != self.dim:
            raise ConfigError(
                f"token dimension {tokens.shape[-1]} does not match backend dimension {self.dim}",
                "encoder.dim",
            )
        pooled = tokens.mean(dim=-2)
        return _normalize(pooled @ self._param("text_rot", tokens.dtype).T)

    def word_token(self, word: str) -> np.ndarray:
        if word in self._token_cache:
            return self._token_cache[word]
        if word in COLOR_LEXICON:
            rgb = torch.tensor(COLOR_LEXICON[word], dtype=torch.float64) * 2 - 1
            patch = rgb.view(1, 3, 1, 1).expand(1, 3, 4, 4)
            e = self.encode_image(patch)[0].numpy()
            tok = LEXICON_GAIN * (self._text_rot.T @ e)
        else:
            digest = hashlib.sha256(f"{self.seed}:{word}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            tok = rng.standard_normal(self.dim) / math.sqrt(self.dim)
        self._token_cache[word] = tok
        return tok

    def tokenize_text(self, text: str) -> torch.Tensor:
        words = _WORD.findall(text.lower())
        if not words:
            raise InputError("text contains no words")
        return torch.from_numpy(np.stack([self.word_token(w) for w in words]))

    def encode_text(self, text: str) -> torch.Tensor:
        return self.encode_text_tokens(self.tokenize_text(text))

    def encode_pyramid(self, image) -> list[torch.Tensor]:
        """Five feature maps, level l pooled by 2**l, each (B, 8, h_l, w_l)."""
        x = as_model_batch(image)
        h, w = x.shape[-2:]
        levels = []
        for lvl in range(PYRAMID_LEVELS):
            pooled = F.adaptive_avg_pool2d(x, (max(1, h >> lvl), max(1, w >> lvl)))
            weight = self._param(f"pyr{lvl}", x.dtype)
            levels.append(torch.einsum("oc,bchw->bohw", weight, pooled))
        return levels


class PretrainedBackend:
    """Seam for a pretrained CLIP-style model (loaded on first use).

    Uses ``open_clip`` when it is importable; the loaded model must expose
    ``encode_image``, ``encode_text`` and, for the pyramid, a ResNet visual
    trunk with ``stem`` plus ``layer1..layer4``.
    """

    kind = "pretrained"

    def __init__(self, dim: int = 512, weights_path: str | None = None, model_name: str = "RN101"):
        if not weights_path:
            raise ConfigError("pretrained backend requires a weights path", "encoder.weights_path")
        self.dim = dim
        self.weights_path = weights_path
        self.model_name = model_name
        self._model = None
        self._tokenizer = None

    @property
    def supports_pyramid(self) -> bool:
        return hasattr(self._load().visual, "layer4")

    def fingerprint(self) -> str:
        return f"pretrained:{self.model_name}:{self.weights_path}"

    def _load(self):
        if self._model is None:
            try:
                import open_clip
            except ImportError as exc:
                raise CapabilityError("pretrained backend needs the open_clip package") from exc
            model, _, _ = open_clip.create_model_and_transforms(
                self.model_name, pretrained=self.weights_path
            )
            model.eval()
            for p in model.parameters():
                p.requires_grad_(False)
            self._model = model
            self._tokenizer = open_clip.get_tokenizer(self.model_name)
        return self._model

    def state_checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self._load().state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def encode_image(self, image) -> torch.Tensor:
        x = as_model_batch(image)
        return _normalize(self._load().encode_image(x))

    def encode_text_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        # Soft prompts need access to the transformer internals; CoOp-style
        # injection is model specific and lives with the concrete weights.
        raise CapabilityError("soft-token encoding is not wired for this pretrained model")

    def encode_text(self, text: str) -> torch.Tensor:
        model = self._load()
        return _normalize(model.encode_text(self._tokenizer([text]))[0])

    def encode_pyramid(self, image) -> list[torch.Tensor]:
        visual = self._load().visual
        if not (hasattr(visual, "stem") and hasattr(visual, "layer4")):
            raise CapabilityError("pretrained visual encoder has no hierarchical stages")
        x = visual.stem(as_model_batch(image))
        feats = [x]
        for name in ("layer1", "layer2", "layer3", "layer4"):
            x = getattr(visual, name)(x)
            feats.append(x)
        return feats


def make_backend(spec: EncoderSpec):
    if spec.kind == "toy":
        return ToyBackend(dim=spec.dim, seed=spec.seed)
    if spec.kind == "pretrained":
        return PretrainedBackend(dim=spec.dim, weights_path=spec.weights_path)
    raise ConfigError(f"unknown encoder kind {spec.kind!r}", "encoder.kind")


def pyramid_distances(a: Sequence[torch.Tensor], b: Sequence[torch.Tensor]) -> torch.Tensor:
    """Per-sample, per-level L2 distance, shape (B, levels)."""
    if len(a) != len(b):
        raise InputError("pyramids have different depth")
    cols = []
    for fa, fb in zip(a, b):
        diff = (fa - fb).reshape(fa.shape[0], -1)
        cols.append(diff.norm(dim=1))
    return torch.stack(cols, dim=1)


class EmbeddingCache:
    """Append-only binary cache of embeddings keyed by content hash.

    File layout: ``b"SFEMBED\\0"``, u32 version (1), u32 dim, then records of
    a 32-byte sha256 key followed by ``dim`` little-endian float64 values.
    """

    MAGIC = b"SFEMBED\x00"
    VERSION = 1
    _HEAD = struct.Struct("<8sII")

    def __init__(self, path: str | os.PathLike, dim: int):
        self.path = Path(path)
        self.dim = dim
        self._rec = 32 + 8 * dim
        self._index: dict[bytes, np.ndarray] = {}
        if self.path.exists():
            self._read()

    def _read(self):
        data = self.path.read_bytes()
        magic, version, dim = self._HEAD.unpack_from(data)
        if magic != self.MAGIC or version != self.VERSION:
            raise ConfigError(f"embedding cache {self.path} has an unsupported header")
        if dim != self.dim:
            raise ConfigError(f"embedding cache dim {dim} != backend dim {self.dim}", "encoder.dim")
        pos = self._HEAD.size
        while pos + self._rec <= len(data):
            key = data[pos:pos + 32]
            self._index[key] = np.frombuffer(data, "<f8", self.dim, pos + 32).copy()
            pos += self._rec

    @staticmethod
    def key(fingerprint: str, payload: bytes) -> bytes:
        return hashlib.sha256(fingerprint.encode("utf-8") + b"\x00" + payload).digest()

    def get(self, key: bytes) -> np.ndarray | None:
        return self._index.get(key)

    def put(self, key: bytes, values: np.ndarray) -> None:
        if key in self._index:
            return
        values = np.asarray(values, dtype="<f8").reshape(self.dim)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        new = not self.path.exists()
        with open(self.path, "ab") as fh:
            if new:
                fh.write(self._HEAD.pack(self.MAGIC, self.VERSION, self.dim))
            fh.write(key + values.tobytes())
        self._index[key] = values.copy()

    def __len__(self):
        return len(self._index)


def default_cache(dim: int) -> EmbeddingCache | None:
    """Cache under ``$STAINFORGE_CACHE`` if that variable is set."""
    root = os.environ.get("STAINFORGE_CACHE")
    if not root:
        return None
    return EmbeddingCache(Path(root) / f"embeddings-{dim}.sfe", dim)
