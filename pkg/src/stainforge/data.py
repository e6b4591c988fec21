"""Patch tiling, background filtering, manifests and the synthetic stain set.

Manifest format: UTF-8 text, one JSON object per line with exactly the keys
``path`` (relative to the manifest's directory, forward slashes), ``stain``
(``H&E``/``MAS``/``PAS``/``PASM``), ``slide`` (string), ``x`` and ``y``
(integer patch origin, column then row) and ``split`` (``train``/``test``).
Keys are written sorted with ``", "``/``": "`` separators; records keep the
order they were given in. Blank lines are not allowed.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import STAIN_KEYS, STAINS, stain_index
from .archive import atomic_write_bytes
from .errors import InputError, ManifestError

SPLITS = ("train", "test")
_FIELDS = ("path", "stain", "slide", "x", "y", "split")


@dataclass(frozen=True)
class TilingSpec:
    patch_size: int = 256
    overlap: int = 192
    sat_threshold: float = 15.0
    stat: str = "mean"

    def __post_init__(self):
        if self.patch_size < 1:
            raise InputError("patch size must be positive")
        if not 0 <= self.overlap < self.patch_size:
            raise InputError(f"overlap must satisfy 0 <= V < P, got V={self.overlap}, P={self.patch_size}")
        if not 0 <= self.sat_threshold <= 255:
            raise InputError("saturation threshold must lie in [0, 255]")
        if self.stat not in ("mean", "max", "median"):
            raise InputError(f"unknown saturation statistic {self.stat!r}")

    @property
    def stride(self) -> int:
        return self.patch_size - self.overlap


def grid_count(dim: int, patch_size: int, stride: int) -> int:
    """Full patches along one axis; no partial patches at the edge."""
    if dim < patch_size:
        return 0
    return (dim - patch_size) // stride + 1


def saturation(rgb: np.ndarray) -> np.ndarray:
    """HSV saturation per pixel on a 0-255 scale for 0-255 RGB input."""
    rgb = np.asarray(rgb, dtype=np.float64)
    hi = rgb.max(axis=-1)
    lo = rgb.min(axis=-1)
    out = np.zeros_like(hi)
    np.divide(hi - lo, hi, out=out, where=hi > 0)
    return out * 255.0


def is_background(patch: np.ndarray, tau: float = 15.0, stat: str = "mean") -> bool:
    """True when the patch's saturation statistic is strictly below ``tau``."""
    sat = saturation(patch)
    reducer = {"mean": np.mean, "max": np.max, "median": np.median}[stat]
    return bool(reducer(sat) < tau)


def extract_patches(slide: np.ndarray, spec: TilingSpec, keep_background: bool = False):
    """Tile a slide (H x W x 3, 0-255) on the stride grid from (0, 0).

    Returns ``[(patch, (x, y)), ...]`` in row-major order, background patches
    removed unless ``keep_background``.
    """
    slide = np.asarray(slide)
    if slide.ndim != 3 or slide.shape[2] != 3:
        raise InputError(f"slide must be H x W x 3, got {slide.shape}")
    h, w = slide.shape[:2]
    p, s = spec.patch_size, spec.stride
    if h < p or w < p:
        raise InputError(f"slide {w}x{h} is smaller than patch size {p}")
    out = []
    for iy in range(grid_count(h, p, s)):
        for ix in range(grid_count(w, p, s)):
            y, x = iy * s, ix * s
            patch = slide[y:y + p, x:x + p]
            if keep_background or not is_background(patch, spec.sat_threshold, spec.stat):
                out.append((patch, (x, y)))
    return out


@dataclass(frozen=True)
class PatchRecord:
    path: str
    stain: str
    slide: str
    x: int
    y: int
    split: str = "train"


@dataclass
class PatchManifest:
    records: list[PatchRecord] = field(default_factory=list)
    root: Path = Path(".")

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            key = (rec.slide, rec.x, rec.y)
            if key in seen:
                raise ManifestError(f"duplicate patch origin {key}")
            seen.add(key)

    def __len__(self):
        return len(self.records)

    def resolve(self, rec: PatchRecord) -> Path:
        return self.root / rec.path

    def select(self, stain: str | None = None, split: str | None = None) -> list[PatchRecord]:
        return [
            r for r in self.records
            if (stain is None or r.stain == stain) and (split is None or r.split == split)
        ]

    def stains(self) -> list[str]:
        return sorted({r.stain for r in self.records}, key=STAINS.index)

    def load_images(self, stain: str, split: str | None = "train") -> np.ndarray:
        """Stack of (N, H, W, 3) uint8 patches for one stain, manifest order."""
        recs = self.select(stain, split)
        if not recs:
            raise InputError(f"manifest has no {stain} patches in split {split!r}")
        return np.stack([read_image(self.resolve(r)) for r in recs])


def _parse_record(obj, lineno: int) -> PatchRecord:
    if not isinstance(obj, dict) or set(obj) != set(_FIELDS):
        raise ManifestError(f"record must have exactly the keys {_FIELDS}", lineno)
    if obj["stain"] not in STAINS:
        raise ManifestError(f"unknown stain {obj['stain']!r}", lineno)
    if obj["split"] not in SPLITS:
        raise ManifestError(f"unknown split {obj['split']!r}", lineno)
    for k in ("x", "y"):
        if not isinstance(obj[k], int) or isinstance(obj[k], bool) or obj[k] < 0:
            raise ManifestError(f"{k} must be a non-negative integer", lineno)
    if not isinstance(obj["path"], str) or not isinstance(obj["slide"], str):
        raise ManifestError("path and slide must be strings", lineno)
    return PatchRecord(**obj)


def read_manifest(path: str | os.PathLike, check_paths: bool = True) -> PatchManifest:
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"malformed JSON ({exc.msg})", lineno) from None
        records.append(_parse_record(obj, lineno))
    manifest = PatchManifest(records, root=path.parent)
    if check_paths:
        for rec in records:
            if not manifest.resolve(rec).exists():
                raise ManifestError(f"missing patch file {rec.path}")
    return manifest


def dumps_manifest(manifest: PatchManifest) -> str:
    return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in manifest.records)


def write_manifest(path: str | os.PathLike, manifest: PatchManifest) -> None:
    atomic_write_bytes(path, dumps_manifest(manifest).encode("utf-8"))


def read_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_image(path: str | os.PathLike, pixels: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path, format="PNG")


def prepare_data(input_dir, out_dir, spec: TilingSpec, test_slides=()) -> PatchManifest:
    """Tile ``input_dir/<stain key>/<slide>.png`` into ``out_dir``."""
    input_dir, out_dir = Path(input_dir), Path(out_dir)
    records = []
    for key in STAIN_KEYS:
        stain_dir = input_dir / key
        if not stain_dir.is_dir():
            continue
        for slide_path in sorted(stain_dir.glob("*.png")):
            slide_id = f"{key}-{slide_path.stem}"
            split = "test" if slide_path.stem in set(test_slides) else "train"
            for patch, (x, y) in extract_patches(read_image(slide_path), spec):
                rel = f"{key}/{slide_path.stem}_{x}_{y}.png"
                write_image(out_dir / rel, patch)
                records.append(PatchRecord(rel, STAINS[STAIN_KEYS.index(key)], slide_id, x, y, split))
    if not records:
        raise InputError(f"no tissue patches found under {input_dir}")
    manifest = PatchManifest(records, root=out_dir)
    write_manifest(out_dir / "manifest.jsonl", manifest)
    return manifest


# Optical densities per stain: -ln(rgb) of the colour each component takes at
# unit density. Rendered intensity is exp(-sum_k density_k * od_k).
STAIN_COLORS = {
    "H&E": {"nuclei": (0.40, 0.24, 0.58), "fibers": (0.90, 0.50, 0.70), "cytoplasm": (0.95, 0.68, 0.82)},
    "MAS": {"nuclei": (0.22, 0.16, 0.22), "fibers": (0.28, 0.42, 0.82), "cytoplasm": (0.86, 0.30, 0.32)},
    "PAS": {"nuclei": (0.30, 0.36, 0.70), "fibers": (0.82, 0.28, 0.66), "cytoplasm": (0.94, 0.74, 0.86)},
    "PASM": {"nuclei": (0.36, 0.36, 0.38), "fibers": (0.14, 0.13, 0.13), "cytoplasm": (0.88, 0.80, 0.80)},
}
_BACKGROUND = 0.96


def _od(rgb) -> np.ndarray:
    return -np.log(np.asarray(rgb, dtype=np.float64))


def synth_structure(rng: np.random.Generator, size: int) -> dict[str, np.ndarray]:
    """Stain-free tissue layout: nuclei, fibers and cytoplasm densities in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    fibers = np.zeros((size, size))
    for _ in range(4):
        fx, fy = rng.uniform(-0.35, 0.35, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        fibers += np.sin(fx * xx + fy * yy + phase)
    fibers = 1.0 / (1.0 + np.exp(-2.5 * fibers))
    nuclei = np.zeros((size, size))
    for _ in range(max(3, size * size // 110)):
        cx, cy = rng.uniform(0, size, size=2)
        r = rng.uniform(1.5, 3.2)
        nuclei = np.maximum(nuclei, np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r)))
    lumen = np.zeros((size, size))
    for _ in range(rng.integers(0, 3)):
        cx, cy = rng.uniform(0, size, size=2)
        ax, ay = rng.uniform(size / 12, size / 5, size=2)
        lumen = np.maximum(lumen, np.exp(-(((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2) ** 2))
    tissue = 1.0 - lumen
    return {
        "nuclei": nuclei * tissue,
        "fibers": 0.8 * fibers * (1 - nuclei) * tissue,
        "cytoplasm": 0.6 * (1 - fibers) * (1 - nuclei) * tissue,
    }


def render_stain(structure: dict[str, np.ndarray], stain: str, rng: np.random.Generator) -> np.ndarray:
    """Render a structure under one stain; returns H x W x 3 uint8."""
    colors = STAIN_COLORS[stain]
    od = np.zeros(structure["nuclei"].shape + (3,))
    for comp, density in structure.items():
        gain = rng.uniform(0.85, 1.15)
        od += gain * density[..., None] * _od(colors[comp])
    img = _BACKGROUND * np.exp(-od) + rng.normal(0, 0.01, size=od.shape)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def synth_stain_dataset(seed: int, count: int, size: int, out_dir, stains=("H&E", "MAS"),
                        test_fraction: float = 0.2) -> PatchManifest:
    """Write ``count`` structures rendered under each stain to ``out_dir``.

    Files go to ``<split>/<stain key>/<index>.png``. Rendering ``i`` of every
    stain shares one structure, so test files with the same name are aligned
    pairs even though training treats the domains as unpaired. Structures
    with index >= (1 - test_fraction) * count form the test split.
    """
    if count < 2:
        raise InputError("count must be at least 2")
    if size < 32:
        raise InputError("size must be at least 32")
    stains = [STAINS[stain_index(s)] for s in stains]
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    n_train = max(1, int(round(count * (1 - test_fraction))))
    records = []
    for i in range(count):
        structure = synth_structure(np.random.default_rng([seed, i]), size)
        split = "train" if i < n_train else "test"
        for stain in stains:
            key = STAIN_KEYS[STAINS.index(stain)]
            rng = np.random.default_rng([seed, i, STAINS.index(stain) + 1])
            rel = f"{split}/{key}/{i:04d}.png"
            write_image(out_dir / rel, render_stain(structure, stain, rng))
            records.append(PatchRecord(rel, stain, f"{key}-{i:04d}", 0, 0, split))
    manifest = PatchManifest(records, root=out_dir)
    write_manifest(out_dir / "manifest.jsonl", manifest)
    return manifest


def linear_probe_accuracy(train_x, train_y, test_x, test_y, ridge: float = 1e-3) -> float:
    """Held-out accuracy of a ridge least-squares classifier on +/-1 labels."""
    def design(x):
        x = np.asarray(x, dtype=np.float64)
        return np.hstack([x, np.ones((len(x), 1))])

    a = design(train_x)
    t = np.where(np.asarray(train_y) > 0, 1.0, -1.0)
    w = np.linalg.solve(a.T @ a + ridge * np.eye(a.shape[1]), a.T @ t)
    pred = design(test_x) @ w > 0
    return float(np.mean(pred == (np.asarray(test_y) > 0)))


def synth_quality(manifest: PatchManifest, backend, stain_a: str = "H&E", stain_b: str = "MAS") -> dict:
    """Generation-time checks: domain separability and structure preservation.

    ``probe_accuracy`` is a linear probe on encoder embeddings fitted on the
    train split and scored on the test split; ``pair_ssim`` is the mean SSIM
    between the two renderings of each structure.
    """
    import torch

    from .metrics import ssim

    def embed(imgs):
        x = torch.from_numpy(imgs.astype(np.float64)).permute(0, 3, 1, 2) / 127.5 - 1
        with torch.no_grad():
            return backend.encode_image(x).numpy()

    def load(stain, split):
        return manifest.load_images(stain, split) if manifest.select(stain, split) else None

    tr_a, tr_b = manifest.load_images(stain_a, "train"), manifest.load_images(stain_b, "train")
    te_a, te_b = load(stain_a, "test"), load(stain_b, "test")
    if te_a is None or te_b is None:
        te_a, te_b = tr_a, tr_b
    acc = linear_probe_accuracy(
        np.vstack([embed(tr_a), embed(tr_b)]), np.r_[np.zeros(len(tr_a)), np.ones(len(tr_b))],
        np.vstack([embed(te_a), embed(te_b)]), np.r_[np.zeros(len(te_a)), np.ones(len(te_b))],
    )
    all_a = manifest.load_images(stain_a, None)
    all_b = manifest.load_images(stain_b, None)
    pairs = [ssim(a / 255.0, b / 255.0) for a, b in zip(all_a, all_b)]
    return {"probe_accuracy": acc, "pair_ssim": float(np.mean(pairs)), "pairs": len(pairs)}
