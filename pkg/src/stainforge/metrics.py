"""Image-quality metrics for virtual staining: SSIM, CSS, MS-SSIM, PSNR, FID.

All windowed similarities use an 11-tap Gaussian (sigma 1.5), valid
convolution, population statistics, K1 = 0.01, K2 = 0.03 and average the
per-channel means. CSS is SSIM without the luminance factor, i.e. the mean
of the contrast-structure map ``(2 s_xy + C2) / (s_x^2 + s_y^2 + C2)``.

Inputs to the public functions are H x W x 3 (or H x W) arrays already on the
declared ``data_range`` scale, or (B, C, H, W) tensors. Computation is done
in float64.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InputError, NumericError

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
PSNR_CAP = 100.0
WIN_SIZE = 11
WIN_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def gaussian_window(size: int = WIN_SIZE, sigma: float = WIN_SIGMA, dtype=torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - size // 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    wh = win.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    wv = win.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    return F.conv2d(F.conv2d(x, wh, groups=c), wv, groups=c)


def ssim_maps(x: torch.Tensor, y: torch.Tensor, data_range: float = 1.0, win_size: int = WIN_SIZE,
              sigma: float = WIN_SIGMA, k1: float = K1, k2: float = K2):
    """Per-channel mean SSIM and contrast-structure values, each (B, C).

    Differentiable; used both by the metrics and by the enhancement losses.
    """
    if x.shape != y.shape:
        raise InputError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if min(x.shape[-2:]) < win_size:
        raise InputError(f"image {tuple(x.shape[-2:])} smaller than the {win_size}-pixel window")
    win = gaussian_window(win_size, sigma, x.dtype)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_x = _filter(x, win)
    mu_y = _filter(y, win)
    sxx = _filter(x * x, win) - mu_x ** 2
    syy = _filter(y * y, win) - mu_y ** 2
    sxy = _filter(x * y, win) - mu_x * mu_y
    cs_map = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    ssim_map = lum * cs_map
    return ssim_map.flatten(2).mean(-1), cs_map.flatten(2).mean(-1)


def _as_batch(img) -> torch.Tensor:
    if isinstance(img, torch.Tensor):
        t = img.to(torch.float64)
        if t.dim() == 3:
            t = t.unsqueeze(0)
        return t
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise InputError(f"expected an H x W x C image, got shape {arr.shape}")
    return torch.from_numpy(arr.transpose(2, 0, 1).copy()).unsqueeze(0)


def _pair(a, b):
    x, y = _as_batch(a), _as_batch(b)
    if x.shape != y.shape:
        raise InputError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    return x, y


def ssim(a, b, data_range: float = 1.0) -> float:
    x, y = _pair(a, b)
    s, _ = ssim_maps(x, y, data_range)
    return float(s.mean())


def css(a, b, data_range: float = 1.0) -> float:
    x, y = _pair(a, b)
    _, cs = ssim_maps(x, y, data_range)
    return float(cs.mean())


def ms_ssim_min_size(scales: int, win_size: int = WIN_SIZE) -> int:
    return (win_size - 1) * 2 ** (scales - 1) + 1


def ms_ssim_weights(scales: int) -> tuple[float, ...]:
    """Canonical weights truncated to ``scales`` and renormalized to sum 1."""
    if not 1 <= scales <= 5:
        raise InputError("MS-SSIM supports 1 to 5 scales")
    w = MS_SSIM_WEIGHTS[:scales]
    if scales == 5:
        return w
    total = sum(w)
    return tuple(v / total for v in w)


def max_ms_ssim_scales(height: int, width: int) -> int:
    for n in range(5, 0, -1):
        if min(height, width) >= ms_ssim_min_size(n):
            return n
    return 0


def ms_ssim(a, b, data_range: float = 1.0, scales: int = 5) -> float:
    """Multi-scale SSIM; 2x average pooling between scales.

    Contrast-structure terms of the first ``scales - 1`` levels and the full
    SSIM of the last level are clamped at 0 and combined as a weighted
    geometric mean per channel, then averaged over channels.
    """
    x, y = _pair(a, b)
    need = ms_ssim_min_size(scales)
    if min(x.shape[-2:]) < need:
        raise InputError(
            f"MS-SSIM with {scales} scales needs images of at least {need}x{need}, "
            f"got {tuple(x.shape[-2:])}"
        )
    weights = torch.tensor(ms_ssim_weights(scales), dtype=torch.float64).view(-1, 1, 1)
    terms = []
    for level in range(scales):
        s, cs = ssim_maps(x, y, data_range)
        if level < scales - 1:
            terms.append(torch.relu(cs))
            pad = [d % 2 for d in x.shape[-2:]]
            x = F.avg_pool2d(x, 2, padding=pad)
            y = F.avg_pool2d(y, 2, padding=pad)
        else:
            terms.append(torch.relu(s))
    stacked = torch.stack(terms, dim=0)
    return float(torch.prod(stacked ** weights, dim=0).mean())


def psnr(a, b, data_range: float = 1.0) -> float:
    x, y = _pair(a, b)
    mse = float(((x - y) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range ** 2 / mse))


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise InputError("feature statistics need at least 2 samples")


def feature_stats(features: np.ndarray) -> FeatureStats:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise InputError("need a (N >= 2, F) feature matrix")
    return FeatureStats(feats.mean(axis=0), np.cov(feats, rowvar=False), feats.shape[0])


class StatsAccumulator:
    """One-pass mean/covariance accumulation over feature batches."""

    def __init__(self, dim: int):
        self.n = 0
        self.total = np.zeros(dim)
        self.outer = np.zeros((dim, dim))

    def update(self, batch: np.ndarray) -> None:
        batch = np.asarray(batch, dtype=np.float64)
        self.n += batch.shape[0]
        self.total += batch.sum(axis=0)
        self.outer += batch.T @ batch

    def finalize(self) -> FeatureStats:
        if self.n < 2:
            raise InputError("need at least 2 samples")
        mean = self.total / self.n
        cov = (self.outer - self.n * np.outer(mean, mean)) / (self.n - 1)
        return FeatureStats(mean, cov, self.n)


def _psd_sqrt(sym: np.ndarray, name: str, tol: float = 1e-6) -> np.ndarray:
    vals, vecs = np.linalg.eigh(sym)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol * scale:
        raise NumericError(f"{name} is not positive semi-definite (eigenvalue {vals.min():.3e})")
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(s1: FeatureStats, s2: FeatureStats) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}).

    The trace of (S1 S2)^{1/2} is taken as the sum of square roots of the
    eigenvalues of the symmetric matrix S1^{1/2} S2 S1^{1/2}, which keeps the
    computation real; negative eigenvalues from round-off are clamped to 0.
    """
    if s1.mean.shape != s2.mean.shape:
        raise InputError(f"feature dimensions differ: {s1.mean.shape} vs {s2.mean.shape}")
    c1 = (s1.cov + s1.cov.T) / 2
    c2 = (s2.cov + s2.cov.T) / 2
    root1 = _psd_sqrt(c1, "covariance 1")
    _psd_sqrt(c2, "covariance 2")
    mid = root1 @ c2 @ root1
    mid = (mid + mid.T) / 2
    tr_covmean = float(np.sqrt(np.clip(np.linalg.eigvalsh(mid), 0, None)).sum())
    diff = s1.mean - s2.mean
    d = float(diff @ diff) + float(np.trace(c1) + np.trace(c2)) - 2.0 * tr_covmean
    return max(d, 0.0)


def _load_set(images) -> list[np.ndarray]:
    from .data import read_image

    if isinstance(images, (str, os.PathLike)):
        paths = sorted(Path(images).rglob("*.png"))
        return [read_image(p) for p in paths]
    return [np.asarray(im) for im in images]


def extract_features(images, backend, batch_size: int = 64, cache=None) -> np.ndarray:
    """Backend embeddings (N, D) of 0-255 RGB images."""
    feats = []
    fp = backend.fingerprint() if cache is not None else None
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        rows: list = [None] * len(chunk)
        todo = []
        for i, im in enumerate(chunk):
            if cache is not None:
                key = cache.key(fp, np.ascontiguousarray(im, dtype=np.uint8).tobytes() + str(im.shape).encode())
                hit = cache.get(key)
                if hit is not None:
                    rows[i] = hit
                    continue
            todo.append(i)
        if todo:
            x = torch.from_numpy(np.stack([chunk[i] for i in todo]).astype(np.float64))
            x = x.permute(0, 3, 1, 2) / 127.5 - 1.0
            with torch.no_grad():
                emb = backend.encode_image(x).numpy()
            for j, i in enumerate(todo):
                rows[i] = emb[j]
                if cache is not None:
                    im = chunk[i]
                    key = cache.key(fp, np.ascontiguousarray(im, dtype=np.uint8).tobytes() + str(im.shape).encode())
                    cache.put(key, emb[j])
        feats.extend(rows)
    return np.stack(feats)


def fid(set_a, set_b, backend, cache=None) -> float:
    """Frechet distance between backend-feature Gaussians of two image sets.

    Sets are directories of PNGs or sequences of H x W x 3 uint8 arrays.
    Values are only comparable between runs that used the same backend.
    """
    a, b = _load_set(set_a), _load_set(set_b)
    if len(a) < 2 or len(b) < 2:
        raise InputError("FID needs at least 2 images per set")
    fa = extract_features(a, backend, cache=cache)
    fb = extract_features(b, backend, cache=cache)
    return frechet_distance(feature_stats(fa), feature_stats(fb))


PAIR_METRICS = ("ssim", "css", "ms_ssim", "psnr")
METRIC_ALIASES = {"ssim": "ssim", "css": "css", "msssim": "ms_ssim", "ms_ssim": "ms_ssim",
                  "ms-ssim": "ms_ssim", "psnr": "psnr", "fid": "fid"}


@dataclass
class MetricReport:
    pairs: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    fid: float | None = None
    config: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.pairs)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))

    def save(self, path) -> None:
        from .archive import atomic_write_bytes

        atomic_write_bytes(path, self.to_json().encode("utf-8"))


def aggregate(values: list[float]) -> dict:
    """Mean, population std and count."""
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "count": int(arr.size)}


def evaluate_pairset(pred_dir, ref_dir, metrics=("ssim", "css", "ms_ssim", "psnr", "fid"),
                     backend=None, data_range: float = 1.0, ms_ssim_scales: int | None = None,
                     cache=None) -> MetricReport:
    """Score name-aligned PNGs under ``pred_dir`` against ``ref_dir``.

    Pixels are mapped to ``[0, data_range]``. When ``ms_ssim_scales`` is
    None the largest scale count the image size allows (at most 5) is used.
    """
    from .data import read_image

    wanted = []
    for m in metrics:
        if m not in METRIC_ALIASES:
            raise InputError(f"unknown metric {m!r}")
        wanted.append(METRIC_ALIASES[m])
    pred_dir, ref_dir = Path(pred_dir), Path(ref_dir)
    pred = {p.relative_to(pred_dir).as_posix() for p in pred_dir.rglob("*.png")}
    ref = {p.relative_to(ref_dir).as_posix() for p in ref_dir.rglob("*.png")}
    orphans = sorted(pred ^ ref)
    if orphans:
        raise InputError(f"unmatched files: {', '.join(orphans)}")
    if not pred:
        raise InputError("no PNG files to evaluate")
    names = sorted(pred)
    pairs = []
    scales_used = ms_ssim_scales
    for name in names:
        a = read_image(pred_dir / name).astype(np.float64) / 255.0 * data_range
        b = read_image(ref_dir / name).astype(np.float64) / 255.0 * data_range
        rec = {"name": name}
        if "ssim" in wanted:
            rec["ssim"] = ssim(a, b, data_range)
        if "css" in wanted:
            rec["css"] = css(a, b, data_range)
        if "ms_ssim" in wanted:
            if scales_used is None:
                scales_used = max_ms_ssim_scales(*a.shape[:2])
            rec["ms_ssim"] = ms_ssim(a, b, data_range, scales=scales_used)
        if "psnr" in wanted:
            rec["psnr"] = psnr(a, b, data_range)
        pairs.append(rec)
    aggregates = {m: aggregate([p[m] for p in pairs]) for m in PAIR_METRICS if m in wanted}
    fid_value = None
    if "fid" in wanted:
        if backend is None:
            raise InputError("FID requested but no feature backend given")
        fid_value = fid(pred_dir, ref_dir, backend, cache=cache)
    config = {
        "window": WIN_SIZE,
        "sigma": WIN_SIGMA,
        "k1": K1,
        "k2": K2,
        "data_range": data_range,
        "ms_ssim_scales": scales_used,
        "feature_backend": backend.fingerprint() if backend is not None and "fid" in wanted else None,
        "metrics": wanted,
    }
    return MetricReport(pairs=pairs, aggregates=aggregates, fid=fid_value, config=config)
