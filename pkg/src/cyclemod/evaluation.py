"""Distribution, faithfulness and diversity metrics under fixed preprocessing protocols.

Three protocols cover the common comparison setups: ``lq_legacy`` scales
the shorter side and center-crops (the historical low-resolution pipeline),
``hq_adhoc`` resizes to a square and standardizes channels, and
``consistent`` resizes to a square and otherwise leaves pixels alone.
Feature statistics run in float64; the default feature extractor is a
deterministic stub (area downsample plus a fixed random projection) so the
whole evaluation stack is testable without pretrained network weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch.nn import functional as F

from .config import EvalConfig
from .data import IMAGE_EXTENSIONS, resize_smaller_side

STANDARDIZE_MEAN = (0.485, 0.456, 0.406)
STANDARDIZE_STD = (0.229, 0.224, 0.225)
PSNR_CAP_DB = 100.0  # stands in for infinity on identical images; JSON-safe


class StubFeatureExtractor:
    """Deterministic stand-in features, no pretrained weights needed.

    Images are area-averaged to an 8x8 grid per channel, flattened, and
    passed through a fixed seeded random projection to 64 dimensions.
    """

    feature_dim = 64
    _GRID = 8
    _SEED = 20240613

    def __init__(self):
        rng = np.random.default_rng(self._SEED)
        in_dim = self._GRID * self._GRID * 3
        self.projection = rng.standard_normal((in_dim, self.feature_dim)) / math.sqrt(in_dim)

    def __call__(self, images: np.ndarray) -> np.ndarray:
        arr = np.asarray(images, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[3] != 3:
            raise ValueError(f"expected images [N, H, W, 3], got {arr.shape}")
        t = torch.from_numpy(arr).permute(0, 3, 1, 2)
        pooled = F.adaptive_avg_pool2d(t, self._GRID)
        flat = pooled.permute(0, 2, 3, 1).reshape(arr.shape[0], -1).numpy()
        return flat @ self.projection


class InceptionFeatureExtractor:
    """2048-d pooled features from a torchvision inception_v3 snapshot.

    Needs a local weights file; inputs are bilinearly resized to 299x299.
    """

    feature_dim = 2048

    def __init__(self, weights_path: str | Path):
        from torchvision.models import inception_v3

        self.model = inception_v3(weights=None, aux_logits=True, init_weights=False)
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        self.model.load_state_dict(state)
        self.model.fc = torch.nn.Identity()
        self.model.eval()

    def __call__(self, images: np.ndarray) -> np.ndarray:
        arr = np.asarray(images, dtype=np.float32)
        t = torch.from_numpy(arr).permute(0, 3, 1, 2)
        t = F.interpolate(t, size=(299, 299), mode="bilinear", align_corners=False)
        with torch.no_grad():
            feats = self.model(t)
        return feats.numpy().astype(np.float64)


def make_extractor(spec: str):
    if spec == "stub":
        return StubFeatureExtractor()
    if spec.startswith("inception:"):
        return InceptionFeatureExtractor(spec.split(":", 1)[1])
    raise ValueError(f"unknown extractor spec {spec!r}")


def _psd_sqrt(c: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(c)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def fid(features_x: np.ndarray, features_y: np.ndarray) -> float:
    """Squared mean gap plus covariance misalignment between two feature sets.

    Covariances use the unbiased estimator; the cross term is computed from
    eigenvalues of the symmetrized product, with tiny negatives clamped.
    """
    x = np.asarray(features_x, dtype=np.float64)
    y = np.asarray(features_y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError(f"feature sets must be [N, D] with matching D, got {x.shape} and {y.shape}")
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ValueError("need at least two samples per set")
    mu_x, mu_y = x.mean(axis=0), y.mean(axis=0)
    cov_x = np.atleast_2d(np.cov(x, rowvar=False))
    cov_y = np.atleast_2d(np.cov(y, rowvar=False))
    sx = _psd_sqrt(cov_x)
    eig = np.clip(np.linalg.eigvalsh(sx @ cov_y @ sx), 0.0, None)
    diff = mu_x - mu_y
    value = float(diff @ diff + np.trace(cov_x) + np.trace(cov_y) - 2.0 * np.sqrt(eig).sum())
    return max(value, 0.0)


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Cubic kernel (x . y / D + 1)^3 between feature rows."""
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased squared maximum mean discrepancy under the cubic kernel."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ValueError("need at least two samples per set")
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(term_x + term_y - 2.0 * kxy.mean())


def kid(
    features_x: np.ndarray,
    features_y: np.ndarray,
    subset_size: int | None = None,
    n_subsets: int = 100,
    seed: int = 0,
) -> tuple[float, float]:
    """Mean and std of the unbiased MMD^2 over random equal-size subsets.

    The subset size is clamped to the smaller set so small benchmark splits
    remain usable.
    """
    x = np.asarray(features_x, dtype=np.float64)
    y = np.asarray(features_y, dtype=np.float64)
    if subset_size is None:
        subset_size = min(x.shape[0], y.shape[0])
    subset_size = min(subset_size, x.shape[0], y.shape[0])
    if subset_size < 2:
        raise ValueError("subset_size must be at least 2")
    if n_subsets < 1:
        raise ValueError("n_subsets must be at least 1")
    rng = np.random.default_rng(seed)
    values = np.empty(n_subsets)
    for i in range(n_subsets):
        ix = rng.choice(x.shape[0], subset_size, replace=False)
        iy = rng.choice(y.shape[0], subset_size, replace=False)
        values[i] = mmd2_unbiased(x[ix], y[iy])
    return float(values.mean()), float(values.std())


def protocol_geometry(img: Image.Image, protocol: EvalConfig) -> Image.Image:
    """Resize/crop only; no value transform. Conforming inputs pass through."""
    size = protocol.image_size
    if protocol.kind == "lq_legacy":
        if min(img.size) != size:
            img = resize_smaller_side(img, size, resample=Image.LANCZOS)
        w, h = img.size
        left, top = (w - size) // 2, (h - size) // 2
        return img.crop((left, top, left + size, top + size))
    if img.size != (size, size):
        img = img.resize((size, size), Image.LANCZOS)
    return img


def standardize(arr: np.ndarray) -> np.ndarray:
    mean = np.asarray(STANDARDIZE_MEAN, dtype=arr.dtype)
    std = np.asarray(STANDARDIZE_STD, dtype=arr.dtype)
    return (arr - mean) / std


def preprocess(img: Image.Image, protocol: EvalConfig) -> np.ndarray:
    """Protocol-conforming float32 array [H, W, C].

    ``lq_legacy`` and ``consistent`` return values in [0, 1]; ``hq_adhoc``
    additionally standardizes channels.
    """
    arr = np.asarray(protocol_geometry(img.convert("RGB"), protocol), dtype=np.float32) / 255.0
    if protocol.kind == "hq_adhoc":
        arr = standardize(arr)
    return arr


def list_image_files(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"image folder missing: {directory}")
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not paths:
        raise FileNotFoundError(f"no images under {directory}")
    return paths


def load_image_dir(directory: str | Path, protocol: EvalConfig) -> np.ndarray:
    """All images of a folder as one [N, H, W, C] array in [0, 1] (geometry only)."""
    arrays = []
    for path in list_image_files(directory):
        with Image.open(path) as img:
            geo = protocol_geometry(img.convert("RGB"), protocol)
            arrays.append(np.asarray(geo, dtype=np.float32) / 255.0)
    return np.stack(arrays)


def pixel_l2(a: np.ndarray, b: np.ndarray) -> float:
    """Root mean square pixel difference on the 0-255 scale."""
    diff = (np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) * 255.0
    return float(np.sqrt(np.mean(diff**2)))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB, capped for identical images."""
    rms = pixel_l2(a, b)
    if rms == 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 20.0 * math.log10(255.0 / rms)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    window = torch.outer(g, g)
    return (window / window.sum()).reshape(1, 1, size, size)


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (valid region)."""
    x = torch.from_numpy(np.asarray(a, dtype=np.float64)).permute(2, 0, 1).unsqueeze(1)
    y = torch.from_numpy(np.asarray(b, dtype=np.float64)).permute(2, 0, 1).unsqueeze(1)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if x.shape[-1] < 11 or x.shape[-2] < 11:
        raise ValueError("images must be at least 11x11 for the SSIM window")
    window = _gaussian_window()
    mu_x = F.conv2d(x, window)
    mu_y = F.conv2d(y, window)
    var_x = F.conv2d(x * x, window) - mu_x**2
    var_y = F.conv2d(y * y, window) - mu_y**2
    cov = F.conv2d(x * y, window) - mu_x * mu_y
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    score = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    )
    return float(score.mean())


def pixel_metrics(sources: np.ndarray, translations: np.ndarray) -> dict[str, float]:
    """Per-pair L2 / PSNR / SSIM averaged over a paired image set ([0, 1] values)."""
    if len(sources) != len(translations) or len(sources) == 0:
        raise ValueError("sources and translations must pair up one to one")
    l2s, psnrs, ssims = [], [], []
    for src, trans in zip(sources, translations):
        l2s.append(pixel_l2(src, trans))
        psnrs.append(psnr(src, trans))
        ssims.append(ssim(src, trans))
    return {
        "pixel_l2": float(np.mean(l2s)),
        "psnr": float(np.mean(psnrs)),
        "ssim": float(np.mean(ssims)),
    }


def i_l2(features_src: np.ndarray, features_trans: np.ndarray) -> float:
    """Mean feature-space distance between each source and its translation."""
    a = np.asarray(features_src, dtype=np.float64)
    b = np.asarray(features_trans, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired feature sets must have identical shape")
    return float(np.linalg.norm(a - b, axis=1).mean())


def load_landmarks(path: str | Path) -> np.ndarray:
    """Landmark coordinates from a JSON file: {'landmarks': [[x, y, ...], ...]}."""
    with open(path) as fh:
        data = json.load(fh)
    arr = np.asarray(data["landmarks"], dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"landmarks in {path} must be a list of coordinate rows")
    return arr


def lm_l2(landmarks_a: np.ndarray, landmarks_b: np.ndarray) -> float:
    """Mean Euclidean distance between corresponding landmark rows."""
    a = np.asarray(landmarks_a, dtype=np.float64)
    b = np.asarray(landmarks_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("landmark sets must have identical shape")
    return float(np.linalg.norm(a - b, axis=1).mean())


def lm_l2_dirs(dir_a: str | Path, dir_b: str | Path) -> float:
    """Mean lm_l2 over same-named JSON files of two folders."""
    files_a = sorted(Path(dir_a).glob("*.json"))
    files_b = sorted(Path(dir_b).glob("*.json"))
    if not files_a or [p.name for p in files_a] != [p.name for p in files_b]:
        raise ValueError("landmark folders must hold the same JSON file names")
    values = [lm_l2(load_landmarks(fa), load_landmarks(fb)) for fa, fb in zip(files_a, files_b)]
    return float(np.mean(values))


def diversity(images: np.ndarray, extractor=None) -> float:
    """Mean feature distance between consecutive images; 0 below two images."""
    if len(images) < 2:
        return 0.0
    extractor = extractor or StubFeatureExtractor()
    feats = np.asarray(extractor(np.asarray(images)), dtype=np.float64)
    return float(np.linalg.norm(feats[1:] - feats[:-1], axis=1).mean())


@dataclass
class EvalReport:
    protocol: str
    n_translated: int
    n_target: int
    fid: float
    kid_mean: float
    kid_std: float
    kid_subset_size: int
    i_l2: float
    pixel_l2: float
    psnr: float
    ssim: float
    diversity: float
    lm_l2: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def evaluate(
    translated_dir: str | Path,
    target_dir: str | Path,
    source_dir: str | Path,
    protocol: EvalConfig,
    extractor=None,
    landmarks_source: str | Path | None = None,
    landmarks_translated: str | Path | None = None,
    kid_seed: int = 0,
) -> EvalReport:
    """Full report comparing translations against the target domain and sources.

    Distribution metrics (FID/KID) compare translations with the target
    set; faithfulness metrics pair each translation with its source, so the
    translated and source folders must hold equally many images in matching
    sorted order.
    """
    protocol.validate()
    extractor = extractor or make_extractor(protocol.extractor)
    trans = load_image_dir(translated_dir, protocol)
    target = load_image_dir(target_dir, protocol)
    source = load_image_dir(source_dir, protocol)
    if len(source) != len(trans):
        raise ValueError(
            f"translated ({len(trans)}) and source ({len(source)}) folders must pair up"
        )

    needs_standardize = protocol.kind == "hq_adhoc"

    def features_of(arr: np.ndarray) -> np.ndarray:
        return extractor(standardize(arr) if needs_standardize else arr)

    feats_trans = features_of(trans)
    feats_target = features_of(target)
    feats_source = features_of(source)

    fid_value = fid(feats_trans, feats_target)
    subset = min(protocol.resolved_kid_subset(), len(trans), len(target))
    kid_mean, kid_std = kid(
        feats_trans, feats_target, subset_size=subset, n_subsets=protocol.kid_subsets, seed=kid_seed
    )
    pm = pixel_metrics(source, trans)
    lm_value = None
    if landmarks_source is not None and landmarks_translated is not None:
        lm_value = lm_l2_dirs(landmarks_source, landmarks_translated)

    return EvalReport(
        protocol=protocol.kind,
        n_translated=len(trans),
        n_target=len(target),
        fid=fid_value,
        kid_mean=kid_mean,
        kid_std=kid_std,
        kid_subset_size=subset,
        i_l2=i_l2(feats_source, feats_trans),
        pixel_l2=pm["pixel_l2"],
        psnr=pm["psnr"],
        ssim=pm["ssim"],
        diversity=float(np.linalg.norm(feats_trans[1:] - feats_trans[:-1], axis=1).mean())
        if len(feats_trans) >= 2
        else 0.0,
        lm_l2=lm_value,
    )
