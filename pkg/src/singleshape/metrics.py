"""Shape-quality metrics: local-patch IoU / F-score, diversity, SSFID, variation maps."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from torch import nn

from .voxgrid import check_grid

PATCH = 11
STRIDE = 5
N_GENERATED_PATCHES = 1000
DELTA = 0.95


class ConfigurationError(RuntimeError):
    pass


def binarize(grid, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(grid) >= threshold


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def iou(a, b) -> float:
    """|a and b| / |a or b|; 1 when both are empty."""
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    _same_shape(a, b)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def f_score(truth, pred) -> float:
    """Harmonic mean of voxelwise precision and recall of ``pred``; 1 when both are empty."""
    truth, pred = np.asarray(truth, bool), np.asarray(pred, bool)
    _same_shape(truth, pred)
    denom = truth.sum() + pred.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(truth, pred).sum() / denom)


# ---------------------------------------------------------------------------
# patches

@dataclass
class PatchSet:
    patches: np.ndarray      # (n_valid, s, s, s) bool
    positions: np.ndarray    # (n_valid, 3) corner index of each valid patch
    n_candidates: int

    def __len__(self):
        return len(self.patches)

    def subsample(self, n: int, seed: int = 0) -> PatchSet:
        """Uniformly pick ``n`` patches without replacement (all if fewer)."""
        if len(self) <= n:
            return self
        idx = np.sort(np.random.default_rng(seed).choice(len(self), n, replace=False))
        return PatchSet(self.patches[idx], self.positions[idx], self.n_candidates)


def sample_patches(grid, size: int = PATCH, stride: int = STRIDE) -> PatchSet:
    """Strided size^3 windows whose central 3^3 block holds both occupied and empty voxels."""
    occ = binarize(check_grid(grid))
    if min(occ.shape) < size:
        raise ValueError(f"grid {occ.shape} is smaller than the patch size {size}")
    win = sliding_window_view(occ, (size, size, size))[::stride, ::stride, ::stride]
    grid_shape = win.shape[:3]
    win = win.reshape(-1, size, size, size)
    c = size // 2
    center = win[:, c - 1:c + 2, c - 1:c + 2, c - 1:c + 2].reshape(len(win), -1)
    valid = center.any(axis=1) & ~center.all(axis=1)
    pos = np.stack(np.unravel_index(np.arange(len(win)), grid_shape), 1) * stride
    return PatchSet(np.ascontiguousarray(win[valid]), pos[valid], len(win))


def _pairwise_best(gen: np.ndarray, ref: np.ndarray, kind: str, chunk: int = 256) -> np.ndarray:
    g = gen.reshape(len(gen), -1).astype(np.float32)
    r = ref.reshape(len(ref), -1).astype(np.float32)
    g_sum, r_sum = g.sum(1), r.sum(1)
    best = np.empty(len(g))
    for s in range(0, len(g), chunk):
        inter = g[s:s + chunk] @ r.T
        total = g_sum[s:s + chunk, None] + r_sum[None, :]
        if kind == "iou":
            denom = total - inter
            score = np.where(denom > 0, inter / np.maximum(denom, 1), 1.0)
        else:
            score = np.where(total > 0, 2 * inter / np.maximum(total, 1), 1.0)
        best[s:s + chunk] = score.max(axis=1)
    return best


def lp_score(P_r, P_g, score_fn="iou", delta: float = DELTA) -> float:
    """Fraction of generated patches whose best match among real patches scores above ``delta``.

    ``score_fn`` is ``"iou"``, ``"fscore"`` or a callable ``(gen_patch, real_patch) -> float``.
    """
    real = P_r.patches if isinstance(P_r, PatchSet) else np.asarray(P_r, bool)
    gen = P_g.patches if isinstance(P_g, PatchSet) else np.asarray(P_g, bool)
    if len(real) == 0:
        raise ValueError("no reference patches")
    if len(gen) == 0:
        raise ValueError("no generated patches")
    if callable(score_fn):
        best = np.array([max(score_fn(x, y) for y in real) for x in gen])
    elif score_fn in ("iou", "fscore"):
        best = _pairwise_best(gen, real, score_fn)
    else:
        raise ValueError(f"unknown score {score_fn!r}")
    return float(np.mean(best > delta))


def lp_metrics(real_grid, gen_grids, n_patches: int = N_GENERATED_PATCHES, delta: float = DELTA,
               seed: int = 0) -> dict:
    """Mean LP-IoU and LP-F-score over generated shapes (shapes without valid patches are skipped)."""
    P_r = sample_patches(real_grid)
    if len(P_r) == 0:
        raise ValueError("the real shape has no valid surface patches")
    ious, fs, skipped = [], [], 0
    for k, g in enumerate(gen_grids):
        P_g = sample_patches(g).subsample(n_patches, seed + k)
        if len(P_g) == 0:
            skipped += 1
            continue
        ious.append(lp_score(P_r, P_g, "iou", delta))
        fs.append(lp_score(P_r, P_g, "fscore", delta))
    return {"lp_iou": float(np.mean(ious)) if ious else float("nan"),
            "lp_fscore": float(np.mean(fs)) if fs else float("nan"),
            "real_patches": len(P_r), "shapes_without_patches": skipped}


# ---------------------------------------------------------------------------
# diversity and variation

def diversity(shapes) -> float:
    """Mean over ordered pairs i != j of 1 - IoU(S_i, S_j)."""
    shapes = [np.asarray(s) for s in shapes]
    if len(shapes) < 2:
        raise ValueError("diversity needs at least two shapes")
    if len({s.shape for s in shapes}) != 1:
        raise ValueError("all shapes must share the same dims")
    flat = np.stack([binarize(s).ravel() for s in shapes]).astype(np.float64)
    inter = flat @ flat.T
    size = flat.sum(1)
    union = size[:, None] + size[None, :] - inter
    iou_m = np.where(union > 0, inter / np.where(union > 0, union, 1), 1.0)
    k = len(shapes)
    off = ~np.eye(k, dtype=bool)
    return float(np.mean((1.0 - iou_m)[off]))


def spatial_variation_map(shapes) -> np.ndarray:
    """Voxelwise standard deviation over the set, averaged along the third axis -> (D, H)."""
    shapes = [np.asarray(s, dtype=np.float64) for s in shapes]
    if len(shapes) < 2:
        raise ValueError("need at least two shapes")
    if len({s.shape for s in shapes}) != 1:
        raise ValueError("all shapes must share the same dims")
    return np.stack(shapes).std(axis=0).mean(axis=2)


def save_variation_map(vmap: np.ndarray, path) -> None:
    """Grayscale export (PGM or PNG by extension); 0.5 std maps to white."""
    img = np.round(255 * np.clip(np.asarray(vmap) / 0.5, 0, 1)).astype(np.uint8)
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        h, w = img.shape
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())
    else:
        from PIL import Image

        Image.fromarray(img, mode="L").save(path)


# ---------------------------------------------------------------------------
# Frechet distance / SSFID

def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)) via symmetric eigendecompositions."""
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, np.float64)), np.atleast_1d(np.asarray(mu2, np.float64))
    cov1, cov2 = np.atleast_2d(np.asarray(cov1, np.float64)), np.atleast_2d(np.asarray(cov2, np.float64))
    for x in (mu1, mu2, cov1, cov2):
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite statistics")
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape or cov1.shape != (len(mu1), len(mu1)):
        raise ValueError("mismatched Gaussian dimensions")
    cov1, cov2 = (cov1 + cov1.T) / 2, (cov2 + cov2.T) / 2
    s1 = _psd_sqrt(cov1)
    inner = s1 @ cov2 @ s1
    tr_sqrt = np.sqrt(np.clip(np.linalg.eigvalsh((inner + inner.T) / 2), 0, None)).sum()
    diff = mu1 - mu2
    value = diff @ diff + np.trace(cov1) + np.trace(cov2) - 2 * tr_sqrt
    return float(max(value, 0.0))


class FeatureExtractor(nn.Module):
    """3D CNN trunk whose second block yields a 64-channel map 4x smaller than the input.

    Real SSFID numbers need weights from a classifier pretrained on a shape
    dataset (a safetensors/torch state dict for this module).  ``random_init``
    gives a fixed random network for smoke tests only; its scores are not
    comparable with published values.
    """

    def __init__(self):
        super().__init__()
        self.block1 = nn.Sequential(nn.Conv3d(1, 32, 4, 2, 1), nn.LeakyReLU(0.2))
        self.block2 = nn.Sequential(nn.Conv3d(32, 64, 4, 2, 1), nn.LeakyReLU(0.2))
        self.comparable = True

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        return self.block2(self.block1(grid))

    @torch.no_grad()
    def features(self, grid) -> np.ndarray:
        """(n_locations, 64) feature vectors of one grid."""
        x = torch.as_tensor(np.asarray(grid, np.float32))[None, None]
        f = self(x)[0]
        return f.reshape(f.shape[0], -1).T.double().numpy()

    @classmethod
    def random_init(cls, seed: int = 0) -> FeatureExtractor:
        torch.manual_seed(seed)
        net = cls().eval()
        net.comparable = False
        return net

    @classmethod
    def from_weights(cls, path) -> FeatureExtractor:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"SSFID weights not found: {path}")
        if path.suffix == ".safetensors":
            from safetensors.torch import load_file

            state = load_file(str(path))
        else:
            state = torch.load(path, map_location="cpu", weights_only=True)
        net = cls()
        net.load_state_dict(state)
        return net.eval()


def gaussian_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and unbiased covariance of (n, d) samples."""
    return features.mean(axis=0), np.atleast_2d(np.cov(features, rowvar=False, ddof=1))


def ssfid(real_grid, gen_grids, extractor: FeatureExtractor | None) -> float:
    """Mean Frechet distance between real and generated deep-feature Gaussians."""
    if extractor is None:
        raise ConfigurationError(
            "SSFID needs a pretrained 3D classifier: pass FeatureExtractor.from_weights(path) "
            "(CLI: --ssfid-weights PATH). FeatureExtractor.random_init() works for "
            "non-comparable smoke tests.")
    mu_r, cov_r = gaussian_stats(extractor.features(binarize(real_grid).astype(np.float32)))
    scores = []
    for g in gen_grids:
        mu_g, cov_g = gaussian_stats(extractor.features(binarize(g).astype(np.float32)))
        scores.append(frechet_distance(mu_r, cov_r, mu_g, cov_g))
    return float(np.mean(scores))
