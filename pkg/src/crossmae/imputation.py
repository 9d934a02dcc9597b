"""Missingness tasks, model and statistical imputers, and masked-cell scoring.

Four tasks over the patch grid:
- random: cells hidden independently across modalities and time (cross mask);
- temporal: whole time columns hidden at random;
- sensor: everything hidden except one visible modality;
- extrapolation: the trailing time columns hidden.

All imputers receive a window whose hidden samples are defined by a patch
mask, must leave visible samples untouched, and are scored on hidden samples
only, pooled over all windows.
"""
from dataclasses import dataclass

import numpy as np

from . import tape as T
from .masking import CROSS, MaskMatrix, floor_count, sample_mask
from .model import Binding, ModelState, reconstruct
from .windows import PatchGrid, SensorWindow, as_generator, patchify

TASKS = ("random", "temporal", "sensor", "extrapolation")
METHODS = ("model", "linear", "nearest", "chained")


@dataclass
class MissingnessTask:
    kind: str
    ratio: float = 0.7
    visible_modality: int | None = None  # sensor task; None = draw per window

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"task kind must be one of {TASKS}")
        if self.kind != "sensor" and not 0.0 < self.ratio < 1.0:
            raise ValueError("ratio must lie in (0, 1)")


def task_mask(task: MissingnessTask, n_modalities: int, n_patches: int, rng) -> MaskMatrix:
    """Build the patch mask for one window under the given task."""
    rng = as_generator(rng)
    c_n, p_n = n_modalities, n_patches
    if task.kind == "random":
        return sample_mask(CROSS, c_n, p_n, task.ratio, rng)
    bits = np.zeros((c_n, p_n), dtype=np.uint8)
    if task.kind == "temporal":
        k = floor_count(task.ratio, p_n)
        if k < 1 or k >= p_n:
            raise ValueError(f"temporal task degenerate at ratio {task.ratio}, P={p_n}")
        cols = rng.permutation(p_n)[:k]
        bits[:, cols] = 1
    elif task.kind == "sensor":
        if c_n < 2:
            raise ValueError("sensor task needs C >= 2")
        vis = task.visible_modality
        if vis is None:
            vis = int(rng.integers(0, c_n))
        if not 0 <= vis < c_n:
            raise ValueError(f"visible modality {vis} out of range for C={c_n}")
        bits[:, :] = 1
        bits[vis, :] = 0
    else:  # extrapolation
        k = floor_count(task.ratio, p_n)
        if k < 1 or k >= p_n:
            raise ValueError(f"extrapolation task degenerate at ratio {task.ratio}, P={p_n}")
        bits[:, p_n - k:] = 1
    return MaskMatrix(bits, task.ratio if task.kind != "sensor" else 1.0)


def _sample_mask_array(mask: MaskMatrix, patch_len: int, n_samples: int) -> np.ndarray:
    """Expand a patch mask to a per-sample boolean array (C, L). Samples
    beyond P * patch_len are never hidden."""
    c_n, p_n = mask.bits.shape
    out = np.zeros((c_n, n_samples), dtype=bool)
    hidden = np.repeat(mask.bits.astype(bool), patch_len, axis=1)
    out[:, :p_n * patch_len] = hidden
    return out


def impute_model(state: ModelState, window: SensorWindow, mask: MaskMatrix) -> SensorWindow:
    """Reconstruct hidden patches with the pretrained autoencoder; visible
    samples are passed through bit-identically."""
    arch = state.arch
    grid = patchify(window, arch.patch_len)
    if mask.bits.all():
        raise ValueError("model imputation needs at least one visible patch")
    tape_ = T.Tape()
    binding = Binding(state, tape_, trainable=False)
    recon = reconstruct(binding, grid, mask).data
    filled = window.values.copy()
    c_n, p_n = mask.bits.shape
    lp = arch.patch_len
    for c in range(c_n):
        for p in range(p_n):
            if mask.bits[c, p]:
                filled[c, p * lp:(p + 1) * lp] = recon[c * p_n + p]
    return SensorWindow(filled, window.label)


def impute_linear(window: SensorWindow, sample_mask_: np.ndarray) -> SensorWindow:
    """Per-channel linear interpolation between visible samples, constant
    extension at the edges, zero-fill for fully hidden channels."""
    filled = window.values.copy()
    length = filled.shape[1]
    t = np.arange(length)
    for c in range(filled.shape[0]):
        vis = ~sample_mask_[c]
        if not vis.any():
            filled[c] = 0.0
            continue
        filled[c, ~vis] = np.interp(t[~vis], t[vis], window.values[c, vis])
    return SensorWindow(filled, window.label)


def impute_nearest(window: SensorWindow, sample_mask_: np.ndarray) -> SensorWindow:
    """Each hidden sample copies the temporally nearest visible sample in its
    channel; distance ties break toward the earlier sample."""
    filled = window.values.copy()
    length = filled.shape[1]
    t = np.arange(length)
    for c in range(filled.shape[0]):
        vis_idx = t[~sample_mask_[c]]
        if vis_idx.size == 0:
            filled[c] = 0.0
            continue
        for i in t[sample_mask_[c]]:
            pos = np.searchsorted(vis_idx, i)
            left = vis_idx[pos - 1] if pos > 0 else None
            right = vis_idx[pos] if pos < vis_idx.size else None
            if left is None:
                src = right
            elif right is None:
                src = left
            else:
                src = left if (i - left) <= (right - i) else right
            filled[c, i] = window.values[c, src]
    return SensorWindow(filled, window.label)


def impute_chained(windows, sample_masks, sweeps: int = 3, ridge: float = 1e-3):
    """Simplified chained-equations imputation, pooled across windows.

    Missing entries start at the channel means of pooled visible data; each
    sweep ridge-regresses every channel on the other channels' same-time
    values (fit on rows where the target is visible) and overwrites that
    channel's missing entries with predictions.
    """
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    if not windows:
        raise ValueError("impute_chained needs at least one window")
    c_n = windows[0].values.shape[0]
    if c_n < 2:
        raise ValueError("impute_chained needs C >= 2")
    # rows = (window, time); columns = channels
    data = np.concatenate([w.values.T for w in windows], axis=0).copy()
    miss = np.concatenate([m.T for m in sample_masks], axis=0)
    for c in range(c_n):
        vis = ~miss[:, c]
        mean_c = data[vis, c].mean() if vis.any() else 0.0
        data[miss[:, c], c] = mean_c
    for _ in range(sweeps):
        for c in range(c_n):
            fit_rows = ~miss[:, c]
            pred_rows = miss[:, c]
            if not fit_rows.any() or not pred_rows.any():
                continue
            others = [k for k in range(c_n) if k != c]
            x_fit = data[np.ix_(fit_rows, others)]
            y_fit = data[fit_rows, c]
            xm = x_fit.mean(axis=0)
            ym = y_fit.mean()
            xc = x_fit - xm
            gram = xc.T @ xc + ridge * np.eye(len(others))
            coef = np.linalg.solve(gram, xc.T @ (y_fit - ym))
            x_pred = data[np.ix_(pred_rows, others)]
            data[pred_rows, c] = (x_pred - xm) @ coef + ym
    out = []
    offset = 0
    for w, m in zip(windows, sample_masks):
        length = w.values.shape[1]
        block = data[offset:offset + length].T
        filled = np.where(m, block, w.values)
        out.append(SensorWindow(filled, w.label))
        offset += length
    return out


@dataclass
class ImputeScore:
    mae: float
    mse: float
    n_cells: int


def score(filled_windows, truth_windows, sample_masks) -> ImputeScore:
    """MAE/MSE over hidden samples only, pooled across all windows."""
    abs_sum = 0.0
    sq_sum = 0.0
    count = 0
    for filled, truth, miss in zip(filled_windows, truth_windows, sample_masks):
        if filled.values.shape != truth.values.shape:
            raise ValueError("shape mismatch between filled and truth")
        diff = filled.values[miss] - truth.values[miss]
        abs_sum += np.abs(diff).sum()
        sq_sum += (diff * diff).sum()
        count += diff.size
    if count == 0:
        raise ValueError("score needs at least one hidden cell")
    return ImputeScore(abs_sum / count, sq_sum / count, count)
