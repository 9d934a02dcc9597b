"""Kernel and classical CCA between unmasked and masked views.

The analysis scores a masking policy by how strongly the visible part of a
window predicts the hidden part: build per-window view features, reduce with
PCA, and take the top singular value of the whitened cross-covariance
sigma_1(Gamma), Gamma = S_uu^{-1/2} S_um S_mm^{-1/2}. Kernel CCA over
view-level mean-embedding Grams is provided for the general case.
"""
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .masking import sample_mask
from .model import Binding, ModelState, encode
from . import tape as T
from .windows import SensorWindow, patchify, standardize

POWER_ITERS = 300
POWER_TOL = 1e-12
POWER_SEED = 12345


class ConditioningError(RuntimeError):
    """A Gram or covariance matrix is not usable even after regularization."""


@dataclass(frozen=True)
class Linear:
    """Dot-product patch kernel."""


@dataclass(frozen=True)
class Rbf:
    """exp(-gamma * ||a - b||^2) patch kernel."""

    gamma: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("Rbf gamma must be > 0")


def patch_kernel(kind, a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"patch shapes differ: {a.shape} vs {b.shape}")
    if isinstance(kind, Linear):
        return float(a @ b)
    if isinstance(kind, Rbf):
        d = a - b
        return float(np.exp(-kind.gamma * (d @ d)))
    raise ValueError(f"unknown kernel kind {kind!r}")


def _patch_matrix(view) -> np.ndarray:
    """Normalize one view to a (n_patches, L_p) float64 matrix. Accepts a 2-D
    array, a list of 1-D patches, or split_views-style (c, p, patch) entries."""
    if isinstance(view, np.ndarray):
        mat = np.asarray(view, dtype=np.float64)
        if mat.ndim != 2:
            raise ValueError("array view must be 2-D (n_patches, L_p)")
        return mat
    rows = []
    for entry in view:
        if isinstance(entry, tuple) and len(entry) == 3:
            entry = entry[2]
        rows.append(np.asarray(entry, dtype=np.float64))
    if not rows:
        raise ValueError("empty view")
    return np.stack(rows)


def view_gram(views, kind) -> np.ndarray:
    """n x n Gram of views; entry (i, j) is the mean of patch_kernel over all
    patch pairs drawn from view i and view j.

    Assembled row-block-wise from the full patch-level kernel matrix so the
    same code path serves any patch kernel.
    """
    mats = [_patch_matrix(v) for v in views]
    if any(m.shape[0] == 0 for m in mats):
        raise ValueError("every view needs at least one patch")
    lp = mats[0].shape[1]
    if any(m.shape[1] != lp for m in mats):
        raise ValueError("views disagree on patch length")
    all_p = np.concatenate(mats, axis=0)
    counts = np.array([m.shape[0] for m in mats])
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    n = len(mats)
    gram = np.empty((n, n))
    if isinstance(kind, Rbf):
        sq = (all_p * all_p).sum(axis=1)
    for i in range(n):
        block = mats[i] @ all_p.T
        if isinstance(kind, Rbf):
            sq_i = (mats[i] * mats[i]).sum(axis=1)
            block = np.exp(-kind.gamma * (sq_i[:, None] + sq[None, :] - 2.0 * block))
        elif not isinstance(kind, Linear):
            raise ValueError(f"unknown kernel kind {kind!r}")
        col_sums = np.add.reduceat(block, starts, axis=1)
        gram[i] = col_sums.sum(axis=0) / (counts[i] * counts)
    return 0.5 * (gram + gram.T)


@dataclass
class ViewGrams:
    """Unmasked-view and masked-view Gram matrices over the same n windows."""

    k_u: np.ndarray
    k_m: np.ndarray

    def __post_init__(self):
        for name, k in (("k_u", self.k_u), ("k_m", self.k_m)):
            k = np.asarray(k, dtype=np.float64)
            if k.ndim != 2 or k.shape[0] != k.shape[1]:
                raise ValueError(f"{name} must be square")
            if np.abs(k - k.T).max() > 1e-10:
                raise ValueError(f"{name} not symmetric within 1e-10")
            setattr(self, name, k)
        if self.k_u.shape != self.k_m.shape:
            raise ValueError("view Grams must share a shape")


@dataclass
class KccaResult:
    rho: float
    alpha: np.ndarray
    beta: np.ndarray
    gamma_u: float
    gamma_m: float


@dataclass
class CovTriple:
    """Within-view and cross-view covariance over PCA feature dimensions."""

    s_uu: np.ndarray
    s_mm: np.ndarray
    s_um: np.ndarray


@dataclass
class CcaResult:
    sigma: np.ndarray
    w_u: np.ndarray
    w_m: np.ndarray


def center_gram(k: np.ndarray) -> np.ndarray:
    """Double-center: HKH with H = I - (1/n) 1 1^T."""
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError("center_gram needs a square matrix")
    row = k.mean(axis=0, keepdims=True)
    col = k.mean(axis=1, keepdims=True)
    return k - row - col + k.mean()


def _regularized(k: np.ndarray, gamma: float) -> np.ndarray:
    n = k.shape[0]
    r = k @ k + gamma * k
    r.flat[::n + 1] += 1e-8 * np.trace(r) / n + 1e-12
    return r


def _chol_or_raise(r: np.ndarray, k: np.ndarray, name: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(r)
    except np.linalg.LinAlgError:
        eig = np.linalg.eigvalsh(k)
        raise ConditioningError(
            f"{name} indefinite beyond tolerance: min eigenvalue {eig[0]:.6e} "
            f"against max {eig[-1]:.6e}") from None


def kcca_solve(grams: ViewGrams, gamma_u: float, gamma_m: float, centered: bool) -> KccaResult:
    """Top regularized kernel canonical correlation.

    Stationary system K_U K_M beta = rho (K_U^2 + gamma_U K_U) alpha and
    symmetrically for beta. Whitening both regularizers by Cholesky turns it
    into an ordinary symmetric eigenproblem; the top eigenvalue is rho^2 and
    is found by power iteration with a fixed-seed start vector.
    """
    if not (gamma_u > 0 and gamma_m > 0):
        raise ValueError("regularizers must be > 0")
    k_u, k_m = grams.k_u, grams.k_m
    if centered:
        k_u, k_m = center_gram(k_u), center_gram(k_m)
    n = k_u.shape[0]
    r_u = _regularized(k_u, gamma_u)
    r_m = _regularized(k_m, gamma_m)
    l_u = _chol_or_raise(r_u, k_u, "K_U")
    l_m = _chol_or_raise(r_m, k_m, "K_M")
    cross = k_u @ k_m

    def apply(w):
        x = solve_triangular(l_u, w, trans="T", lower=True)
        y = cho_solve((l_m, True), cross.T @ x)
        return solve_triangular(l_u, cross @ y, lower=True)

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(POWER_SEED)))
    w = rng.standard_normal(n)
    w /= np.linalg.norm(w)
    lam = 0.0
    for _ in range(POWER_ITERS):
        w_next = apply(w)
        lam_next = np.linalg.norm(w_next)
        if lam_next <= 0.0:
            lam, w = 0.0, w_next
            break
        w_next /= lam_next
        done = abs(lam_next - lam) < POWER_TOL * max(1.0, lam_next)
        lam, w = lam_next, w_next
        if done:
            break
    rho = float(np.sqrt(max(lam, 0.0)))
    alpha = solve_triangular(l_u, w, trans="T", lower=True)
    if rho > 0:
        beta = cho_solve((l_m, True), k_m @ (k_u @ alpha)) / rho
        scale = float(beta @ (r_m @ beta))
        if scale > 0:
            beta = beta / np.sqrt(scale)
    else:
        beta = np.zeros(n)
    return KccaResult(rho, alpha, beta, gamma_u, gamma_m)


def pca_reduce(features: np.ndarray, k: int) -> np.ndarray:
    """Column-center and project onto the top-k right singular vectors.

    Each component's sign is fixed so its largest-magnitude loading is
    positive, making the scores reproducible across LAPACK builds.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be 2-D (n, q)")
    n, q = x.shape
    if not 1 <= k <= min(n, q):
        raise ValueError(f"k={k} out of range for {n}x{q} features")
    xc = x - x.mean(axis=0, keepdims=True)
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    flip = np.sign(vt[np.arange(vt.shape[0]), np.abs(vt).argmax(axis=1)])
    flip[flip == 0] = 1.0
    return xc @ (vt[:k] * flip[:k, None]).T


def _inv_sqrt(s: np.ndarray, name: str) -> np.ndarray:
    d = s.shape[0]
    s = s + np.eye(d) * (1e-8 * np.trace(s) / d)
    vals, vecs = np.linalg.eigh(s)
    if vals[0] <= 0:
        raise ConditioningError(
            f"{name} not positive definite after jitter: min eigenvalue {vals[0]:.6e}")
    return (vecs / np.sqrt(vals)) @ vecs.T


def cca_sigma(cov: CovTriple) -> CcaResult:
    """Singular values of Gamma = S_uu^{-1/2} S_um S_mm^{-1/2} plus the
    leading canonical directions mapped back through the whitening."""
    wu = _inv_sqrt(np.asarray(cov.s_uu, dtype=np.float64), "S_UU")
    wm = _inv_sqrt(np.asarray(cov.s_mm, dtype=np.float64), "S_MM")
    gamma = wu @ np.asarray(cov.s_um, dtype=np.float64) @ wm
    u, s, vt = np.linalg.svd(gamma)
    return CcaResult(s, wu @ u[:, 0], wm @ vt[0])


@dataclass(frozen=True)
class RawFlatten:
    """View features = the C x L window with hidden cells zeroed, flattened."""


@dataclass
class ModelEncoder:
    """View features = mean of the encoder's per-patch-token latents."""

    state: ModelState


def _raw_view_features(window: SensorWindow, bits: np.ndarray, keep: int, patch_len: int) -> np.ndarray:
    c_n, p_n = bits.shape
    vals = window.values[:, :p_n * patch_len]
    cell_keep = np.repeat(bits == keep, patch_len, axis=1)
    return np.where(cell_keep, vals, 0.0).ravel()


def _encoded_view_features(enc: ModelEncoder, grid, visible_bits: np.ndarray) -> np.ndarray:
    from .masking import MaskMatrix

    mask = MaskMatrix((1 - visible_bits).astype(np.uint8), 0.0)
    tape_ = T.Tape()
    binding = Binding(enc.state, tape_, trainable=False)
    latents = encode(binding, grid, mask).data
    return latents[1:].mean(axis=0)  # patch tokens only, class row dropped


def sigma1_experiment(dataset, policy: str, encoder, pca_k: int = 50, seed: int = 0,
                      ratio: float = 0.15, patch_len: int = 20) -> float:
    """sigma_1 of the unmasked/masked view cross-covariance under one policy.

    Every window gets its own mask draw; view features depend on the encoder
    kind; both feature sets are PCA-reduced (k clipped to min(n, q) - 1) and
    the whitened cross-covariance's top singular value comes from cca_sigma.
    """
    if not dataset:
        raise ValueError("sigma1_experiment needs a non-empty dataset")
    if isinstance(encoder, ModelEncoder):
        patch_len = encoder.state.arch.patch_len
    c_n, length = dataset[0].values.shape
    p_n = length // patch_len
    children = np.random.SeedSequence(seed).spawn(len(dataset))
    feats_u, feats_m = [], []
    for window, child in zip(dataset, children):
        rng = np.random.Generator(np.random.PCG64(child))
        mask = sample_mask(policy, c_n, p_n, ratio, rng)
        if isinstance(encoder, RawFlatten):
            feats_u.append(_raw_view_features(window, mask.bits, 0, patch_len))
            feats_m.append(_raw_view_features(window, mask.bits, 1, patch_len))
        elif isinstance(encoder, ModelEncoder):
            grid = patchify(standardize(window), patch_len)
            feats_u.append(_encoded_view_features(encoder, grid, 1 - mask.bits))
            feats_m.append(_encoded_view_features(encoder, grid, mask.bits))
        else:
            raise ValueError(f"unknown encoder {encoder!r}")
    f_u = np.stack(feats_u)
    f_m = np.stack(feats_m)
    n = f_u.shape[0]
    k = min(pca_k, min(n, f_u.shape[1]) - 1, min(n, f_m.shape[1]) - 1)
    if k < 1:
        raise ValueError("dataset too small for PCA reduction")
    z_u = pca_reduce(f_u, k)
    z_m = pca_reduce(f_m, k)
    cov = CovTriple(z_u.T @ z_u / n, z_m.T @ z_m / n, z_u.T @ z_m / n)
    return float(cca_sigma(cov).sigma[0])


GRAM_MAGIC = "crossmae-gram-v1"


def save_gram(path, k: np.ndarray) -> None:
    """One ASCII header line, then row-major float64 bytes."""
    k = np.ascontiguousarray(k, dtype=np.float64)
    if k.ndim != 2:
        raise ValueError("save_gram expects a matrix")
    with open(path, "wb") as fh:
        fh.write(f"{GRAM_MAGIC} {k.shape[0]} {k.shape[1]}\n".encode("ascii"))
        fh.write(k.tobytes())


def load_gram(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 3 or header[0] != GRAM_MAGIC:
            raise ValueError(f"bad gram header in {path}")
        rows, cols = int(header[1]), int(header[2])
        blob = fh.read()
    expect = rows * cols * 8
    if len(blob) != expect:
        raise ValueError(f"gram blob holds {len(blob)} bytes, expected {expect}")
    return np.frombuffer(blob, dtype=np.float64).reshape(rows, cols).copy()
