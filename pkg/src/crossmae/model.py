"""Masked-autoencoder transformer over patch grids.

Desk-scale ViT: patch projection into a D-dim token space, a trainable class
token, fixed 2-D sinusoidal positions (half the channels encode the modality
index, half the patch index), a small pre-norm encoder over visible tokens,
and a decoder that scatters encoder outputs back to their grid slots, fills
hidden slots with a trainable mask token, and reconstructs every patch.

The reconstruction loss is the mean squared error over all patches; a
masked-only variant is available for ablation.
"""
import os
from dataclasses import dataclass

import numpy as np

from . import tape as T
from .config import ManifestError, parse_kv_lines
from .masking import MaskMatrix
from .windows import PatchGrid

ARCH_NAME = "manifest.txt"
PARAMS_NAME = "params.f32"
CHECKPOINT_FORMAT = "crossmae-checkpoint-v1"


@dataclass
class ArchSpec:
    n_modalities: int
    n_patches: int
    patch_len: int
    d_model: int = 32
    enc_layers: int = 2
    dec_layers: int = 1
    n_heads: int = 4
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 4 != 0:
            raise ValueError("d_model must be divisible by 4 for 2-D sinusoidal positions")
        if min(self.n_modalities, self.n_patches, self.patch_len) < 1:
            raise ValueError("grid dimensions must be positive")
        if self.enc_layers < 1 or self.dec_layers < 1 or self.mlp_ratio < 1:
            raise ValueError("layer counts and mlp_ratio must be >= 1")

    @property
    def n_tokens(self):
        return self.n_modalities * self.n_patches


def positions_2d(n_modalities: int, n_patches: int, d_model: int) -> np.ndarray:
    """Fixed sinusoidal position table of shape (C*P + 1, D).

    Row 0 (class token) is zero. For a patch token, the first D/2 channels
    encode its modality index and the last D/2 its patch index, each as
    interleaved sin/cos pairs with frequencies 10000^(-2k/(D/2)).
    """
    half = d_model // 2
    quarter = half // 2

    def axis_table(n, idx_max):
        idx = np.arange(n)[:, None]
        k = np.arange(quarter)[None, :]
        omega = 1.0 / np.power(10000.0, 2.0 * k / half)
        ang = idx * omega
        out = np.empty((n, half))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    mod_tab = axis_table(n_modalities, n_modalities)
    pat_tab = axis_table(n_patches, n_patches)
    table = np.zeros((n_modalities * n_patches + 1, d_model))
    row = 1
    for c in range(n_modalities):
        for p in range(n_patches):
            table[row, :half] = mod_tab[c]
            table[row, half:] = pat_tab[p]
            row += 1
    return table


class ModelState:
    """Named parameter arrays plus the frozen position table."""

    def __init__(self, arch: ArchSpec, params: dict):
        self.arch = arch
        self.params = params
        self.positions = positions_2d(arch.n_modalities, arch.n_patches, arch.d_model)

    def copy(self):
        return ModelState(self.arch, {k: v.copy() for k, v in self.params.items()})

    def fingerprint(self):
        """Order-stable byte digest of all parameters, for bit-identity checks."""
        import hashlib
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].tobytes())
        return h.hexdigest()


def _uniform_fan_in(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(arch: ArchSpec, seed) -> ModelState:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit layernorm gains,
    Gaussian(sd 0.02) class and mask tokens."""
    from .windows import as_generator
    rng = as_generator(seed)
    d = arch.d_model
    hidden = d * arch.mlp_ratio
    params = {}
    params["embed.W"] = _uniform_fan_in(rng, arch.patch_len, (arch.patch_len, d))
    params["embed.b"] = np.zeros(d)
    params["cls"] = rng.normal(0.0, 0.02, size=(1, d))
    params["mask_token"] = rng.normal(0.0, 0.02, size=(1, d))

    def block(prefix):
        params[f"{prefix}.ln1.g"] = np.ones(d)
        params[f"{prefix}.ln1.b"] = np.zeros(d)
        for nm in ("Wq", "Wk", "Wv", "Wo"):
            params[f"{prefix}.attn.{nm}"] = _uniform_fan_in(rng, d, (d, d))
        for nm in ("bq", "bk", "bv", "bo"):
            params[f"{prefix}.attn.{nm}"] = np.zeros(d)
        params[f"{prefix}.ln2.g"] = np.ones(d)
        params[f"{prefix}.ln2.b"] = np.zeros(d)
        params[f"{prefix}.mlp.W1"] = _uniform_fan_in(rng, d, (d, hidden))
        params[f"{prefix}.mlp.b1"] = np.zeros(hidden)
        params[f"{prefix}.mlp.W2"] = _uniform_fan_in(rng, hidden, (hidden, d))
        params[f"{prefix}.mlp.b2"] = np.zeros(d)

    for i in range(arch.enc_layers):
        block(f"enc{i}")
    params["enc.norm.g"] = np.ones(d)
    params["enc.norm.b"] = np.zeros(d)
    for i in range(arch.dec_layers):
        block(f"dec{i}")
    params["dec.norm.g"] = np.ones(d)
    params["dec.norm.b"] = np.zeros(d)
    params["head.W"] = _uniform_fan_in(rng, d, (d, arch.patch_len))
    params["head.b"] = np.zeros(arch.patch_len)
    return ModelState(arch, params)


class Binding:
    """Parameters of one ModelState wrapped as leaves on one tape."""

    def __init__(self, state: ModelState, tape: T.Tape, trainable=True):
        self.state = state
        self.tape = tape
        self.p = {k: tape.leaf(v, requires_grad=trainable) for k, v in state.params.items()}

    def grads(self):
        return {k: leaf.grad for k, leaf in self.p.items()}


def _attention(b: Binding, prefix: str, x):
    arch = b.state.arch
    d = arch.d_model
    dh = d // arch.n_heads
    scale = 1.0 / np.sqrt(dh)
    q = T.add(T.matmul(x, b.p[f"{prefix}.attn.Wq"]), b.p[f"{prefix}.attn.bq"])
    k = T.add(T.matmul(x, b.p[f"{prefix}.attn.Wk"]), b.p[f"{prefix}.attn.bk"])
    v = T.add(T.matmul(x, b.p[f"{prefix}.attn.Wv"]), b.p[f"{prefix}.attn.bv"])
    heads = []
    for h in range(arch.n_heads):
        cols = (slice(None), slice(h * dh, (h + 1) * dh))
        qh, kh, vh = T.slice_(q, cols), T.slice_(k, cols), T.slice_(v, cols)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), scale)
        attn = T.softmax(scores)
        heads.append(T.matmul(attn, vh))
    merged = T.concat(heads, axis=1)
    return T.add(T.matmul(merged, b.p[f"{prefix}.attn.Wo"]), b.p[f"{prefix}.attn.bo"])


def _mlp(b: Binding, prefix: str, x):
    h = T.add(T.matmul(x, b.p[f"{prefix}.mlp.W1"]), b.p[f"{prefix}.mlp.b1"])
    h = T.gelu(h)
    return T.add(T.matmul(h, b.p[f"{prefix}.mlp.W2"]), b.p[f"{prefix}.mlp.b2"])


def _block(b: Binding, prefix: str, x):
    y = T.layernorm(x, b.p[f"{prefix}.ln1.g"], b.p[f"{prefix}.ln1.b"])
    x = T.add(x, _attention(b, prefix, y))
    y = T.layernorm(x, b.p[f"{prefix}.ln2.g"], b.p[f"{prefix}.ln2.b"])
    return T.add(x, _mlp(b, prefix, y))


def _check_shapes(arch: ArchSpec, grid: PatchGrid, mask: MaskMatrix):
    c_n, p_n, lp = grid.patches.shape
    if (c_n, p_n, lp) != (arch.n_modalities, arch.n_patches, arch.patch_len):
        raise ValueError(f"grid {grid.patches.shape} does not match arch "
                         f"({arch.n_modalities}, {arch.n_patches}, {arch.patch_len})")
    if mask.bits.shape != (c_n, p_n):
        raise ValueError("mask shape does not match grid")
    if mask.bits.all():
        raise ValueError("at least one patch must stay visible")


def encode(b: Binding, grid: PatchGrid, mask: MaskMatrix):
    """Run the encoder over visible tokens. Returns a (V+1, D) DiffArray:
    row 0 is the class token, rows 1.. are visible patches in grid order."""
    arch = b.state.arch
    _check_shapes(arch, grid, mask)
    n = arch.n_tokens
    flat = grid.patches.reshape(n, arch.patch_len)
    visible_ids = np.flatnonzero(mask.bits.ravel() == 0)

    tok_const = b.tape.constant(flat)
    tokens = T.add(T.matmul(tok_const, b.p["embed.W"]), b.p["embed.b"])

    gather = np.zeros((len(visible_ids), n))
    gather[np.arange(len(visible_ids)), visible_ids] = 1.0
    vis = T.matmul(b.tape.constant(gather), tokens)
    vis = T.add(vis, b.tape.constant(b.state.positions[1 + visible_ids]))

    cls_tok = T.add(b.p["cls"], b.tape.constant(b.state.positions[0:1]))
    x = T.concat([cls_tok, vis], axis=0)
    for i in range(arch.enc_layers):
        x = _block(b, f"enc{i}", x)
    return T.layernorm(x, b.p["enc.norm.g"], b.p["enc.norm.b"])


def decode(b: Binding, encoded, mask: MaskMatrix):
    """Scatter encoder outputs back to grid slots, fill hidden slots with the
    mask token, re-add positions everywhere, run the decoder, and project
    every patch token back to patch space. Returns an (N, L_p) DiffArray."""
    arch = b.state.arch
    n = arch.n_tokens
    visible_ids = np.flatnonzero(mask.bits.ravel() == 0)
    scatter = np.zeros((n + 1, len(visible_ids) + 1))
    scatter[0, 0] = 1.0
    scatter[1 + visible_ids, 1 + np.arange(len(visible_ids))] = 1.0
    x = T.matmul(b.tape.constant(scatter), encoded)

    mask_col = np.zeros((n + 1, 1))
    mask_col[1 + np.flatnonzero(mask.bits.ravel() == 1), 0] = 1.0
    x = T.add(x, T.matmul(b.tape.constant(mask_col), b.p["mask_token"]))
    x = T.add(x, b.tape.constant(b.state.positions))

    for i in range(arch.dec_layers):
        x = _block(b, f"dec{i}", x)
    x = T.layernorm(x, b.p["dec.norm.g"], b.p["dec.norm.b"])
    patch_tokens = T.slice_(x, (slice(1, n + 1), slice(None)))
    return T.add(T.matmul(patch_tokens, b.p["head.W"]), b.p["head.b"])


def reconstruct(b: Binding, grid: PatchGrid, mask: MaskMatrix):
    """encode + decode, returning the (N, L_p) reconstruction."""
    return decode(b, encode(b, grid, mask), mask)


def mae_loss(b: Binding, grid: PatchGrid, mask: MaskMatrix, masked_only: bool = False):
    """Reconstruction MSE, averaged over every patch (default) or over masked
    patches only (ablation)."""
    arch = b.state.arch
    recon = reconstruct(b, grid, mask)
    target_np = grid.patches.reshape(arch.n_tokens, arch.patch_len)
    if masked_only:
        masked_ids = np.flatnonzero(mask.bits.ravel() == 1)
        if len(masked_ids) == 0:
            raise ValueError("masked-only loss needs at least one masked patch")
        gather = np.zeros((len(masked_ids), arch.n_tokens))
        gather[np.arange(len(masked_ids)), masked_ids] = 1.0
        recon = T.matmul(b.tape.constant(gather), recon)
        target_np = target_np[masked_ids]
    return T.mse(recon, b.tape.constant(target_np))


def alignment_identity(u: np.ndarray, v: np.ndarray):
    """For equal-norm vectors: ||u - v||^2 = 2 c^2 - 2 <u, v>.

    Returns (squared distance, inner product, absolute identity gap)."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    c2 = float(u @ u)
    sq = float(((u - v) ** 2).sum())
    inner = float(u @ v)
    return sq, inner, abs(sq - (2.0 * c2 - 2.0 * inner))


def alignment_gap(state: ModelState, grid: PatchGrid, mask: MaskMatrix, c_norm: float = 1.0):
    """Reconstruct the masked view, normalize prediction and target to a
    common norm c_norm, and report (loss, alignment, identity gap)."""
    t = T.Tape()
    b = Binding(state, t, trainable=False)
    recon = reconstruct(b, grid, mask).data
    masked_ids = np.flatnonzero(mask.bits.ravel() == 1)
    flat = grid.patches.reshape(state.arch.n_tokens, state.arch.patch_len)
    u = recon[masked_ids].ravel()
    v = flat[masked_ids].ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cannot normalize a zero view")
    u = u * (c_norm / nu)
    v = v * (c_norm / nv)
    return alignment_identity(u, v)


def save_checkpoint(state: ModelState, directory):
    """Arch + name/shape/offset manifest plus a little-endian float32 blob."""
    os.makedirs(directory, exist_ok=True)
    arch = state.arch
    lines = [
        f"format={CHECKPOINT_FORMAT}",
        f"n_modalities={arch.n_modalities}",
        f"n_patches={arch.n_patches}",
        f"patch_len={arch.patch_len}",
        f"d_model={arch.d_model}",
        f"enc_layers={arch.enc_layers}",
        f"dec_layers={arch.dec_layers}",
        f"n_heads={arch.n_heads}",
        f"mlp_ratio={arch.mlp_ratio}",
    ]
    offset = 0
    names = sorted(state.params)
    for name in names:
        shape = state.params[name].shape
        size = int(np.prod(shape))
        shape_txt = "x".join(str(s) for s in shape)
        lines.append(f"param.{name}={shape_txt}@{offset}")
        offset += size
    with open(os.path.join(directory, ARCH_NAME), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    blob = np.concatenate([state.params[n].ravel() for n in names]).astype("<f4")
    blob.tofile(os.path.join(directory, PARAMS_NAME))


def load_checkpoint(directory) -> ModelState:
    with open(os.path.join(directory, ARCH_NAME)) as fh:
        meta = parse_kv_lines(fh.read(), source=ARCH_NAME)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ManifestError(f"{ARCH_NAME}: unsupported format {meta.get('format')!r}")
    try:
        arch = ArchSpec(
            n_modalities=int(meta["n_modalities"]),
            n_patches=int(meta["n_patches"]),
            patch_len=int(meta["patch_len"]),
            d_model=int(meta["d_model"]),
            enc_layers=int(meta["enc_layers"]),
            dec_layers=int(meta["dec_layers"]),
            n_heads=int(meta["n_heads"]),
            mlp_ratio=int(meta["mlp_ratio"]),
        )
    except KeyError as exc:
        raise ManifestError(f"{ARCH_NAME}: missing arch field {exc}") from None
    blob = np.fromfile(os.path.join(directory, PARAMS_NAME), dtype="<f4").astype(np.float64)
    params = {}
    total = 0
    for key, val in meta.items():
        if not key.startswith("param."):
            continue
        name = key[len("param."):]
        try:
            shape_txt, off_txt = val.split("@")
            shape = tuple(int(s) for s in shape_txt.split("x"))
            offset = int(off_txt)
        except ValueError:
            raise ManifestError(f"{ARCH_NAME}: malformed param entry {key}={val}") from None
        size = int(np.prod(shape))
        if offset + size > blob.size:
            raise ManifestError(f"{ARCH_NAME}: blob too short for {name} "
                                f"(needs {offset + size}, have {blob.size})")
        params[name] = blob[offset:offset + size].reshape(shape).copy()
        total += size
    if total != blob.size:
        raise ManifestError(f"{PARAMS_NAME}: blob has {blob.size} values, manifest maps {total}")
    return ModelState(arch, params)


@dataclass
class _LeafView:
    """Binding look-alike whose leaves are supplied by the caller."""

    state: ModelState
    p: dict
    tape: T.Tape


def gradcheck_model(arch: ArchSpec, seed: int = 0, h: float = 1e-4,
                    max_coords: int | None = 6) -> float:
    """Finite-difference check of mae_loss over every parameter group.

    Returns the worst relative error across all sampled coordinates."""
    from .masking import CROSS, sample_mask
    from .windows import SensorWindow, as_generator, patchify

    root = np.random.SeedSequence(seed)
    init_seq, data_seq, mask_seq = root.spawn(3)
    state = init_model(arch, init_seq)
    rng = as_generator(data_seq)
    values = rng.standard_normal((arch.n_modalities, arch.n_patches * arch.patch_len))
    grid = patchify(SensorWindow(values), arch.patch_len)
    mask = sample_mask(CROSS, arch.n_modalities, arch.n_patches, 0.5,
                       as_generator(mask_seq))

    def build(leaves):
        tape_ = next(iter(leaves.values())).tape
        return mae_loss(_LeafView(state, leaves, tape_), grid, mask)

    return T.finite_diff_check(build, state.params, h=h, max_coords=max_coords, seed=seed)
