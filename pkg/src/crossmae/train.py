"""Pretraining loop, AdamW with cosine schedule, and the classification probe.

Pretraining: per sample, optionally splice-augment, standardize, patchify,
draw a fresh mask under the configured policy, and average the per-sample
reconstruction losses into one batch loss. All randomness flows from one
seed; reruns are bit-identical.

Probing: LinearProbe trains a linear head on the frozen class-token latent
(encoder untouched); FineTune trains head and encoder jointly.
"""
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tape as T
from .masking import CROSS, POLICIES, MaskMatrix, sample_mask
from .model import ArchSpec, Binding, ModelState, encode, init_model, mae_loss
from .windows import as_generator, patchify, splice_augment, standardize


@dataclass
class OptimConfig:
    lr: float = 5e-4
    weight_decay: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    epochs: int = 200
    warmup_epochs: int = 10
    batch_size: int = 16
    min_lr: float = 0.0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("invalid optimizer configuration")
        if not 0 <= self.warmup_epochs <= max(self.epochs, 1):
            raise ValueError("warmup must lie within the schedule")


@dataclass
class PretrainConfig:
    policy: str = CROSS
    mask_ratio: float = 0.75
    augment_prob: float = 0.5
    matched_start: bool = False
    masked_only_loss: bool = False
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if not 0.0 <= self.augment_prob <= 1.0:
            raise ValueError("augment_prob must lie in [0, 1]")


@dataclass
class ProbeConfig:
    mode: str = "lp"  # lp | ft
    epochs: int = 200
    lr: float = 1e-2
    weight_decay: float = 0.0
    train_fraction: float = 0.7

    def __post_init__(self):
        if self.mode not in ("lp", "ft"):
            raise ValueError("probe mode must be 'lp' or 'ft'")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")


class AdamWState:
    """First/second moment buffers per parameter plus the step counter."""

    def __init__(self, params: dict):
        self.m = {k: np.zeros(v.size) for k, v in params.items()}
        self.v = {k: np.zeros(v.size) for k, v in params.items()}
        self.t = 0


def adamw_step(params: dict, grads: dict, opt: AdamWState, lr: float, cfg: OptimConfig):
    """One decoupled-weight-decay Adam update, in place on the raw arrays."""
    opt.t += 1
    c1 = 1.0 - cfg.beta1 ** opt.t
    c2 = 1.0 - cfg.beta2 ** opt.t
    for name, p in params.items():
        g = grads[name]
        kernels.adamw_update(p.ravel(), np.ascontiguousarray(g.ravel()),
                             opt.m[name], opt.v[name],
                             lr, cfg.beta1, cfg.beta2, cfg.eps,
                             cfg.weight_decay, c1, c2)


def cosine_lr(step: int, warmup_steps: int, total_steps: int, base_lr: float, min_lr: float) -> float:
    """Linear warmup to base_lr, then cosine decay to min_lr at total_steps."""
    if total_steps < 1 or step < 0 or step > total_steps:
        raise ValueError("step must lie in [0, total_steps]")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + np.cos(np.pi * progress))


def _batch_loss(binding: Binding, samples, cfg: PretrainConfig):
    total = None
    for grid, mask in samples:
        li = mae_loss(binding, grid, mask, masked_only=cfg.masked_only_loss)
        total = li if total is None else T.add(total, li)
    return T.scale(total, 1.0 / len(samples))


def pretrain(windows, arch: ArchSpec, cfg: PretrainConfig, seed,
             init_state: ModelState | None = None):
    """Train a masked autoencoder on the given windows.

    Returns (state, per-epoch mean loss list). Deterministic per seed.
    """
    if not windows:
        raise ValueError("pretrain needs a nonempty dataset")
    root = np.random.SeedSequence(seed)
    init_seq, loop_seq = root.spawn(2)
    state = init_state.copy() if init_state is not None else init_model(arch, init_seq)
    rng = as_generator(loop_seq)
    opt = AdamWState(state.params)
    o = cfg.optim

    n = len(windows)
    batches_per_epoch = max(1, int(np.ceil(n / o.batch_size)))
    total_steps = o.epochs * batches_per_epoch
    warmup_steps = o.warmup_epochs * batches_per_epoch

    can_augment = len(windows) >= 2
    trace = []
    step = 0
    for _ in range(o.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for b0 in range(0, n, o.batch_size):
            idx = order[b0:b0 + o.batch_size]
            samples = []
            for i in idx:
                if can_augment and rng.uniform() < cfg.augment_prob:
                    w = splice_augment(windows, rng, matched_start=cfg.matched_start).window
                else:
                    w = windows[i]
                grid = patchify(standardize(w), arch.patch_len)
                mask = sample_mask(cfg.policy, arch.n_modalities, arch.n_patches,
                                   cfg.mask_ratio, rng)
                samples.append((grid, mask))
            tape_ = T.Tape()
            binding = Binding(state, tape_)
            loss = _batch_loss(binding, samples, cfg)
            tape_.backward(loss)
            lr = cosine_lr(step, warmup_steps, total_steps, o.lr, o.min_lr)
            adamw_step(state.params, binding.grads(), opt, lr, o)
            step += 1
            epoch_losses.append(float(loss.data))
        trace.append(float(np.mean(epoch_losses)))
    return state, trace


def _zero_mask(arch: ArchSpec) -> MaskMatrix:
    return MaskMatrix(np.zeros((arch.n_modalities, arch.n_patches), dtype=np.uint8), 0.5)


def class_embeddings(state: ModelState, windows) -> np.ndarray:
    """Frozen class-token latents of fully visible standardized windows."""
    arch = state.arch
    mask = _zero_mask(arch)
    out = np.empty((len(windows), arch.d_model))
    for i, w in enumerate(windows):
        tape_ = T.Tape()
        binding = Binding(state, tape_, trainable=False)
        grid = patchify(standardize(w), arch.patch_len)
        enc = encode(binding, grid, mask)
        out[i] = enc.data[0]
    return out


def _split_indices(n: int, train_fraction: float, rng) -> tuple:
    order = rng.permutation(n)
    cut = int(round(train_fraction * n))
    cut = min(max(cut, 1), n - 1)
    return order[:cut], order[cut:]


def _cross_entropy(logits, labels_onehot):
    logp = T.log_softmax(logits)
    picked = T.mul(logp, logits.tape.constant(labels_onehot))
    return T.scale(T.sum_(picked), -1.0 / labels_onehot.shape[0])


@dataclass
class ProbeResult:
    top1: float
    trace: list
    train_size: int
    val_size: int


def probe(state: ModelState, windows, labels, n_classes: int, cfg: ProbeConfig, seed) -> ProbeResult:
    """Train a classification head per cfg.mode and report validation top-1."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(windows) != len(labels):
        raise ValueError("windows and labels length mismatch")
    root = np.random.SeedSequence(seed)
    split_seq, init_seq, loop_seq = root.spawn(3)
    tr, va = _split_indices(len(windows), cfg.train_fraction, as_generator(split_seq))
    arch = state.arch
    rng = as_generator(init_seq)
    head_w = rng.uniform(-1.0 / np.sqrt(arch.d_model), 1.0 / np.sqrt(arch.d_model),
                         size=(arch.d_model, n_classes))
    head_b = np.zeros(n_classes)

    onehot = np.zeros((len(labels), n_classes))
    onehot[np.arange(len(labels)), labels] = 1.0

    ocfg = OptimConfig(lr=cfg.lr, weight_decay=cfg.weight_decay, epochs=cfg.epochs,
                       warmup_epochs=0, batch_size=max(len(tr), 1))
    trace = []

    if cfg.mode == "lp":
        emb = class_embeddings(state, windows)
        params = {"head.W": head_w, "head.b": head_b}
        opt = AdamWState(params)
        for epoch in range(cfg.epochs):
            tape_ = T.Tape()
            w_leaf = tape_.leaf(head_w)
            b_leaf = tape_.leaf(head_b)
            logits = T.add(T.matmul(tape_.constant(emb[tr]), w_leaf), b_leaf)
            loss = _cross_entropy(logits, onehot[tr])
            tape_.backward(loss)
            lr = cosine_lr(epoch, 0, cfg.epochs, cfg.lr, 0.0)
            adamw_step(params, {"head.W": w_leaf.grad, "head.b": b_leaf.grad}, opt, lr, ocfg)
            trace.append(float(loss.data))
        val_logits = emb[va] @ head_w + head_b
        top1 = float((val_logits.argmax(axis=1) == labels[va]).mean())
        return ProbeResult(top1, trace, len(tr), len(va))

    # fine-tune: head + encoder end to end
    work = state.copy()
    params = dict(work.params)
    params["probe.W"] = head_w
    params["probe.b"] = head_b
    work_state = ModelState(work.arch, params)
    opt = AdamWState(params)
    mask = _zero_mask(arch)
    grids = [patchify(standardize(w), arch.patch_len) for w in windows]
    loop_rng = as_generator(loop_seq)
    batch = 16
    step = 0
    total_steps = cfg.epochs * max(1, int(np.ceil(len(tr) / batch)))
    for _ in range(cfg.epochs):
        order = loop_rng.permutation(len(tr))
        ep = []
        for b0 in range(0, len(tr), batch):
            idx = tr[order[b0:b0 + batch]]
            tape_ = T.Tape()
            binding = Binding(work_state, tape_)
            embs = []
            for i in idx:
                enc = encode(binding, grids[i], mask)
                embs.append(T.slice_(enc, (slice(0, 1), slice(None))))
            feat = T.concat(embs, axis=0)
            logits = T.add(T.matmul(feat, binding.p["probe.W"]), binding.p["probe.b"])
            loss = _cross_entropy(logits, onehot[idx])
            tape_.backward(loss)
            lr = cosine_lr(step, 0, total_steps, cfg.lr, 0.0)
            adamw_step(params, binding.grads(), opt, lr, ocfg)
            step += 1
            ep.append(float(loss.data))
        trace.append(float(np.mean(ep)))
    emb = class_embeddings(work_state, [windows[i] for i in va])
    val_logits = emb @ params["probe.W"] + params["probe.b"]
    top1 = float((val_logits.argmax(axis=1) == labels[va]).mean())
    return ProbeResult(top1, trace, len(tr), len(va))
