"""Trainable time-conditioned MLP denoiser, gradients written by hand.

The network maps (x_t, sinusoidal features of t) through a SiLU MLP to a
(d_x + d_y)-wide output split into an image estimate and a mask estimate.
The mask head carries no softmax: the samplers need unconstrained estimates
of E[y | x_t].

The two output heads are separate weight blocks and separate matmuls. This
is deliberate: with the mask loss switched off, the mask head contributes an
exact zero to every backpropagated quantity, so the image-side gradients are
bit-identical to those of an image-only network initialized with the same
seed. Tests rely on that.

Backpropagation, Adam, and early stopping are implemented directly on numpy
arrays; gradient correctness is enforced by finite-difference checks in the
test suite rather than by an autodiff framework.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import JointDataset
from .schedules import Schedule

# spawn-key roles for deterministic, structure-independent weight streams
_KEY_HIDDEN = 0
_KEY_HEAD_X = 100
_KEY_HEAD_Y = 101
# trainer streams
_KEY_SPLIT = 0
_KEY_BATCH = 1
_KEY_VAL = 2

CHECKPOINT_FORMAT = "jointdiff-checkpoint-v1"


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


class CheckpointError(RuntimeError):
    """Raised on malformed or corrupted checkpoint files."""


def silu(h: np.ndarray) -> np.ndarray:
    return h / (1.0 + np.exp(-h))


def silu_grad(h: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-h))
    return s * (1.0 + h * (1.0 - s))


def time_features(t, n_freqs: int = 16) -> np.ndarray:
    """Sinusoidal embedding of t in [0, 1], shape (n, 2 * n_freqs).

    Geometric frequencies from 1 to 1000 cycles per unit interval; the
    lowest distinguishes coarse noise levels, the highest resolves steps
    near t_min.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    k = np.arange(n_freqs)
    freqs = 1000.0 ** (k / (n_freqs - 1.0))
    phase = 2.0 * np.pi * t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


def _init_matrix(shape, scale, key) -> np.ndarray:
    gen = np.random.default_rng(np.random.SeedSequence(entropy=key[0], spawn_key=key[1:]))
    return scale * gen.standard_normal(shape)


class MlpDenoiser:
    """SiLU MLP from (x_t, time features) to (x0_hat, y0_hat)."""

    def __init__(self, d_x: int, d_y: int, hidden=(128, 128, 128), n_freqs: int = 16,
                 params: list[np.ndarray] | None = None):
        if d_x < 1 or d_y < 0:
            raise ValueError("need d_x >= 1 and d_y >= 0")
        self.d_x = int(d_x)
        self.d_y = int(d_y)
        self.hidden = tuple(int(w) for w in hidden)
        if not self.hidden or any(w < 1 for w in self.hidden):
            raise ValueError("hidden widths must be positive")
        self.n_freqs = int(n_freqs)
        self.d_in = self.d_x + 2 * self.n_freqs
        if params is None:
            params = [np.zeros(s) for s in self.param_shapes()]
        shapes = [p.shape for p in params]
        if shapes != self.param_shapes():
            raise ValueError(f"parameter shapes {shapes} do not match architecture")
        self._params = params

    # -- parameter bookkeeping --

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        fan_in = self.d_in
        for w in self.hidden:
            shapes += [(fan_in, w), (w,)]
            fan_in = w
        shapes += [(fan_in, self.d_x), (self.d_x,), (fan_in, self.d_y), (self.d_y,)]
        return shapes

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.hidden)):
            names += [f"w{i}", f"b{i}"]
        return names + ["head_x_w", "head_x_b", "head_y_w", "head_y_b"]

    def params(self) -> list[np.ndarray]:
        return self._params

    def set_params(self, params: list[np.ndarray]) -> None:
        if [p.shape for p in params] != self.param_shapes():
            raise ValueError("parameter shapes do not match architecture")
        self._params = params

    def copy(self) -> "MlpDenoiser":
        return MlpDenoiser(self.d_x, self.d_y, self.hidden, self.n_freqs,
                           [p.copy() for p in self._params])

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self._params:
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()

    @classmethod
    def create(cls, d_x: int, d_y: int, seed: int, hidden=(128, 128, 128),
               n_freqs: int = 16) -> "MlpDenoiser":
        """Seeded He-style init; biases zero.

        Each hidden layer and each head draws from its own spawn-keyed
        stream, so networks differing only in d_y share every other weight
        bit-exactly.
        """
        model = cls(d_x, d_y, hidden, n_freqs)
        ps = model._params
        fan_in = model.d_in
        for i in range(len(model.hidden)):
            ps[2 * i][...] = _init_matrix(ps[2 * i].shape, np.sqrt(2.0 / fan_in),
                                          (seed, _KEY_HIDDEN, i))
            fan_in = model.hidden[i]
        ps[-4][...] = _init_matrix(ps[-4].shape, np.sqrt(1.0 / fan_in), (seed, _KEY_HEAD_X))
        ps[-2][...] = _init_matrix(ps[-2].shape, np.sqrt(1.0 / fan_in), (seed, _KEY_HEAD_Y))
        return model

    def reinit_mask_head(self, d_y: int, seed: int) -> "MlpDenoiser":
        """New model with a freshly drawn mask head of width d_y.

        Everything except (head_y_w, head_y_b) is shared by copy. Used when
        fine-tuning onto a domain with a different class count.
        """
        fan_in = self.hidden[-1]
        params = [p.copy() for p in self._params[:-2]]
        params.append(_init_matrix((fan_in, d_y), np.sqrt(1.0 / fan_in), (seed, _KEY_HEAD_Y)))
        params.append(np.zeros(d_y))
        return MlpDenoiser(self.d_x, d_y, self.hidden, self.n_freqs, params)

    # -- forward / backward --

    def forward(self, x_t: np.ndarray, t, keep: bool = False):
        """Returns (x0_hat, y0_hat), plus the activation cache if keep.

        x_t: (n, d_x); t: scalar or (n,). Deterministic given weights.
        """
        x_t = np.atleast_2d(np.asarray(x_t, dtype=float))
        if x_t.shape[1] != self.d_x:
            raise ValueError(f"x_t has width {x_t.shape[1]}, expected {self.d_x}")
        t = np.broadcast_to(np.asarray(t, dtype=float), (x_t.shape[0],))
        a = np.concatenate([x_t, time_features(t, self.n_freqs)], axis=1)
        acts = [a]
        pre = []
        for i in range(len(self.hidden)):
            h = a @ self._params[2 * i] + self._params[2 * i + 1]
            a = silu(h)
            pre.append(h)
            acts.append(a)
        x0 = a @ self._params[-4] + self._params[-3]
        y0 = a @ self._params[-2] + self._params[-1]
        if keep:
            return x0, y0, (acts, pre)
        return x0, y0

    def denoise(self, x_t: np.ndarray, t) -> tuple[np.ndarray, np.ndarray]:
        x0, y0 = self.forward(x_t, t)
        return x0, y0

    def hidden_activations(self, x_t: np.ndarray, t) -> list[np.ndarray]:
        """Post-activation values of every hidden layer (frozen-probe input)."""
        x_t = np.atleast_2d(np.asarray(x_t, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (x_t.shape[0],))
        a = np.concatenate([x_t, time_features(t, self.n_freqs)], axis=1)
        out = []
        for i in range(len(self.hidden)):
            a = silu(a @ self._params[2 * i] + self._params[2 * i + 1])
            out.append(a)
        return out

    def backward(self, cache, gx: np.ndarray, gy: np.ndarray) -> list[np.ndarray]:
        """Exact gradients of any scalar whose output gradients are (gx, gy).

        Returns arrays in params() order. The mask-head pullback is added as
        a separate term so gy == 0 contributes exact zeros.
        """
        acts, pre = cache
        a_last = acts[-1]
        grads: list[np.ndarray] = [None] * len(self._params)
        grads[-4] = a_last.T @ gx
        grads[-3] = gx.sum(axis=0)
        grads[-2] = a_last.T @ gy
        grads[-1] = gy.sum(axis=0)
        d = gx @ self._params[-4].T + gy @ self._params[-2].T
        for i in reversed(range(len(self.hidden))):
            dh = d * silu_grad(pre[i])
            grads[2 * i] = acts[i].T @ dh
            grads[2 * i + 1] = dh.sum(axis=0)
            if i > 0:
                d = dh @ self._params[2 * i].T
        return grads


# -- losses --

@dataclass(frozen=True)
class HybridLossConfig:
    """Joint denoising loss: snr(t) * (iw*|x - xh|^2/d_x + lam*|y - yh|^2/d_y).

    lam defaults to 1e-4; image_weight lets the supervised regime drop the
    image term entirely. Normalizers are the head widths, so a unit
    per-coordinate error costs 1 regardless of dimensionality.
    """

    lam: float = 1e-4
    image_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.lam < 0 or self.image_weight < 0:
            raise ValueError("loss weights must be nonnegative")


def hybrid_loss(cfg: HybridLossConfig, schedule: Schedule, x, y, x_hat, y_hat, t) -> float:
    loss, _, _ = hybrid_loss_grad(cfg, schedule, x, y, x_hat, y_hat, t)
    return loss


def hybrid_loss_grad(cfg: HybridLossConfig, schedule: Schedule, x, y, x_hat, y_hat, t):
    """Mean loss over the batch and its gradients w.r.t. (x_hat, y_hat)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=float))
    y_hat = np.atleast_2d(np.asarray(y_hat, dtype=float))
    if x.shape != x_hat.shape or y.shape != y_hat.shape:
        raise ValueError("prediction shapes do not match targets")
    n, d_x = x.shape
    d_y = y.shape[1]
    snr = np.broadcast_to(np.atleast_1d(schedule.snr(t)), (n,))
    dx = x_hat - x
    per = cfg.image_weight * (dx * dx).sum(axis=1) / d_x
    if d_y > 0:
        dy = y_hat - y
        per = per + cfg.lam * (dy * dy).sum(axis=1) / d_y
    loss = float(np.mean(snr * per))
    gx = (2.0 * cfg.image_weight / (d_x * n)) * snr[:, None] * dx
    gy = ((2.0 * cfg.lam / (d_y * n)) * snr[:, None] * dy) if d_y > 0 else np.zeros((n, 0))
    return loss, gx, gy


def cross_entropy_grad(y_hat: np.ndarray, classes: np.ndarray, K: int):
    """Mean per-block cross-entropy of mask logits and its gradient.

    y_hat: (n, K*P) logits; classes: (n, P) int targets. Used by fine-tuning
    only; diffusion pretraining stays MSE.
    """
    n, d_y = y_hat.shape
    P = d_y // K
    logits = y_hat.reshape(n, P, K)
    logits = logits - logits.max(axis=2, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=2, keepdims=True))
    idx = (np.arange(n)[:, None], np.arange(P)[None, :], classes)
    loss = float(-logp[idx].mean())
    g = np.exp(logp)
    np.subtract.at(g, idx, 1.0)
    return loss, (g / (n * P)).reshape(n, d_y)


# -- optimizer --

class AdamW:
    """Adam with decoupled weight decay on weight matrices (not biases).

    Defaults follow the training setup this reproduces: beta1=0.95,
    beta2=0.99, eps=1e-8, decay 1e-6. Linear warm-up on the learning rate.
    """

    def __init__(self, params: list[np.ndarray], lr: float, beta1: float = 0.95,
                 beta2: float = 0.99, eps: float = 1e-8, weight_decay: float = 1e-6,
                 warmup: int = 0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.warmup = int(warmup)
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> float:
        self.step_count += 1
        k = self.step_count
        lr = self.lr * min(1.0, k / self.warmup) if self.warmup > 0 else self.lr
        c1 = 1.0 - self.beta1 ** k
        c2 = 1.0 - self.beta2 ** k
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if p.ndim == 2 and self.weight_decay > 0:
                p -= lr * self.weight_decay * p
        return lr


# -- training --

@dataclass(frozen=True)
class TrainConfig:
    """Denoiser training hyperparameters.

    fixed_t pins every training condition to one noise level (the
    segmentation-style regime); noisy=False feeds clean inputs instead of
    x_t = alpha x + sigma eps. Both default to diffusion behavior.
    """

    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    patience: int = 20
    warmup: int = 100
    weight_decay: float = 1e-6
    beta1: float = 0.95
    beta2: float = 0.99
    eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.2
    fixed_t: float | None = None
    noisy: bool = True

    def __post_init__(self) -> None:
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad epoch/batch settings")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")


@dataclass
class TrainResult:
    model: "MlpDenoiser"
    history: dict = field(default_factory=dict)

    def curve_rows(self) -> list[tuple[int, float, float]]:
        return list(zip(self.history["epoch"], self.history["train_loss"],
                        self.history["val_loss"]))


def _stream(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))


def train_denoiser(model: MlpDenoiser, dataset: JointDataset, schedule: Schedule,
                   loss_cfg: HybridLossConfig, cfg: TrainConfig) -> TrainResult:
    """Early-stopped Adam training of the joint denoising loss.

    RNG contract (tests replay it): the split stream draws one permutation
    of the dataset; the validation stream draws the fixed (t, eps) used for
    every validation pass; the batch stream then draws, per epoch, one
    permutation of the training indices and, per batch, t then eps. Fixed-t
    mode skips the t draw and noisy=False skips the eps draw.

    Keeps the weights with the best validation loss, evaluated once at
    initialization and after every epoch; stops after `patience` epochs
    without improvement. Divergence (non-finite loss) raises
    TrainingDiverged. The caller's model is left untouched; training runs
    on a copy.
    """
    model = model.copy()
    n = dataset.n
    if n < 2:
        raise ValueError("need at least 2 samples to split train/validation")
    perm = _stream(cfg.seed, _KEY_SPLIT).permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n)))
    n_val = min(n_val, n - 1)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    x_tr, y_tr = dataset.x[train_idx], dataset.y[train_idx]
    x_va, y_va = dataset.x[val_idx], dataset.y[val_idx]

    val_rng = _stream(cfg.seed, _KEY_VAL)
    if cfg.fixed_t is None:
        t_va = val_rng.uniform(schedule.t_min, 1.0, size=n_val)
    else:
        t_va = np.full(n_val, float(cfg.fixed_t))
    if cfg.noisy:
        a, s = schedule.alpha_sigma(t_va)
        xt_va = a[:, None] * x_va + s[:, None] * val_rng.standard_normal(x_va.shape)
    else:
        xt_va = x_va

    def val_loss(m: MlpDenoiser) -> float:
        xh, yh = m.forward(xt_va, t_va)
        return hybrid_loss(loss_cfg, schedule, x_va, y_va, xh, yh, t_va)

    opt = AdamW(model.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps,
                cfg.weight_decay, cfg.warmup)
    batch_rng = _stream(cfg.seed, _KEY_BATCH)

    best = val_loss(model)
    best_params = [p.copy() for p in model.params()]
    best_epoch = 0
    hist = {"epoch": [], "train_loss": [], "val_loss": [], "first_batch_loss": None,
            "best_epoch": 0, "best_val_loss": best, "stopped_early": False,
            "max_y_head_grad": 0.0, "t_max_seen": None}

    since_best = 0
    for epoch in range(1, cfg.epochs + 1):
        order = batch_rng.permutation(len(train_idx))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            if cfg.fixed_t is None:
                t = batch_rng.uniform(schedule.t_min, 1.0, size=len(idx))
            else:
                t = np.full(len(idx), float(cfg.fixed_t))
            if cfg.noisy:
                a, s = schedule.alpha_sigma(t)
                xt = a[:, None] * xb + s[:, None] * batch_rng.standard_normal(xb.shape)
            else:
                xt = xb
            xh, yh, cache = model.forward(xt, t, keep=True)
            loss, gx, gy = hybrid_loss_grad(loss_cfg, schedule, xb, yb, xh, yh, t)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")
            grads = model.backward(cache, gx, gy)
            if model.d_y > 0:
                gy_head = max(float(np.abs(grads[-2]).max()), float(np.abs(grads[-1]).max()))
                hist["max_y_head_grad"] = max(hist["max_y_head_grad"], gy_head)
            t_max = float(np.max(t))
            if hist["t_max_seen"] is None or t_max > hist["t_max_seen"]:
                hist["t_max_seen"] = t_max
            opt.step(model.params(), grads)
            losses.append(loss)
            if hist["first_batch_loss"] is None:
                hist["first_batch_loss"] = loss
        vl = val_loss(model)
        if not np.isfinite(vl):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        hist["epoch"].append(epoch)
        hist["train_loss"].append(float(np.mean(losses)))
        hist["val_loss"].append(vl)
        if vl < best:
            best, best_epoch, since_best = vl, epoch, 0
            best_params = [p.copy() for p in model.params()]
        else:
            since_best += 1
            if since_best >= cfg.patience:
                hist["stopped_early"] = True
                break
    hist["best_epoch"] = best_epoch
    hist["best_val_loss"] = best
    return TrainResult(MlpDenoiser(model.d_x, model.d_y, model.hidden, model.n_freqs,
                                   best_params), hist)


# -- checkpoint IO --

def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(directory, name: str, model: MlpDenoiser, schedule: Schedule, *,
                    loss_cfg: HybridLossConfig | None = None, train_cfg: TrainConfig | None = None,
                    seed: int | None = None, metrics: dict | None = None,
                    regime: str | None = None, labels: dict | None = None) -> tuple[Path, Path]:
    """Write `<name>.json` (manifest) and `<name>.bin` (weights) atomically.

    The blob is every parameter raveled in params() order as little-endian
    float64; the manifest records shapes and the blob's sha256 so loads can
    detect corruption.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params())
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "arch": {"d_x": model.d_x, "d_y": model.d_y, "hidden": list(model.hidden),
                 "n_freqs": model.n_freqs},
        "schedule": schedule.to_dict(),
        "loss": None if loss_cfg is None else {"lam": loss_cfg.lam,
                                               "image_weight": loss_cfg.image_weight},
        "train": None if train_cfg is None else {
            k: getattr(train_cfg, k) for k in ("lr", "batch_size", "epochs", "patience",
                                               "warmup", "weight_decay", "beta1", "beta2",
                                               "eps", "seed", "val_fraction", "fixed_t",
                                               "noisy")},
        "seed": seed,
        "regime": regime,
        "labels": labels,  # {"K": ..., "P": ...} when the mask layout is known
        "metrics": metrics or {},
        "params": [{"name": n, "shape": list(s)}
                   for n, s in zip(model.param_names(), model.param_shapes())],
        "dtype": "<f8",
        "blob": f"{name}.bin",
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    blob_path = directory / f"{name}.bin"
    manifest_path = directory / f"{name}.json"
    _atomic_write(blob_path, blob)
    _atomic_write(manifest_path,
                  (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return manifest_path, blob_path


def load_checkpoint(manifest_path) -> tuple[MlpDenoiser, dict]:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unknown checkpoint format: {manifest.get('format')!r}")
    arch = manifest["arch"]
    model = MlpDenoiser(arch["d_x"], arch["d_y"], tuple(arch["hidden"]), arch["n_freqs"])
    blob_path = manifest_path.parent / manifest["blob"]
    try:
        blob = blob_path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read weights blob {blob_path}: {exc}") from exc
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError(f"weights blob {blob_path} fails its integrity checksum")
    expected = sum(int(np.prod(s)) for s in model.param_shapes())
    flat = np.frombuffer(blob, dtype="<f8")
    if flat.size != expected:
        raise CheckpointError(f"weights blob has {flat.size} values, expected {expected}")
    params, pos = [], 0
    for shape in model.param_shapes():
        size = int(np.prod(shape))
        params.append(flat[pos:pos + size].reshape(shape).astype(float))
        pos += size
    model.set_params(params)
    return model, manifest
