"""From-scratch feedforward network: forward, backprop, dropout, L2, Adam.

Parameters are stored in 32-bit floats by default (the dtype is configurable,
and the gradient tests run in 64-bit); scalar loss accumulation is always
64-bit. Hidden activations are rectified linear, the output is affine, and
dropout is the inverted convention (masks scaled by 1/(1-rate) at train time,
inference untouched).

Model file format, byte-exact (all integers little-endian):
    magic     12 bytes  b"HSTRAIN-MLP\\x00"
    version   uint32    currently 1
    n_layers  uint32    length of the layer-size list
    sizes     n_layers x uint32
    n_drop    uint32    number of hidden layers
    rates     n_drop x float32
    params    per layer: W (fan_in x fan_out float32, row-major), then b
    checksum  32 bytes  SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ChecksumError,
    FileFormatError,
    IncompatibilityError,
    InvalidDataError,
    InvalidParameterError,
    NumericError,
    TrainingDivergedError,
    TruncatedFileError,
    VersionError,
)

CANONICAL_HIDDEN = (500, 300, 100)
DEFAULT_BATCH_SIZE = 128

_MAGIC = b"HSTRAIN-MLP\x00"
_FORMAT_VERSION = 1


@dataclass
class MlpModel:
    """Feedforward ReLU network; weights[l] has shape (fan_in, fan_out)."""

    layer_sizes: tuple
    weights: list
    biases: list
    dropout_rates: tuple

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise InvalidParameterError(f"bad layer sizes {sizes}")
        n_hidden = len(sizes) - 2
        if len(self.weights) != n_hidden + 1 or len(self.biases) != n_hidden + 1:
            raise InvalidParameterError("parameter list lengths do not match layer_sizes")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[l], sizes[l + 1]) or b.shape != (sizes[l + 1],):
                raise InvalidParameterError(
                    f"layer {l}: expected W {(sizes[l], sizes[l + 1])}, got {w.shape}"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise InvalidDataError(f"layer {l}: non-finite parameters")
        rates = tuple(float(r) for r in self.dropout_rates)
        if len(rates) != n_hidden or any(not (0.0 <= r < 1.0) for r in rates):
            raise InvalidParameterError(f"need {n_hidden} dropout rates in [0, 1), got {rates}")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "dropout_rates", rates)

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "MlpModel":
        return MlpModel(
            layer_sizes=self.layer_sizes,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            dropout_rates=self.dropout_rates,
        )


def default_dropout_rates(layer_sizes) -> tuple:
    """0.5 after every hidden layer except the last, which gets 0."""
    n_hidden = len(layer_sizes) - 2
    if n_hidden <= 0:
        return ()
    return tuple([0.5] * (n_hidden - 1) + [0.0])


def init_model(layer_sizes, seed, dropout_rates=None, dtype=np.float32) -> MlpModel:
    """He-scaled random weights, zero biases, deterministic by seed."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise InvalidParameterError(f"bad layer sizes {sizes}")
    if dropout_rates is None:
        dropout_rates = default_dropout_rates(sizes)
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = np.sqrt(2.0 / fan_in)
        weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpModel(
        layer_sizes=sizes, weights=weights, biases=biases, dropout_rates=tuple(dropout_rates)
    )


def _check_input(model, x):
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.n_in:
        raise IncompatibilityError(
            f"input width {x.shape[-1] if x.ndim else 0} does not match model input {model.n_in}"
        )
    if not np.isfinite(x).all():
        raise InvalidDataError("non-finite network input")
    return np.ascontiguousarray(x, dtype=model.dtype)


def _forward_full(model, x, mode, dropout_seed):
    """Returns (output, activations, pre-dropout hiddens, scaled masks)."""
    rng = None
    if mode == "train" and any(r > 0 for r in model.dropout_rates):
        if dropout_seed is None:
            raise InvalidParameterError("train-mode forward with dropout needs a dropout_seed")
        rng = np.random.default_rng(dropout_seed)
    acts = [x]
    hiddens = []
    masks = []
    a = x
    n_hidden = len(model.layer_sizes) - 2
    for l in range(n_hidden):
        h = a @ model.weights[l] + model.biases[l]
        np.maximum(h, 0.0, out=h)
        hiddens.append(h)
        rate = model.dropout_rates[l]
        if mode == "train" and rate > 0.0:
            keep = rng.random(h.shape, dtype=np.float32) >= rate
            mask = keep.astype(model.dtype)
            mask /= model.dtype.type(1.0) - model.dtype.type(rate)
            a = h * mask
            masks.append(mask)
        else:
            a = h
            masks.append(None)
        acts.append(a)
    out = a @ model.weights[-1] + model.biases[-1]
    return out, acts, hiddens, masks


def forward(model: MlpModel, x, mode: str = "infer", dropout_seed=None) -> np.ndarray:
    """Run the network on a batch; train mode applies inverted dropout."""
    if mode not in ("train", "infer"):
        raise InvalidParameterError(f"mode must be 'train' or 'infer', got {mode!r}")
    xb = _check_input(model, x)
    out, _, _, _ = _forward_full(model, xb, mode, dropout_seed)
    return out


def _loss_and_grad_prepared(model, x, y, l2_lambda, mode, dropout_seed):
    out, acts, hiddens, masks = _forward_full(model, x, mode, dropout_seed)
    B = x.shape[0]
    resid = out - y
    mse = float(np.mean(np.square(resid, dtype=np.float64)))
    penalty = 0.0
    if l2_lambda:
        penalty = l2_lambda * sum(
            float(np.sum(np.square(w, dtype=np.float64))) for w in model.weights
        )
    loss = mse + penalty
    lam2 = model.dtype.type(2.0 * l2_lambda)
    delta = resid * model.dtype.type(2.0 / (B * model.n_out))
    n_layers = len(model.weights)
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    grad_w[-1] = acts[-1].T @ delta
    if l2_lambda:
        grad_w[-1] += lam2 * model.weights[-1]
    grad_b[-1] = delta.sum(axis=0)
    da = delta @ model.weights[-1].T
    for l in range(n_layers - 2, -1, -1):
        dz = da * (hiddens[l] > 0)
        if masks[l] is not None:
            dz *= masks[l]
        grad_w[l] = acts[l].T @ dz
        if l2_lambda:
            grad_w[l] += lam2 * model.weights[l]
        grad_b[l] = dz.sum(axis=0)
        if l > 0:
            da = dz @ model.weights[l].T
    return loss, grad_w, grad_b


def loss_and_grad(model, x, y, l2_lambda=0.0, mode="train", dropout_seed=None, batch_id=None):
    """MSE plus l2_lambda * sum(W^2) (biases excluded) and its gradients.

    The gradient is taken under the same dropout mask as the forward pass.
    """
    xb = _check_input(model, x)
    yb = np.asarray(y)
    if yb.ndim == 1:
        yb = yb[None, :]
    if yb.shape != (xb.shape[0], model.n_out):
        raise IncompatibilityError(
            f"target shape {yb.shape} does not match (batch, {model.n_out})"
        )
    yb = np.ascontiguousarray(yb, dtype=model.dtype)
    loss, gw, gb = _loss_and_grad_prepared(model, xb, yb, l2_lambda, mode, dropout_seed)
    if not np.isfinite(loss):
        where = f" in batch {batch_id}" if batch_id is not None else ""
        raise NumericError(f"non-finite loss{where}")
    return loss, {"W": gw, "b": gb}


@dataclass
class AdamState:
    """First/second moment accumulators and the shared timestep."""

    m: list
    v: list
    t: int = 0


def init_adam_state(params) -> AdamState:
    return AdamState(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(params, grads, state, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; params and state are updated in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InvalidParameterError("params, grads, and state lengths differ")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise InvalidParameterError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        p -= learning_rate * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int = DEFAULT_BATCH_SIZE
    l2_lambda: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not (self.learning_rate > 0):
            raise InvalidParameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise InvalidParameterError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.l2_lambda < 0:
            raise InvalidParameterError(f"l2_lambda must be >= 0, got {self.l2_lambda}")


@dataclass(frozen=True)
class LossTrace:
    """Per-epoch mean training loss, plus validation MSE when a val set is given."""

    train: np.ndarray
    val: np.ndarray = None


def train(model: MlpModel, x, y, cfg: TrainConfig, val=None, frozen_layers: int = 0):
    """Mini-batch Adam on MSE + L2; returns (trained copy, LossTrace).

    The input model is not mutated. frozen_layers freezes the parameters of
    the first k hidden layers exactly (they are excluded from the optimizer).
    Deterministic given cfg.seed: shuffling and dropout masks are seeded.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise InvalidDataError(f"bad training shapes x {x.shape}, y {y.shape}")
    if x.shape[1] != model.n_in or y.shape[1] != model.n_out:
        raise IncompatibilityError(
            f"data widths ({x.shape[1]}, {y.shape[1]}) do not match model "
            f"({model.n_in}, {model.n_out})"
        )
    if not (0 <= frozen_layers <= len(model.layer_sizes) - 2):
        raise InvalidParameterError(
            f"frozen_layers must be in [0, {len(model.layer_sizes) - 2}], got {frozen_layers}"
        )
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise InvalidDataError("non-finite training data")
    out = model.copy()
    n = x.shape[0]
    xf = np.ascontiguousarray(x, dtype=out.dtype)
    yf = np.ascontiguousarray(y, dtype=out.dtype)
    if val is not None:
        xv = _check_input(out, val[0])
        yv = np.ascontiguousarray(val[1], dtype=out.dtype)
        if yv.shape != (xv.shape[0], out.n_out):
            raise IncompatibilityError(f"validation target shape {yv.shape} mismatched")
    trainable = list(range(frozen_layers, len(out.weights)))
    params = [out.weights[l] for l in trainable] + [out.biases[l] for l in trainable]
    state = init_adam_state(params)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    train_trace = np.empty(cfg.epochs)
    val_trace = np.empty(cfg.epochs) if val is not None else None
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n) if cfg.shuffle else np.arange(n)
        epoch_loss = 0.0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            xb = xf[idx]
            yb = yf[idx]
            loss, gw, gb = _loss_and_grad_prepared(
                out, xb, yb, cfg.l2_lambda, "train", [cfg.seed, 2, epoch, bi]
            )
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {bi}", epoch=epoch, batch=bi
                )
            grads = [gw[l] for l in trainable] + [gb[l] for l in trainable]
            adam_step(params, grads, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
            epoch_loss += loss * len(idx)
        train_trace[epoch] = epoch_loss / n
        if not all(np.isfinite(w).all() for w in out.weights) or not np.isfinite(
            train_trace[epoch]
        ):
            raise TrainingDivergedError(f"non-finite parameters after epoch {epoch}", epoch=epoch)
        if val is not None:
            pred, _, _, _ = _forward_full(out, xv, "infer", None)
            val_trace[epoch] = float(np.mean(np.square(pred - yv, dtype=np.float64)))
    return out, LossTrace(train=train_trace, val=val_trace)


def model_to_bytes(model: MlpModel) -> bytes:
    """Serialize to the documented binary format (always 32-bit parameters)."""
    parts = [_MAGIC, struct.pack("<II", _FORMAT_VERSION, len(model.layer_sizes))]
    parts.append(struct.pack(f"<{len(model.layer_sizes)}I", *model.layer_sizes))
    parts.append(struct.pack("<I", len(model.dropout_rates)))
    if model.dropout_rates:
        parts.append(np.asarray(model.dropout_rates, dtype="<f4").tobytes())
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    blob = b"".join(parts)
    return blob + hashlib.sha256(blob).digest()


def save_model(model: MlpModel, path) -> None:
    """Write the documented binary model format (always 32-bit parameters)."""
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def model_from_bytes(raw: bytes, origin: str = "model data") -> MlpModel:
    """Parse the binary model format.

    Structure (magic, version, header, expected length) is validated before
    the checksum, so a short blob reports truncation rather than a checksum
    mismatch; a wrong-length body never reaches parameter parsing.
    """
    off = len(_MAGIC)
    if len(raw) < off + 8:
        raise TruncatedFileError(f"{origin}: file too short to be a model file")
    if raw[:off] != _MAGIC:
        raise FileFormatError(f"{origin}: bad magic; not a model file")
    version, n_layers = struct.unpack_from("<II", raw, off)
    off += 8
    if version != _FORMAT_VERSION:
        raise VersionError(
            f"{origin}: file format version {version}, this reader supports {_FORMAT_VERSION}"
        )
    if n_layers < 2:
        raise FileFormatError(f"{origin}: model file claims {n_layers} layers")

    def take(count):
        nonlocal off
        end = off + count
        if end > len(raw) - 32:
            raise TruncatedFileError(f"{origin}: truncated model file")
        chunk = raw[off:end]
        off = end
        return chunk

    sizes = struct.unpack(f"<{n_layers}I", take(4 * n_layers))
    (n_drop,) = struct.unpack("<I", take(4))
    rates = tuple(np.frombuffer(take(4 * n_drop), dtype="<f4").astype(float)) if n_drop else ()
    param_bytes = sum(4 * (a * b + b) for a, b in zip(sizes[:-1], sizes[1:]))
    expected = off + param_bytes + 32
    if len(raw) < expected:
        raise TruncatedFileError(
            f"{origin}: truncated model file ({len(raw)} bytes, expected {expected})"
        )
    if len(raw) > expected:
        raise FileFormatError(f"{origin}: {len(raw) - expected} unexpected trailing bytes")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{origin}: content checksum mismatch")
    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(take(4 * fan_in * fan_out), dtype="<f4").reshape(fan_in, fan_out)
        b = np.frombuffer(take(4 * fan_out), dtype="<f4")
        weights.append(w.copy())
        biases.append(b.copy())
    return MlpModel(layer_sizes=sizes, weights=weights, biases=biases, dropout_rates=rates)


def load_model(path) -> MlpModel:
    """Read a model file; see model_from_bytes for the validation order."""
    with open(path, "rb") as fh:
        raw = fh.read()
    return model_from_bytes(raw, origin=str(path))
