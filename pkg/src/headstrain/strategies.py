"""Modeling strategies: pretrained basis, scratch, data fusion, transfer.

All four strategies share one pipeline shape: fit a feature standardizer on
a declared population, move labels to log scale (optionally whitening them
per element), triple the training rows with feature-noise copies, and train
the fixed 510 -> 500 -> 300 -> 100 -> E network. They differ only in which
data each stage sees, so every strategy function is a short recipe over the
shared helpers in this module.

A trained predictor travels as a single bundle file:

    magic         13 bytes  b"HSTRAIN-BNDL\\x00"
    version       u32 LE    currently 1
    manifest_len  u32 LE
    manifest      UTF-8 JSON (sorted keys): quantity, layout version,
                  population descriptors, array table, provenance record
    arrays        raw little-endian blocks in manifest order
    model         embedded model blob (carries its own header and checksum)
    digest        sha256 over everything above

Loaders report the most specific failure first: truncation, then magic,
version, structural length, and only then the checksum.
"""

import json
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ChecksumError,
    FileFormatError,
    IncompatibilityError,
    InsufficientDataError,
    InvalidDataError,
    InvalidParameterError,
    TruncatedFileError,
    VersionError,
)
from .features import (
    LAYOUT_V1,
    N_FEATURES,
    Standardizer,
    extract_feature_matrix,
    fit_standardizer,
    standardize,
)
from .nn import (
    DEFAULT_BATCH_SIZE,
    MlpModel,
    TrainConfig,
    forward,
    init_model,
    model_from_bytes,
    model_to_bytes,
    train,
)
from .oracle import LABEL_FLOOR, Dataset

HIDDEN_LAYER_SIZES = (500, 300, 100)
DEFAULT_NOISE_LEVELS = (0.01, 0.02)
DEFAULT_FREEZE_GRID = (0, 1, 2)
DEFAULT_LR_FACTORS = (1.0, 1.0 / 3.0, 0.1)
DEFAULT_EPOCH_GRID = (100, 300, 1000)
DEFAULT_EPOCHS = 3000

QUANTITIES = ("mps", "mpsr")
# learning rate and L2 weight per predicted quantity
_QUANTITY_DEFAULTS = {"mps": (3e-4, 0.01), "mpsr": (5e-4, 0.05)}

STRATEGY_NAMES = (
    "pretrained",
    "scratch_whiten",
    "scratch_log",
    "fusion_whiten",
    "fusion_log",
    "transfer",
)

# Published shorthand for each strategy; scratch models are cited by the
# on-field dataset they were trained on, so those take a dataset tag.
_ABBREVIATIONS = {
    "pretrained": "Pre-train",
    "transfer": "Transfer",
    "fusion_whiten": "Fusion 1",
    "fusion_log": "Fusion 2",
    "scratch_whiten": "{tag} 1",
    "scratch_log": "{tag} 2",
}

_BUNDLE_MAGIC = b"HSTRAIN-BNDL\x00"
_BUNDLE_VERSION = 1

# seed-stream tags; keep disjoint from the trainer's internal (1, 2) tags
_SEED_INIT = 0
_SEED_NOISE = 3
_SEED_SPLIT = 11

BASIS_SPLIT = (0.70, 0.15, 0.15)


def canonical_quantity(quantity: str) -> str:
    q = str(quantity).lower()
    if q not in QUANTITIES:
        raise InvalidParameterError(f"unknown quantity {quantity!r}; expected one of {QUANTITIES}")
    return q


def strategy_abbreviation(name: str, dataset_tag: str = "CF/MMA/NFL/NHTSA") -> str:
    if name not in _ABBREVIATIONS:
        raise InvalidParameterError(f"unknown strategy {name!r}")
    return _ABBREVIATIONS[name].format(tag=dataset_tag)


def default_train_config(quantity, epochs: int = DEFAULT_EPOCHS, seed: int = 0,
                         batch_size: int = DEFAULT_BATCH_SIZE) -> TrainConfig:
    """Published defaults per quantity: lr 3e-4 / L2 0.01 for strain, lr 5e-4 / L2 0.05 for strain rate."""
    lr, l2 = _QUANTITY_DEFAULTS[canonical_quantity(quantity)]
    return TrainConfig(learning_rate=lr, epochs=epochs, batch_size=batch_size,
                       l2_lambda=l2, seed=seed)


@dataclass(frozen=True)
class StrategySpec:
    """One strategy to execute in an experiment, with its tuning knobs."""

    name: str
    train: TrainConfig = None
    freeze_grid: tuple = DEFAULT_FREEZE_GRID
    lr_grid: tuple = None
    epoch_grid: tuple = DEFAULT_EPOCH_GRID

    def __post_init__(self):
        if self.name not in STRATEGY_NAMES:
            raise InvalidParameterError(f"unknown strategy {self.name!r}")
        if self.name == "transfer":
            if not self.freeze_grid or not self.epoch_grid:
                raise InvalidParameterError("transfer requires non-empty freeze and epoch grids")
            if self.lr_grid is not None and not self.lr_grid:
                raise InvalidParameterError("transfer lr grid must be non-empty when given")
            if any(int(k) != k or k < 0 for k in self.freeze_grid):
                raise InvalidParameterError("freeze grid entries must be non-negative integers")


# ---------------------------------------------------------------------------
# label transforms


@dataclass(frozen=True)
class LabelTransform:
    """Log transform of the labels, optionally z-scored per element.

    Whitening statistics are population moments (ddof 0) of the log-labels
    over the declared population; elements whose log-label is constant get
    std 1 and a degenerate flag instead of a division blow-up.
    """

    kind: str
    mean: np.ndarray = None
    std: np.ndarray = None
    degenerate: np.ndarray = None
    population_descriptor: str = ""
    floor: float = LABEL_FLOOR

    def __post_init__(self):
        if self.kind not in ("log", "log_whiten"):
            raise InvalidParameterError(f"unknown label transform kind {self.kind!r}")
        if not (self.floor > 0):
            raise InvalidParameterError("label floor must be positive")
        if self.kind == "log":
            if self.mean is not None or self.std is not None:
                raise InvalidParameterError("plain log transform stores no statistics")
            return
        if self.mean is None or self.std is None:
            raise InvalidParameterError("log_whiten requires per-element mean and std")
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.ndim != 1 or std.shape != mean.shape:
            raise InvalidParameterError("whitening statistics must be matching 1-d arrays")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise InvalidDataError("whitening statistics must be finite")
        if np.any(std <= 0):
            raise InvalidParameterError("whitening stds must be positive after the degeneracy guard")
        degenerate = self.degenerate
        degenerate = np.zeros(mean.size, dtype=bool) if degenerate is None \
            else np.asarray(degenerate, dtype=bool)
        if degenerate.shape != mean.shape:
            raise InvalidParameterError("degenerate mask must match the statistics")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        object.__setattr__(self, "degenerate", degenerate)

    @property
    def n_elements(self):
        return None if self.mean is None else int(self.mean.size)

    @property
    def n_degenerate(self) -> int:
        return 0 if self.degenerate is None else int(np.count_nonzero(self.degenerate))


def fit_label_transform(kind: str, labels, population_descriptor: str = "") -> LabelTransform:
    """Fit a transform on (n_impacts, n_elements) labels from the stated population."""
    if kind == "log":
        return LabelTransform(kind="log", population_descriptor=population_descriptor)
    if kind != "log_whiten":
        raise InvalidParameterError(f"unknown label transform kind {kind!r}")
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim != 2:
        raise InvalidDataError(f"labels must be 2-d (impacts, elements), got shape {y.shape}")
    if y.shape[0] < 2:
        raise InsufficientDataError("whitening needs at least 2 impacts")
    if not np.all(np.isfinite(y)):
        raise InvalidDataError("labels must be finite")
    if np.any(y < LABEL_FLOOR):
        raise InvalidDataError(f"labels below the {LABEL_FLOOR} floor")
    z = np.log(y)
    mean = z.mean(axis=0)
    std = z.std(axis=0)
    degenerate = std == 0.0
    std = np.where(degenerate, 1.0, std)
    return LabelTransform(kind="log_whiten", mean=mean, std=std, degenerate=degenerate,
                          population_descriptor=population_descriptor)


def transform_labels(t: LabelTransform, labels) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise InvalidDataError("labels must be finite")
    if np.any(y < t.floor):
        raise InvalidDataError(f"labels below the {t.floor} floor")
    z = np.log(y)
    if t.kind == "log_whiten":
        if z.shape[-1] != t.mean.size:
            raise IncompatibilityError(
                f"labels have {z.shape[-1]} elements, transform stores {t.mean.size}"
            )
        z = (z - t.mean) / t.std
    return z


def inverse_transform(t: LabelTransform, values) -> np.ndarray:
    """Map transformed values back to label scale.

    Runs in the dtype of the input: 32-bit network outputs are inverted in
    32-bit arithmetic, so a runaway prediction overflows to inf instead of
    being silently rescued by a wider exponent range.
    """
    v = np.asarray(values)
    if v.dtype.kind != "f":
        v = v.astype(np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        if t.kind == "log_whiten":
            if v.shape[-1] != t.mean.size:
                raise IncompatibilityError(
                    f"values have {v.shape[-1]} elements, transform stores {t.mean.size}"
                )
            v = v * t.std.astype(v.dtype) + t.mean.astype(v.dtype)
        return np.exp(v)


# ---------------------------------------------------------------------------
# augmentation and partitioning


def noise_augment(features, labels=None, levels=DEFAULT_NOISE_LEVELS, seed=0):
    """Stack the input rows with one noisy copy per level.

    Noise for level c is Gaussian with per-column std c * std_j, where std_j
    comes from the pre-augmentation matrix. With labels given, they are
    replicated bit-identically alongside their source rows.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidDataError(f"features must be 2-d, got shape {X.shape}")
    if X.shape[0] < 2:
        raise InsufficientDataError("column noise scales need at least 2 rows")
    levels = tuple(float(c) for c in levels)
    if any(c < 0 for c in levels):
        raise InvalidParameterError("noise levels must be non-negative")
    rng = np.random.default_rng(seed)
    sigma = X.std(axis=0)
    blocks = [X]
    for c in levels:
        if c == 0.0:
            blocks.append(X.copy())
        else:
            blocks.append(X + rng.standard_normal(X.shape) * (c * sigma))
    out = np.vstack(blocks)
    if labels is None:
        return out
    Y = np.asarray(labels)
    if Y.shape[0] != X.shape[0]:
        raise IncompatibilityError(f"{Y.shape[0]} label rows for {X.shape[0]} feature rows")
    return out, np.vstack([Y] * (len(levels) + 1))


def partition_indices(n: int, ratios, rng):
    """Shuffle range(n) into train/validation/test index arrays.

    Set sizes are round(ratio * n) for train and validation; test takes the
    remainder so the three always cover everything exactly once.
    """
    r = tuple(float(v) for v in ratios)
    if len(r) != 3 or any(v <= 0 for v in r):
        raise InvalidParameterError(f"need three positive ratios, got {ratios!r}")
    if abs(sum(r) - 1.0) > 1e-9:
        raise InvalidParameterError(f"ratios must sum to 1, got {sum(r)!r}")
    n = int(n)
    n_train = int(round(r[0] * n))
    n_val = int(round(r[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise InsufficientDataError(
            f"partition of {n} at {r} leaves an empty set "
            f"({n_train}/{n_val}/{n_test})"
        )
    perm = np.random.default_rng(rng).permutation(n)
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


# ---------------------------------------------------------------------------
# bundles


@dataclass(frozen=True)
class PredictorBundle:
    """The deployable unit: network, standardizer, label transform, provenance."""

    quantity: str
    model: MlpModel
    standardizer: Standardizer
    transform: LabelTransform
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "quantity", canonical_quantity(self.quantity))
        if self.model.n_in != self.standardizer.mean.size:
            raise IncompatibilityError(
                f"model takes {self.model.n_in} inputs, standardizer provides "
                f"{self.standardizer.mean.size}"
            )
        if self.transform.kind == "log_whiten" and self.transform.n_elements != self.model.n_out:
            raise IncompatibilityError(
                f"model emits {self.model.n_out} elements, whitening stores "
                f"{self.transform.n_elements}"
            )
        prov_layout = self.provenance.get("layout_version")
        if prov_layout is not None and prov_layout != self.standardizer.layout_version:
            raise IncompatibilityError(
                f"provenance layout {prov_layout!r} does not match standardizer "
                f"layout {self.standardizer.layout_version!r}"
            )

    @property
    def n_elements(self) -> int:
        return self.model.n_out


def _labels_for(dataset: Dataset, quantity: str) -> np.ndarray:
    return dataset.mps if quantity == "mps" else dataset.mpsr


def _dataset_features(dataset: Dataset, features) -> np.ndarray:
    if features is None:
        return extract_feature_matrix(dataset.recordings)
    X = np.asarray(features, dtype=np.float64)
    if X.shape != (dataset.n_recordings, N_FEATURES):
        raise IncompatibilityError(
            f"feature matrix shape {X.shape} does not match dataset "
            f"({dataset.n_recordings} recordings x {N_FEATURES})"
        )
    return X


def _pair(data, what: str):
    X, y = data
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 2 or X.shape[0] != y.shape[0]:
        raise InvalidDataError(
            f"{what} must be (features, labels) with matching rows, "
            f"got {X.shape} and {y.shape}"
        )
    return X, y


def _cfg_provenance(cfg: TrainConfig) -> dict:
    return {
        "learning_rate": cfg.learning_rate,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "l2_lambda": cfg.l2_lambda,
        "seed": cfg.seed,
        "noise_levels": list(DEFAULT_NOISE_LEVELS),
    }


def _train_fresh(std_obj, transform, X_raw, y_raw, cfg, n_out):
    """Augment, standardize, and train a freshly initialized network."""
    y_t = transform_labels(transform, y_raw)
    Xa, ya = noise_augment(X_raw, y_t, seed=[cfg.seed, _SEED_NOISE])
    Xs = standardize(std_obj, Xa)
    model = init_model((Xs.shape[1],) + HIDDEN_LAYER_SIZES + (n_out,),
                       seed=[cfg.seed, _SEED_INIT])
    trained, trace = train(model, Xs, ya, cfg)
    final = trace.train[-1] if cfg.epochs else None
    return trained, final


def pretrain(hm: Dataset, quantity, cfg: TrainConfig, features=None, split_seed=None) -> PredictorBundle:
    """Train a basis predictor on the simulated dataset with a 70/15/15 split.

    The split is drawn from [split_seed, 11] (split_seed defaults to the
    training seed) and recorded in provenance so callers can evaluate on the
    held-out indices.
    """
    q = canonical_quantity(quantity)
    X = _dataset_features(hm, features)
    labels = _labels_for(hm, q)
    ss = cfg.seed if split_seed is None else split_seed
    tr, va, te = partition_indices(hm.n_recordings, BASIS_SPLIT,
                                   np.random.default_rng([int(ss), _SEED_SPLIT]))
    tag = hm.manifest.get("profile", "basis")
    std_obj = fit_standardizer(X[tr], population_descriptor=f"{tag}:train")
    transform = fit_label_transform("log", labels[tr], population_descriptor=f"{tag}:train")
    model, final = _train_fresh(std_obj, transform, X[tr], labels[tr], cfg,
                                n_out=labels.shape[1])
    provenance = {
        "strategy": "pretrained",
        "quantity": q,
        "layout_version": std_obj.layout_version,
        "datasets": {"basis": dict(hm.manifest)},
        "seeds": {"train": cfg.seed, "split": int(ss)},
        "split": {"train": tr.tolist(), "validation": va.tolist(), "test": te.tolist()},
        "hyperparameters": _cfg_provenance(cfg),
        "final_train_loss": final,
    }
    return PredictorBundle(quantity=q, model=model, standardizer=std_obj,
                           transform=transform, provenance=provenance)


def scratch_train(onfield_train, whiten: bool, quantity, cfg: TrainConfig,
                  dataset_tag: str = "onfield") -> PredictorBundle:
    """Train only on the on-field training pair (features, labels)."""
    q = canonical_quantity(quantity)
    X, y = _pair(onfield_train, "onfield_train")
    if X.shape[0] < 2:
        raise InsufficientDataError("scratch training needs at least 2 impacts")
    desc = f"{dataset_tag}:train"
    std_obj = fit_standardizer(X, population_descriptor=desc)
    transform = fit_label_transform("log_whiten" if whiten else "log", y,
                                    population_descriptor=desc)
    model, final = _train_fresh(std_obj, transform, X, y, cfg, n_out=y.shape[1])
    provenance = {
        "strategy": "scratch_whiten" if whiten else "scratch_log",
        "quantity": q,
        "layout_version": std_obj.layout_version,
        "datasets": {"onfield": dataset_tag},
        "seeds": {"train": cfg.seed},
        "n_train_impacts": int(X.shape[0]),
        "hyperparameters": _cfg_provenance(cfg),
        "final_train_loss": final,
    }
    return PredictorBundle(quantity=q, model=model, standardizer=std_obj,
                           transform=transform, provenance=provenance)


def fusion_train(hm: Dataset, onfield_train, whiten: bool, quantity, cfg: TrainConfig,
                 features=None, split_seed=None, extra_population_labels=None,
                 dataset_tag: str = "onfield") -> PredictorBundle:
    """Train one network on simulated-train plus on-field-train rows.

    Standardizer and (when whitening) label statistics are fit on the fused
    training population. extra_population_labels widens the whitening
    population only - the final-evaluation convention that pools the
    on-field validation labels as well - without adding training rows.
    """
    q = canonical_quantity(quantity)
    X_hm = _dataset_features(hm, features)
    y_hm = _labels_for(hm, q)
    X_on, y_on = _pair(onfield_train, "onfield_train")
    if y_on.shape[1] != y_hm.shape[1]:
        raise IncompatibilityError(
            f"on-field labels have {y_on.shape[1]} elements, basis has {y_hm.shape[1]}"
        )
    ss = cfg.seed if split_seed is None else split_seed
    tr, _, _ = partition_indices(hm.n_recordings, BASIS_SPLIT,
                                 np.random.default_rng([int(ss), _SEED_SPLIT]))
    X = np.vstack([X_hm[tr], X_on])
    y = np.vstack([y_hm[tr], y_on])
    tag = hm.manifest.get("profile", "basis")
    desc = f"{tag}:train+{dataset_tag}:train"
    std_obj = fit_standardizer(X, population_descriptor=desc)
    if whiten:
        pop = y
        pop_desc = desc
        if extra_population_labels is not None:
            extra = np.asarray(extra_population_labels, dtype=np.float64)
            if extra.ndim != 2 or extra.shape[1] != y.shape[1]:
                raise IncompatibilityError(
                    f"extra population labels shape {extra.shape} does not match "
                    f"{y.shape[1]} elements"
                )
            pop = np.vstack([y, extra])
            pop_desc = desc + f"+{dataset_tag}:validation"
        transform = fit_label_transform("log_whiten", pop, population_descriptor=pop_desc)
    else:
        transform = fit_label_transform("log", y, population_descriptor=desc)
    model, final = _train_fresh(std_obj, transform, X, y, cfg, n_out=y.shape[1])
    provenance = {
        "strategy": "fusion_whiten" if whiten else "fusion_log",
        "quantity": q,
        "layout_version": std_obj.layout_version,
        "datasets": {"basis": dict(hm.manifest), "onfield": dataset_tag},
        "seeds": {"train": cfg.seed, "split": int(ss)},
        "split": {"train": tr.tolist()},
        "n_train_impacts": int(X.shape[0]),
        "hyperparameters": _cfg_provenance(cfg),
        "final_train_loss": final,
    }
    return PredictorBundle(quantity=q, model=model, standardizer=std_obj,
                           transform=transform, provenance=provenance)


def _transform_affine(t: LabelTransform, n_out: int):
    """(mean, std) of the affine map log-label -> transformed target."""
    if t.kind == "log_whiten":
        return np.asarray(t.mean, dtype=np.float64), np.asarray(t.std, dtype=np.float64)
    return np.zeros(n_out), np.ones(n_out)


def _rebase_output(model, old_t: LabelTransform, new_t: LabelTransform):
    """Re-express the output layer in a new label-transform's target space.

    Both transforms are affine in log-label space, so the map between their
    targets is per-element affine and the last linear layer absorbs it
    exactly: the returned model composed with new_t's inverse is the same
    predictor as the input model composed with old_t's inverse (up to float
    rounding). Hidden layers are shared with the input model, untouched.
    """
    m1, s1 = _transform_affine(old_t, model.n_out)
    m2, s2 = _transform_affine(new_t, model.n_out)
    a = s1 / s2
    c = (m1 - m2) / s2
    weights = list(model.weights)
    biases = list(model.biases)
    weights[-1] = (weights[-1] * a[None, :]).astype(model.dtype)
    biases[-1] = (biases[-1] * a + c).astype(model.dtype)
    return MlpModel(layer_sizes=model.layer_sizes, weights=weights, biases=biases,
                    dropout_rates=model.dropout_rates)


def fine_tune(basis: PredictorBundle, onfield_train, onfield_val, basis_features,
              freeze_grid=DEFAULT_FREEZE_GRID, lr_grid=None,
              epoch_grid=DEFAULT_EPOCH_GRID, seed: int = 0,
              dataset_tag: str = "onfield") -> PredictorBundle:
    """Adapt a basis predictor to on-field data by grid-searched fine-tuning.

    Every grid point (freeze k, lr, epochs) restarts from the basis weights,
    keeps the first k hidden layers frozen, and is scored by validation MAE
    on label scale. Ties go to the fewest trainable layers, then the lowest
    learning rate, then the fewest epochs. basis_features is the simulated
    feature matrix, pooled with the on-field training rows to refit the
    standardizer.

    Fine-tuning targets are re-whitened per element on the on-field training
    labels (given >= 2 rows) and the basis output layer is re-expressed in
    that space, which leaves the initial predictions unchanged while the
    optimizer sees centred unit-scale targets; the basis distribution no
    longer dictates the target conditioning.
    """
    X_tr, y_tr = _pair(onfield_train, "onfield_train")
    X_va, y_va = _pair(onfield_val, "onfield_val")
    if X_tr.shape[0] < 1:
        raise InsufficientDataError("fine-tuning needs a non-empty training set")
    if X_va.shape[0] < 1:
        raise InsufficientDataError("fine-tuning needs a non-empty validation set")
    if y_tr.shape[1] != basis.n_elements:
        raise IncompatibilityError(
            f"on-field labels have {y_tr.shape[1]} elements, basis predicts {basis.n_elements}"
        )
    X_hm = np.asarray(basis_features, dtype=np.float64)
    if X_hm.ndim != 2 or X_hm.shape[1] != basis.model.n_in:
        raise IncompatibilityError(
            f"basis feature matrix shape {X_hm.shape} does not match model input "
            f"{basis.model.n_in}"
        )
    base = basis.provenance.get("hyperparameters", {})
    base_lr = float(base.get("learning_rate", default_train_config(basis.quantity).learning_rate))
    base_l2 = float(base.get("l2_lambda", default_train_config(basis.quantity).l2_lambda))
    batch = int(base.get("batch_size", DEFAULT_BATCH_SIZE))
    if lr_grid is None:
        lr_grid = tuple(base_lr * f for f in DEFAULT_LR_FACTORS)
    freeze_grid = tuple(int(k) for k in freeze_grid)
    epoch_grid = tuple(int(e) for e in epoch_grid)
    if not freeze_grid or not lr_grid or not epoch_grid:
        raise InvalidParameterError("fine-tune grids must be non-empty")

    tag = basis.provenance.get("datasets", {}).get("basis", {}).get("profile", "basis")
    std_obj = fit_standardizer(np.vstack([X_hm, X_tr]),
                               population_descriptor=f"{tag}:all+{dataset_tag}:train")
    if X_tr.shape[0] >= 2:
        transform = fit_label_transform("log_whiten", y_tr,
                                        population_descriptor=f"{dataset_tag}:train")
        start = _rebase_output(basis.model, basis.transform, transform)
    else:
        # one training row cannot support whitening; stay in the basis space
        transform = basis.transform
        start = basis.model
    y_t = transform_labels(transform, y_tr)
    Xa, ya = noise_augment(X_tr, y_t, seed=[seed, _SEED_NOISE])
    Xs = standardize(std_obj, Xa)
    Xs_va = standardize(std_obj, X_va)

    best_key = None
    best_model = None
    best_point = None
    grid_results = []
    for k in freeze_grid:
        for lr in lr_grid:
            for ep in epoch_grid:
                cfg = TrainConfig(learning_rate=float(lr), epochs=ep, batch_size=batch,
                                  l2_lambda=base_l2, seed=seed)
                model, _ = train(start, Xs, ya, cfg, frozen_layers=k)
                pred = inverse_transform(transform, forward(model, Xs_va))
                err = np.abs(pred.astype(np.float64) - y_va)
                mae = float(err.mean()) if np.all(np.isfinite(pred)) else float("inf")
                grid_results.append({"freeze": k, "learning_rate": float(lr),
                                     "epochs": ep,
                                     "val_mae": mae if np.isfinite(mae) else None})
                key = (mae, -k, float(lr), ep)
                if best_key is None or key < best_key:
                    best_key = key
                    best_model = model
                    best_point = (k, float(lr), ep)
    provenance = {
        "strategy": "transfer",
        "quantity": basis.quantity,
        "layout_version": std_obj.layout_version,
        "datasets": {"basis": basis.provenance.get("datasets", {}).get("basis"),
                     "onfield": dataset_tag},
        "seeds": {"train": seed, "basis": basis.provenance.get("seeds")},
        "n_train_impacts": int(X_tr.shape[0]),
        "label_transform": transform.kind,
        "hyperparameters": {"freeze_grid": list(freeze_grid),
                            "lr_grid": [float(v) for v in lr_grid],
                            "epoch_grid": list(epoch_grid),
                            "batch_size": batch, "l2_lambda": base_l2,
                            "noise_levels": list(DEFAULT_NOISE_LEVELS)},
        "grid_results": grid_results,
        "selected": {"freeze": best_point[0], "learning_rate": best_point[1],
                     "epochs": best_point[2]},
    }
    return PredictorBundle(quantity=basis.quantity, model=best_model,
                           standardizer=std_obj, transform=transform,
                           provenance=provenance)


# ---------------------------------------------------------------------------
# prediction


def predict_features(bundle: PredictorBundle, features):
    """Predict label-scale values from raw (unstandardized) feature rows.

    Returns (predictions, flags) where flags marks impacts with any
    non-finite value before or after the inverse transform.
    """
    X = np.asarray(features, dtype=np.float64)
    one = X.ndim == 1
    if one:
        X = X[None, :]
    Xs = standardize(bundle.standardizer, X, layout_version=bundle.standardizer.layout_version)
    z = forward(bundle.model, Xs)
    pred = inverse_transform(bundle.transform, z)
    flags = ~(np.all(np.isfinite(z), axis=1) & np.all(np.isfinite(pred), axis=1))
    if one:
        return pred[0], bool(flags[0])
    return pred, flags


def predict(bundle: PredictorBundle, recordings, layout=LAYOUT_V1):
    """Extract features from recordings and predict with the bundle."""
    if layout.version != bundle.standardizer.layout_version:
        raise IncompatibilityError(
            f"feature layout {layout.version!r} does not match bundle layout "
            f"{bundle.standardizer.layout_version!r}"
        )
    X = extract_feature_matrix(recordings, layout)
    return predict_features(bundle, X)


# ---------------------------------------------------------------------------
# bundle serialization


def _bundle_arrays(bundle: PredictorBundle):
    arrays = [
        ("standardizer.mean", bundle.standardizer.mean, "<f8"),
        ("standardizer.std", bundle.standardizer.std, "<f8"),
        ("standardizer.degenerate", bundle.standardizer.degenerate, "u1"),
    ]
    if bundle.transform.kind == "log_whiten":
        arrays += [
            ("transform.mean", bundle.transform.mean, "<f8"),
            ("transform.std", bundle.transform.std, "<f8"),
            ("transform.degenerate", bundle.transform.degenerate, "u1"),
        ]
    return arrays


def bundle_to_bytes(bundle: PredictorBundle) -> bytes:
    model_blob = model_to_bytes(bundle.model)
    arrays = _bundle_arrays(bundle)
    manifest = {
        "quantity": bundle.quantity,
        "layout_version": bundle.standardizer.layout_version,
        "standardizer": {
            "population_descriptor": bundle.standardizer.population_descriptor,
            "width": int(bundle.standardizer.mean.size),
        },
        "transform": {
            "kind": bundle.transform.kind,
            "population_descriptor": bundle.transform.population_descriptor,
            "floor": bundle.transform.floor,
            "n_elements": bundle.transform.n_elements,
        },
        "arrays": [[name, dtype, int(np.asarray(a).size)] for name, a, dtype in arrays],
        "model_bytes": len(model_blob),
        "provenance": bundle.provenance,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_BUNDLE_MAGIC, struct.pack("<II", _BUNDLE_VERSION, len(blob)), blob]
    for _, a, dtype in arrays:
        parts.append(np.ascontiguousarray(a, dtype=dtype).tobytes())
    parts.append(model_blob)
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_bundle(bundle: PredictorBundle, path) -> None:
    with open(path, "wb") as fh:
        fh.write(bundle_to_bytes(bundle))


def bundle_from_bytes(raw: bytes, origin: str = "bundle data") -> PredictorBundle:
    off = len(_BUNDLE_MAGIC)
    if len(raw) < off + 8:
        raise TruncatedFileError(f"{origin}: file too short to be a bundle")
    if raw[:off] != _BUNDLE_MAGIC:
        raise FileFormatError(f"{origin}: bad magic; not a bundle file")
    version, manifest_len = struct.unpack_from("<II", raw, off)
    off += 8
    if version != _BUNDLE_VERSION:
        raise VersionError(
            f"{origin}: bundle version {version}, this reader supports {_BUNDLE_VERSION}"
        )
    if len(raw) < off + manifest_len + 32:
        raise TruncatedFileError(f"{origin}: truncated bundle manifest")
    blob = raw[off:off + manifest_len]
    off += manifest_len
    try:
        manifest = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"{origin}: bundle manifest is not valid JSON") from exc
    try:
        entries = [(str(n), str(d), int(c)) for n, d, c in manifest["arrays"]]
        model_bytes = int(manifest["model_bytes"])
        quantity = manifest["quantity"]
        layout_version = manifest["layout_version"]
        std_meta = manifest["standardizer"]
        t_meta = manifest["transform"]
        provenance = manifest.get("provenance", {})
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"{origin}: bundle manifest missing fields ({exc})") from exc
    array_bytes = sum(np.dtype(d).itemsize * c for _, d, c in entries)
    expected = off + array_bytes + model_bytes + 32
    if len(raw) < expected:
        raise TruncatedFileError(
            f"{origin}: truncated bundle ({len(raw)} bytes, expected {expected})"
        )
    if len(raw) > expected:
        raise FileFormatError(f"{origin}: {len(raw) - expected} unexpected trailing bytes")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{origin}: content checksum mismatch")
    values = {}
    for name, dtype, count in entries:
        nbytes = np.dtype(dtype).itemsize * count
        values[name] = np.frombuffer(raw[off:off + nbytes], dtype=dtype).copy()
        off += nbytes
    model = model_from_bytes(raw[off:off + model_bytes], origin=f"{origin}[model]")
    std_obj = Standardizer(
        layout_version=layout_version,
        mean=values["standardizer.mean"],
        std=values["standardizer.std"],
        degenerate=values["standardizer.degenerate"].astype(bool),
        population_descriptor=std_meta.get("population_descriptor", ""),
    )
    if t_meta["kind"] == "log_whiten":
        transform = LabelTransform(
            kind="log_whiten",
            mean=values["transform.mean"],
            std=values["transform.std"],
            degenerate=values["transform.degenerate"].astype(bool),
            population_descriptor=t_meta.get("population_descriptor", ""),
            floor=float(t_meta.get("floor", LABEL_FLOOR)),
        )
    else:
        transform = LabelTransform(
            kind="log",
            population_descriptor=t_meta.get("population_descriptor", ""),
            floor=float(t_meta.get("floor", LABEL_FLOOR)),
        )
    return PredictorBundle(quantity=quantity, model=model, standardizer=std_obj,
                           transform=transform, provenance=provenance)


def load_bundle(path) -> PredictorBundle:
    with open(path, "rb") as fh:
        raw = fh.read()
    return bundle_from_bytes(raw, origin=str(path))
