"""Canonical 510-dimensional feature vector and feature standardization.

Layout (frozen as version "v1"):
  [0:160)    temporal core: 20 features x 8 channels (ang_vel then ang_acc,
             each X, Y, Z, mag)
  [160:206)  peak powers: 16 channels x (p, sqrt(p), p^2) minus the two
             first-power entries already present as the temporal-core max of
             mag(ang_vel) and mag(ang_acc)
  [206:510)  spectral: 19 band-mean PSD values x 16 channels

The 16 channels are the four kinematics types (lin_acc, ang_vel, ang_acc,
ang_jerk) times {X, Y, Z, mag}.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .errors import (
    IncompatibilityError,
    InsufficientDataError,
    InvalidDataError,
    InvalidParameterError,
    NumericError,
)
from .signals import (
    DerivedKinematics,
    ImpactRecording,
    derive_kinematics,
    filter_recording,
    require_standard_fs,
)

KINEMATICS_TYPES = ("lin_acc", "ang_vel", "ang_acc", "ang_jerk")
CHANNELS = ("X", "Y", "Z", "mag")
TEMPORAL_KINEMATICS = ("ang_vel", "ang_acc")
DEFAULT_EMA_ALPHAS = (0.05, 0.15, 0.30)
PEAK_POWERS = (1.0, 0.5, 2.0)

SPECTRAL_WINDOWS = tuple(
    [(float(lo), float(lo + 20)) for lo in range(0, 300, 20)]
    + [(300.0, 350.0), (350.0, 400.0), (400.0, 450.0), (450.0, 500.0)]
)

N_FEATURES = 510
N_TEMPORAL_PER_CHANNEL = 20

# first-power peaks of the two magnitude channels that already appear in the
# temporal core as the channel max (magnitudes are non-negative)
_OVERLAP_PEAKS = (("ang_vel", "mag", 1.0), ("ang_acc", "mag", 1.0))


@dataclass(frozen=True)
class FeatureDescriptor:
    """One feature slot: kinematics type, channel, family, family parameter."""

    kinematics: str
    channel: str
    family: str
    param: object = None

    def key(self):
        p = self.param
        if isinstance(p, float):
            p = repr(p)
        elif isinstance(p, tuple):
            p = "-".join(repr(float(v)) for v in p)
        elif p is None:
            p = "-"
        return f"{self.kinematics}|{self.channel}|{self.family}|{p}"


def _temporal_entries(alphas):
    for kin in TEMPORAL_KINEMATICS:
        for ch in CHANNELS:
            yield FeatureDescriptor(kin, ch, "max")
            yield FeatureDescriptor(kin, ch, "min")
            yield FeatureDescriptor(kin, ch, "integral")
            yield FeatureDescriptor(kin, ch, "abs_integral")
            for a in alphas:
                yield FeatureDescriptor(kin, ch, "ema_diff_max", float(a))
                yield FeatureDescriptor(kin, ch, "ema_diff_min", float(a))
            yield FeatureDescriptor(kin, ch, "pos_extrema_count")
            yield FeatureDescriptor(kin, ch, "neg_extrema_count")
            for r in (2, 3, 4, 5):
                yield FeatureDescriptor(kin, ch, "pos_extremum", r)
            for r in (2, 3, 4, 5):
                yield FeatureDescriptor(kin, ch, "neg_extremum", r)


def _peak_entries_full():
    for kin in KINEMATICS_TYPES:
        for ch in CHANNELS:
            for pw in PEAK_POWERS:
                yield FeatureDescriptor(kin, ch, "peak_power", pw)


def _spectral_entries():
    for kin in KINEMATICS_TYPES:
        for ch in CHANNELS:
            for win in SPECTRAL_WINDOWS:
                yield FeatureDescriptor(kin, ch, "band_psd_mean", win)


@dataclass(frozen=True)
class FeatureLayout:
    """Frozen ordering of the 510 feature slots."""

    version: str
    ema_alphas: tuple
    entries: tuple

    _index: dict = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        idx = {e.key(): i for i, e in enumerate(self.entries)}
        if len(idx) != len(self.entries):
            raise InvalidParameterError("duplicate feature descriptor in layout")
        object.__setattr__(self, "_index", idx)

    def index_of(self, descriptor: FeatureDescriptor) -> int:
        try:
            return self._index[descriptor.key()]
        except KeyError:
            raise IncompatibilityError(f"descriptor not in layout: {descriptor.key()}") from None

    def __contains__(self, descriptor: FeatureDescriptor) -> bool:
        return descriptor.key() in self._index

    def fingerprint(self) -> str:
        blob = "\n".join(e.key() for e in self.entries).encode("ascii")
        return hashlib.sha256(blob).hexdigest()


def build_layout(ema_alphas=DEFAULT_EMA_ALPHAS) -> FeatureLayout:
    """Construct the feature layout; non-default EMA factors get their own version."""
    alphas = tuple(float(a) for a in ema_alphas)
    if len(alphas) != 3 or any(not (0.0 < a <= 1.0) for a in alphas):
        raise InvalidParameterError(f"need exactly 3 smoothing factors in (0, 1], got {ema_alphas}")
    overlap = {_key_of(*t) for t in _OVERLAP_PEAKS}
    entries = list(_temporal_entries(alphas))
    entries += [e for e in _peak_entries_full() if e.key() not in overlap]
    entries += list(_spectral_entries())
    assert len(entries) == N_FEATURES
    if alphas == DEFAULT_EMA_ALPHAS:
        version = "v1"
    else:
        tag = hashlib.sha256(repr(alphas).encode("ascii")).hexdigest()[:8]
        version = f"v1+ema-{tag}"
    return FeatureLayout(version=version, ema_alphas=alphas, entries=tuple(entries))


def _key_of(kin, ch, pw):
    return FeatureDescriptor(kin, ch, "peak_power", pw).key()


LAYOUT_V1 = build_layout()

_REGISTRY = {LAYOUT_V1.version: LAYOUT_V1}


def get_layout(version: str) -> FeatureLayout:
    try:
        return _REGISTRY[version]
    except KeyError:
        raise IncompatibilityError(f"unknown feature layout version {version!r}") from None


@dataclass(frozen=True)
class FeatureVector:
    """A single impact's features in a registered layout."""

    layout_version: str
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != (N_FEATURES,):
            raise InvalidDataError(f"feature vector must have {N_FEATURES} values, got {vals.shape}")
        if not np.isfinite(vals).all():
            raise NumericError("non-finite feature values")
        object.__setattr__(self, "values", vals)


def ema(x, alpha: float) -> np.ndarray:
    """Exponential moving average: y[0] = x[0], y[k] = alpha x[k] + (1-alpha) y[k-1]."""
    if not (0.0 < alpha <= 1.0):
        raise InvalidParameterError(f"smoothing factor must be in (0, 1], got {alpha}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InvalidDataError(f"expected non-empty 1-D series, got shape {x.shape}")
    # the recurrence is the IIR filter b=[alpha], a=[1, -(1-alpha)]; running it
    # from the second sample with state (1-alpha) x[0] keeps y[0] = x[0] exact
    y = np.empty_like(x)
    y[0] = x[0]
    if x.size > 1:
        y[1:], _ = lfilter(
            [alpha], [1.0, -(1.0 - alpha)], x[1:], zi=np.array([(1.0 - alpha) * x[0]])
        )
    return y


def _strict_maxima(x):
    n = x.size
    up = np.empty(n, dtype=bool)
    up[0] = True
    up[1:] = x[1:] > x[:-1]
    down = np.empty(n, dtype=bool)
    down[-1] = True
    down[:-1] = x[:-1] > x[1:]
    return x[up & down]


def _ranked_tail(vals, lo=2, hi=5):
    """Extrema values ranked |value| descending, ranks lo..hi, zero-padded."""
    order = np.argsort(-np.abs(vals), kind="stable")
    picked = vals[order][lo - 1 : hi]
    out = np.zeros(hi - lo + 1)
    out[: picked.size] = picked
    return out


def temporal_core_features(channel, dt: float, ema_alphas=DEFAULT_EMA_ALPHAS) -> np.ndarray:
    """The 20 temporal features of one channel, in the frozen v1 order."""
    x = np.asarray(channel, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidDataError(f"expected 1-D series, got shape {x.shape}")
    if x.size < 5:
        raise InsufficientDataError(f"need at least 5 samples, got {x.size}")
    if len(ema_alphas) != 3 or any(not (0.0 < a <= 1.0) for a in ema_alphas):
        raise InvalidParameterError(f"need exactly 3 smoothing factors in (0, 1], got {ema_alphas}")
    if not (dt > 0):
        raise InvalidParameterError(f"dt must be positive, got {dt}")
    feats = [x.max(), x.min(), np.trapezoid(x, dx=dt), np.trapezoid(np.abs(x), dx=dt)]
    d = np.diff(x) / dt
    for a in ema_alphas:
        e = ema(d, a)
        feats += [e.max(), e.min()]
    maxima = _strict_maxima(x)
    minima = -_strict_maxima(-x)
    feats += [float(maxima.size), float(minima.size)]
    feats += list(_ranked_tail(maxima))
    feats += list(_ranked_tail(minima))
    return np.asarray(feats)


def sixteen_channels(rec: ImpactRecording, dk: DerivedKinematics) -> dict:
    """Ordered (kinematics, channel) -> series map covering all 16 channels."""
    rows = {
        "lin_acc": (rec.lin_acc, dk.mag_lin_acc),
        "ang_vel": (rec.ang_vel, dk.mag_ang_vel),
        "ang_acc": (dk.ang_acc, dk.mag_ang_acc),
        "ang_jerk": (dk.ang_jerk, dk.mag_ang_jerk),
    }
    out = {}
    for kin in KINEMATICS_TYPES:
        axes, mag = rows[kin]
        for i, ch in enumerate(("X", "Y", "Z")):
            out[(kin, ch)] = axes[i]
        out[(kin, "mag")] = mag
    return out


def power_peak_features(rec: ImpactRecording, dk: DerivedKinematics) -> np.ndarray:
    """Peak magnitude p = max|x(t)| of each of the 16 channels as (p, sqrt(p), p^2)."""
    chans = sixteen_channels(rec, dk)
    vals = []
    for kin in KINEMATICS_TYPES:
        for ch in CHANNELS:
            p = float(np.abs(chans[(kin, ch)]).max())
            vals += [p, np.sqrt(p), p * p]
    return np.asarray(vals)


def spectral_features(channel, fs: float) -> np.ndarray:
    """Band-mean one-sided periodogram PSD over the 19 frequency windows.

    The series is zero-padded to the next power of two; a feature is the mean
    PSD over the bins whose center frequency falls in the window (the last
    window is closed at the 500 Hz Nyquist bin).
    """
    require_standard_fs(fs)
    x = np.asarray(channel, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidDataError(f"expected 1-D series, got shape {x.shape}")
    n = x.size
    if n < 20:
        raise InsufficientDataError(f"need at least 20 samples, got {n}")
    nfft = 1 << (n - 1).bit_length()
    spec = np.fft.rfft(x, nfft)
    psd = (spec.real**2 + spec.imag**2) / (fs * n)
    psd[1:] *= 2.0
    psd[-1] /= 2.0  # nfft is even, so the last bin is the Nyquist bin
    freqs = np.arange(psd.size) * (fs / nfft)
    out = np.empty(len(SPECTRAL_WINDOWS))
    for i, (lo, hi) in enumerate(SPECTRAL_WINDOWS):
        if hi >= fs / 2.0:
            mask = (freqs >= lo) & (freqs <= hi)
        else:
            mask = (freqs >= lo) & (freqs < hi)
        if not mask.any():
            raise InsufficientDataError(
                f"no spectral bins in window [{lo:g},{hi:g}) with nfft={nfft}; "
                "series too short"
            )
        out[i] = psd[mask].mean()
    return out


def extract_features(rec: ImpactRecording, layout: FeatureLayout = LAYOUT_V1) -> FeatureVector:
    """Filter, derive, and assemble the canonical feature vector."""
    require_standard_fs(rec.fs)
    frec = filter_recording(rec)
    dk = derive_kinematics(frec)
    chans = sixteen_channels(frec, dk)
    parts = []
    for kin in TEMPORAL_KINEMATICS:
        for ch in CHANNELS:
            parts.append(temporal_core_features(chans[(kin, ch)], frec.dt, layout.ema_alphas))
    peaks = power_peak_features(frec, dk)
    overlap = {_key_of(*t) for t in _OVERLAP_PEAKS}
    keep = [i for i, e in enumerate(_peak_entries_full()) if e.key() not in overlap]
    parts.append(peaks[keep])
    for kin in KINEMATICS_TYPES:
        for ch in CHANNELS:
            parts.append(spectral_features(chans[(kin, ch)], frec.fs))
    return FeatureVector(layout_version=layout.version, values=np.concatenate(parts))


def extract_feature_matrix(recordings, layout: FeatureLayout = LAYOUT_V1) -> np.ndarray:
    """Stack extract_features over recordings into an (n, 510) float64 matrix."""
    if len(recordings) == 0:
        raise InsufficientDataError("no recordings to extract features from")
    return np.vstack([extract_features(r, layout).values for r in recordings])


@dataclass(frozen=True)
class Standardizer:
    """Per-feature location/scale fitted on a named population.

    std holds 1.0 where the fitted sigma was 0; those columns are marked in
    the degenerate mask and standardize to 0.
    """

    layout_version: str
    mean: np.ndarray
    std: np.ndarray
    degenerate: np.ndarray
    population_descriptor: str

    @property
    def n_degenerate(self) -> int:
        return int(self.degenerate.sum())


def fit_standardizer(features, population_descriptor: str, layout_version: str = LAYOUT_V1.version) -> Standardizer:
    """Column means and population standard deviations of a feature matrix."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidDataError(f"expected 2-D feature matrix, got shape {X.shape}")
    if X.shape[0] < 2:
        raise InsufficientDataError(f"need at least 2 rows to fit a standardizer, got {X.shape[0]}")
    if not np.isfinite(X).all():
        raise InvalidDataError("non-finite values in feature matrix")
    mean = X.mean(axis=0)
    sigma = X.std(axis=0)  # population convention (ddof=0)
    degenerate = sigma == 0.0
    std = np.where(degenerate, 1.0, sigma)
    return Standardizer(
        layout_version=layout_version,
        mean=mean,
        std=std,
        degenerate=degenerate,
        population_descriptor=population_descriptor,
    )


def standardize(s: Standardizer, features, layout_version: str = None) -> np.ndarray:
    """Apply (x - mu) / sigma with the standardizer's stored parameters."""
    if layout_version is not None and layout_version != s.layout_version:
        raise IncompatibilityError(
            f"feature layout {layout_version!r} does not match standardizer layout {s.layout_version!r}"
        )
    X = np.asarray(features, dtype=np.float64)
    if X.shape[-1] != s.mean.size:
        raise IncompatibilityError(
            f"feature width {X.shape[-1]} does not match standardizer width {s.mean.size}"
        )
    return (X - s.mean) / s.std
