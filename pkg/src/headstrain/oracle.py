"""Synthetic impact generator and the reduced-order per-element strain oracle.

The label source is a bank of independent driven damped oscillators, one per
brain element, with a tanh saturation on the strain output:

    q'' + 2 zeta_e w_e q' + w_e^2 q = g_e . alpha(t)
    eps_e(t) = gamma_e c tanh(q / c)

MPS is max |eps| over time, MPSR is max |d eps / dt| by first differences.
Cheap, deterministic, nonlinear, and parameter-shiftable, which is all the
surrogate training pipeline needs from a label source.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import (
    InvalidDataError,
    InvalidParameterError,
    NumericError,
)
from .signals import (
    REQUIRED_FS,
    ImpactRecording,
    filter_recording,
    five_point_derivative,
    vector_magnitude,
)

DEFAULT_N_ELEMENTS = 4124
LABEL_FLOOR = 1e-6
REGION_CODES = ("BS", "CC", "CL", "GM", "MB", "TH", "WM")

# RK4 at dt = 1/fs resolves the oscillation comfortably below this bound
STABILITY_LIMIT = 0.5

AXIS_PERMUTATIONS = (
    "XYZ", "XNYZ", "XZY", "XZNY", "YXZ", "YZX",
    "ZXY", "NYZX", "ZYX", "ZXNY", "ZNYX", "NYXZ",
)


def _load_data_json(name):
    text = resources.files("headstrain").joinpath(f"data/{name}").read_text(encoding="utf-8")
    return json.loads(text)


@dataclass(frozen=True)
class ImpactProfile:
    """Generator settings for one impact source (sport, lab, crash, ...)."""

    name: str
    n_pulses: int
    peak_ang_vel_range: tuple
    dominant_freq_range: tuple
    decay_time_range: tuple
    duration: float
    axis_weights: tuple
    lin_acc_scale: float
    noise_floor: float

    def __post_init__(self):
        for rng_name in ("peak_ang_vel_range", "dominant_freq_range", "decay_time_range"):
            lo, hi = getattr(self, rng_name)
            if not (0 < lo <= hi):
                raise InvalidParameterError(f"profile {self.name!r}: bad {rng_name} ({lo}, {hi})")
        if self.n_pulses < 1:
            raise InvalidParameterError(f"profile {self.name!r}: n_pulses must be >= 1")
        if round(self.duration * REQUIRED_FS) < 20:
            raise InvalidParameterError(
                f"profile {self.name!r}: duration {self.duration} s gives fewer than 20 samples"
            )
        w = np.asarray(self.axis_weights, dtype=np.float64)
        if w.shape != (3,) or (w < 0).any() or not (w > 0).any():
            raise InvalidParameterError(
                f"profile {self.name!r}: axis_weights must be 3 non-negative values, not all zero"
            )
        if not (self.lin_acc_scale > 0) or self.noise_floor < 0:
            raise InvalidParameterError(f"profile {self.name!r}: bad coupling or noise settings")
        object.__setattr__(self, "peak_ang_vel_range", tuple(self.peak_ang_vel_range))
        object.__setattr__(self, "dominant_freq_range", tuple(self.dominant_freq_range))
        object.__setattr__(self, "decay_time_range", tuple(self.decay_time_range))
        object.__setattr__(self, "axis_weights", tuple(float(v) for v in w))

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * REQUIRED_FS))


def load_profiles() -> dict:
    """Shipped impact-source presets, keyed by name."""
    raw = _load_data_json("profiles.json")
    return {
        name: ImpactProfile(name=name, **fields)
        for name, fields in raw["profiles"].items()
    }


def get_profile(name: str) -> ImpactProfile:
    profiles = load_profiles()
    try:
        return profiles[name]
    except KeyError:
        raise InvalidParameterError(
            f"unknown profile {name!r}; shipped presets: {sorted(profiles)}"
        ) from None


def load_surrogate_spec() -> dict:
    return _load_data_json("surrogate.json")


@dataclass(frozen=True)
class BrainSurrogateConfig:
    """Sampled oscillator-bank parameters standing in for a head FE model."""

    n_elements: int
    omega_n: np.ndarray    # rad/s, per element
    zeta: np.ndarray       # damping ratio, per element
    gain: np.ndarray       # (n_elements, 3) forcing projection
    gamma: np.ndarray      # strain gain, per element
    saturation: float      # tanh scale c
    region_map: tuple      # per-element region code
    seed: int

    def __post_init__(self):
        E = self.n_elements
        if E <= 0:
            raise InvalidParameterError("n_elements must be positive")
        omega = np.asarray(self.omega_n, dtype=np.float64)
        zeta = np.asarray(self.zeta, dtype=np.float64)
        gain = np.asarray(self.gain, dtype=np.float64)
        gamma = np.asarray(self.gamma, dtype=np.float64)
        if omega.shape != (E,) or zeta.shape != (E,) or gamma.shape != (E,) or gain.shape != (E, 3):
            raise InvalidParameterError("surrogate parameter shapes do not match n_elements")
        if not (omega > 0).all():
            raise InvalidParameterError("natural frequencies must be positive")
        if not ((zeta > 0) & (zeta < 1)).all():
            raise InvalidParameterError("damping ratios must lie in (0, 1)")
        if not (self.saturation > 0):
            raise InvalidParameterError("saturation scale must be positive")
        if len(self.region_map) != E or any(r not in REGION_CODES for r in self.region_map):
            raise InvalidParameterError("region_map must assign a known region to every element")
        object.__setattr__(self, "omega_n", omega)
        object.__setattr__(self, "zeta", zeta)
        object.__setattr__(self, "gain", gain)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "region_map", tuple(self.region_map))

    def region_indices(self) -> dict:
        """Region code -> element index array (regions are contiguous blocks)."""
        codes = np.asarray(self.region_map)
        return {r: np.flatnonzero(codes == r) for r in REGION_CODES}


def config_fingerprint(cfg: BrainSurrogateConfig) -> str:
    h = hashlib.sha256()
    h.update(str(cfg.n_elements).encode())
    for arr in (cfg.omega_n, cfg.zeta, cfg.gain, cfg.gamma):
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    h.update(repr(float(cfg.saturation)).encode())
    h.update(",".join(cfg.region_map).encode())
    return h.hexdigest()


def _region_blocks(n_elements, fractions):
    # largest-remainder apportionment keeps the counts summing exactly
    codes = list(fractions)
    exact = np.array([fractions[c] * n_elements for c in codes])
    counts = np.floor(exact).astype(int)
    order = np.argsort(-(exact - counts), kind="stable")
    for i in order[: n_elements - counts.sum()]:
        counts[i] += 1
    out = []
    for code, cnt in zip(codes, counts):
        out += [code] * cnt
    return tuple(out)


def sample_surrogate_config(
    n_elements: int = DEFAULT_N_ELEMENTS,
    seed: int = 0,
    freq_scale: float = 1.0,
    damping_scale: float = 1.0,
    gain_scale: float = 1.0,
    spec: dict = None,
) -> BrainSurrogateConfig:
    """Draw an oscillator bank from the shipped (or given) sampling spec.

    The three scale multipliers shift the whole bank's response and are how
    dataset-level domain differences (helmeted vs unhelmeted, say) are
    emulated on top of impact-profile differences.
    """
    if n_elements <= 0:
        raise InvalidParameterError("n_elements must be positive")
    if spec is None:
        spec = load_surrogate_spec()
    rng = np.random.default_rng([int(seed), 101])
    omega = 2.0 * np.pi * rng.uniform(*spec["omega_hz_range"], size=n_elements) * freq_scale
    zeta = rng.uniform(*spec["zeta_range"], size=n_elements) * damping_scale
    dirs = rng.normal(size=(n_elements, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    kappa = rng.uniform(*spec["kappa_range"], size=n_elements)
    gain = dirs * (kappa * omega**2 * gain_scale)[:, None]
    gamma = rng.uniform(*spec["gamma_range"], size=n_elements)
    return BrainSurrogateConfig(
        n_elements=n_elements,
        omega_n=omega,
        zeta=zeta,
        gain=gain,
        gamma=gamma,
        saturation=float(spec["saturation"]),
        region_map=_region_blocks(n_elements, spec["region_fractions"]),
        seed=int(seed),
    )


def generate_impact(profile: ImpactProfile, seed) -> ImpactRecording:
    """Synthesize one impact recording, deterministic in (profile, seed).

    Angular velocity per axis is a sum of damped sinusoids; the 3-axis signal
    is rescaled so its peak magnitude hits a target drawn from the profile's
    peak range. Linear acceleration is a scaled numerical derivative of omega
    plus sensor-like noise. Both are low-passed at 150 Hz.
    """
    n = profile.n_samples
    fs = REQUIRED_FS
    rng = np.random.default_rng(seed)
    t = np.arange(n) / fs
    weights = np.asarray(profile.axis_weights)
    amp = rng.uniform(0.3, 1.0, size=(3, profile.n_pulses)) * weights[:, None]
    freq = rng.uniform(*profile.dominant_freq_range, size=(3, profile.n_pulses))
    tau = rng.uniform(*profile.decay_time_range, size=(3, profile.n_pulses))
    ang = np.einsum(
        "ap,apn->an",
        amp,
        np.sin(2.0 * np.pi * freq[:, :, None] * t) * np.exp(-t / tau[:, :, None]),
    )
    # log-uniform severity: real impact datasets are heavy on mild impacts
    # with a long severe tail, and the spread matters more than the mean
    lo, hi = profile.peak_ang_vel_range
    peak_target = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    peak = vector_magnitude(*ang).max()
    if peak == 0.0:
        raise NumericError("degenerate impact draw: zero angular velocity")
    ang *= peak_target / peak
    lin = profile.lin_acc_scale * np.vstack(
        [five_point_derivative(ang[i], 1.0 / fs) for i in range(3)]
    )
    if profile.noise_floor > 0:
        lin = lin + rng.normal(0.0, profile.noise_floor * np.abs(lin).max(), size=lin.shape)
    seed_tag = "-".join(str(s) for s in np.atleast_1d(seed))
    rec = ImpactRecording(
        id=f"{profile.name}-{seed_tag}",
        source_tag=profile.name,
        fs=fs,
        lin_acc=lin,
        ang_vel=ang,
    )
    return filter_recording(rec)


def _parse_permutation(token):
    out = []
    i = 0
    while i < len(token):
        sign = 1.0
        if token[i] == "N":
            sign = -1.0
            i += 1
        out.append((sign, "XYZ".index(token[i])))
        i += 1
    return out


def apply_permutation(rec: ImpactRecording, token: str) -> ImpactRecording:
    """Signed axis permutation applied identically to lin_acc and ang_vel."""
    slots = _parse_permutation(token)
    if len(slots) != 3:
        raise InvalidParameterError(f"bad permutation token {token!r}")
    lin = np.vstack([sign * rec.lin_acc[src] for sign, src in slots])
    ang = np.vstack([sign * rec.ang_vel[src] for sign, src in slots])
    return ImpactRecording(
        id=f"{rec.id}+{token}", source_tag=rec.source_tag, fs=rec.fs, lin_acc=lin, ang_vel=ang
    )


def axis_permutation_set(rec: ImpactRecording) -> list:
    """The 12 signed-permutation variants of a recording; the first is the input."""
    return [rec] + [apply_permutation(rec, tok) for tok in AXIS_PERMUTATIONS[1:]]


def simulate_strain(rec: ImpactRecording, cfg: BrainSurrogateConfig):
    """Integrate the oscillator bank over one recording and reduce to MPS/MPSR.

    Fixed-step RK4 at dt = 1/fs from rest, forcing linearly interpolated at
    half steps; labels are floored at 1e-6 so downstream log transforms never
    see zeros.
    """
    dt = rec.dt
    if (cfg.omega_n * dt >= STABILITY_LIMIT).any():
        raise InvalidParameterError(
            f"stiffest element has omega_n*dt >= {STABILITY_LIMIT}; "
            "raise fs or soften the surrogate config"
        )
    ang_acc = np.vstack([five_point_derivative(rec.ang_vel[i], dt) for i in range(3)])
    U = cfg.gain @ ang_acc  # (E, n)
    w2 = cfg.omega_n**2
    two_zw = 2.0 * cfg.zeta * cfg.omega_n
    c = cfg.saturation
    gc = cfg.gamma * c

    def accel(q, v, u):
        return u - two_zw * v - w2 * q

    E, n = U.shape
    q = np.zeros(E)
    v = np.zeros(E)
    eps_prev = np.zeros(E)
    mps = np.zeros(E)
    mpsr = np.zeros(E)
    half = 0.5 * dt
    for k in range(n - 1):
        u0 = U[:, k]
        u1 = U[:, k + 1]
        um = 0.5 * (u0 + u1)
        k1q = v
        k1v = accel(q, v, u0)
        k2q = v + half * k1v
        k2v = accel(q + half * k1q, k2q, um)
        k3q = v + half * k2v
        k3v = accel(q + half * k2q, k3q, um)
        k4q = v + dt * k3v
        k4v = accel(q + dt * k3q, k4q, u1)
        q = q + (dt / 6.0) * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
        v = v + (dt / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
        eps = gc * np.tanh(q / c)
        np.maximum(mps, np.abs(eps), out=mps)
        np.maximum(mpsr, np.abs(eps - eps_prev) / dt, out=mpsr)
        eps_prev = eps
    if not (np.isfinite(mps).all() and np.isfinite(mpsr).all()):
        raise NumericError("oscillator bank integration diverged; check the surrogate config")
    return StrainField(
        element_count=E,
        mps=np.maximum(mps, LABEL_FLOOR),
        mpsr=np.maximum(mpsr, LABEL_FLOOR),
    )


@dataclass(frozen=True)
class StrainField:
    """Per-element strain summary for one impact."""

    element_count: int
    mps: np.ndarray
    mpsr: np.ndarray

    def __post_init__(self):
        mps = np.asarray(self.mps, dtype=np.float64)
        mpsr = np.asarray(self.mpsr, dtype=np.float64)
        if mps.shape != (self.element_count,) or mpsr.shape != (self.element_count,):
            raise InvalidDataError("strain field lengths do not match element_count")
        if not (np.isfinite(mps).all() and np.isfinite(mpsr).all()):
            raise NumericError("non-finite strain labels")
        if (mps < 0).any() or (mpsr < 0).any():
            raise InvalidDataError("strain labels must be non-negative")
        object.__setattr__(self, "mps", mps)
        object.__setattr__(self, "mpsr", mpsr)


@dataclass(frozen=True)
class Dataset:
    """Recordings plus their oracle labels and a provenance manifest."""

    recordings: list
    mps: np.ndarray   # (n_recordings, n_elements)
    mpsr: np.ndarray
    manifest: dict

    @property
    def n_recordings(self) -> int:
        return len(self.recordings)


def build_dataset(
    profile: ImpactProfile,
    n: int,
    cfg: BrainSurrogateConfig,
    seed: int,
    augment: bool = False,
) -> Dataset:
    """Generate n impacts (12n recordings when augmented) with oracle labels."""
    if n < 1:
        raise InvalidParameterError("need at least one impact")
    recordings = []
    for i in range(n):
        rec = generate_impact(profile, [int(seed), i])
        if augment:
            recordings += axis_permutation_set(rec)
        else:
            recordings.append(rec)
    mps = np.empty((len(recordings), cfg.n_elements))
    mpsr = np.empty((len(recordings), cfg.n_elements))
    for j, rec in enumerate(recordings):
        field = simulate_strain(rec, cfg)
        mps[j] = field.mps
        mpsr[j] = field.mpsr
    manifest = {
        "profile": profile.name,
        "config_fingerprint": config_fingerprint(cfg),
        "base_seed": int(seed),
        "augment": bool(augment),
        "n_source_impacts": int(n),
        "n_recordings": len(recordings),
        "n_elements": int(cfg.n_elements),
        "region_map": list(cfg.region_map),
    }
    return Dataset(recordings=recordings, mps=mps, mpsr=mpsr, manifest=manifest)
