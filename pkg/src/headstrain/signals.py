"""Kinematics containers, low-pass filtering, numerical differentiation, magnitudes.

Axis convention: X posterior-to-anterior, Y left-to-right, Z superior-to-inferior.
Linear acceleration in m/s^2, angular velocity in rad/s, time in seconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, lfilter, lfilter_zi

from .errors import InsufficientDataError, InvalidDataError, InvalidParameterError

# v1 accepts exactly this sampling rate; the spectral feature windows run up to
# the 500 Hz Nyquist frequency and resampling is out of scope.
REQUIRED_FS = 1000.0

DEFAULT_CUTOFF_HZ = 150.0

MIN_SAMPLES = 20


def _as_series(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidDataError(f"expected 1-D series, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ImpactRecording:
    """Raw kinematics of a single head impact.

    lin_acc and ang_vel are (3, n) arrays holding the X/Y/Z axis series.
    """

    id: str
    source_tag: str
    fs: float
    lin_acc: np.ndarray
    ang_vel: np.ndarray

    def __post_init__(self):
        la = np.asarray(self.lin_acc, dtype=np.float64)
        av = np.asarray(self.ang_vel, dtype=np.float64)
        if la.shape != av.shape or la.ndim != 2 or la.shape[0] != 3:
            raise InvalidDataError(
                f"recording {self.id!r}: lin_acc/ang_vel must both be (3, n), "
                f"got {la.shape} and {av.shape}"
            )
        if la.shape[1] < MIN_SAMPLES:
            raise InvalidDataError(
                f"recording {self.id!r}: need at least {MIN_SAMPLES} samples, got {la.shape[1]}"
            )
        if not (np.isfinite(la).all() and np.isfinite(av).all()):
            raise InvalidDataError(f"recording {self.id!r}: non-finite samples")
        if not (self.fs > 0):
            raise InvalidDataError(f"recording {self.id!r}: fs must be > 0, got {self.fs}")
        object.__setattr__(self, "lin_acc", la)
        object.__setattr__(self, "ang_vel", av)

    @property
    def n(self) -> int:
        return self.lin_acc.shape[1]

    @property
    def dt(self) -> float:
        return 1.0 / self.fs


@dataclass(frozen=True)
class DerivedKinematics:
    """Angular acceleration/jerk plus the four magnitude channels."""

    ang_acc: np.ndarray   # (3, n) rad/s^2
    ang_jerk: np.ndarray  # (3, n) rad/s^3
    mag_lin_acc: np.ndarray
    mag_ang_vel: np.ndarray
    mag_ang_acc: np.ndarray
    mag_ang_jerk: np.ndarray


def require_standard_fs(fs: float) -> None:
    if fs != REQUIRED_FS:
        raise InvalidParameterError(
            f"only fs = {REQUIRED_FS:g} Hz is supported in this version, got {fs:g} Hz"
        )


def butterworth_lowpass(x, fs: float, cutoff: float = DEFAULT_CUTOFF_HZ) -> np.ndarray:
    """Single forward pass of a second-order Butterworth low-pass biquad.

    Discretized by the bilinear transform with frequency prewarping, so the
    gain at `cutoff` is exactly 1/sqrt(2). The filter state is initialized to
    the DC steady state of the first sample to suppress startup transients.
    """
    x = _as_series(x)
    if not np.isfinite(x).all():
        raise InvalidDataError("non-finite input to butterworth_lowpass")
    if x.size < 5:
        raise InsufficientDataError(f"need at least 5 samples, got {x.size}")
    if not (fs > 0) or not (cutoff > 0):
        raise InvalidParameterError(f"fs and cutoff must be positive, got fs={fs}, cutoff={cutoff}")
    if cutoff >= fs / 2.0:
        raise InvalidParameterError(
            f"cutoff {cutoff:g} Hz must be below the Nyquist frequency {fs / 2.0:g} Hz"
        )
    b, a = butter(2, cutoff, btype="low", fs=fs)
    zi = lfilter_zi(b, a) * x[0]
    y, _ = lfilter(b, a, x, zi=zi)
    return y


def five_point_derivative(x, dt: float) -> np.ndarray:
    """Differentiate a sampled series with the five-point central stencil.

    Interior: (-x[k+2] + 8 x[k+1] - 8 x[k-1] + x[k-2]) / (12 dt), exact for
    polynomials up to degree 4. The two samples on each end fall back to
    one-sided second-order differences so the output keeps the input length.
    """
    x = _as_series(x)
    if x.size < 5:
        raise InsufficientDataError(f"five-point stencil needs at least 5 samples, got {x.size}")
    if not (dt > 0):
        raise InvalidParameterError(f"dt must be positive, got {dt}")
    d = np.empty_like(x)
    d[2:-2] = (-x[4:] + 8.0 * x[3:-1] - 8.0 * x[1:-3] + x[:-4]) / (12.0 * dt)
    d[0] = (-3.0 * x[0] + 4.0 * x[1] - x[2]) / (2.0 * dt)
    d[1] = (-3.0 * x[1] + 4.0 * x[2] - x[3]) / (2.0 * dt)
    d[-2] = (3.0 * x[-2] - 4.0 * x[-3] + x[-4]) / (2.0 * dt)
    d[-1] = (3.0 * x[-1] - 4.0 * x[-2] + x[-3]) / (2.0 * dt)
    return d


def vector_magnitude(x, y, z) -> np.ndarray:
    """Per-sample Euclidean norm of three axis series."""
    x, y, z = _as_series(x), _as_series(y), _as_series(z)
    if not (x.size == y.size == z.size):
        raise InvalidDataError(
            f"axis series lengths differ: {x.size}, {y.size}, {z.size}"
        )
    return np.sqrt(x * x + y * y + z * z)


def derive_kinematics(rec: ImpactRecording) -> DerivedKinematics:
    """Compute angular acceleration, angular jerk, and the magnitude channels.

    Angular jerk is the stencil applied twice (omega -> alpha -> jerk).
    No filtering happens here; callers filter the recording first if needed.
    """
    dt = rec.dt
    ang_acc = np.vstack([five_point_derivative(rec.ang_vel[i], dt) for i in range(3)])
    ang_jerk = np.vstack([five_point_derivative(ang_acc[i], dt) for i in range(3)])
    return DerivedKinematics(
        ang_acc=ang_acc,
        ang_jerk=ang_jerk,
        mag_lin_acc=vector_magnitude(*rec.lin_acc),
        mag_ang_vel=vector_magnitude(*rec.ang_vel),
        mag_ang_acc=vector_magnitude(*ang_acc),
        mag_ang_jerk=vector_magnitude(*ang_jerk),
    )


def filter_recording(rec: ImpactRecording, cutoff: float = DEFAULT_CUTOFF_HZ) -> ImpactRecording:
    """Low-pass all six channels, returning a new recording."""
    lin = np.vstack([butterworth_lowpass(rec.lin_acc[i], rec.fs, cutoff) for i in range(3)])
    ang = np.vstack([butterworth_lowpass(rec.ang_vel[i], rec.fs, cutoff) for i in range(3)])
    return ImpactRecording(id=rec.id, source_tag=rec.source_tag, fs=rec.fs, lin_acc=lin, ang_vel=ang)


RECORDING_HEADER = "t,ax,ay,az,wx,wy,wz"


def write_recording_csv(rec: ImpactRecording, path) -> None:
    """Write one recording as the text table `t,ax,ay,az,wx,wy,wz` in SI units."""
    t = np.arange(rec.n) / rec.fs
    table = np.column_stack([t, rec.lin_acc.T, rec.ang_vel.T])
    rows = [RECORDING_HEADER]
    rows += [",".join(repr(float(v)) for v in row) for row in table]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(rows) + "\n")


def read_recording_csv(path, rec_id: str, source_tag: str) -> ImpactRecording:
    """Read a recording written by :func:`write_recording_csv`.

    The sampling frequency is recovered from the time column and must be
    uniform; id and source_tag are carried by the dataset manifest, not the file.
    """
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != RECORDING_HEADER:
            raise InvalidDataError(
                f"{path}: expected header {RECORDING_HEADER!r}, got {header!r}"
            )
        try:
            table = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise InvalidDataError(f"{path}: malformed recording table: {exc}") from exc
    if table.shape[1] != 7:
        raise InvalidDataError(f"{path}: expected 7 columns, got {table.shape[1]}")
    t = table[:, 0]
    steps = np.diff(t)
    if t.size < 2 or steps.min() <= 0:
        raise InvalidDataError(f"{path}: time column must be strictly increasing")
    dt = float(np.median(steps))
    if not np.allclose(steps, dt, rtol=1e-6, atol=1e-9):
        raise InvalidDataError(f"{path}: non-uniform sampling")
    fs = 1.0 / dt
    # written time columns are k/fs, so 1/median(diff) can land a few ulp off
    # the integer rate; snap it back rather than failing exact fs checks later
    if abs(fs - round(fs)) < 1e-6 * fs:
        fs = float(round(fs))
    return ImpactRecording(
        id=rec_id,
        source_tag=source_tag,
        fs=fs,
        lin_acc=table[:, 1:4].T.copy(),
        ang_vel=table[:, 4:7].T.copy(),
    )
