"""Synthetic multi-user, multi-device inertial corpus.

Each user has a gait-like fundamental with three harmonics per channel, a
holding posture (gravity direction), a burst rate for non-periodic motion and
a noise level. A session adds per-session jitter (tempo, amplitude, posture),
slow tempo drift, Ornstein-Uhlenbeck noise and Poisson-timed bursts, then
passes the "true" signal through the device calibration error
``measured = offset + gain * true``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError
from .signal import SensorStream, apply_affine, ingest_csv, write_csv
from .storage import atomic_write

GRAVITY = 9.81
RATE_HZ = 50.0
# Rough per-channel spread of the true signal; device offsets are bounded by
# a tenth of it.
NOMINAL_STD = np.array([1.5, 1.5, 1.5, 1.0, 1.0, 1.0])
SPLITS = ("train", "val", "test")


@dataclass
class GeneratorRanges:
    fundamental_hz: tuple = (1.0, 3.0)
    accel_amp: tuple = (0.0, 1.5)
    gyro_amp: tuple = (0.0, 1.0)
    harmonic_decay: float = 0.6
    posture_spread: float = 0.5
    burst_rate_hz: tuple = (0.05, 0.3)
    noise: tuple = (0.05, 0.25)
    tempo_jitter: float = 0.03
    amp_jitter: float = 0.10
    posture_jitter: float = 0.5
    tempo_drift: float = 0.04


@dataclass
class UserProfile:
    fundamental: float
    amplitudes: np.ndarray
    phases: np.ndarray
    gravity_dir: np.ndarray
    gyro_bias: np.ndarray
    burst_rate: float
    noise: float

    @property
    def posture(self):
        return np.concatenate([GRAVITY * self.gravity_dir, self.gyro_bias])


@dataclass
class DeviceProfile:
    gains: np.ndarray
    offsets: np.ndarray
    device_id: str = ""

    @classmethod
    def identity(cls, device_id=""):
        return cls(np.ones(6), np.zeros(6), device_id)


def _unit(v):
    return v / np.linalg.norm(v)


def generate_user(rng: np.random.Generator, ranges: Optional[GeneratorRanges] = None) -> UserProfile:
    r = ranges or GeneratorRanges()
    f0 = rng.uniform(*r.fundamental_hz)
    decay = r.harmonic_decay ** np.arange(3)
    amps = np.empty((6, 3))
    amps[:3] = rng.uniform(*r.accel_amp, size=(3, 3)) * decay
    amps[3:] = rng.uniform(*r.gyro_amp, size=(3, 3)) * decay
    phases = rng.uniform(0.0, 2 * np.pi, size=(6, 3))
    # phone mostly held screen-up, tilted towards the user
    gravity_dir = _unit(np.array([0.0, 0.5, 0.85]) + r.posture_spread * rng.normal(size=3))
    gyro_bias = 0.05 * rng.normal(size=3)
    return UserProfile(f0, amps, phases, gravity_dir, gyro_bias,
                       rng.uniform(*r.burst_rate_hz), rng.uniform(*r.noise))


def generate_device(rng: np.random.Generator, device_id="", max_gain_err=0.05,
                    max_offset=0.1) -> DeviceProfile:
    gains = rng.uniform(1.0 - max_gain_err, 1.0 + max_gain_err, size=6)
    offsets = rng.uniform(-max_offset, max_offset, size=6) * NOMINAL_STD
    return DeviceProfile(gains, offsets, device_id)


def _ou(rng, n, tau_s, sigma, dt):
    # stationary OU process, exact discretisation
    a = np.exp(-dt / tau_s)
    s = sigma * np.sqrt(1.0 - a * a)
    out = np.empty(n)
    x = sigma * rng.normal()
    eps = rng.normal(size=n)
    for i in range(n):
        x = a * x + s * eps[i]
        out[i] = x
    return out


def true_signal(user: UserProfile, duration: float, rng: np.random.Generator,
                ranges: Optional[GeneratorRanges] = None, noise=True, bursts=True,
                jitter=True, rate_hz=RATE_HZ):
    """(T, 6) noiseless-device signal for one session."""
    r = ranges or GeneratorRanges()
    n = int(round(duration * rate_hz))
    dt = 1.0 / rate_hz
    t = np.arange(n) * dt
    tempo = user.fundamental
    amp_scale = 1.0
    gravity = user.gravity_dir
    if jitter:
        tempo *= 1.0 + r.tempo_jitter * rng.normal()
        amp_scale = np.exp(r.amp_jitter * rng.normal())
        gravity = _unit(gravity + r.posture_jitter * rng.normal(size=3))
        inst = tempo * (1.0 + _ou(rng, n, 5.0, r.tempo_drift, dt))
        phase = 2 * np.pi * np.cumsum(inst) * dt + rng.uniform(0, 2 * np.pi)
    else:
        phase = 2 * np.pi * tempo * t
    h = np.arange(1, 4)
    waves = np.sin(phase[:, None, None] * h[None, None, :] + user.phases[None])
    x = amp_scale * np.einsum("tch,ch->tc", waves, user.amplitudes)
    x += np.concatenate([GRAVITY * gravity, user.gyro_bias])
    if noise and user.noise > 0:
        for c in range(6):
            x[:, c] += _ou(rng, n, 0.05, user.noise * NOMINAL_STD[c] / 1.5, dt)
    if bursts and user.burst_rate > 0:
        count = rng.poisson(user.burst_rate * duration)
        width = 0.15 * rate_hz
        for centre in rng.uniform(0, n, size=count):
            env = np.exp(-0.5 * ((np.arange(n) - centre) / width) ** 2)
            x += env[:, None] * rng.normal(0.0, 2.0, size=6) * NOMINAL_STD / 1.5
    return t, x


def synthesize_session(user: UserProfile, device: DeviceProfile, duration: float,
                       rng: np.random.Generator, ranges=None, noise=True, bursts=True,
                       jitter=True, session_id="", user_id="") -> SensorStream:
    if duration < 1.0:
        raise ValueError("sessions must last at least one second")
    t, x = true_signal(user, duration, rng, ranges, noise, bursts, jitter)
    measured = apply_affine(x, device.gains, device.offsets)
    return SensorStream(t, measured, RATE_HZ, session_id, user_id, device.device_id)


def stream_rng(master_seed: int, *names) -> np.random.Generator:
    """Independent generator for a named sub-stream of the master seed."""
    key = zlib.crc32("/".join(str(n) for n in names).encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), key]))


@dataclass
class ManifestEntry:
    session_path: str
    user_id: str
    device_id: str
    split: str

    @property
    def session_id(self):
        return Path(self.session_path).stem

    @property
    def session_index(self):
        return int(self.session_id.rsplit("_s", 1)[1])


@dataclass
class CorpusManifest:
    entries: list
    root: Optional[Path] = None
    streams: dict = field(default_factory=dict)

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def users(self, split=None):
        seen = []
        for e in self.entries:
            if (split is None or e.split == split) and e.user_id not in seen:
                seen.append(e.user_id)
        return seen

    def load(self, entry) -> SensorStream:
        if entry.session_id in self.streams:
            return self.streams[entry.session_id]
        path = Path(entry.session_path)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return ingest_csv(path, session_id=entry.session_id, user_id=entry.user_id,
                          device_id=entry.device_id)

    def to_text(self):
        lines = ["# session_path,user_id,device_id,split", "session_path,user_id,device_id,split"]
        lines += [f"{e.session_path},{e.user_id},{e.device_id},{e.split}" for e in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def read(cls, path):
        path = Path(path)
        entries = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line or line.startswith("#") or line.startswith("session_path,"):
                continue
            parts = line.split(",")
            if len(parts) != 4 or parts[3] not in SPLITS:
                raise DataError(f"{path}:{lineno}: malformed manifest line {line!r}")
            entries.append(ManifestEntry(*parts))
        return cls(entries, path.parent)


def build_corpus(n_train_users=40, n_val_users=10, n_test_users=10, sessions_per_user=6,
                 seed=0, out_dir=None, duration_s=122.0, recalibrated=False, n_enroll=2,
                 ranges=None, force=False) -> CorpusManifest:
    """Generate the corpus; write CSVs and ``manifest.txt`` when ``out_dir`` is set.

    With ``recalibrated``, validation and test users record their
    non-enrollment sessions (index >= ``n_enroll``) on a second, freshly
    calibrated device.
    """
    counts = (n_train_users, n_val_users, n_test_users)
    if min(counts) < 1 or sessions_per_user < 1:
        raise ValueError("user and session counts must be at least 1")
    root = None
    if out_dir is not None:
        root = Path(out_dir)
        manifest_path = root / "manifest.txt"
        if manifest_path.exists() and not force:
            raise FileExistsError(f"{manifest_path} exists; refusing to overwrite")
    entries, streams = [], {}
    uid = 0
    for split, count in zip(SPLITS, counts):
        for _ in range(count):
            user_id = f"u{uid:03d}"
            user = generate_user(stream_rng(seed, "user", user_id), ranges)
            device = generate_device(stream_rng(seed, "device", user_id), f"d{uid:03d}a")
            second = None
            if recalibrated and split != "train":
                second = generate_device(stream_rng(seed, "device2", user_id), f"d{uid:03d}b")
            for s in range(sessions_per_user):
                sid = f"{user_id}_s{s:02d}"
                dev = second if (second is not None and s >= n_enroll) else device
                stream = synthesize_session(user, dev, duration_s,
                                            stream_rng(seed, "session", sid), ranges,
                                            session_id=sid, user_id=user_id)
                rel = f"sessions/{sid}.csv"
                entries.append(ManifestEntry(rel, user_id, dev.device_id, split))
                if root is not None:
                    write_csv(root / rel, stream, force=force)
                else:
                    streams[sid] = stream
            uid += 1
    manifest = CorpusManifest(entries, root, streams)
    if root is not None:
        atomic_write(root / "manifest.txt", manifest.to_text(), force=force)
    return manifest
