"""Synthetic multipath channel simulation.

Scene geometry is turned into discrete propagation paths (line of sight
plus one first-order bounce per scatterer), paths into a baseband channel
impulse response built from shifted sinc pulses, the CIR into per-subcarrier
CSI by forward DFT, and CSI into a delay/angle periodogram.  The module
also owns dataset sampling (grid or trajectory) and the three scene-level
distribution-shift mechanisms.

Conventions:

* Forward DFT without 1/N normalisation; Parseval therefore carries a
  factor of the transform length.
* Each locator carries a uniform linear array along its local +y axis,
  half-wavelength spacing by default, azimuth-only steering: the phase
  slope across antennas encodes the direction cosine
  sin(azimuth)*cos(elevation) of the arriving wavefront.
* Periodogram delay bins equal n_subcarriers (bin width = one sample
  period); angle bins equal 4x the antenna count by zero-padding, mapping
  bin a to direction cosine 2a/n_bins wrapped into [-1, 1).
* Complex noise of "std sigma" means E[|z|^2] = sigma^2 (sigma/sqrt(2)
  per real component).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DegenerateGeometryError, DomainError, ShapeError
from .geometry import SPEED_OF_LIGHT, LocatorPose, position_to_taoa


@dataclass(frozen=True)
class PathComponent:
    """One discrete propagation path arriving at one antenna."""

    attenuation: float
    phase: float
    delay: float
    path_index: int
    cluster_index: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.attenuation) and self.attenuation >= 0):
            raise DomainError("attenuation must be finite and >= 0")
        if not math.isfinite(self.phase):
            raise DomainError("phase must be finite")
        if not (math.isfinite(self.delay) and self.delay >= 0):
            raise DomainError("delay must be finite and >= 0")


@dataclass(frozen=True)
class RadioConfig:
    carrier_hz: float
    bandwidth_hz: float
    n_subcarriers: int
    n_antennas_per_locator: int
    channel_order: int
    antenna_spacing_wavelengths: float = 0.5
    sample_period_s: float | None = None

    def __post_init__(self):
        if self.carrier_hz <= 0 or self.bandwidth_hz <= 0:
            raise ConfigurationError("carrier and bandwidth must be positive")
        if self.n_subcarriers < 2:
            raise ConfigurationError("n_subcarriers must be >= 2")
        if self.n_antennas_per_locator < 1:
            raise ConfigurationError("need >= 1 antenna per locator")
        if self.channel_order < 1:
            raise ConfigurationError("channel_order must be >= 1")
        if self.antenna_spacing_wavelengths <= 0:
            raise ConfigurationError("antenna spacing must be positive")
        derived = 1.0 / self.bandwidth_hz
        if self.sample_period_s is None:
            object.__setattr__(self, "sample_period_s", derived)
        elif not math.isclose(self.sample_period_s, derived, rel_tol=1e-9):
            raise ConfigurationError("sample_period_s must equal 1/bandwidth_hz")
        if self.sample_period_s <= 0:
            raise ConfigurationError("sample period must be positive")

    @classmethod
    def desk_default(cls) -> "RadioConfig":
        """Desk-scale defaults: 3.75 GHz carrier, 100 MHz bandwidth."""
        return cls(
            carrier_hz=3.75e9,
            bandwidth_hz=100e6,
            n_subcarriers=64,
            n_antennas_per_locator=4,
            channel_order=32,
        )

    @property
    def n_angle_bins(self) -> int:
        return 4 * self.n_antennas_per_locator

    def to_dict(self) -> dict:
        return {
            "carrier_hz": self.carrier_hz,
            "bandwidth_hz": self.bandwidth_hz,
            "n_subcarriers": self.n_subcarriers,
            "n_antennas_per_locator": self.n_antennas_per_locator,
            "channel_order": self.channel_order,
            "antenna_spacing_wavelengths": self.antenna_spacing_wavelengths,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RadioConfig":
        return cls(**d)


@dataclass(frozen=True)
class Scatterer:
    position: np.ndarray
    reflectivity: float

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64)
        if pos.shape != (3,):
            raise ShapeError("scatterer position must be a 3-vector")
        if not np.all(np.isfinite(pos)):
            raise DomainError("scatterer position must be finite")
        if not 0.0 <= self.reflectivity <= 1.0:
            raise DomainError("reflectivity must lie in [0, 1]")
        object.__setattr__(self, "position", pos)


@dataclass(frozen=True)
class SceneConfig:
    locators: tuple
    bounds: tuple
    scatterers: tuple = ()
    pathloss_exponent: float = 2.0
    seed: int = 0

    def __post_init__(self):
        locs = tuple(self.locators)
        if len(locs) < 1:
            raise ConfigurationError("scene needs >= 1 locator")
        for p in locs:
            if not isinstance(p, LocatorPose):
                raise ConfigurationError("locators must be LocatorPose instances")
        lo = np.asarray(self.bounds[0], dtype=np.float64)
        hi = np.asarray(self.bounds[1], dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ShapeError("bounds must be a (lo, hi) pair of 3-vectors")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise DomainError("bounds must be finite")
        if np.any(hi <= lo):
            raise ConfigurationError("bounds must be non-degenerate (hi > lo per axis)")
        scats = tuple(
            s if isinstance(s, Scatterer) else Scatterer(*s) for s in self.scatterers
        )
        if self.pathloss_exponent <= 0:
            raise ConfigurationError("pathloss_exponent must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must fit in u64")
        object.__setattr__(self, "locators", locs)
        object.__setattr__(self, "bounds", (lo, hi))
        object.__setattr__(self, "scatterers", scats)
        object.__setattr__(self, "seed", int(self.seed))

    def to_dict(self) -> dict:
        return {
            "locators": [
                {"position": p.position.tolist(), "orientation": p.orientation.tolist()}
                for p in self.locators
            ],
            "bounds": [self.bounds[0].tolist(), self.bounds[1].tolist()],
            "scatterers": [
                {"position": s.position.tolist(), "reflectivity": s.reflectivity}
                for s in self.scatterers
            ],
            "pathloss_exponent": self.pathloss_exponent,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(
            locators=tuple(
                LocatorPose(
                    position=np.asarray(p["position"], dtype=np.float64),
                    orientation=np.asarray(p["orientation"], dtype=np.float64),
                )
                for p in d["locators"]
            ),
            bounds=(np.asarray(d["bounds"][0]), np.asarray(d["bounds"][1])),
            scatterers=tuple(
                Scatterer(np.asarray(s["position"]), s["reflectivity"])
                for s in d.get("scatterers", [])
            ),
            pathloss_exponent=d.get("pathloss_exponent", 2.0),
            seed=d.get("seed", 0),
        )


_SHIFT_KINDS = ("MacroEnvironment", "MicroLocator", "MicroScattering")


@dataclass(frozen=True)
class ShiftSpec:
    kind: str
    magnitude: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _SHIFT_KINDS:
            raise ConfigurationError(
                f"kind must be one of {_SHIFT_KINDS}, got {self.kind!r}"
            )
        if not (math.isfinite(self.magnitude) and self.magnitude >= 0):
            raise ConfigurationError("magnitude must be finite and >= 0")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must fit in u64")
        object.__setattr__(self, "seed", int(self.seed))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "magnitude": self.magnitude, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftSpec":
        return cls(**d)


@dataclass(frozen=True)
class SamplingConfig:
    """Grid or trajectory sampling of user positions.

    Grid mode rasterises the x-y extent of the scene bounds at
    grid_pitch_m, all points at height z.  Trajectory mode walks a circle
    of the given radius around center (x, y, z), `turns` full revolutions
    spread uniformly over the samples.
    """

    mode: str
    grid_pitch_m: float | None = None
    z: float | None = None
    center: tuple | None = None
    radius: float | None = None
    turns: float = 1.0
    phase: float = 0.0

    def __post_init__(self):
        if self.mode == "grid":
            if self.grid_pitch_m is None or self.grid_pitch_m <= 0:
                raise ConfigurationError("grid mode needs grid_pitch_m > 0")
        elif self.mode == "trajectory":
            if self.radius is None or self.radius <= 0:
                raise ConfigurationError("trajectory mode needs radius > 0")
            if self.center is not None and len(self.center) != 3:
                raise ShapeError("trajectory center must be a 3-vector")
            if self.turns <= 0:
                raise ConfigurationError("turns must be positive")
        else:
            raise ConfigurationError(f"unknown sampling mode {self.mode!r}")

    def to_dict(self) -> dict:
        d = {"mode": self.mode}
        for k in ("grid_pitch_m", "z", "radius", "turns", "phase"):
            v = getattr(self, k)
            if v is not None:
                d[k] = v
        if self.center is not None:
            d["center"] = list(self.center)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SamplingConfig":
        d = dict(d)
        if "center" in d and d["center"] is not None:
            d["center"] = tuple(d["center"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Path synthesis


def _steering_phases(radio: RadioConfig, azimuth: float, elevation: float) -> np.ndarray:
    # direction cosine along the array axis; one phase per antenna
    nu = math.sin(azimuth) * math.cos(elevation)
    b = np.arange(radio.n_antennas_per_locator)
    return 2.0 * math.pi * radio.antenna_spacing_wavelengths * b * nu


def scene_to_paths(scene: SceneConfig, locator_idx: int, user, radio: RadioConfig):
    """Geometric paths from a user position to one locator's antennas.

    Returns one list of PathComponent per antenna: the direct path plus a
    single first-order bounce per scatterer.  Bounce attenuation is
    reflectivity / total_distance^(beta/2), with a pi reflection phase
    flip.  Purely geometric; no randomness.
    """
    user = np.asarray(user, dtype=np.float64)
    if user.shape != (3,):
        raise ShapeError("user must be a 3-vector")
    lo, hi = scene.bounds
    if np.any(user < lo) or np.any(user > hi):
        raise DomainError("user position lies outside the scene bounds")
    if not 0 <= locator_idx < len(scene.locators):
        raise ConfigurationError(f"locator_idx {locator_idx} out of range")

    pose = scene.locators[locator_idx]
    beta = scene.pathloss_exponent
    per_antenna: list[list[PathComponent]] = [
        [] for _ in range(radio.n_antennas_per_locator)
    ]

    los = position_to_taoa(pose, user)
    d = los.range
    los_phases = _steering_phases(radio, los.azimuth, los.elevation)
    for b, extra in enumerate(los_phases):
        per_antenna[b].append(
            PathComponent(
                attenuation=d ** (-beta / 2.0),
                phase=float(extra),
                delay=d / SPEED_OF_LIGHT,
                path_index=0,
            )
        )

    for s_idx, scat in enumerate(scene.scatterers):
        d1 = float(np.linalg.norm(scat.position - user))
        arrival = position_to_taoa(pose, scat.position)
        d2 = arrival.range
        total = d1 + d2
        phases = _steering_phases(radio, arrival.azimuth, arrival.elevation)
        for b, extra in enumerate(phases):
            per_antenna[b].append(
                PathComponent(
                    attenuation=scat.reflectivity * total ** (-beta / 2.0),
                    phase=float(math.pi + extra),
                    delay=total / SPEED_OF_LIGHT,
                    path_index=1 + s_idx,
                )
            )
    return per_antenna


def synthesize_cir(paths, radio: RadioConfig) -> np.ndarray:
    """Baseband CIR taps from discrete paths.

    h(k) = sum_p a_p * exp(j(2 pi f_c tau_p + phi_p)) * sinc(k - tau_p/T_s)
    over taps k = 0..channel_order-1, with sinc(x) = sin(pi x)/(pi x).
    """
    order = radio.channel_order
    if len(paths) == 0:
        return np.zeros(order, dtype=np.complex128)
    amps = np.array([p.attenuation for p in paths])
    phases = np.array([p.phase for p in paths])
    delays = np.array([p.delay for p in paths])
    frac = delays / radio.sample_period_s
    if np.any(frac >= order):
        raise DomainError(
            f"path delay {delays.max():.3e}s exceeds the channel span "
            f"{order * radio.sample_period_s:.3e}s"
        )
    k = np.arange(order)
    coeff = amps * np.exp(1j * (2.0 * math.pi * radio.carrier_hz * delays + phases))
    return (coeff[:, None] * np.sinc(k[None, :] - frac[:, None])).sum(axis=0)


def cir_to_csi(cirs, radio: RadioConfig) -> np.ndarray:
    """Per-subcarrier frequency response: forward DFT of the taps.

    H[s] = sum_k h(k) exp(-j 2 pi s k / n_subcarriers); no 1/N factor.
    Accepts a single CIR vector or a stack with taps on the last axis.
    """
    arr = np.asarray(cirs, dtype=np.complex128)
    if arr.shape[-1] != radio.channel_order:
        raise ShapeError(
            f"CIR length {arr.shape[-1]} != channel_order {radio.channel_order}"
        )
    if radio.channel_order > radio.n_subcarriers:
        raise ConfigurationError("channel_order must be <= n_subcarriers to invert")
    return np.fft.fft(arr, n=radio.n_subcarriers, axis=-1)


def csi_to_periodogram(csi_slice, radio: RadioConfig) -> np.ndarray:
    """Delay/angle power map of one locator's CSI.

    Subcarrier axis -> delay via conjugate-direction DFT (bin width one
    sample period); antenna axis -> spatial frequency via forward DFT
    zero-padded to 4x the antenna count.  Returns the squared magnitude,
    shape (n_subcarriers, 4 * n_antennas); total energy equals
    n_subcarriers * n_angle_bins * ||csi||^2.
    """
    csi = np.asarray(csi_slice, dtype=np.complex128)
    if csi.ndim != 2 or csi.shape[1] != radio.n_subcarriers:
        raise ShapeError(
            f"expected (n_antennas, {radio.n_subcarriers}) slice, got {csi.shape}"
        )
    if csi.shape[0] < 2:
        raise DegenerateGeometryError("angle axis needs >= 2 antennas")
    taps = np.fft.ifft(csi, axis=1) * radio.n_subcarriers
    spatial = np.fft.fft(taps, n=4 * csi.shape[0], axis=0)
    power = np.abs(spatial) ** 2
    return np.ascontiguousarray(power.T)


def angle_bin_to_direction_cosine(bin_idx: float, n_bins: int) -> float:
    """Direction cosine sin(az)*cos(el) encoded by a (possibly fractional)
    periodogram angle bin, wrapped into [-1, 1)."""
    nu = 2.0 * float(bin_idx) / n_bins
    return (nu + 1.0) % 2.0 - 1.0


def direction_cosine_to_angle_bin(nu: float, n_bins: int) -> float:
    """Fractional periodogram angle bin for a direction cosine in [-1, 1)."""
    if not -1.0 <= nu <= 1.0:
        raise DomainError("direction cosine must lie in [-1, 1]")
    return (float(nu) / 2.0 % 1.0) * n_bins


def delay_bin_to_seconds(bin_idx: float, radio: RadioConfig) -> float:
    return float(bin_idx) * radio.sample_period_s


# ---------------------------------------------------------------------------
# Dataset sampling


def grid_points(scene: SceneConfig, pitch: float, z: float | None = None) -> np.ndarray:
    """Raster of x-y grid positions at the given pitch inside the bounds."""
    lo, hi = scene.bounds
    if z is None:
        z = 0.5 * (lo[2] + hi[2])
    nx = int(math.floor((hi[0] - lo[0]) / pitch + 1e-9)) + 1
    ny = int(math.floor((hi[1] - lo[1]) / pitch + 1e-9)) + 1
    pts = np.empty((nx * ny, 3))
    i = 0
    for iy in range(ny):
        for ix in range(nx):
            pts[i] = (lo[0] + ix * pitch, lo[1] + iy * pitch, z)
            i += 1
    return pts


def _sample_positions(scene, sampling: SamplingConfig, n_samples: int, seed: int):
    lo, hi = scene.bounds
    if sampling.mode == "grid":
        pts = grid_points(scene, sampling.grid_pitch_m, sampling.z)
        # seeded permutation keeps spatial coverage uniform when
        # n_samples < grid size; repeats cycle the same order
        perm = np.random.default_rng([seed, 2**32]).permutation(len(pts))
        idx = perm[np.arange(n_samples) % len(pts)]
        return pts[idx]
    center = sampling.center
    if center is None:
        center = (0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2]))
    ang = sampling.phase + 2.0 * math.pi * sampling.turns * np.arange(n_samples) / n_samples
    pts = np.stack(
        [
            center[0] + sampling.radius * np.cos(ang),
            center[1] + sampling.radius * np.sin(ang),
            np.full(n_samples, center[2]),
        ],
        axis=1,
    )
    if np.any(pts < lo) or np.any(pts > hi):
        raise ConfigurationError("trajectory leaves the scene bounds")
    return pts


def _simulate_sample(scene, radio, user, noise_std, seed, index):
    n_loc = len(scene.locators)
    B, N = radio.n_antennas_per_locator, radio.n_subcarriers
    csi = np.empty((n_loc, B, N), dtype=np.complex128)
    taoa = np.empty((n_loc, 3))
    for m in range(n_loc):
        per_antenna = scene_to_paths(scene, m, user, radio)
        cirs = np.stack([synthesize_cir(p, radio) for p in per_antenna])
        csi[m] = cir_to_csi(cirs, radio)
        t = position_to_taoa(scene.locators[m], user)
        taoa[m] = (t.azimuth, t.elevation, t.range)
    if noise_std > 0:
        rng = np.random.default_rng([seed, index])
        scale = noise_std / math.sqrt(2.0)
        csi = csi + scale * (
            rng.standard_normal(csi.shape) + 1j * rng.standard_normal(csi.shape)
        )
    csi32 = csi.astype(np.complex64)
    per = np.empty((n_loc, N, radio.n_angle_bins), dtype=np.float32)
    for m in range(n_loc):
        per[m] = csi_to_periodogram(csi32[m].astype(np.complex128), radio)
    return csi32, per, taoa


def simulate_dataset(
    scene: SceneConfig,
    radio: RadioConfig,
    sampling: SamplingConfig,
    n_samples: int,
    noise_std: float,
    seed: int,
    threads: int = 1,
    name: str = "synthetic",
):
    """Simulate a dataset of CSI/PER/TAoA samples over sampled positions.

    Deterministic given seed: each sample's noise stream derives from
    (seed, sample_index), so thread count never changes the result.
    """
    from .dataset_store import Dataset

    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    if noise_std < 0:
        raise ConfigurationError("noise_std must be >= 0")
    if threads < 1:
        raise ConfigurationError("threads must be >= 1")
    positions = _sample_positions(scene, sampling, n_samples, seed)
    n_loc = len(scene.locators)
    B, N = radio.n_antennas_per_locator, radio.n_subcarriers
    csi = np.empty((n_samples, n_loc, B, N), dtype=np.complex64)
    per = np.empty((n_samples, n_loc, N, radio.n_angle_bins), dtype=np.float32)
    taoa = np.empty((n_samples, n_loc, 3))

    def work(i: int):
        csi[i], per[i], taoa[i] = _simulate_sample(
            scene, radio, positions[i], noise_std, seed, i
        )

    if threads == 1:
        for i in range(n_samples):
            work(i)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(n_samples)))

    return Dataset(
        name=name,
        positions=positions,
        csi=csi,
        per=per,
        taoa=taoa,
        time_index=np.arange(n_samples, dtype=np.uint64),
        scene=scene,
        radio=radio,
        sampling=sampling,
        noise_std=float(noise_std),
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# Distribution shifts


def _rodrigues(axis: np.ndarray, angle: float) -> np.ndarray:
    a = axis / np.linalg.norm(axis)
    kx = np.array(
        [[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]], dtype=np.float64
    )
    return np.eye(3) + math.sin(angle) * kx + (1.0 - math.cos(angle)) * (kx @ kx)


# orientation perturbation: rotation angle in radians per unit magnitude
ROTATION_RADIANS_PER_MAGNITUDE = 0.5


def apply_shift(scene: SceneConfig, spec: ShiftSpec) -> SceneConfig:
    """Derive a shifted scene; magnitude 0 returns the input unchanged."""
    if spec.magnitude == 0:
        return scene
    kind_tag = _SHIFT_KINDS.index(spec.kind)
    rng = np.random.default_rng([spec.seed, kind_tag])
    lo, hi = scene.bounds

    if spec.kind == "MacroEnvironment":
        n = len(scene.scatterers)
        scatterers = tuple(
            Scatterer(
                position=rng.uniform(lo, hi),
                reflectivity=float(rng.uniform(0.2, 0.95)),
            )
            for _ in range(n)
        )
        beta = float(
            max(0.5, scene.pathloss_exponent + 0.2 * spec.magnitude * rng.standard_normal())
        )
        return SceneConfig(
            locators=scene.locators,
            bounds=scene.bounds,
            scatterers=scatterers,
            pathloss_exponent=beta,
            seed=scene.seed,
        )

    if spec.kind == "MicroLocator":
        angle = ROTATION_RADIANS_PER_MAGNITUDE * spec.magnitude
        locators = []
        for pose in scene.locators:
            new_pos = pose.position + rng.normal(0.0, spec.magnitude, 3)
            axis = rng.standard_normal(3)
            while np.linalg.norm(axis) < 1e-9:
                axis = rng.standard_normal(3)
            rot = _rodrigues(axis, angle) @ pose.orientation
            # re-orthonormalise so the pose invariant holds exactly
            u, _, vt = np.linalg.svd(rot)
            rot = u @ vt
            if np.linalg.det(rot) < 0:
                u[:, -1] = -u[:, -1]
                rot = u @ vt
            locators.append(LocatorPose(position=new_pos, orientation=rot))
        return SceneConfig(
            locators=tuple(locators),
            bounds=scene.bounds,
            scatterers=scene.scatterers,
            pathloss_exponent=scene.pathloss_exponent,
            seed=scene.seed,
        )

    # MicroScattering: extra scatterers in the central half of the bounds
    n_new = math.ceil(spec.magnitude)
    mid = 0.5 * (lo + hi)
    half = 0.25 * (hi - lo)
    extra = tuple(
        Scatterer(
            position=rng.uniform(mid - half, mid + half),
            reflectivity=float(rng.uniform(0.3, 0.9)),
        )
        for _ in range(n_new)
    )
    return SceneConfig(
        locators=scene.locators,
        bounds=scene.bounds,
        scatterers=scene.scatterers + extra,
        pathloss_exponent=scene.pathloss_exponent,
        seed=scene.seed,
    )
