"""Shared scene builders for the test suite."""

import numpy as np
import pytest

from radiobench.geometry import LocatorPose


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation via QR with positive diagonal."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def ring_poses(
    n: int = 6,
    size: float = 10.0,
    z_levels: tuple[float, ...] = (2.5,),
) -> list[LocatorPose]:
    """Locators on a ring near the walls of a size x size room, facing the centre.

    z_levels cycles over locators; passing two heights staggers the rig so
    the vertical axis is identifiable from ranges alone.
    """
    poses = []
    for m in range(n):
        ang = 2 * np.pi * m / n
        z = z_levels[m % len(z_levels)]
        p = np.array(
            [size / 2 + 0.45 * size * np.cos(ang), size / 2 + 0.45 * size * np.sin(ang), z]
        )
        yaw = np.arctan2(size / 2 - p[1], size / 2 - p[0])
        poses.append(LocatorPose(position=p, orientation=rot_z(yaw)))
    return poses


@pytest.fixture
def six_ring_poses():
    return ring_poses(6)


def small_radio(**overrides) -> "RadioConfig":
    """Tiny radio for fast tests: 8 subcarriers, 2 antennas, 8 taps."""
    from radiobench.channel_sim import RadioConfig

    kw = dict(
        carrier_hz=3.75e9,
        bandwidth_hz=100e6,
        n_subcarriers=8,
        n_antennas_per_locator=2,
        channel_order=8,
    )
    kw.update(overrides)
    return RadioConfig(**kw)


def small_scene(n_loc: int = 2, scatterers=(), **overrides) -> "SceneConfig":
    """A 10 x 10 x 3 m room with ring locators at two heights."""
    from radiobench.channel_sim import SceneConfig

    kw = dict(
        locators=tuple(ring_poses(n_loc, size=10.0, z_levels=(2.5, 2.0))),
        bounds=(np.zeros(3), np.array([10.0, 10.0, 3.0])),
        scatterers=tuple(scatterers),
        pathloss_exponent=2.0,
        seed=7,
    )
    kw.update(overrides)
    return SceneConfig(**kw)
