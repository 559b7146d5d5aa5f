"""Single-file dataset container, splits, and spatial-grid utilities.

On-disk layout (`.rdb`): 8-byte magic ``RDBENCH1``, a little-endian u64
header length, a JSON header, then raw contiguous array blocks in header
order, and a trailing CRC32C (Castagnoli) over everything before it.
Arrays are stored quantised: complex64 CSI, float32 periodograms, float64
positions/angles, u64 time indices.  Quantisation happens at Dataset
construction, so a round trip through disk is bit-exact.
"""

from __future__ import annotations

import json
import math
import os
from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .channel_sim import RadioConfig, SamplingConfig, SceneConfig
from .errors import (
    ConfigurationError,
    CorruptDatasetError,
    DatasetFormatError,
    ShapeError,
)

MAGIC = b"RDBENCH1"
SCHEMA_VERSION = 1

# ---------------------------------------------------------------------------
# CRC32C, slice-by-8 (Castagnoli polynomial, reflected)


def _build_crc_tables():
    poly = 0x82F63B78
    table0 = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = (crc >> 1) ^ poly if crc & 1 else crc >> 1
        table0.append(crc)
    tables = [table0]
    for k in range(1, 8):
        prev = tables[k - 1]
        tables.append([table0[prev[b] & 0xFF] ^ (prev[b] >> 8) for b in range(256)])
    return tables


_CRC_TABLES = _build_crc_tables()


def crc32c(data, crc: int = 0) -> int:
    """CRC32C checksum; crc32c(b"123456789") == 0xE3069283."""
    t0, t1, t2, t3, t4, t5, t6, t7 = _CRC_TABLES
    crc ^= 0xFFFFFFFF
    mv = memoryview(data)
    n = len(mv)
    i = 0
    while i + 8 <= n:
        low = crc ^ (mv[i] | mv[i + 1] << 8 | mv[i + 2] << 16 | mv[i + 3] << 24)
        crc = (
            t7[low & 0xFF]
            ^ t6[(low >> 8) & 0xFF]
            ^ t5[(low >> 16) & 0xFF]
            ^ t4[low >> 24]
            ^ t3[mv[i + 4]]
            ^ t2[mv[i + 5]]
            ^ t1[mv[i + 6]]
            ^ t0[mv[i + 7]]
        )
        i += 8
    while i < n:
        crc = (crc >> 8) ^ t0[(crc ^ mv[i]) & 0xFF]
        i += 1
    return crc ^ 0xFFFFFFFF


# ---------------------------------------------------------------------------
# Dataset container

_ARRAY_SPECS = (
    ("csi", "<c8"),
    ("per", "<f4"),
    ("positions", "<f8"),
    ("taoa", "<f8"),
    ("time_index", "<u8"),
)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable sample arrays plus the scene/radio metadata that produced them.

    Samples are struct-of-arrays: csi (n, locators, antennas, subcarriers)
    complex64, per (n, locators, delay_bins, angle_bins) float32,
    positions (n, 3), taoa (n, locators, 3) as (azimuth, elevation, range),
    time_index (n,) strictly increasing u64.
    """

    name: str
    positions: np.ndarray
    csi: np.ndarray
    per: np.ndarray
    taoa: np.ndarray
    time_index: np.ndarray
    scene: SceneConfig
    radio: RadioConfig
    sampling: SamplingConfig | None = None
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64)
        csi = np.ascontiguousarray(self.csi, dtype=np.complex64)
        per = np.ascontiguousarray(self.per, dtype=np.float32)
        taoa = np.ascontiguousarray(self.taoa, dtype=np.float64)
        ti = np.ascontiguousarray(self.time_index, dtype=np.uint64)
        n = len(pos)
        n_loc = len(self.scene.locators)
        B = self.radio.n_antennas_per_locator
        N = self.radio.n_subcarriers
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ShapeError(f"positions must be (n, 3), got {pos.shape}")
        if csi.shape != (n, n_loc, B, N):
            raise ShapeError(f"csi must be ({n}, {n_loc}, {B}, {N}), got {csi.shape}")
        if per.shape != (n, n_loc, N, self.radio.n_angle_bins):
            raise ShapeError(
                f"per must be ({n}, {n_loc}, {N}, {self.radio.n_angle_bins}),"
                f" got {per.shape}"
            )
        if taoa.shape != (n, n_loc, 3):
            raise ShapeError(f"taoa must be ({n}, {n_loc}, 3), got {taoa.shape}")
        if ti.shape != (n,):
            raise ShapeError(f"time_index must be ({n},), got {ti.shape}")
        if n > 1 and not np.all(ti[1:] > ti[:-1]):
            raise ConfigurationError("time_index must be strictly increasing")
        lo, hi = self.scene.bounds
        if n and (np.any(pos < lo - 1e-9) or np.any(pos > hi + 1e-9)):
            raise ConfigurationError("sample positions must lie within scene bounds")
        for field_name, arr in (
            ("positions", pos), ("csi", csi), ("per", per),
            ("taoa", taoa), ("time_index", ti),
        ):
            arr.setflags(write=False)
            object.__setattr__(self, field_name, arr)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def n_locators(self) -> int:
        return len(self.scene.locators)

    def subset(self, indices, name: str | None = None) -> "Dataset":
        """New Dataset of the given sample indices, kept in time order."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ShapeError("indices must be one-dimensional")
        idx = np.sort(idx)
        if len(idx) and (idx[0] < 0 or idx[-1] >= len(self)):
            raise ConfigurationError("subset index out of range")
        if len(np.unique(idx)) != len(idx):
            raise ConfigurationError("subset indices must be unique")
        return Dataset(
            name=name if name is not None else self.name,
            positions=self.positions[idx],
            csi=self.csi[idx],
            per=self.per[idx],
            taoa=self.taoa[idx],
            time_index=self.time_index[idx],
            scene=self.scene,
            radio=self.radio,
            sampling=self.sampling,
            noise_std=self.noise_std,
            seed=self.seed,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.name == other.name
            and self.noise_std == other.noise_std
            and self.seed == other.seed
            and self.scene.to_dict() == other.scene.to_dict()
            and self.radio.to_dict() == other.radio.to_dict()
            and (self.sampling.to_dict() if self.sampling else None)
            == (other.sampling.to_dict() if other.sampling else None)
            and all(
                a.shape == b.shape and bool(np.all(a == b))
                for a, b in (
                    (self.positions, other.positions),
                    (self.csi, other.csi),
                    (self.per, other.per),
                    (self.taoa, other.taoa),
                    (self.time_index, other.time_index),
                )
            )
        )


def save(dataset: Dataset, path) -> None:
    header = {
        "schema": SCHEMA_VERSION,
        "name": dataset.name,
        "n_samples": len(dataset),
        "noise_std": dataset.noise_std,
        "seed": dataset.seed,
        "scene": dataset.scene.to_dict(),
        "radio": dataset.radio.to_dict(),
        "sampling": dataset.sampling.to_dict() if dataset.sampling else None,
        "arrays": [
            {
                "key": key,
                "dtype": dtype,
                "shape": list(getattr(dataset, key).shape),
            }
            for key, dtype in _ARRAY_SPECS
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    crc = 0
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        for chunk in (
            MAGIC,
            len(header_bytes).to_bytes(8, "little"),
            header_bytes,
        ):
            f.write(chunk)
            crc = crc32c(chunk, crc)
        for key, dtype in _ARRAY_SPECS:
            blob = np.ascontiguousarray(getattr(dataset, key), dtype=dtype).tobytes()
            f.write(blob)
            crc = crc32c(blob, crc)
        f.write(crc.to_bytes(4, "little"))
    os.replace(tmp, path)


def load(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 8 + 4:
        raise CorruptDatasetError(f"{path}: file too short to be a dataset")
    if raw[: len(MAGIC)] != MAGIC:
        raise CorruptDatasetError(f"{path}: bad magic bytes")
    body, stored_crc = raw[:-4], int.from_bytes(raw[-4:], "little")
    if crc32c(body) != stored_crc:
        raise CorruptDatasetError(f"{path}: checksum mismatch (truncated or corrupt)")
    header_len = int.from_bytes(raw[8:16], "little")
    header_end = 16 + header_len
    if header_end > len(body):
        raise CorruptDatasetError(f"{path}: header overruns file")
    try:
        header = json.loads(raw[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptDatasetError(f"{path}: unreadable header: {e}") from e
    if header.get("schema") != SCHEMA_VERSION:
        raise DatasetFormatError(
            f"{path}: schema {header.get('schema')!r}, expected {SCHEMA_VERSION}"
        )
    arrays = {}
    offset = header_end
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dt.itemsize * math.prod(shape)
        if offset + nbytes > len(body):
            raise CorruptDatasetError(f"{path}: array block overruns file")
        arrays[entry["key"]] = (
            np.frombuffer(raw, dtype=dt, count=math.prod(shape), offset=offset)
            .reshape(shape)
            .copy()
        )
        offset += nbytes
    if offset != len(body):
        raise CorruptDatasetError(f"{path}: trailing bytes after array blocks")
    return Dataset(
        name=header["name"],
        positions=arrays["positions"],
        csi=arrays["csi"],
        per=arrays["per"],
        taoa=arrays["taoa"],
        time_index=arrays["time_index"],
        scene=SceneConfig.from_dict(header["scene"]),
        radio=RadioConfig.from_dict(header["radio"]),
        sampling=SamplingConfig.from_dict(header["sampling"])
        if header.get("sampling")
        else None,
        noise_std=header["noise_std"],
        seed=header["seed"],
    )


# ---------------------------------------------------------------------------
# Splits


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float
    val_frac: float
    test_frac: float
    mode: str = "Random"
    seed: int = 0
    tile_m: float = 1.0

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        for f in fracs:
            if not 0.0 < f < 1.0:
                raise ConfigurationError(f"fractions must lie in (0, 1), got {f}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigurationError(f"fractions must sum to 1, got {sum(fracs)}")
        if self.mode not in ("Random", "SpatialBlock"):
            raise ConfigurationError(f"unknown split mode {self.mode!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must fit in u64")
        if self.tile_m <= 0:
            raise ConfigurationError("tile_m must be positive")


class Splits(NamedTuple):
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def _spatial_block_indices(dataset: Dataset, spec: SplitSpec):
    # tile the x-y plane; BFS-grow a connected test cluster, then buffer it
    # with the 8-neighbourhood ring as validation so no test position sits
    # within one tile width of any training position
    pos = dataset.positions
    tiles = np.floor(pos[:, :2] / spec.tile_m).astype(np.int64)
    keys = [tuple(t) for t in tiles]
    occupied: dict[tuple, list] = {}
    for i, key in enumerate(keys):
        occupied.setdefault(key, []).append(i)
    tile_list = sorted(occupied)
    rng = np.random.default_rng([spec.seed, 1])
    start = tile_list[int(rng.integers(len(tile_list)))]

    target_test = spec.test_frac * len(dataset)
    test_tiles = set()
    count = 0
    queue = deque([start])
    seen = {start}
    while queue and count < target_test:
        tile = queue.popleft()
        test_tiles.add(tile)
        count += len(occupied[tile])
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                nb = (tile[0] + dx, tile[1] + dy)
                if nb in occupied and nb not in seen:
                    seen.add(nb)
                    queue.append(nb)

    ring = set()
    for tile in test_tiles:
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                nb = (tile[0] + dx, tile[1] + dy)
                if nb in occupied and nb not in test_tiles:
                    ring.add(nb)

    test_idx, val_idx, train_idx = [], [], []
    for key, members in occupied.items():
        bucket = (
            test_idx if key in test_tiles else val_idx if key in ring else train_idx
        )
        bucket.extend(members)
    return np.array(train_idx), np.array(val_idx), np.array(test_idx)


def split(dataset: Dataset, spec: SplitSpec) -> Splits:
    """Partition into train/val/test index arrays; deterministic given seed.

    Random mode draws a seeded permutation.  SpatialBlock mode holds out a
    connected cluster of spatial tiles as test with a one-tile validation
    buffer around it, so test regions are unseen during training (block
    sizes then only approximate the requested fractions).  The returned
    indices are sorted; materialise subsets with `dataset.subset(part)`.
    """
    n = len(dataset)
    if n == 0:
        raise ConfigurationError("cannot split an empty dataset")
    if spec.mode == "Random":
        n_train = int(round(spec.train_frac * n))
        n_val = int(round(spec.val_frac * n))
        perm = np.random.default_rng([spec.seed, 0]).permutation(n)
        parts = (perm[:n_train], perm[n_train : n_train + n_val],
                 perm[n_train + n_val :])
    else:
        parts = _spatial_block_indices(dataset, spec)
    if any(len(p) == 0 for p in parts):
        raise ConfigurationError("split fractions yield an empty part")
    return Splits(*(np.sort(np.asarray(p, dtype=np.int64)) for p in parts))


# ---------------------------------------------------------------------------
# Spatial grid


def grid_cell_indices(dataset: Dataset, pitch_m: float):
    """Quantise positions to pitch-sized cells.

    Returns (cells, labels): unique cell coordinates (G, 3) in lexicographic
    order and the per-sample cell label array.
    """
    if pitch_m <= 0:
        raise ConfigurationError("pitch must be positive")
    lo, _ = dataset.scene.bounds
    q = np.round((dataset.positions - lo) / pitch_m).astype(np.int64)
    cells, labels = np.unique(q, axis=0, return_inverse=True)
    return cells, labels.ravel()


def grid_positions(dataset: Dataset, pitch_m: float) -> np.ndarray:
    """Unique pitch-quantised sample positions; their count calibrates
    label budgets against the spatial grid size."""
    cells, _ = grid_cell_indices(dataset, pitch_m)
    lo, _ = dataset.scene.bounds
    return lo + cells * pitch_m
