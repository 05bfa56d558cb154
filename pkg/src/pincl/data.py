"""Darcy dataset generation: Gaussian random fields, log-normal permeability
groups, and the binary dataset format.

Fields live on regular (nx, ny) node grids over the unit square, row-major
with axis 0 along x, so ``values[ix, iy]`` sits at ``(ix/(nx-1), iy/(ny-1))``.

Randomness comes from the counter-based Philox 4x64 generator, keyed per
sample by ``seed XOR mix64(group_id, sample_index)``, so any sample can be
regenerated in isolation and generation order (or worker count) never
matters.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import next_fast_len

GENERATOR_NAME = "philox4x64"
DATASET_MAGIC = b"PNDS"
DATASET_VERSION = 1

# The ten (mu, sigma) pairs of the group schedule, ordered easy to hard.
DEFAULT_SCHEDULE: tuple[tuple[float, float], ...] = (
    (-1.0, 0.2), (-0.7, 0.35), (-0.4, 0.5), (-0.1, 0.6), (0.2, 0.7),
    (0.5, 0.8), (0.8, 0.9), (1.1, 1.0), (1.4, 1.1), (1.7, 1.3),
)

_MASK64 = (1 << 64) - 1


def mix64(group_id: int, sample_index: int) -> int:
    """Stable 64-bit hash of (group_id, sample_index) (splitmix64 finalizer)."""
    z = ((group_id + 1) * 0x9E3779B97F4A7C15 + (sample_index + 1) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derived_seed(seed: int, group_id: int, sample_index: int) -> int:
    return (seed ^ mix64(group_id, sample_index)) & _MASK64


# ---------------------------------------------------------------------------
# dataset containers


@dataclass
class GridSample:
    """One Darcy instance: permeability field plus optional reference label."""
    k: np.ndarray
    label: np.ndarray | None = None
    group_id: int = 0
    sample_index: int = 0

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=np.float64)
        if not np.all(self.k > 0.0):
            raise ValueError("permeability must be strictly positive")
        if self.label is not None:
            self.label = np.asarray(self.label, dtype=np.float64)
            if self.label.shape != self.k.shape:
                raise ValueError("label shape differs from permeability shape")


@dataclass
class SampleGroup:
    group_id: int
    mu: float
    sigma: float
    samples: list[GridSample] = field(default_factory=list)

    @property
    def has_labels(self) -> bool:
        return len(self.samples) > 0 and all(s.label is not None for s in self.samples)


@dataclass
class Dataset:
    nx: int
    ny: int
    groups: list[SampleGroup] = field(default_factory=list)
    length_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        ids = [g.group_id for g in self.groups]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate group ids: {ids}")

    def group(self, group_id: int) -> SampleGroup:
        for g in self.groups:
            if g.group_id == group_id:
                return g
        raise KeyError(f"no group with id {group_id}")

    @property
    def n_samples(self) -> int:
        return sum(len(g.samples) for g in self.groups)


# ---------------------------------------------------------------------------
# Gaussian random fields


def sample_grf(nx: int, ny: int, length_scale: float, seed: int) -> np.ndarray:
    """Zero-mean, unit-variance stationary GRF via spectral synthesis.

    White noise is filtered through the squared-exponential spectrum
    S(xi) = 2*pi*l^2 * exp(-2*pi^2*l^2*|xi|^2) (the transform of
    C(r) = exp(-r^2/(2 l^2))) on a 2x zero-padded grid, then cropped.  The
    filter is renormalized to unit total power so the pointwise variance is
    exactly 1 in the synthesis basis even when length_scale rivals the
    domain size.
    """
    if nx < 3 or ny < 3:
        raise ValueError("grid must be at least 3x3")
    if length_scale <= 0:
        raise ValueError(f"length_scale must be positive, got {length_scale}")
    hx, hy = 1.0 / (nx - 1), 1.0 / (ny - 1)
    mx, my = next_fast_len(2 * nx), next_fast_len(2 * ny)
    fx = np.fft.fftfreq(mx, d=hx)
    fy = np.fft.fftfreq(my, d=hy)
    fx2, fy2 = np.meshgrid(fx * fx, fy * fy, indexing="ij")
    spectrum = np.exp(-2.0 * np.pi ** 2 * length_scale ** 2 * (fx2 + fy2))
    amplitude = np.sqrt(spectrum / spectrum.sum())
    rng = np.random.Generator(np.random.Philox(key=seed & _MASK64))
    noise = rng.standard_normal((2, mx, my))
    coeff = amplitude * (noise[0] + 1j * noise[1])
    field_values = np.real(np.fft.ifft2(coeff)) * (mx * my)
    return field_values[:nx, :ny].copy()


def make_permeability(g: np.ndarray, mu: float, sigma: float) -> np.ndarray:
    """Log-normal permeability k = exp(mu + sigma * g)."""
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValueError("GRF input contains non-finite values")
    return np.exp(mu + sigma * g)


def generate_sample(nx: int, ny: int, length_scale: float, seed: int,
                    group_id: int, sample_index: int,
                    mu: float, sigma: float) -> GridSample:
    """Regenerate a single sample in isolation (same values as a full run)."""
    g = sample_grf(nx, ny, length_scale, derived_seed(seed, group_id, sample_index))
    return GridSample(k=make_permeability(g, mu, sigma),
                      group_id=group_id, sample_index=sample_index)


def _gen_one(args) -> GridSample:
    return generate_sample(*args)


def generate_groups(schedule=DEFAULT_SCHEDULE, samples_per_group: int = 30,
                    nx: int = 32, length_scale: float = 0.1, seed: int = 0,
                    ny: int | None = None, workers: int = 1) -> Dataset:
    """One SampleGroup per (mu, sigma) schedule entry, seeds derived per sample."""
    schedule = list(schedule)
    if not schedule:
        raise ValueError("schedule must be non-empty")
    if samples_per_group < 1:
        raise ValueError("samples_per_group must be >= 1")
    ny = nx if ny is None else ny
    jobs = [(nx, ny, length_scale, seed, gid, idx, mu, sigma)
            for gid, (mu, sigma) in enumerate(schedule)
            for idx in range(samples_per_group)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            produced = list(pool.map(_gen_one, jobs, chunksize=8))
    else:
        produced = [_gen_one(job) for job in jobs]
    groups = []
    for gid, (mu, sigma) in enumerate(schedule):
        samples = [s for s in produced if s.group_id == gid]
        samples.sort(key=lambda s: s.sample_index)
        groups.append(SampleGroup(group_id=gid, mu=mu, sigma=sigma, samples=samples))
    return Dataset(nx=nx, ny=ny, groups=groups, length_scale=length_scale, seed=seed)


# ---------------------------------------------------------------------------
# binary dataset I/O


class DatasetIOError(Exception):
    pass


class BadMagicError(DatasetIOError):
    pass


class VersionMismatchError(DatasetIOError):
    pass


class TruncatedFileError(DatasetIOError):
    pass


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"truncated dataset file: wanted {n} bytes, got {len(data)}")
    return data


def write_dataset(path, ds: Dataset) -> None:
    """Binary dataset: PNDS header, per-group metadata, f64 field payloads."""
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIII", DATASET_VERSION, ds.nx, ds.ny, len(ds.groups)))
        for g in ds.groups:
            labelled = [s.label is not None for s in g.samples]
            if any(labelled) and not all(labelled):
                raise DatasetIOError(
                    f"group {g.group_id}: labels must be all-present or all-absent")
            has_labels = 1 if (labelled and all(labelled)) else 0
            fh.write(struct.pack("<IddIB", g.group_id, g.mu, g.sigma,
                                 len(g.samples), has_labels))
            for s in g.samples:
                fh.write(np.ascontiguousarray(s.k, dtype="<f8").tobytes())
                if has_labels:
                    fh.write(np.ascontiguousarray(s.label, dtype="<f8").tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != DATASET_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}")
        version, nx, ny, n_groups = struct.unpack("<IIII", _read_exact(fh, 16))
        if version != DATASET_VERSION:
            raise VersionMismatchError(f"unsupported dataset version {version}")
        n_field = nx * ny
        groups = []
        for _ in range(n_groups):
            gid, mu, sigma, count, has_labels = struct.unpack("<IddIB", _read_exact(fh, 25))
            samples = []
            for idx in range(count):
                k = np.frombuffer(_read_exact(fh, 8 * n_field), dtype="<f8")
                k = k.astype(np.float64).reshape(nx, ny)
                label = None
                if has_labels:
                    label = np.frombuffer(_read_exact(fh, 8 * n_field), dtype="<f8")
                    label = label.astype(np.float64).reshape(nx, ny)
                samples.append(GridSample(k=k, label=label, group_id=gid, sample_index=idx))
            groups.append(SampleGroup(group_id=gid, mu=mu, sigma=sigma, samples=samples))
    return Dataset(nx=nx, ny=ny, groups=groups)


def dataset_manifest(ds: Dataset, samples_per_group: int | None = None) -> dict:
    """Companion manifest: everything needed to regenerate the dataset."""
    return {
        "format": {"magic": DATASET_MAGIC.decode(), "version": DATASET_VERSION},
        "generator": GENERATOR_NAME,
        "seed": ds.seed,
        "length_scale": ds.length_scale,
        "nx": ds.nx,
        "ny": ds.ny,
        "schedule": [[g.mu, g.sigma] for g in ds.groups],
        "samples_per_group": (samples_per_group if samples_per_group is not None
                              else (len(ds.groups[0].samples) if ds.groups else 0)),
        "seed_derivation": "seed XOR splitmix64(group_id, sample_index)",
    }


def write_manifest(path, ds: Dataset) -> None:
    with open(path, "w") as fh:
        json.dump(dataset_manifest(ds), fh, indent=2, sort_keys=True)
        fh.write("\n")
