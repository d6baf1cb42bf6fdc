"""Synthetic dataset generation and the on-disk container.

Two tasks at desk scale: a 2-d point-denoising toy (all ground truths at a
single point, observations perturbed by Gaussian noise) and seismic
deconvolution (sparse reflectivity sections convolved per trace with a
Ricker wavelet). Out-of-distribution variants shift the ground truth: a
fixed bias for the toy, an extra horizontal layer for seismic.

Files are a magic string, a little-endian uint32 header length, a canonical
JSON header, then the raw float64 payloads for x and y. Round-trips are
bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import linops
from .rng import stream

MAGIC = b"ULDATA01"


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    operator: dict
    sigma2_z: float
    split: str
    seed: int
    per_coordinate_variance: bool = False

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.float64)
        if len(self.x) != len(self.y):
            raise ValueError(f"x/y length mismatch: {len(self.x)} vs {len(self.y)}")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.x.shape[1:]

    def build_operator(self) -> linops.LinearOperator:
        return linops.from_descriptor(self.operator)

    def save(self, path) -> None:
        header = {
            "format_version": 1,
            "x_shape": list(self.x.shape),
            "y_shape": list(self.y.shape),
            "operator": self.operator,
            "sigma2_z": self.sigma2_z,
            "split": self.split,
            "seed": self.seed,
            "per_coordinate_variance": self.per_coordinate_variance,
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(np.uint32(len(blob)).tobytes())
            fh.write(blob)
            fh.write(self.x.astype("<f8").tobytes())
            fh.write(self.y.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(path, "rb") as fh:
            magic = fh.read(len(MAGIC))
            if magic != MAGIC:
                raise DatasetFormatError(f"bad magic {magic!r} in {path}")
            (hlen,) = np.frombuffer(fh.read(4), dtype=np.uint32)
            header = json.loads(fh.read(int(hlen)).decode("utf-8"))
            x_shape = tuple(header["x_shape"])
            y_shape = tuple(header["y_shape"])
            nx = int(np.prod(x_shape))
            ny = int(np.prod(y_shape))
            payload = fh.read()
        expected = 8 * (nx + ny)
        if len(payload) != expected:
            raise DatasetFormatError(
                f"corrupt payload in {path}: expected {expected} bytes, got {len(payload)}")
        x = np.frombuffer(payload[:8 * nx], dtype="<f8").reshape(x_shape).copy()
        y = np.frombuffer(payload[8 * nx:], dtype="<f8").reshape(y_shape).copy()
        return cls(x, y, header["operator"], header["sigma2_z"], header["split"],
                   header["seed"], header.get("per_coordinate_variance", False))


def _noise(rng: np.random.Generator, shape: tuple[int, ...], sigma2: float, n: int,
           per_coordinate: bool) -> np.ndarray:
    # Default convention: E||z||^2 = sigma2, i.e. per-coordinate variance
    # sigma2 / n. The flag switches to reading sigma2 per coordinate.
    var = sigma2 if per_coordinate else sigma2 / n
    return rng.standard_normal(shape) * np.sqrt(var)


def gen_toy(n_train: int, n_test: int, sigma2_z: float, seed: int,
            per_coordinate_variance: bool = False) -> tuple[Dataset, Dataset]:
    """2-d denoising toy: every ground truth is the origin."""
    train = gen_toy_ood((0.0, 0.0), n_train, sigma2_z, seed, split="train",
                        per_coordinate_variance=per_coordinate_variance)
    test = gen_toy_ood((0.0, 0.0), n_test, sigma2_z, seed, split="test",
                       per_coordinate_variance=per_coordinate_variance)
    return train, test


def gen_toy_ood(bias, n: int, sigma2_z: float, seed: int, split: str = "ood",
                per_coordinate_variance: bool = False) -> Dataset:
    """Toy dataset with every ground truth at ``bias`` (e.g. the (0.005, 0) shift)."""
    if n < 1:
        raise ValueError("need at least one sample")
    bias = np.asarray(bias, dtype=np.float64)
    dim = bias.size
    rng = stream(seed, "toy-data", split)
    x = np.tile(bias, (n, 1))
    z = _noise(rng, (n, dim), sigma2_z, dim, per_coordinate_variance)
    return Dataset(x, x + z, {"kind": "identity", "shape": [dim]}, sigma2_z, split, seed)


def _reflectivity(rng: np.random.Generator, n: int, traces: int, samples: int,
                  sparsity: float, amp_low: float, amp_high: float) -> np.ndarray:
    mask = rng.random((n, traces, samples)) < sparsity
    mag = rng.uniform(amp_low, amp_high, (n, traces, samples))
    sign = np.where(rng.random((n, traces, samples)) < 0.5, -1.0, 1.0)
    return mask * mag * sign


def gen_seismic(n: int, traces: int = 32, samples: int = 64, sparsity: float = 0.05,
                amp_range: tuple[float, float] = (0.3, 1.0), wavelet_freq: float = 25.0,
                dt: float = 0.004, half_width: int = 10, sigma2_z: float = 2.0,
                seed: int = 0, split: str = "train",
                wavelet: np.ndarray | None = None) -> Dataset:
    """Sparse-spike reflectivity sections observed through a source-wavelet
    convolution (Ricker by default; pass ``wavelet`` to override)."""
    if not 0.0 < sparsity < 1.0:
        raise ValueError("sparsity must lie in (0, 1)")
    if wavelet is not None:
        desc = {"kind": "conv_toeplitz", "traces": traces, "samples": samples,
                "wavelet": np.asarray(wavelet, dtype=np.float64).tolist()}
    else:
        desc = {"kind": "conv_toeplitz", "traces": traces, "samples": samples,
                "wavelet_freq": wavelet_freq, "dt": dt, "half_width": half_width}
    op = linops.from_descriptor(desc)
    rng = stream(seed, "seismic-data", split)
    x = _reflectivity(rng, n, traces, samples, sparsity, *amp_range)
    z = _noise(rng, x.shape, sigma2_z, traces * samples, False)
    return Dataset(x, op.apply(x) + z, desc, sigma2_z, split, seed)


def gen_seismic_ood(base: Dataset, layer_magnitude: float, layer_time: int,
                    seed: int) -> Dataset:
    """Add a constant horizontal layer across all traces, re-observe y = Ax + z."""
    traces, samples = base.sample_shape
    if not 0 <= layer_time < samples:
        raise ValueError(f"layer_time {layer_time} outside trace length {samples}")
    op = base.build_operator()
    x = base.x.copy()
    x[:, :, layer_time] += layer_magnitude
    rng = stream(seed, "seismic-data", "ood")
    z = _noise(rng, x.shape, base.sigma2_z, traces * samples, False)
    return Dataset(x, op.apply(x) + z, base.operator, base.sigma2_z, "ood", seed)
