"""Checkpoint container: versioned header plus raw float64 parameter payload.

Layout: magic, little-endian uint32 header length, canonical JSON header
(format version, architecture descriptor, named parameter shapes in order,
training-config echo, RNG digest, loss history), then the concatenated
little-endian float64 parameter arrays. save -> load -> save is
byte-identical; loading into a mismatched architecture names the first
offending tensor.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .nets import GradientNet, arch_from_descriptor

MAGIC = b"ULCKPT01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    format_version: int
    architecture: dict
    arrays: dict[str, np.ndarray]
    training_config: dict
    rng_digest: str
    loss_history: list[list[float]]

    def build_net(self) -> GradientNet:
        arch = arch_from_descriptor(self.architecture)
        net = GradientNet.build(arch, seed=0, role=self.architecture.get("role", "gradient"))
        load_into(net, self)
        return net


def rng_digest(seed: int, scheme_tag: str) -> str:
    blob = json.dumps({"seed": seed, "scheme": scheme_tag}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(path, net: GradientNet, training_config: dict, digest: str,
                    loss_history: list[list[float]]) -> None:
    params = net.parameters()
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": net.descriptor(),
        "params": [{"name": name, "shape": list(t.shape)} for name, t in params],
        "training_config": training_config,
        "rng_digest": digest,
        "loss_history": loss_history,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(len(blob)).tobytes())
        fh.write(blob)
        for _, t in params:
            fh.write(t.data.astype("<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r} in {path}")
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise CheckpointError(f"truncated header in {path}")
        (hlen,) = np.frombuffer(raw_len, dtype=np.uint32)
        raw_header = fh.read(int(hlen))
        if len(raw_header) != int(hlen):
            raise CheckpointError(f"truncated header in {path}")
        header = json.loads(raw_header.decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {header.get('format_version')!r}")
        payload = fh.read()
    sizes = [int(np.prod(p["shape"])) for p in header["params"]]
    expected = 8 * sum(sizes)
    if len(payload) != expected:
        raise CheckpointError(
            f"corrupt payload in {path}: expected {expected} bytes, got {len(payload)}")
    arrays = {}
    offset = 0
    for meta, size in zip(header["params"], sizes):
        arrays[meta["name"]] = np.frombuffer(
            payload[offset:offset + 8 * size], dtype="<f8").reshape(meta["shape"]).copy()
        offset += 8 * size
    return Checkpoint(header["format_version"], header["architecture"], arrays,
                      header["training_config"], header["rng_digest"],
                      header["loss_history"])


def load_into(net: GradientNet, ckpt: Checkpoint) -> None:
    """Copy checkpoint weights into an existing net, checking architecture.

    Shape checks run tensor by tensor so the error names the first offending
    parameter; the descriptor check then catches mismatches that leave shapes
    intact (activation, role).
    """
    for name, t in net.parameters():
        if name not in ckpt.arrays:
            raise CheckpointError(f"architecture mismatch at parameter {name!r}: "
                                  f"missing from checkpoint")
        src = ckpt.arrays[name]
        if src.shape != t.shape:
            raise CheckpointError(f"architecture mismatch at parameter {name!r}: "
                                  f"checkpoint shape {src.shape} != net shape {t.shape}")
    if net.descriptor() != ckpt.architecture:
        raise CheckpointError(
            f"architecture mismatch: net {net.descriptor()} vs checkpoint {ckpt.architecture}")
    for name, t in net.parameters():
        t.data = ckpt.arrays[name].copy()
