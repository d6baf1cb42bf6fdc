"""Learned gradient and proximal networks for unrolled solvers.

Two architectures: a small MLP for the 2-d toy task and a 1-d DnCNN-style
convolutional stack for seismic sections. Gradient-role nets return the
learned gradient field directly; proximal-role nets are residual, so a
zero-initialized stack acts as the identity map and the unrolled solver
degenerates to plain gradient descent on the data term.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import stream


@dataclass(frozen=True)
class MlpArch:
    widths: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ValueError(f"invalid MLP widths {self.widths}")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    def param_count(self) -> int:
        return sum(n_in * n_out + n_out for n_in, n_out in zip(self.widths, self.widths[1:]))

    def descriptor(self) -> dict:
        return {"type": "mlp", "widths": list(self.widths), "activation": self.activation}


@dataclass(frozen=True)
class Dncnn1dArch:
    depth: int
    channels: int
    kernel_len: int = 3
    activation: str = "relu"

    def __post_init__(self):
        if self.depth < 2 or self.channels < 1:
            raise ValueError(f"invalid DnCNN spec depth={self.depth} channels={self.channels}")
        if self.kernel_len % 2 == 0:
            raise ValueError("kernel length must be odd for same padding")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    def layer_channels(self) -> list[tuple[int, int]]:
        chans = [1] + [self.channels] * (self.depth - 1) + [1]
        return list(zip(chans[:-2], chans[1:-1])) + [(chans[-2], chans[-1])]

    def param_count(self) -> int:
        return sum(co * ci * self.kernel_len + co
                   for ci, co in ((ci, co) for ci, co in self.layer_channels()))

    def descriptor(self) -> dict:
        return {"type": "dncnn1d", "depth": self.depth, "channels": self.channels,
                "kernel_len": self.kernel_len, "activation": self.activation}


def arch_from_descriptor(desc: dict):
    kind = desc.get("type")
    if kind == "mlp":
        return MlpArch(tuple(desc["widths"]), desc.get("activation", "tanh"))
    if kind == "dncnn1d":
        return Dncnn1dArch(desc["depth"], desc["channels"], desc.get("kernel_len", 3),
                           desc.get("activation", "relu"))
    raise ValueError(f"unknown architecture type {kind!r}")


def _activation_fn(name: str):
    return ad.tanh if name == "tanh" else ad.relu


class GradientNet:
    """Learned map R^n -> R^n with named float64 parameters.

    role "gradient": output is the learned gradient field itself.
    role "proximal": output is input + stack(input) (residual form).
    """

    def __init__(self, arch, role: str, params: list[tuple[str, Tensor]], seed: int):
        if role not in ("gradient", "proximal"):
            raise ValueError(f"unknown net role {role!r}")
        self.arch = arch
        self.role = role
        self.seed = seed
        self._params = params

    @classmethod
    def build(cls, arch, seed: int, role: str = "gradient") -> "GradientNet":
        """Deterministic initialization: Glorot-uniform for tanh stacks,
        He-normal for relu, zero biases."""
        rng = stream(seed, "net-init")
        params: list[tuple[str, Tensor]] = []
        if isinstance(arch, MlpArch):
            for i, (n_in, n_out) in enumerate(zip(arch.widths, arch.widths[1:])):
                w = _init_weights(rng, arch.activation, (n_in, n_out), fan_in=n_in, fan_out=n_out)
                params.append((f"w{i}", Tensor(w, requires_grad=True)))
                params.append((f"b{i}", Tensor(np.zeros(n_out), requires_grad=True)))
        elif isinstance(arch, Dncnn1dArch):
            for i, (ci, co) in enumerate(arch.layer_channels()):
                fan_in = ci * arch.kernel_len
                fan_out = co * arch.kernel_len
                k = _init_weights(rng, arch.activation, (co, ci, arch.kernel_len),
                                  fan_in=fan_in, fan_out=fan_out)
                params.append((f"k{i}", Tensor(k, requires_grad=True)))
                params.append((f"b{i}", Tensor(np.zeros(co), requires_grad=True)))
        else:
            raise TypeError(f"unsupported architecture {type(arch).__name__}")
        return cls(arch, role, params, seed)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return self._params

    def param_count(self) -> int:
        return sum(t.size for _, t in self._params)

    def zero_grad(self) -> None:
        for _, t in self._params:
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self._params:
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r}")
            src = np.asarray(arrays[name], dtype=np.float64)
            if src.shape != t.shape:
                raise ValueError(f"parameter {name!r}: shape {src.shape} != {t.shape}")
            t.data = src.copy()

    @contextmanager
    def frozen(self):
        """Temporarily stop gradients flowing into the parameters."""
        for _, t in self._params:
            t.requires_grad = False
        try:
            yield self
        finally:
            for _, t in self._params:
                t.requires_grad = True

    def descriptor(self) -> dict:
        d = self.arch.descriptor()
        d["role"] = self.role
        return d

    def forward(self, x: Tensor) -> Tensor:
        if isinstance(self.arch, MlpArch):
            out = self._forward_mlp(x)
        else:
            out = self._forward_dncnn(x)
        if self.role == "proximal":
            out = ad.add(x, out)
        return out

    def _forward_mlp(self, x: Tensor) -> Tensor:
        widths = self.arch.widths
        if x.shape[-1] != widths[0]:
            raise ad.ShapeMismatch("mlp forward", x.shape, (widths[0],))
        squeeze = x.ndim == 1
        h = ad.reshape(x, (1, -1)) if squeeze else ad.reshape(x, (-1, widths[0]))
        act = _activation_fn(self.arch.activation)
        n_layers = len(widths) - 1
        for i in range(n_layers):
            w = self._params[2 * i][1]
            b = self._params[2 * i + 1][1]
            h = ad.add_bias(ad.matmul(h, w), b)
            if i < n_layers - 1:
                h = act(h)
        return ad.reshape(h, x.shape)

    def _forward_dncnn(self, x: Tensor) -> Tensor:
        # Trailing axis is time; every other axis (batch, traces) is folded
        # into rows so one conv call covers the whole batch.
        samples = x.shape[-1]
        h = ad.reshape(x, (-1, 1, samples))
        act = _activation_fn(self.arch.activation)
        n_layers = self.arch.depth
        for i in range(n_layers):
            k = self._params[2 * i][1]
            b = self._params[2 * i + 1][1]
            h = ad.add_channel_bias(ad.conv1d(h, k), b)
            if i < n_layers - 1:
                h = act(h)
        return ad.reshape(h, x.shape)

    def apply_array(self, x: np.ndarray) -> np.ndarray:
        """Tape-free convenience evaluation on a plain array."""
        return self.forward(Tensor(np.asarray(x, dtype=np.float64))).data


def _init_weights(rng: np.random.Generator, activation: str, shape, fan_in: int,
                  fan_out: int) -> np.ndarray:
    if activation == "tanh":
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def lipschitz_estimate(net: GradientNet, input_shape: tuple[int, ...], probes: int = 64,
                       seed: int = 0, scale: float = 1.0) -> float:
    """Lower estimate of the Lipschitz constant of the net as a map on inputs.

    Maximizes the ratio ||f(x+d) - f(x)|| / ||d|| over random probe pairs and
    over power-iterated Jacobian directions at sampled base points (including
    x = 0, where smooth activations are steepest). The true constant can only
    be larger, so callers add declared slack.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    best = 0.0
    # Each probe owns a derived stream, so larger probe counts extend the
    # probe set and the estimate is monotone in ``probes``.
    for i in range(probes):
        rng = stream(seed, "lipschitz-probe", i)
        if i % 2 == 0:
            x0 = np.zeros(input_shape) if i == 0 else rng.standard_normal(input_shape) * scale
            best = max(best, _jacobian_sigma_max(net, x0, rng))
        else:
            x0 = rng.standard_normal(input_shape) * scale
            d = rng.standard_normal(input_shape)
            d *= 10.0 ** rng.uniform(-3, 0) / max(np.linalg.norm(d), 1e-300)
            fx = net.apply_array(x0)
            fxd = net.apply_array(x0 + d)
            best = max(best, float(np.linalg.norm(fxd - fx) / np.linalg.norm(d)))
    return best


def _jacobian_sigma_max(net: GradientNet, x0: np.ndarray, rng: np.random.Generator,
                        iters: int = 30, fd_step: float = 1e-6) -> float:
    """Power iteration for the top singular value of the Jacobian at x0.

    Jv comes from central differences, Jt u from a reverse-mode pass.
    """
    v = rng.standard_normal(x0.shape)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return 0.0
    v /= nv
    sigma = 0.0
    for _ in range(iters):
        jv = (net.apply_array(x0 + fd_step * v) - net.apply_array(x0 - fd_step * v)) / (2 * fd_step)
        sigma_new = float(np.linalg.norm(jv))
        if sigma_new == 0.0:
            return max(sigma, 0.0)
        with ad.Tape() as tape, net.frozen():
            xt = Tensor(x0, requires_grad=True)
            out = net.forward(xt)
            proj = ad.dot(out, Tensor(jv))
            tape.backward(proj)
        w = xt.grad
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return max(sigma, sigma_new)
        v = w / nw
        if sigma > 0.0 and abs(sigma_new - sigma) <= 1e-12 * sigma:
            return sigma_new
        sigma = sigma_new
    return sigma
