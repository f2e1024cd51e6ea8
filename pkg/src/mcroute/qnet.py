"""Convolutional Q-networks in plain numpy: forward, exact backward, Adam.

Fixed architecture: three valid 3x3 convolutions (128, 256, 128 channels)
with LeakyReLU(0.01) after each, then a single fully connected head. An
n x n input therefore needs n >= 7 and flattens to 128 * (n - 6)^2 features.
All math runs in float64; convolutions are lowered to GEMM via
sliding-window views so the heavy lifting stays in BLAS.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

_MAGIC = b"MCRQ1\n"


class CheckpointError(ValueError):
    """Raised for unreadable or incompatible checkpoint files."""


class NumericsError(RuntimeError):
    """Raised when training math produces non-finite values.

    Carries optional `arrays` (parameter snapshot for a diagnostic
    checkpoint) and `context` (episode, learn step) filled in by callers
    that know them.
    """

    def __init__(self, message: str):
        super().__init__(message)
        self.arrays: dict[str, np.ndarray] | None = None
        self.context: dict = {}


@dataclass(frozen=True)
class NetSpec:
    grid: int  # spatial side n
    in_channels: int
    out_dim: int
    conv_channels: tuple[int, int, int] = (128, 256, 128)
    kernel: int = 3
    leaky_slope: float = 0.01

    def __post_init__(self):
        shrink = 3 * (self.kernel - 1)
        if self.grid - shrink < 1:
            raise ValueError(f"grid {self.grid} too small for three {self.kernel}x{self.kernel} convolutions")

    @property
    def feature_side(self) -> int:
        return self.grid - 3 * (self.kernel - 1)

    @property
    def flat_dim(self) -> int:
        return self.conv_channels[2] * self.feature_side**2

    def to_dict(self) -> dict:
        return {
            "grid": self.grid,
            "in_channels": self.in_channels,
            "out_dim": self.out_dim,
            "conv_channels": list(self.conv_channels),
            "kernel": self.kernel,
            "leaky_slope": self.leaky_slope,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetSpec":
        return cls(
            grid=int(d["grid"]),
            in_channels=int(d["in_channels"]),
            out_dim=int(d["out_dim"]),
            conv_channels=tuple(d["conv_channels"]),
            kernel=int(d["kernel"]),
            leaky_slope=float(d["leaky_slope"]),
        )


PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b", "fc_w", "fc_b")


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    """(B, C, H, W) -> GEMM-ready columns (B*H'*W', C*k*k)."""
    b = x.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    # (B, C, H', W', k, k) -> (B, H', W', C, k, k)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * win.shape[2] * win.shape[3], -1)


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Valid convolution; returns (output (B, O, H', W'), columns for backward)."""
    bs, _, h, wd = x.shape
    o, _, k, _ = w.shape
    cols = _windows(x, k)
    out = cols @ w.reshape(o, -1).T + b
    hp, wp = h - k + 1, wd - k + 1
    return out.reshape(bs, hp, wp, o).transpose(0, 3, 1, 2), cols


def _conv_backward(
    cols: np.ndarray, x_shape: tuple, w: np.ndarray, dout: np.ndarray, need_dx: bool
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Gradients for a valid convolution given the cached input columns."""
    bs, c, h, wd = x_shape
    o, _, k, _ = w.shape
    dmat = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, o)
    dw = (dmat.T @ cols).reshape(w.shape)
    db = dmat.sum(axis=0)
    dx = None
    if need_dx:
        # data gradient = full correlation of dout with the rotated kernel
        pad = k - 1
        dpad = np.pad(dout, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        w_rot = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dcols = _windows(dpad, k)
        dx = (dcols @ w_rot.reshape(c, -1).T).reshape(bs, h, wd, c).transpose(0, 3, 1, 2)
        dx = np.ascontiguousarray(dx)
    return dw, db, dx


class QNetwork:
    """Parameter container plus forward/backward for the fixed architecture."""

    def __init__(self, spec: NetSpec, params: dict[str, np.ndarray]):
        self.spec = spec
        self.params = params

    @classmethod
    def create(cls, spec: NetSpec, rng: np.random.Generator) -> "QNetwork":
        """He-scaled normal weights, zero biases."""
        c1, c2, c3 = spec.conv_channels
        k = spec.kernel
        dims = {
            "conv1_w": (c1, spec.in_channels, k, k),
            "conv2_w": (c2, c1, k, k),
            "conv3_w": (c3, c2, k, k),
            "fc_w": (spec.out_dim, spec.flat_dim),
        }
        params: dict[str, np.ndarray] = {}
        for name, shape in dims.items():
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params["conv1_b"] = np.zeros(c1)
        params["conv2_b"] = np.zeros(c2)
        params["conv3_b"] = np.zeros(c3)
        params["fc_b"] = np.zeros(spec.out_dim)
        return cls(spec, params)

    def copy(self) -> "QNetwork":
        return QNetwork(self.spec, {k: v.copy() for k, v in self.params.items()})

    def sync_from(self, other: "QNetwork") -> None:
        """Overwrite parameters with a snapshot of another network's."""
        if other.spec != self.spec:
            raise ValueError("cannot sync networks with different specs")
        for k in PARAM_NAMES:
            np.copyto(self.params[k], other.params[k])

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        s = self.spec
        if x.shape[1:] != (s.in_channels, s.grid, s.grid):
            raise ValueError(
                f"expected input (*, {s.in_channels}, {s.grid}, {s.grid}), got {x.shape}"
            )
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        """Q-values (B, out_dim) plus the activation cache for backward."""
        x = self._check_input(x)
        p = self.params
        slope = self.spec.leaky_slope
        cache: dict = {"x_shape": x.shape}

        z1, cols1 = _conv_forward(x, p["conv1_w"], p["conv1_b"])
        a1 = np.where(z1 > 0, z1, slope * z1)
        z2, cols2 = _conv_forward(a1, p["conv2_w"], p["conv2_b"])
        a2 = np.where(z2 > 0, z2, slope * z2)
        z3, cols3 = _conv_forward(a2, p["conv3_w"], p["conv3_b"])
        a3 = np.where(z3 > 0, z3, slope * z3)

        flat = a3.reshape(x.shape[0], -1)
        q = flat @ p["fc_w"].T + p["fc_b"]

        cache.update(
            cols1=cols1, z1=z1, a1_shape=a1.shape,
            cols2=cols2, z2=z2, a2_shape=a2.shape,
            cols3=cols3, z3=z3, a3_shape=a3.shape,
            flat=flat,
        )
        return q, cache

    def backward(self, cache: dict, dq: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients for dL/dq; input gradient is never needed."""
        p = self.params
        slope = self.spec.leaky_slope

        grads: dict[str, np.ndarray] = {}
        grads["fc_b"] = dq.sum(axis=0)
        grads["fc_w"] = dq.T @ cache["flat"]
        dflat = dq @ p["fc_w"]
        da3 = dflat.reshape(cache["a3_shape"])

        dz3 = da3 * np.where(cache["z3"] > 0, 1.0, slope)
        grads["conv3_w"], grads["conv3_b"], da2 = _conv_backward(
            cache["cols3"], cache["a2_shape"], p["conv3_w"], dz3, need_dx=True
        )
        dz2 = da2 * np.where(cache["z2"] > 0, 1.0, slope)
        grads["conv2_w"], grads["conv2_b"], da1 = _conv_backward(
            cache["cols2"], cache["a1_shape"], p["conv2_w"], dz2, need_dx=True
        )
        dz1 = da1 * np.where(cache["z1"] > 0, 1.0, slope)
        grads["conv1_w"], grads["conv1_b"], _ = _conv_backward(
            cache["cols1"], cache["x_shape"], p["conv1_w"], dz1, need_dx=False
        )
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericsError(f"non-finite gradient in {name}")
        return grads


def controller_specs(node_count: int, max_degree: int) -> tuple[NetSpec, NetSpec]:
    """(subgoal-level spec, edge-level spec) for an n-node topology."""
    meta = NetSpec(grid=node_count, in_channels=4, out_dim=node_count)
    intr = NetSpec(grid=node_count, in_channels=5, out_dim=max_degree)
    return meta, intr


# ---------------------------------------------------------------------------
# Loss and targets


def huber(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Elementwise smooth-L1: quadratic inside the unit band, linear outside."""
    d = np.abs(np.asarray(pred, dtype=np.float64) - target)
    return np.where(d < 1.0, 0.5 * d * d, d - 0.5)


def huber_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    d = np.asarray(pred, dtype=np.float64) - target
    return np.clip(d, -1.0, 1.0)


def weighted_huber_loss(pred: np.ndarray, target: np.ndarray, weights: np.ndarray) -> float:
    """Mean of importance-weighted elementwise Huber terms."""
    return float(np.mean(weights * huber(pred, target)))


def td_targets(
    rewards: Sequence[float],
    next_states: Sequence[np.ndarray | None],
    gamma: float,
    target_net: QNetwork,
) -> np.ndarray:
    """r + gamma * max_a Q_target(s', a); terminal entries keep the bare reward."""
    y = np.asarray(rewards, dtype=np.float64).copy()
    live = [i for i, s in enumerate(next_states) if s is not None]
    if live:
        batch = np.stack([next_states[i] for i in live]).astype(np.float64)
        q_next = target_net.forward(batch)
        y[np.asarray(live)] += gamma * q_next.max(axis=1)
    return y


class Adam:
    """Standard Adam with bias correction; state keyed like the param dict."""

    def __init__(self, params: Mapping[str, np.ndarray], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam_m_{k}": v for k, v in self.m.items()}
        out.update({f"adam_v_{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        self.t = t
        for k in self.m:
            np.copyto(self.m[k], arrays[f"adam_m_{k}"])
            np.copyto(self.v[k], arrays[f"adam_v_{k}"])


# ---------------------------------------------------------------------------
# Gradient verification


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: dict[str, float]
    probes: dict[str, int]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(v <= self.tolerance for v in self.max_rel_err.values())


def gradient_check(
    net: QNetwork,
    rng: np.random.Generator,
    probes_per_array: int = 100,
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    batch: int = 2,
) -> GradCheckReport:
    """Central-difference check of the full backward pass.

    Loss: importance-weighted Huber on randomly chosen actions against random
    targets, matching the training objective exactly. The probe step balances
    truncation against fp64 roundoff in the difference quotient.
    """
    s = net.spec
    x = rng.normal(0.0, 1.0, size=(batch, s.in_channels, s.grid, s.grid))
    actions = rng.integers(0, s.out_dim, size=batch)
    targets = rng.normal(0.0, 1.0, size=batch)
    weights = rng.uniform(0.5, 1.0, size=batch)
    rows = np.arange(batch)

    def probe_loss() -> tuple[float, tuple]:
        q, c = net.forward_cached(x)
        t = q[rows, actions]
        # branch signature: LeakyReLU signs plus the Huber regime; a probe
        # whose +/- evaluations disagree straddles a kink where the loss is
        # not differentiable, so it cannot be checked by finite differences
        sig = (
            np.signbit(c["z1"]).tobytes(),
            np.signbit(c["z2"]).tobytes(),
            np.signbit(c["z3"]).tobytes(),
            (np.abs(t - targets) < 1.0).tobytes(),
        )
        return weighted_huber_loss(t, targets, weights), sig

    q, cache = net.forward_cached(x)
    taken = q[rows, actions]
    dq = np.zeros_like(q)
    dq[rows, actions] = weights * huber_grad(taken, targets) / batch
    grads = net.backward(cache, dq)

    max_err: dict[str, float] = {}
    probe_counts: dict[str, int] = {}
    for name in PARAM_NAMES:
        arr = net.params[name]
        k = min(probes_per_array, arr.size)
        worst = 0.0
        valid = 0
        for fi in rng.permutation(arr.size):
            if valid >= k:
                break
            orig = arr.flat[fi]
            arr.flat[fi] = orig + eps
            up, sig_up = probe_loss()
            arr.flat[fi] = orig - eps
            down, sig_down = probe_loss()
            arr.flat[fi] = orig
            if sig_up != sig_down:
                continue
            numeric = (up - down) / (2.0 * eps)
            analytic = grads[name].flat[fi]
            denom = max(abs(numeric) + abs(analytic), 1e-8)
            worst = max(worst, abs(numeric - analytic) / denom)
            valid += 1
        max_err[name] = worst
        probe_counts[name] = valid
    return GradCheckReport(max_rel_err=max_err, probes=probe_counts, tolerance=tolerance)


# ---------------------------------------------------------------------------
# Checkpoints: magic, one JSON header line, then raw little-endian arrays.


def save_checkpoint(path: str, arrays: Mapping[str, np.ndarray], meta: Mapping) -> None:
    """Byte-deterministic dump: sorted names, fixed JSON separators, raw f8/i8."""
    names = sorted(arrays)
    index = []
    for name in names:
        a = np.ascontiguousarray(arrays[name], dtype=np.float64)
        index.append({"name": name, "shape": list(a.shape)})
    header = json.dumps({"version": 1, "arrays": index, "meta": dict(meta)},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name], dtype=np.float64).tobytes())


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(_MAGIC)
    if len(blob) < off + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<Q", blob, off)
    off += 8
    try:
        header = json.loads(blob[off:off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    if header.get("version") != 1:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    off += hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return arrays, header["meta"]
