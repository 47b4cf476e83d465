"""Controller network: time-distributed conv/max-pool feature extractor,
a stateful GRU and three dense layers, with exact reverse-mode gradients of
a weighted sum of outputs and the momentum/L2 weight update.

All trainable parameters live in one flat float64 vector ``alpha``; the
training (window) and inference (single-step) replicas are just different
window lengths over that same vector.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DnnSpec",
    "Network",
    "DnnState",
    "TrainingHyper",
    "Observation",
    "forward",
    "weighted_output_grad",
    "apply_update",
    "update_weights",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class DnnSpec:
    """Network topology.

    ``n_aux_controls`` is the length of the previous-control input (K, or
    2K for the combined controller that also sees the SPGD part).
    ``control_scale`` multiplies those inputs before they enter the GRU and
    ``image_scale`` multiplies the sensor frames before the first convolution.
    ``output_scale`` multiplies the linear output layer, i.e. the units in
    which the network expresses controls.
    """

    image_shape: tuple = (256, 256)
    K: int = 2
    window: int = 4
    conv_channels: tuple = (4, 8, 8)
    kernel: int = 5
    pool: tuple = (4, 4, 4)
    conv_activation: str = "relu"
    gru_mult: float = 10.0
    dense_mult: float = 6.0
    n_aux_controls: int | None = None
    control_scale: float = 1.0
    image_scale: float = 1.0
    output_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        object.__setattr__(self, "conv_channels", tuple(int(v) for v in self.conv_channels))
        pool = self.pool if isinstance(self.pool, (tuple, list)) else (self.pool,) * len(self.conv_channels)
        object.__setattr__(self, "pool", tuple(int(v) for v in pool))
        if len(self.pool) != len(self.conv_channels):
            raise ValueError("need one pool size per conv block")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.window < 1 or self.K < 1:
            raise ValueError("window and K must be >= 1")
        total = int(np.prod(self.pool))
        if self.image_shape[0] % total or self.image_shape[1] % total:
            raise ValueError(f"image shape {self.image_shape} not divisible by pooling {total}")
        if self.conv_activation not in ("relu", "tanh", "linear"):
            raise ValueError(f"unknown activation {self.conv_activation!r}")

    @property
    def aux_size(self) -> int:
        return 1 + (self.K if self.n_aux_controls is None else self.n_aux_controls)

    @property
    def feature_size(self) -> int:
        total = int(np.prod(self.pool))
        return self.conv_channels[-1] * (self.image_shape[0] // total) * (self.image_shape[1] // total)

    @property
    def gru_width(self) -> int:
        return max(1, int(round(self.gru_mult * self.K)))

    @property
    def dense_width(self) -> int:
        return max(1, int(round(self.dense_mult * self.K)))

    def replica(self, window: int) -> "DnnSpec":
        d = asdict(self)
        d["window"] = window
        return DnnSpec(**d)

    def digest(self) -> bytes:
        d = asdict(self)
        d.pop("window")  # replicas share parameters
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).digest()


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _act(name, x):
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    return x


def _act_grad(name, y):
    # derivative expressed through the activation output
    if name == "relu":
        return (y > 0).astype(float)
    if name == "tanh":
        return 1.0 - y * y
    return np.ones_like(y)


class Network:
    """Parameter layout plus forward/backward passes for a :class:`DnnSpec`."""

    def __init__(self, spec: DnnSpec):
        self.spec = spec
        shapes = []
        c_in = 1
        for i, c in enumerate(spec.conv_channels):
            shapes += [(f"conv{i}.W", (c, c_in, spec.kernel, spec.kernel)), (f"conv{i}.b", (c,))]
            c_in = c
        d_in, H, D = spec.feature_size + spec.aux_size, spec.gru_width, spec.dense_width
        shapes += [("gru.Wx", (3 * H, d_in)), ("gru.Uh", (3 * H, H)), ("gru.b", (3 * H,))]
        shapes += [("d1.W", (D, H)), ("d1.b", (D,)), ("d2.W", (D, D)), ("d2.b", (D,))]
        shapes += [("out.W", (spec.K, D)), ("out.b", (spec.K,))]
        self.shapes = dict(shapes)
        self.offsets = {}
        off = 0
        for name, shp in shapes:
            size = int(np.prod(shp))
            self.offsets[name] = (off, off + size)
            off += size
        self.size = off

    def views(self, alpha: np.ndarray) -> dict:
        return {n: alpha[a:b].reshape(self.shapes[n]) for n, (a, b) in self.offsets.items()}

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Glorot-uniform weights, zero biases."""
        alpha = np.zeros(self.size)
        p = self.views(alpha)
        for name, w in p.items():
            if name.endswith(".b"):
                continue
            if name.startswith("conv"):
                rf = w.shape[2] * w.shape[3]
                fan_in, fan_out = w.shape[1] * rf, w.shape[0] * rf
            elif name.startswith("gru"):
                fan_in, fan_out = w.shape[1], w.shape[0] // 3
            else:
                fan_in, fan_out = w.shape[1], w.shape[0]
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            w[...] = rng.uniform(-lim, lim, w.shape)
        return alpha

    # -------------------------------------------------------------- forward

    def _conv_forward(self, x, W, b):
        k = W.shape[-1]
        pad = k // 2
        T, C, Hh, Ww = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))  # T, C, H, W, k, k
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(T * Hh * Ww, C * k * k)
        y = cols @ W.reshape(W.shape[0], -1).T + b
        return y.reshape(T, Hh, Ww, -1).transpose(0, 3, 1, 2), cols

    @staticmethod
    def _pool_forward(x, p):
        T, C, Hh, Ww = x.shape
        blocks = x.reshape(T, C, Hh // p, p, Ww // p, p).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(T, C, Hh // p, Ww // p, p * p)
        arg = blocks.argmax(axis=-1)
        return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], arg

    def forward(self, alpha, frames, aux, h0, keep=False):
        """Run T steps. frames (T, Nx, Ny), aux (T, A), h0 (H,).

        Returns outputs (T, K), final hidden state and (if ``keep``) a cache
        for :meth:`backward`.
        """
        spec = self.spec
        p = self.views(alpha)
        T = frames.shape[0]
        x = frames[:, None, :, :].astype(float)
        convs = []
        for i, pool in enumerate(spec.pool):
            y, cols = self._conv_forward(x, p[f"conv{i}.W"], p[f"conv{i}.b"])
            y = _act(spec.conv_activation, y)
            pooled, arg = self._pool_forward(y, pool)
            convs.append((cols, y.shape, y if keep else None, arg) if keep else None)
            x = pooled
        feat = x.reshape(T, -1)
        xin = np.concatenate([feat, aux], axis=1)

        H = spec.gru_width
        Wx, Uh, bg = p["gru.Wx"], p["gru.Uh"], p["gru.b"]
        ax = xin @ Wx.T + bg  # T, 3H (input part of all gates)
        h = np.array(h0, dtype=float)
        hs, zs, rs, ns, hprev = [], [], [], [], []
        for t in range(T):
            z = _sigmoid(ax[t, :H] + Uh[:H] @ h)
            r = _sigmoid(ax[t, H : 2 * H] + Uh[H : 2 * H] @ h)
            n = np.tanh(ax[t, 2 * H :] + Uh[2 * H :] @ (r * h))
            hprev.append(h)
            h = z * h + (1 - z) * n
            hs.append(h)
            zs.append(z)
            rs.append(r)
            ns.append(n)
        hseq = np.array(hs)
        d1 = np.tanh(hseq @ p["d1.W"].T + p["d1.b"])
        d2 = np.tanh(d1 @ p["d2.W"].T + p["d2.b"])
        out = spec.output_scale * (d2 @ p["out.W"].T + p["out.b"])
        cache = None
        if keep:
            cache = dict(convs=convs, xin=xin, hseq=hseq, hprev=np.array(hprev), z=np.array(zs),
                         r=np.array(rs), n=np.array(ns), d1=d1, d2=d2, T=T)
        return out, h, cache

    # ------------------------------------------------------------- backward

    def backward(self, alpha, cache, dout):
        """Gradient of sum(dout * outputs) w.r.t. alpha (h0 held constant)."""
        spec = self.spec
        p = self.views(alpha)
        grad = np.zeros(self.size)
        g = self.views(grad)
        T, H = cache["T"], spec.gru_width
        d1, d2, hseq = cache["d1"], cache["d2"], cache["hseq"]
        dout = dout * spec.output_scale

        g["out.W"][...] = dout.T @ d2
        g["out.b"][...] = dout.sum(0)
        da2 = (dout @ p["out.W"]) * (1 - d2 * d2)
        g["d2.W"][...] = da2.T @ d1
        g["d2.b"][...] = da2.sum(0)
        da1 = (da2 @ p["d2.W"]) * (1 - d1 * d1)
        g["d1.W"][...] = da1.T @ hseq
        g["d1.b"][...] = da1.sum(0)
        dh_out = da1 @ p["d1.W"]

        Uh = p["gru.Uh"]
        Uz, Ur, Un = Uh[:H], Uh[H : 2 * H], Uh[2 * H :]
        z, r, n, hprev = cache["z"], cache["r"], cache["n"], cache["hprev"]
        dax = np.zeros((T, 3 * H))
        dUh = g["gru.Uh"]
        dh = np.zeros(H)
        for t in range(T - 1, -1, -1):
            dh = dh + dh_out[t]
            hp = hprev[t]
            dz = dh * (hp - n[t])
            dn = dh * (1 - z[t])
            dhp = dh * z[t]
            dan = dn * (1 - n[t] ** 2)
            drh = Un.T @ dan
            dr = drh * hp
            dhp += drh * r[t]
            daz = dz * z[t] * (1 - z[t])
            dar = dr * r[t] * (1 - r[t])
            dhp += Uz.T @ daz + Ur.T @ dar
            dUh[:H] += np.outer(daz, hp)
            dUh[H : 2 * H] += np.outer(dar, hp)
            dUh[2 * H :] += np.outer(dan, r[t] * hp)
            dax[t, :H], dax[t, H : 2 * H], dax[t, 2 * H :] = daz, dar, dan
            dh = dhp
        g["gru.Wx"][...] = dax.T @ cache["xin"]
        g["gru.b"][...] = dax.sum(0)
        dxin = dax @ p["gru.Wx"]

        nf = spec.feature_size
        dx = dxin[:, :nf]
        for i in range(len(spec.pool) - 1, -1, -1):
            cols, yshape, y, arg = cache["convs"][i]
            pool = spec.pool[i]
            Tt, C, Hh, Ww = yshape
            dx = dx.reshape(Tt, C, Hh // pool, Ww // pool)
            dblocks = np.zeros((Tt, C, Hh // pool, Ww // pool, pool * pool))
            np.put_along_axis(dblocks, arg[..., None], dx[..., None], axis=-1)
            dy = dblocks.reshape(Tt, C, Hh // pool, Ww // pool, pool, pool).transpose(0, 1, 2, 4, 3, 5)
            dy = dy.reshape(Tt, C, Hh, Ww) * _act_grad(spec.conv_activation, y)
            W = p[f"conv{i}.W"]
            dymat = dy.transpose(0, 2, 3, 1).reshape(-1, C)
            g[f"conv{i}.W"][...] = (dymat.T @ cols).reshape(W.shape)
            g[f"conv{i}.b"][...] = dymat.sum(0)
            if i == 0:
                break
            k = W.shape[-1]
            pad = k // 2
            c_in = W.shape[1]
            dcols = (dymat @ W.reshape(C, -1)).reshape(Tt, Hh, Ww, c_in, k, k)
            dxp = np.zeros((Tt, c_in, Hh + 2 * pad, Ww + 2 * pad))
            for a in range(k):
                for b in range(k):
                    dxp[:, :, a : a + Hh, b : b + Ww] += dcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
            dx = dxp[:, :, pad : pad + Hh, pad : pad + Ww]
        return grad


# ---------------------------------------------------------------- state


@dataclass(frozen=True)
class TrainingHyper:
    gamma_s: float = 0.0
    gamma_l: float = 0.0
    nu: float = 0.0

    def __post_init__(self):
        if self.gamma_s < 0 or self.gamma_l < 0 or not 0 <= self.nu < 1:
            raise ValueError("need gamma_s, gamma_l >= 0 and 0 <= nu < 1")


@dataclass
class Observation:
    image: np.ndarray
    J: float
    u_prev: np.ndarray


@dataclass
class DnnState:
    """Shared parameters, momentum and the inference replica's hidden state."""

    spec: DnnSpec
    alpha: np.ndarray
    g: np.ndarray = None
    h: np.ndarray = None
    net: Network = field(default=None, repr=False)

    def __post_init__(self):
        if self.net is None:
            self.net = Network(self.spec)
        self.alpha = np.asarray(self.alpha, dtype=float)
        if self.alpha.shape != (self.net.size,):
            raise ValueError(f"expected {self.net.size} parameters, got {self.alpha.shape}")
        self.g = np.zeros(self.net.size) if self.g is None else np.asarray(self.g, dtype=float)
        self.h = np.zeros(self.spec.gru_width) if self.h is None else np.asarray(self.h, dtype=float)

    @classmethod
    def create(cls, spec: DnnSpec, seed: int = 0, zero: bool = False) -> "DnnState":
        net = Network(spec)
        alpha = np.zeros(net.size) if zero else net.init_params(np.random.default_rng(seed))
        return cls(spec, alpha, net=net)

    @property
    def P(self) -> int:
        return self.net.size

    def reset_recurrent(self):
        self.h = np.zeros(self.spec.gru_width)

    def aux(self, obs: Observation) -> np.ndarray:
        return np.concatenate([[obs.J], np.asarray(obs.u_prev, dtype=float) * self.spec.control_scale])

    def _stack(self, window):
        frames = np.stack([o.image for o in window]) * self.spec.image_scale
        if frames.shape[1:] != self.spec.image_shape:
            raise ValueError(f"image shape {frames.shape[1:]} != {self.spec.image_shape}")
        aux = np.stack([self.aux(o) for o in window])
        if aux.shape[1] != self.spec.aux_size:
            raise ValueError(f"control input length {aux.shape[1] - 1} != {self.spec.aux_size - 1}")
        return frames, aux

    def step(self, obs: Observation) -> np.ndarray:
        """Inference replica: one step, advances the stored hidden state."""
        out, self.h = forward(self, [obs], h0=self.h, replica=1)
        return out[0]


def forward(state: DnnState, window, h0=None, replica: int | None = None):
    """Outputs (N_ws, K) and the advanced hidden state; ``state`` is not mutated.

    ``replica`` is the replica's window length (the training window by default).
    """
    n = state.spec.window if replica is None else replica
    if len(window) != n:
        raise ValueError(f"window length {len(window)} != replica length {n}")
    frames, aux = state._stack(window)
    h0 = state.h if h0 is None else h0
    out, h, _ = state.net.forward(state.alpha, frames, aux, h0)
    return out, h


def weighted_output_grad(state: DnnState, window, weights, h0=None) -> np.ndarray:
    """d/d alpha of sum_t sum_k weights[t, k] * U_t^k over the window."""
    weights = np.asarray(weights, dtype=float)
    if not np.all(np.isfinite(weights)):
        raise ValueError("non-finite output weights")
    if weights.shape != (len(window), state.spec.K):
        raise ValueError(f"weights shape {weights.shape} != {(len(window), state.spec.K)}")
    frames, aux = state._stack(window)
    h0 = state.h if h0 is None else h0
    _, _, cache = state.net.forward(state.alpha, frames, aux, h0, keep=True)
    return state.net.backward(state.alpha, cache, weights)


def apply_update(state: DnnState, grad: np.ndarray, hyper: TrainingHyper) -> None:
    """g <- nu g + grad - 2 gamma_L alpha;  alpha <- alpha + g (ascent)."""
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient; state left unchanged")
    g = hyper.nu * state.g + grad - 2 * hyper.gamma_l * state.alpha
    alpha = state.alpha + g
    if not np.all(np.isfinite(alpha)):
        raise FloatingPointError("non-finite parameter update; state left unchanged")
    state.g[...] = g
    state.alpha[...] = alpha


def update_weights(state: DnnState, window, metric_weights, prev_output, hyper: TrainingHyper, h0=None):
    """One regularised momentum step over a training window.

    ``metric_weights[t]`` are the per-step (gamma/a_sigma) dJ du factors;
    ``prev_output`` is U_{t-1} for the first step of the window. The output
    smoothness term contributes -2 gamma_S (U_t - U_{t-1}) with U_{t-1}
    held constant. Returns the window outputs.
    """
    metric_weights = np.asarray(metric_weights, dtype=float)
    frames, aux = state._stack(window)
    h0 = state.h if h0 is None else h0
    out, _, cache = state.net.forward(state.alpha, frames, aux, h0, keep=True)
    w = metric_weights.copy()
    if hyper.gamma_s:
        prev = np.vstack([np.asarray(prev_output, dtype=float)[None, :], out[:-1]])
        w -= 2 * hyper.gamma_s * (out - prev)
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("non-finite output weights; state left unchanged")
    grad = state.net.backward(state.alpha, cache, w)
    apply_update(state, grad, hyper)
    return out


# ---------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"PBDNN\x00\x01\x00"


def save_checkpoint(path, state: DnnState) -> None:
    """Header (magic, spec digest, P) then little-endian f64 alpha and g."""
    head = _CKPT_MAGIC + state.spec.digest() + struct.pack("<Q", state.P)
    body = np.ascontiguousarray(state.alpha, "<f8").tobytes() + np.ascontiguousarray(state.g, "<f8").tobytes()
    Path(path).write_bytes(head + body)


def load_checkpoint(path, spec: DnnSpec) -> DnnState:
    raw = Path(path).read_bytes()
    if raw[:8] != _CKPT_MAGIC:
        raise ValueError("not a network checkpoint")
    if raw[8:40] != spec.digest():
        raise ValueError("checkpoint was written for a different network spec")
    (P,) = struct.unpack_from("<Q", raw, 40)
    data = np.frombuffer(raw, "<f8", offset=48)
    if data.size != 2 * P:
        raise ValueError("truncated checkpoint")
    return DnnState(spec, data[:P].astype(float), g=data[P:].astype(float))
