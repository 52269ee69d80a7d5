"""Integrate-and-fire networks unrolled over time, trained with a triangular surrogate."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .ann import LayerSpec, ModelSpec, apply_linear
from .tensor import Tensor


@dataclass(frozen=True)
class SurrogateParams:
    gamma: float = 1.0
    v_th: float = 1.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("surrogate gamma must be positive")


def triangle_surrogate(x, gamma: float = 1.0, v_th: float = 1.0) -> np.ndarray:
    """(1/gamma^2) * max(0, gamma - |x - v_th|)."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(0.0, gamma - np.abs(x - v_th)) / (gamma * gamma)


def heaviside_with_surrogate(u, theta: float, surrogate: SurrogateParams = SurrogateParams()) -> Tensor:
    """Spike = H(u - theta); backward uses the triangle evaluated at u/theta.

    The surrogate is centred on the normalised potential so that one shape
    (``v_th = 1``) serves every layer whatever its threshold.
    """
    theta = float(theta)
    g, vt = surrogate.gamma, surrogate.v_th

    def fwd(uv):
        return (uv - theta >= 0).astype(np.float64)

    def bwd(up, uv):
        return up * triangle_surrogate(uv / theta, g, vt)

    return tn.custom_gradient(fwd, bwd)(u)


@dataclass
class IfLayerState:
    v: np.ndarray
    theta: float

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError(f"threshold must be positive, got {self.theta}")
        self.v = np.asarray(self.v, dtype=np.float64)

    @classmethod
    def initial(cls, shape, theta: float) -> "IfLayerState":
        return cls(np.full(shape, theta / 2.0), theta)


def if_neuron(v: Tensor, drive: Tensor, theta: float,
              surrogate: SurrogateParams = SurrogateParams()) -> tuple[Tensor, Tensor]:
    """Differentiable IF update returning ``(s * theta, v_next)``.

    Equivalent to composing ``u = v + drive``, ``s = heaviside_with_surrogate(u)``
    and ``v_next = u - s * theta`` (reset path not detached), but evaluates
    the surrogate once and records two graph nodes instead of five.
    """
    theta = float(theta)
    u = v.data + drive.data
    s = (u - theta >= 0).astype(np.float64)
    out_data = s * theta
    v_data = u - out_data
    sg: list[np.ndarray] = []

    def surrogate_grad():
        if not sg:
            sg.append(triangle_surrogate(u / theta, surrogate.gamma, surrogate.v_th) * theta)
        return sg[0]

    def bw_out(g):
        gu = g * surrogate_grad()
        return gu, gu

    def bw_v(g):
        gu = g - g * surrogate_grad()
        return gu, gu

    parents = (v, drive)
    return tn._make(out_data, parents, bw_out), tn._make(v_data, parents, bw_v)


def if_step(state: IfLayerState, input_current) -> tuple[np.ndarray, IfLayerState]:
    """One IF update with reset-by-subtraction (at most one spike per step)."""
    u = state.v + np.asarray(input_current, dtype=np.float64)
    s = (u - state.theta >= 0).astype(np.float64)
    return s, IfLayerState(u - s * state.theta, state.theta)


def simulate_if(drive, theta: float, v0: float | np.ndarray | None = None):
    """Run one IF population over a (T, ...) drive; returns (spikes, v_trace, u_trace)."""
    drive = np.asarray(drive, dtype=np.float64)
    state = IfLayerState(np.full(drive.shape[1:], theta / 2.0) if v0 is None
                         else np.broadcast_to(v0, drive.shape[1:]).copy(), theta)
    spikes, vs, us = [], [], []
    for cur in drive:
        us.append(state.v + cur)
        s, state = if_step(state, cur)
        spikes.append(s)
        vs.append(state.v)
    return np.array(spikes), np.array(vs), np.array(us)


@dataclass
class SpikeRecord:
    """Per spiking layer (keyed by layer index): spikes (T, B, ...), drive, v(0), v(T)."""

    spikes: dict[int, np.ndarray] = field(default_factory=dict)
    inputs: dict[int, np.ndarray] = field(default_factory=dict)
    v0: dict[int, np.ndarray] = field(default_factory=dict)
    v_final: dict[int, np.ndarray] = field(default_factory=dict)
    thetas: dict[int, float] = field(default_factory=dict)

    def to_csv(self, path, sample: int = 0) -> None:
        """Dump ``t,layer,neuron_index,spike`` rows for one batch element."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "layer", "neuron_index", "spike"])
            for layer in sorted(self.spikes):
                s = self.spikes[layer][:, sample].reshape(self.spikes[layer].shape[0], -1)
                for t in range(s.shape[0]):
                    for j, v in enumerate(s[t]):
                        w.writerow([t + 1, layer, j, int(v)])


class SnnModel:
    """Converted network: IF neurons where the ANN had QCFS, real-valued readout."""

    kind = "snn"

    def __init__(self, spec: ModelSpec, params: list[dict[str, Tensor]],
                 surrogate: SurrogateParams = SurrogateParams()):
        spec.shapes()
        self.spec = spec
        self.params = params
        self.surrogate = surrogate
        for i, (ls, p) in enumerate(zip(spec.layers, params)):
            if ls.kind == "if" and not float(p["theta"].data) > 0:
                raise ValueError(f"layer {i}: threshold must be positive")

    @property
    def layers(self) -> tuple[LayerSpec, ...]:
        return self.spec.layers

    def parameters(self) -> list[Tensor]:
        """Trainable tensors (weights and biases; thresholds stay fixed)."""
        return [t for p in self.params for k, t in p.items() if k != "theta"]

    def thresholds(self) -> list[float]:
        return [float(p["theta"].data) for ls, p in zip(self.layers, self.params) if ls.kind == "if"]

    def initial_membranes(self, batch: int) -> dict[int, np.ndarray]:
        shapes = self.spec.shapes()
        return {i: np.full((batch,) + shapes[i], float(p["theta"].data) / 2.0)
                for i, (ls, p) in enumerate(zip(self.layers, self.params)) if ls.kind == "if"}

    def forward(self, frames, record: bool = False):
        """Unroll over the time axis of ``frames`` (B, T2, C, H, W).

        Frame t drives the first layer at step t; membranes start at theta/2
        for every call.  Returns the per-step outputs of the last layer and,
        when ``record`` is set, a :class:`SpikeRecord`.
        """
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 5 or frames.shape[2:] != tuple(self.spec.input_shape):
            raise ValueError(f"expected frames of shape (B, T, {self.spec.input_shape}), got {frames.shape}")
        b, steps = frames.shape[:2]
        v = {i: Tensor(a) for i, a in self.initial_membranes(b).items()}
        rec = SpikeRecord() if record else None
        if rec is not None:
            for i, vi in v.items():
                rec.v0[i] = vi.data.copy()
                rec.thetas[i] = float(self.params[i]["theta"].data)
                rec.spikes[i], rec.inputs[i] = [], []
        outputs = []
        for t in range(steps):
            x = Tensor(frames[:, t])
            for i, (ls, p) in enumerate(zip(self.layers, self.params)):
                if ls.kind == "if":
                    theta = float(p["theta"].data)
                    if rec is not None:
                        rec.inputs[i].append(x.data.copy())
                    x, v[i] = if_neuron(v[i], x, theta, self.surrogate)
                    if rec is not None:
                        rec.spikes[i].append(x.data / theta)
                else:
                    x = apply_linear(ls, p, x)
            outputs.append(x)
        if rec is not None:
            for i in v:
                rec.v_final[i] = v[i].data.copy()
                rec.spikes[i] = np.array(rec.spikes[i])
                rec.inputs[i] = np.array(rec.inputs[i])
            return outputs, rec
        return outputs

    __call__ = forward


def snn_forward(model: SnnModel, frames_t2, record: bool = False, expected_steps: int | None = None):
    frames_t2 = np.asarray(frames_t2)
    if expected_steps is not None and frames_t2.shape[1] != expected_steps:
        raise ValueError(f"expected {expected_steps} frames per sample, got {frames_t2.shape[1]}")
    return model.forward(frames_t2, record=record)


def bptt_backward(loss: Tensor, model: SnnModel) -> list[np.ndarray]:
    """Backpropagate ``loss`` through the unrolled graph; returns grads of model.parameters()."""
    for p in model.parameters():
        p.grad = None
    loss.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in model.parameters()]
