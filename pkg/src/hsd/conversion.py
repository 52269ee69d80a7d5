"""QCFS ANN -> IF SNN: shared weights, thresholds from lambda, v(0) = theta/2."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .ann import AnnModel, LayerSpec, apply_linear
from .snn import SnnModel, SurrogateParams
from .tensor import Tensor


class ConversionError(ValueError):
    pass


@dataclass(frozen=True)
class ConversionConfig:
    t_as: int

    def __post_init__(self):
        if self.t_as < 1:
            raise ValueError("t_as must be >= 1")


@dataclass
class ConversionReport:
    t_as: int
    layers: list[int] = field(default_factory=list)
    max_abs_deviation: list[float] = field(default_factory=list)
    rates: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("layer,max_abs_deviation\n")
            for layer, dev in zip(self.layers, self.max_abs_deviation):
                fh.write(f"{layer},{dev:.17g}\n")


def convert(ann: AnnModel, surrogate: SurrogateParams = SurrogateParams()) -> SnnModel:
    """Swap every QCFS layer for IF neurons with theta = lambda; weights are copied verbatim."""
    for i, ls in enumerate(ann.layers):
        if ls.kind == "relu":
            raise ConversionError(f"layer {i} is ReLU; replace it with QCFS before conversion")
        if ls.kind == "maxpool2d":
            raise ConversionError(f"layer {i} is MaxPool; replace it with AvgPool before conversion")
    layers, params = [], []
    for ls, p in zip(ann.layers, ann.params):
        if ls.kind == "qcfs":
            layers.append(LayerSpec("if", L=ls.L))
            params.append({"theta": Tensor(p["lambda"].data.copy())})
        else:
            layers.append(ls)
            params.append({k: Tensor(t.data.copy(), requires_grad=True) for k, t in p.items()})
    return SnnModel(ann.spec.with_layers(layers), params, surrogate)


def constant_input_rates(snn: SnnModel, probe_inputs, t_as: int):
    """Hold ``probe_inputs`` (B, C, H, W) fixed for ``t_as`` steps; return the SpikeRecord."""
    x = np.asarray(probe_inputs, dtype=np.float64)
    frames = np.broadcast_to(x[:, None], (x.shape[0], t_as) + x.shape[1:])
    with tn.no_grad():
        _, rec = snn.forward(frames, record=True)
    return rec


def postsynaptic_potentials(rec, t_as: int) -> dict[int, np.ndarray]:
    """phi^l(T) = sum_t s^l(t) theta^l / T for every spiking layer."""
    return {i: rec.spikes[i].sum(axis=0) * rec.thetas[i] / t_as for i in rec.spikes}


def requantized(ann: AnnModel, levels: int) -> AnnModel:
    """Same parameters, every QCFS layer re-quantized to ``levels`` steps."""
    layers = [LayerSpec("qcfs", L=levels) if ls.kind == "qcfs" else ls for ls in ann.layers]
    return AnnModel(ann.spec.with_layers(layers), ann.params)


def fidelity_check(ann: AnnModel, snn: SnnModel, probe_inputs, t_as: int,
                   reference_levels: int | None = None) -> ConversionReport:
    """Compare each spiking layer's phi(T_AS) with the matching QCFS activation.

    By default the reference is the ANN as trained (its own L).  With
    ``reference_levels`` the ANN is re-quantized first; passing ``t_as``
    gives the horizon-matched reference, the one an IF layer reproduces
    exactly at any horizon.
    """
    ConversionConfig(t_as)
    probe = np.asarray(probe_inputs, dtype=np.float64)
    ref = ann if reference_levels is None else requantized(ann, reference_levels)
    with tn.no_grad():
        _, acts = ref.forward(Tensor(probe), return_activations=True)
    rec = constant_input_rates(snn, probe, t_as)
    phi = postsynaptic_potentials(rec, t_as)
    report = ConversionReport(t_as=t_as)
    for i, a in zip(sorted(phi), acts):
        report.layers.append(i)
        report.max_abs_deviation.append(float(np.max(np.abs(phi[i] - a))))
        report.rates[i] = phi[i]
    return report


def telescoping_residuals(snn: SnnModel, rec, t_steps: int, first_input) -> dict[int, float]:
    """Max |phi^l - (affine(phi^{l-1}) - (v^l(T) - v^l(0)) / T)| per spiking layer.

    The right-hand side re-applies the layer's affine block (conv/dense plus
    any pooling/flatten between spiking layers) to the previous layer's
    average postsynaptic potential; ``first_input`` is the time-mean of the
    frames feeding layer one.
    """
    phi = postsynaptic_potentials(rec, t_steps)
    prev = Tensor(np.asarray(first_input, dtype=np.float64))
    out = {}
    with tn.no_grad():
        for i, (ls, p) in enumerate(zip(snn.layers, snn.params)):
            if ls.kind == "if":
                rhs = prev.data - (rec.v_final[i] - rec.v0[i]) / t_steps
                out[i] = float(np.max(np.abs(phi[i] - rhs)))
                prev = Tensor(phi[i])
            else:
                prev = apply_linear(ls, p, prev)
    return out
