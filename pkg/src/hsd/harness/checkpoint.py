"""HSD1 checkpoint files.

Layout (little-endian)::

    "HSD1"  u16 version  u8 kind (0 = ann, 1 = snn)
    layer-spec block:
        u16 in_channels  u16 height  u16 width  u16 class_count  u16 n_layers
        n_layers x (u8 kind_code  u16 out  u16 k  u16 L)
    snn only: f64 surrogate_gamma  f64 surrogate_v_th
    per layer: u8 n_tensors, then per tensor
        u8 name_len  name  u8 ndim  ndim x u32 dim  prod(dims) x f64
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from ..ann import AnnModel, LayerSpec, ModelSpec
from ..snn import SnnModel, SurrogateParams
from ..tensor import Tensor

MAGIC = b"HSD1"
VERSION = 1
KINDS = {"ann": 0, "snn": 1}
LAYER_CODES = {"conv2d": 1, "avgpool2d": 2, "dense": 3, "qcfs": 4, "flatten": 5,
               "relu": 6, "maxpool2d": 7, "if": 8}
_CODE_LAYERS = {v: k for k, v in LAYER_CODES.items()}


class CheckpointError(ValueError):
    pass


def _w(fh, fmt, *vals):
    fh.write(struct.pack("<" + fmt, *vals))


def _r(fh, fmt):
    size = struct.calcsize("<" + fmt)
    buf = fh.read(size)
    if len(buf) != size:
        raise CheckpointError("checkpoint truncated")
    return struct.unpack("<" + fmt, buf)


def dumps(model: AnnModel | SnnModel) -> bytes:
    fh = io.BytesIO()
    spec = model.spec
    fh.write(MAGIC)
    _w(fh, "HB", VERSION, KINDS[model.kind])
    _w(fh, "HHHHH", *spec.input_shape, spec.class_count, len(spec.layers))
    for ls in spec.layers:
        _w(fh, "BHHH", LAYER_CODES[ls.kind], ls.out, ls.k, ls.L)
    if model.kind == "snn":
        _w(fh, "dd", model.surrogate.gamma, model.surrogate.v_th)
    for p in model.params:
        _w(fh, "B", len(p))
        for name, t in p.items():
            nb = name.encode()
            _w(fh, "B", len(nb))
            fh.write(nb)
            arr = np.asarray(t.data, dtype="<f8", order="C")
            _w(fh, "B", arr.ndim)
            if arr.ndim:
                _w(fh, f"{arr.ndim}I", *arr.shape)
            fh.write(arr.tobytes())
    return fh.getvalue()


def loads(raw: bytes) -> AnnModel | SnnModel:
    fh = io.BytesIO(raw)
    if fh.read(4) != MAGIC:
        raise CheckpointError("not an HSD1 checkpoint (bad magic)")
    version, kind_code = _r(fh, "HB")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    kinds = {v: k for k, v in KINDS.items()}
    if kind_code not in kinds:
        raise CheckpointError(f"unknown model kind code {kind_code}")
    kind = kinds[kind_code]
    c, h, w, classes, n_layers = _r(fh, "HHHHH")
    layers = []
    for _ in range(n_layers):
        code, out, k, L = _r(fh, "BHHH")
        if code not in _CODE_LAYERS:
            raise CheckpointError(f"unknown layer code {code}")
        layers.append(LayerSpec(_CODE_LAYERS[code], out=out, k=k, L=L))
    surrogate = SurrogateParams(*_r(fh, "dd")) if kind == "snn" else None
    params = []
    for _ in range(n_layers):
        (n_t,) = _r(fh, "B")
        p = {}
        for _ in range(n_t):
            (nl,) = _r(fh, "B")
            name = fh.read(nl).decode()
            (ndim,) = _r(fh, "B")
            shape = _r(fh, f"{ndim}I") if ndim else ()
            count = int(np.prod(shape)) if ndim else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise CheckpointError("checkpoint truncated")
            arr = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
            trainable = kind == "ann" or name != "theta"
            p[name] = Tensor(arr, requires_grad=trainable)
        params.append(p)
    if fh.read(1):
        raise CheckpointError("trailing bytes after checkpoint payload")
    spec = ModelSpec(tuple(layers), (c, h, w), classes)
    if kind == "ann":
        return AnnModel(spec, params)
    return SnnModel(spec, params, surrogate)


def save_checkpoint(model, path) -> None:
    Path(path).write_bytes(dumps(model))


def load_checkpoint(path, expect: str | None = None):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    model = loads(path.read_bytes())
    if expect is not None and model.kind != expect:
        raise CheckpointError(f"expected {expect} checkpoint, got {model.kind} ({path})")
    return model
