"""Dense layers and the flat parameter manifest used for checkpoints."""

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ParseError

MANIFEST_FORMAT = "vabal-params/1"


class Dense:
    """Fully connected layer; uniform(+-1/sqrt(fan_in)) init."""

    def __init__(self, fan_in, fan_out, rng, name, zero=False):
        bound = 1.0 / np.sqrt(fan_in)
        if zero:
            w = np.zeros((fan_in, fan_out))
            b = np.zeros(fan_out)
        else:
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
        self.weight = ad.Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.bias = ad.Tensor(b, requires_grad=True, name=f"{name}.bias")

    def __call__(self, x):
        return ad.dense(x, self.weight, self.bias)

    def apply_np(self, x):
        return x @ self.weight.data + self.bias.data

    def parameters(self):
        return [self.weight, self.bias]


def named_parameters(layers):
    return {p.name: p for layer in layers for p in layer.parameters()}


def save_manifest(path, params):
    """Write ``{name: Tensor|ndarray}`` as JSON (name -> shape -> row-major floats)."""
    entries = []
    for name, value in params.items():
        arr = value.data if isinstance(value, ad.Tensor) else np.asarray(value, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "data": arr.ravel().tolist()})
    Path(path).write_text(json.dumps({"format": MANIFEST_FORMAT, "params": entries}))


def load_manifest(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != MANIFEST_FORMAT:
        raise ParseError(f"unsupported manifest format {doc.get('format')!r}")
    out = {}
    for entry in doc["params"]:
        shape = tuple(entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != int(np.prod(shape)):
            raise ParseError(f"parameter {entry['name']!r}: {data.size} values for shape {shape}")
        out[entry["name"]] = data.reshape(shape)
    return out


def assign(params, values):
    """Copy loaded arrays into live parameters, checking names and shapes."""
    missing = set(params) - set(values)
    if missing:
        raise ContractError(f"manifest lacks parameters: {sorted(missing)}")
    for name, p in params.items():
        if values[name].shape != p.shape:
            raise ContractError(f"{name}: shape {values[name].shape} != {p.shape}")
        p.data = values[name].copy()
