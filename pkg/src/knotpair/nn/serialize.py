"""JSON model files.

Layout::

    {
      "format": "knotpair-model", "version": 1,
      "variant": "learnable_weights", "dtype": "float32",
      "input_weights": [9 floats] | null,
      "layers": [{"in_dim", "out_dim", "activation", "dropout",
                  "weight": [out_dim * in_dim floats, row-major],
                  "bias": [out_dim floats]}, ...],
      "projection_head": [same layer objects] | null,
      "config": {training config echo, seed, best epoch, embedding source}
    }

Floats are written with ``repr`` precision so loading reproduces the arrays
bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import DataError
from .network import Layer, ModelParams

FORMAT = "knotpair-model"
VERSION = 1


def _layer_to_dict(layer: Layer) -> dict:
    return {
        "in_dim": layer.in_dim,
        "out_dim": layer.out_dim,
        "activation": layer.activation,
        "dropout": layer.dropout,
        "weight": layer.weight.ravel().tolist(),
        "bias": layer.bias.tolist(),
    }


def _layer_from_dict(d: dict, dtype, where: str) -> Layer:
    try:
        n_in, n_out = int(d["in_dim"]), int(d["out_dim"])
        w = np.asarray(d["weight"], dtype=dtype)
        b = np.asarray(d["bias"], dtype=dtype)
        if w.shape != (n_in * n_out,) or b.shape != (n_out,):
            raise DataError(
                f"{where}: weight has {w.size} values and bias {b.size}, "
                f"expected {n_in * n_out} and {n_out}"
            )
        return Layer(w.reshape(n_out, n_in), b, d["activation"], float(d["dropout"]))
    except KeyError as exc:
        raise DataError(f"{where}: missing field {exc}") from None


def model_to_dict(params: ModelParams) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "variant": params.variant,
        "dtype": params.dtype.name,
        "input_weights": None if params.input_weights is None else params.input_weights.tolist(),
        "layers": [_layer_to_dict(l) for l in params.layers],
        "projection_head": None
        if params.projection_head is None
        else [_layer_to_dict(l) for l in params.projection_head],
        "config": params.config,
    }


def model_from_dict(d: dict) -> ModelParams:
    if d.get("format") != FORMAT or d.get("version") != VERSION:
        raise DataError(f"not a {FORMAT} v{VERSION} file")
    try:
        dtype = np.dtype(d["dtype"])
        layers = [_layer_from_dict(l, dtype, f"layer {i}") for i, l in enumerate(d["layers"])]
        head = d.get("projection_head")
        head = None if head is None else [
            _layer_from_dict(l, dtype, f"head layer {i}") for i, l in enumerate(head)
        ]
        iw = d.get("input_weights")
        iw = None if iw is None else np.asarray(iw, dtype=dtype)
        return ModelParams(d["variant"], layers, iw, head, d.get("config", {}))
    except KeyError as exc:
        raise DataError(f"model file missing field {exc}") from None


def save_model(params: ModelParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(params), separators=(",", ":")) + "\n")


def load_model(path: str | Path) -> ModelParams:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from None
    return model_from_dict(d)
