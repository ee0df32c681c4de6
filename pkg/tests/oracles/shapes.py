"""Brute-force shape interpreter: runs naive loops over zero tensors."""

from __future__ import annotations

import numpy as np


def run_shapes(input_shape: list[int], layers: list[dict]) -> list[tuple[int, ...]]:
    x = np.zeros(input_shape)
    shapes = []
    for layer in layers:
        kind = layer["kind"]
        if kind == "Linear":
            assert x.ndim == 1
            x = np.zeros(layer["shape_out"][0]) + x.sum() * 0
        elif kind == "Conv2d":
            k, s = layer["kernel"], layer.get("stride", 1)
            c, h, w = x.shape
            rows = list(range(0, h - k + 1, s))
            cols = list(range(0, w - k + 1, s))
            out = np.zeros((layer["channels_out"], len(rows), len(cols)))
            for oi, i in enumerate(rows):
                for oj, j in enumerate(cols):
                    out[:, oi, oj] = x[:, i : i + k, j : j + k].sum()
            x = out
        elif kind == "AvgPool":
            s = layer["stride"]
            c, h, w = x.shape
            out = np.zeros((c, h // s, w // s))
            for i in range(h // s):
                for j in range(w // s):
                    out[:, i, j] = x[:, i * s : (i + 1) * s, j * s : (j + 1) * s].mean(axis=(1, 2))
            x = out
        elif kind == "Flatten":
            x = x.ravel()
        shapes.append(tuple(x.shape))
    return shapes
