"""Straight-line neural network graphs: parsing, shape inference, summaries.

The model description is a JSON document::

    {"name": "mlp", "input_shape": [784],
     "layers": [{"id": "fc1", "kind": "Linear", "shape_out": [10]}]}

Shapes use channel-first layout for spatial tensors (``[C, H, W]``).
Convolutions are unpadded; average pooling uses a ``stride x stride`` window.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from .errors import SchemaError, ShapeMismatch, UnknownKind


class LayerKind(str, Enum):
    LINEAR = "Linear"
    CONV2D = "Conv2d"
    ACT_POLY = "ActPoly"
    AVG_POOL = "AvgPool"
    FLATTEN = "Flatten"


# kind -> (required kind fields, optional kind fields)
_KIND_FIELDS: dict[LayerKind, tuple[frozenset[str], frozenset[str]]] = {
    LayerKind.LINEAR: (frozenset({"shape_out"}), frozenset()),
    LayerKind.CONV2D: (frozenset({"kernel", "channels_in", "channels_out"}), frozenset({"stride"})),
    LayerKind.ACT_POLY: (frozenset({"act_degree", "act_error"}), frozenset()),
    LayerKind.AVG_POOL: (frozenset({"stride"}), frozenset()),
    LayerKind.FLATTEN: (frozenset(), frozenset()),
}
_COMMON_FIELDS = frozenset({"id", "kind", "shape_in", "shape_out"})
_ALL_KIND_FIELDS = frozenset({"kernel", "stride", "channels_in", "channels_out", "act_degree", "act_error"})

COMPUTE_KINDS = frozenset({LayerKind.LINEAR, LayerKind.CONV2D})


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: LayerKind
    shape_in: tuple[int, ...]
    shape_out: tuple[int, ...]
    kernel: int | None = None
    stride: int | None = None
    channels_in: int | None = None
    channels_out: int | None = None
    act_degree: int | None = None
    act_error: float | None = None

    @property
    def in_elems(self) -> int:
        return math.prod(self.shape_in)

    @property
    def out_elems(self) -> int:
        return math.prod(self.shape_out)

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "id": self.id,
            "kind": self.kind.value,
            "shape_in": list(self.shape_in),
            "shape_out": list(self.shape_out),
        }
        for name in ("kernel", "stride", "channels_in", "channels_out", "act_degree", "act_error"):
            value = getattr(self, name)
            if value is not None:
                doc[name] = value
        return doc


@dataclass(frozen=True)
class ModelGraph:
    name: str
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def layer(self, layer_id: str) -> LayerSpec:
        for spec in self.layers:
            if spec.id == layer_id:
                return spec
        raise KeyError(layer_id)

    def index(self, layer_id: str) -> int:
        for i, spec in enumerate(self.layers):
            if spec.id == layer_id:
                return i
        raise KeyError(layer_id)

    @property
    def layer_ids(self) -> tuple[str, ...]:
        return tuple(spec.id for spec in self.layers)

    def fused_activation(self, layer_id: str) -> LayerSpec | None:
        """The ActPoly layer directly following a compute layer, if any."""
        i = self.index(layer_id)
        if self.layers[i].kind in COMPUTE_KINDS and i + 1 < len(self.layers):
            nxt = self.layers[i + 1]
            if nxt.kind is LayerKind.ACT_POLY:
                return nxt
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [spec.to_dict() for spec in self.layers],
        }


@dataclass(frozen=True)
class ModelSummary:
    name: str
    layer_count: int
    kind_counts: dict[str, int]
    depth_lower_bound: int
    widest_layer: tuple[str, int]
    layers: tuple[tuple[str, str, tuple[int, ...], tuple[int, ...]], ...]
    signature: str = field(default="")

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "layer_count": self.layer_count,
            "kind_counts": dict(self.kind_counts),
            "depth_lower_bound": self.depth_lower_bound,
            "widest_layer": {"id": self.widest_layer[0], "elements": self.widest_layer[1]},
            "layers": [
                {"id": i, "kind": k, "shape_in": list(si), "shape_out": list(so)}
                for i, k, si, so in self.layers
            ],
            "signature": self.signature,
        }


def _as_shape(value: Any, where: str) -> tuple[int, ...]:
    if not isinstance(value, list) or not value:
        raise SchemaError(f"{where}: shape must be a nonempty list of integers")
    if not all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in value):
        raise SchemaError(f"{where}: shape entries must be positive integers")
    return tuple(value)


def _as_int(value: Any, where: str, minimum: int = 1) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise SchemaError(f"{where}: expected integer >= {minimum}, got {value!r}")
    return value


def infer_shape(kind: LayerKind, shape_in: tuple[int, ...], fields: dict[str, Any], where: str) -> tuple[int, ...]:
    """Output shape of one layer given its input shape and parameters."""
    if kind is LayerKind.LINEAR:
        if len(shape_in) != 1:
            raise ShapeMismatch(f"{where}: Linear expects a flat input, got {list(shape_in)}")
        return tuple(fields["shape_out"])
    if kind is LayerKind.CONV2D:
        if len(shape_in) != 3:
            raise ShapeMismatch(f"{where}: Conv2d expects [C, H, W], got {list(shape_in)}")
        c, h, w = shape_in
        if fields["channels_in"] != c:
            raise ShapeMismatch(f"{where}: channels_in={fields['channels_in']} but input has {c} channels")
        k, s = fields["kernel"], fields.get("stride", 1)
        if h < k or w < k:
            raise ShapeMismatch(f"{where}: kernel {k} larger than input {h}x{w}")
        return (fields["channels_out"], (h - k) // s + 1, (w - k) // s + 1)
    if kind is LayerKind.AVG_POOL:
        if len(shape_in) != 3:
            raise ShapeMismatch(f"{where}: AvgPool expects [C, H, W], got {list(shape_in)}")
        c, h, w = shape_in
        s = fields["stride"]
        if h < s or w < s:
            raise ShapeMismatch(f"{where}: pool stride {s} larger than input {h}x{w}")
        return (c, h // s, w // s)
    if kind is LayerKind.FLATTEN:
        return (math.prod(shape_in),)
    return shape_in  # ActPoly


def graph_from_dict(doc: Any) -> ModelGraph:
    if not isinstance(doc, dict):
        raise SchemaError("model document must be a JSON object")
    missing = {"name", "input_shape", "layers"} - doc.keys()
    extra = doc.keys() - {"name", "input_shape", "layers"}
    if missing:
        raise SchemaError(f"model document missing fields: {sorted(missing)}")
    if extra:
        raise SchemaError(f"model document has unknown fields: {sorted(extra)}")
    if not isinstance(doc["name"], str):
        raise SchemaError("name must be a string")
    input_shape = _as_shape(doc["input_shape"], "input_shape")
    raw_layers = doc["layers"]
    if not isinstance(raw_layers, list) or not raw_layers:
        raise SchemaError("layers must be a nonempty list")

    layers: list[LayerSpec] = []
    seen: set[str] = set()
    current = input_shape
    for pos, raw in enumerate(raw_layers):
        where = f"layers[{pos}]"
        if not isinstance(raw, dict):
            raise SchemaError(f"{where}: layer must be an object")
        if "id" not in raw or "kind" not in raw:
            raise SchemaError(f"{where}: layer needs 'id' and 'kind'")
        layer_id = raw["id"]
        if not isinstance(layer_id, str) or not layer_id:
            raise SchemaError(f"{where}: id must be a nonempty string")
        where = f"layer '{layer_id}'"
        if layer_id in seen:
            raise SchemaError(f"{where}: duplicate layer id")
        seen.add(layer_id)
        try:
            kind = LayerKind(raw["kind"])
        except ValueError:
            raise UnknownKind(f"{where}: unknown kind {raw['kind']!r}") from None

        required, optional = _KIND_FIELDS[kind]
        allowed = _COMMON_FIELDS | required | optional
        extra = raw.keys() - allowed
        if extra:
            raise SchemaError(f"{where}: fields not valid for {kind.value}: {sorted(extra)}")
        missing = required - raw.keys()
        if missing:
            raise SchemaError(f"{where}: {kind.value} requires {sorted(missing)}")

        fields: dict[str, Any] = {}
        if "shape_out" in raw:
            fields["shape_out"] = _as_shape(raw["shape_out"], f"{where}.shape_out")
        for name in ("kernel", "stride", "channels_in", "channels_out"):
            if name in raw:
                fields[name] = _as_int(raw[name], f"{where}.{name}")
        if kind is LayerKind.ACT_POLY:
            fields["act_degree"] = _as_int(raw["act_degree"], f"{where}.act_degree")
            err = raw["act_error"]
            if not isinstance(err, (int, float)) or isinstance(err, bool) or not math.isfinite(err) or err < 0:
                raise SchemaError(f"{where}.act_error must be a nonnegative real")
            fields["act_error"] = float(err)
        if kind is LayerKind.LINEAR and len(fields["shape_out"]) != 1:
            raise ShapeMismatch(f"{where}: Linear output must be flat")

        if "shape_in" in raw:
            declared_in = _as_shape(raw["shape_in"], f"{where}.shape_in")
            if declared_in != current:
                raise ShapeMismatch(f"{where}: declared shape_in {list(declared_in)} but receives {list(current)}")
        shape_out = infer_shape(kind, current, fields, where)
        if "shape_out" in fields and fields["shape_out"] != shape_out:
            raise ShapeMismatch(f"{where}: declared shape_out {list(fields['shape_out'])}, inferred {list(shape_out)}")

        layers.append(
            LayerSpec(
                id=layer_id,
                kind=kind,
                shape_in=current,
                shape_out=shape_out,
                kernel=fields.get("kernel"),
                stride=fields.get("stride", 1 if kind is LayerKind.CONV2D else None),
                channels_in=fields.get("channels_in"),
                channels_out=fields.get("channels_out"),
                act_degree=fields.get("act_degree"),
                act_error=fields.get("act_error"),
            )
        )
        current = shape_out
    return ModelGraph(name=doc["name"], input_shape=input_shape, layers=tuple(layers))


def parse_model(text: str) -> ModelGraph:
    """Parse and validate a model description document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"model document is not valid JSON: {exc}") from None
    return graph_from_dict(doc)


def serialize_model(graph: ModelGraph) -> str:
    return json.dumps(graph.to_dict(), indent=2)


def architecture_signature(graph: ModelGraph) -> str:
    """Stable fingerprint of the layer structure (ignores names and ids)."""
    parts = [
        [spec.kind.value, list(spec.shape_in), list(spec.shape_out), spec.kernel, spec.stride, spec.act_degree]
        for spec in graph.layers
    ]
    blob = json.dumps([list(graph.input_shape), parts], separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def summarize_model(graph: ModelGraph) -> ModelSummary:
    from .static_analyzer import layer_depth_cost

    counts: dict[str, int] = {}
    for spec in graph.layers:
        counts[spec.kind.value] = counts.get(spec.kind.value, 0) + 1
    widest = max(graph.layers, key=lambda s: s.out_elems)
    return ModelSummary(
        name=graph.name,
        layer_count=len(graph.layers),
        kind_counts=counts,
        depth_lower_bound=sum(layer_depth_cost(spec) for spec in graph.layers),
        widest_layer=(widest.id, widest.out_elems),
        layers=tuple((s.id, s.kind.value, s.shape_in, s.shape_out) for s in graph.layers),
        signature=architecture_signature(graph),
    )
