"""Remote decision policy with schema validation and total fallback.

The remote endpoint receives the serialized context and the ids it may
choose from. Anything other than a well-formed subset of those ids (a
timeout, a transport error, malformed JSON, an unknown id, a scope breach)
yields the heuristic decision relabelled as ``Fallback``.
"""

from __future__ import annotations

import json
import logging
import os
import urllib.request
from dataclasses import replace
from typing import Any, Callable

import jsonschema

from .config_space import Direction, DirectionKind
from .controller import MAX_RATIONALE, PolicyContext, PolicyDecision, Proposer

log = logging.getLogger(__name__)

TOKEN_ENV = "CKKSEARCH_POLICY_TOKEN"
DEFAULT_TIMEOUT_S = 10.0

DECISION_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["chosen"],
    "properties": {
        "chosen": {"type": "array", "items": {"type": "string"}, "uniqueItems": True},
        "rationale": {"type": "string", "maxLength": MAX_RATIONALE},
    },
}

Transport = Callable[[str, dict[str, Any], float], Any]


def http_transport(endpoint: str, body: dict[str, Any], timeout: float) -> Any:
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(TOKEN_ENV)
    if token:
        headers["Authorization"] = f"Bearer {token}"
    req = urllib.request.Request(endpoint, data=json.dumps(body).encode(), headers=headers, method="POST")
    with urllib.request.urlopen(req, timeout=timeout) as resp:  # noqa: S310 - endpoint is user supplied
        return json.loads(resp.read().decode("utf-8"))


def _direction_kind(direction_id: str) -> DirectionKind | None:
    name = direction_id.split("@", 1)[0].split("=", 1)[0]
    try:
        return DirectionKind(name)
    except ValueError:
        return None


def validate_decision(
    response: Any, offered: tuple[str, ...], layer_scope: bool
) -> tuple[tuple[str, ...], str]:
    """Return (chosen, rationale) or raise ValueError describing the defect."""
    try:
        jsonschema.validate(response, DECISION_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ValueError(f"schema: {exc.message}") from None
    chosen = tuple(response["chosen"])
    unknown = [c for c in chosen if c not in offered]
    if unknown:
        raise ValueError(f"chose ids that were not offered: {unknown[:3]}")
    if layer_scope:
        for c in chosen:
            kind = _direction_kind(c)
            if kind is None or not kind.layer_local:
                raise ValueError(f"layer agent chose non-local direction {c}")
    return chosen, response.get("rationale", "")


class RemotePolicy:
    """Wraps a heuristic decision; the endpoint may reorder or subset it."""

    def __init__(
        self,
        endpoint: str | None,
        transport: Transport | None = None,
        timeout_s: float = DEFAULT_TIMEOUT_S,
    ):
        self.endpoint = endpoint
        self.transport = transport or http_transport
        self.timeout_s = timeout_s
        self.fallbacks = 0
        self.calls = 0

    def decide(self, role: str, ctx: PolicyContext, heuristic: PolicyDecision) -> PolicyDecision:
        if not self.endpoint:
            return heuristic
        self.calls += 1
        layer_scope = role == "layerwise"
        try:
            response = self.transport(self.endpoint, ctx.to_request(role), self.timeout_s)
            chosen, rationale = validate_decision(response, ctx.offered_ids, layer_scope)
        except Exception as exc:  # any defect means fallback, by contract
            self.fallbacks += 1
            log.warning("remote policy fallback for %s: %s", role, exc)
            return replace(heuristic, proposer=Proposer.FALLBACK, rationale=f"fallback ({exc}); {heuristic.rationale}")
        return PolicyDecision(chosen, rationale, Proposer.REMOTE_LLM)


def parse_choice(direction_id: str, ctx: PolicyContext) -> Direction:
    for o in ctx.offered:
        if o.id == direction_id:
            return o.direction
    raise KeyError(direction_id)
