"""Bootstrap placement and the depth mask.

Segments are maximal runs of layers between bootstraps. The first segment
starts with all ``L`` usable levels; each bootstrap spends ``L_BOOT`` levels
internally, so later segments start from ``L - L_BOOT``.

Placement is an exact dynamic program: it minimizes the number of bootstraps
and, among minimal plans, puts every bootstrap as late as possible. When the
bootstrap interval is 1 this coincides with the greedy latest-fit walk.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Mapping

from .config_space import Direction, DirectionKind, FheConfig
from .errors import Infeasible
from .model_ir import ModelGraph

L_BOOT = 3
MASK_SLACK_THRESHOLD = 1


@dataclass(frozen=True)
class BootstrapPlan:
    boot_after: tuple[str, ...]
    segments: tuple[tuple[str, ...], ...]
    segment_slack: tuple[int, ...]
    depth_mask: frozenset[str]
    interval: int = 1

    @property
    def boot_count(self) -> int:
        return len(self.boot_after)

    def segment_of(self, layer_id: str) -> int:
        for i, seg in enumerate(self.segments):
            if layer_id in seg:
                return i
        raise KeyError(layer_id)

    def to_dict(self) -> dict[str, Any]:
        return {
            "boot_after": list(self.boot_after),
            "segments": [list(s) for s in self.segments],
            "segment_slack": list(self.segment_slack),
            "depth_mask": sorted(self.depth_mask),
            "boot_count": self.boot_count,
        }


def schedule(graph: ModelGraph, config: FheConfig, depth_costs: Mapping[str, int]) -> BootstrapPlan:
    """Minimal-bootstrap plan respecting the bootstrap interval."""
    ids = graph.layer_ids
    costs = [depth_costs[i] for i in ids]
    n = len(ids)
    usable = config.global_config.usable_levels
    restored = usable - L_BOOT
    interval = config.global_config.bootstrap_interval

    # prefix[j] = sum(costs[:j])
    prefix = [0]
    for c in costs:
        prefix.append(prefix[-1] + c)

    for lid, c in zip(ids, costs):
        if c > usable:
            raise Infeasible(f"layer {lid} needs {c} levels but the chain has only {usable}")

    @lru_cache(maxsize=None)
    def best(start: int, first: bool) -> tuple[int, int] | None:
        """(boots, end) for the segment starting at ``start``; None if impossible."""
        cap = usable if first else restored
        choice: tuple[int, int] | None = None
        for end in range(n - 1, start - 1, -1):  # latest end first
            if prefix[end + 1] - prefix[start] > cap:
                continue
            if end == n - 1:
                return (0, end)
            if end - start + 1 < interval:
                continue
            rest = best(end + 1, False)
            if rest is None:
                continue
            boots = rest[0] + 1
            if choice is None or boots < choice[0]:
                choice = (boots, end)
        return choice

    if best(0, True) is None:
        raise Infeasible(
            f"no bootstrap placement fits: post-bootstrap budget is {restored} levels "
            f"(L={usable}, L_boot={L_BOOT}, interval={interval})"
        )

    segments: list[tuple[str, ...]] = []
    slack: list[int] = []
    boot_after: list[str] = []
    start, first = 0, True
    while start < n:
        _, end = best(start, first)
        cap = usable if first else restored
        segments.append(tuple(ids[start : end + 1]))
        slack.append(cap - (prefix[end + 1] - prefix[start]))
        if end < n - 1:
            boot_after.append(ids[end])
        start, first = end + 1, False
    best.cache_clear()

    mask = frozenset(
        lid for seg, s in zip(segments, slack) if s < MASK_SLACK_THRESHOLD for lid in seg
    )
    return BootstrapPlan(tuple(boot_after), tuple(segments), tuple(slack), mask, interval)


def _interval_blocked(plan: BootstrapPlan, new_interval: int) -> bool:
    for i, seg in enumerate(plan.segments[:-1]):
        if len(seg) < new_interval:
            affected = set(seg) | set(plan.segments[i + 1])
            if affected & plan.depth_mask:
                return True
    return False


def mask_blocks(plan: BootstrapPlan, direction: Direction) -> bool:
    """True iff the direction could push a budget-critical layer over the edge."""
    kind = direction.kind
    if kind is DirectionKind.SHORTEN_MODULUS_TAIL:
        # one fewer level for every segment: only safe with slack everywhere
        return bool(plan.depth_mask)
    if kind is DirectionKind.INCREASE_BOOTSTRAP_INTERVAL:
        return _interval_blocked(plan, plan.interval + 1)
    return False


def mask_blocks_without_plan(depth_mask: frozenset[str], direction: Direction) -> bool:
    """Conservative variant used when only the mask itself is known."""
    if direction.kind in (DirectionKind.SHORTEN_MODULUS_TAIL, DirectionKind.INCREASE_BOOTSTRAP_INTERVAL):
        return bool(depth_mask)
    return False
