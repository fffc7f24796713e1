"""The experiment-side view of the world: which resources are available.

Fed exclusively by the experiment configurator (reconfiguration channel);
exported as the node-set document experimenters browse before reserving.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional

from ..model import MOBILE, Position, ResourceDescription, Urn


class Availability:
    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._nodes: dict[Urn, ResourceDescription] = {}
        self._gateways: dict[Urn, ResourceDescription] = {}
        self._removed_hooks: list[Callable[[Urn], None]] = []

    # configurator surface ----------------------------------------------------

    def add_node(self, urn: Urn, desc: ResourceDescription) -> Optional[str]:
        with self._lock:
            self._nodes[urn] = desc
        return None

    def remove_node(self, urn: Urn) -> None:
        with self._lock:
            removed = self._nodes.pop(urn, None)
        if removed is not None:
            for hook in self._removed_hooks:
                hook(urn)

    def add_gateway(self, urn: Urn, desc: ResourceDescription) -> Optional[str]:
        with self._lock:
            self._gateways[urn] = desc
        return None

    def remove_gateway(self, urn: Urn) -> None:
        with self._lock:
            self._gateways.pop(urn, None)

    # consumer surface -----------------------------------------------------------

    def on_node_removed(self, hook: Callable[[Urn], None]) -> None:
        self._removed_hooks.append(hook)

    @property
    def available(self) -> frozenset[Urn]:
        with self._lock:
            return frozenset(self._nodes)

    def describe(self, urn: Urn) -> Optional[ResourceDescription]:
        with self._lock:
            return self._nodes.get(urn)

    def node_set_document(self, now: int) -> dict:
        """Export of reservable resources (the runtime's configuration view)."""
        with self._lock:
            nodes = sorted(self._nodes.values(), key=lambda d: d.urn.render())
            gws = sorted(self._gateways.values(), key=lambda d: d.urn.render())

        def entry(desc: ResourceDescription) -> dict:
            position = (
                "mobile"
                if desc.position == MOBILE
                else {"lat": desc.position.lat, "lon": desc.position.lon}
                if isinstance(desc.position, Position)
                else "mobile"
            )
            return {
                "urn": desc.urn.render(),
                "role": desc.role.value,
                "position": position,
                "capabilities": [c.to_doc() for c in desc.capabilities],
                "parent-gateway": desc.parent_gateway.render() if desc.parent_gateway else None,
            }

        return {
            "generated-at": now,
            "nodes": [entry(d) for d in nodes],
            "gateways": [entry(d) for d in gws],
        }
