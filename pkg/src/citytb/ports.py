"""Bus attachment points: components publish/subscribe through a small port
interface so they run identically embedded (same process as the broker) or
remote (over the TCP bus)."""

from __future__ import annotations

from typing import Callable, Optional, Protocol

from .bus.broker import Broker
from .bus.events import ManagementEvent, Topic


class BusPort(Protocol):
    def publish(self, event: ManagementEvent) -> None: ...

    def subscribe(
        self,
        topic: Topic,
        handler: Callable[[ManagementEvent], None],
        durable: bool = False,
        event_filter: Optional[list[str]] = None,
    ) -> None: ...


class EmbeddedBusPort:
    """Direct attachment to an in-process broker."""

    def __init__(self, broker: Broker, client_id: str):
        self._broker = broker
        self.client_id = client_id

    def publish(self, event: ManagementEvent) -> None:
        self._broker.publish_event(event)

    def subscribe(
        self,
        topic: Topic,
        handler: Callable[[ManagementEvent], None],
        durable: bool = False,
        event_filter: Optional[list[str]] = None,
    ) -> None:
        self._broker.subscribe(self.client_id, topic, handler, durable, event_filter)
