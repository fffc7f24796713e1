"""Node-set reservations: half-open intervals, exclusive per node, unlocked
by an unguessable secret key.

Keys are full-entropy 32-byte tokens; only their SHA-256 digest is stored so
no log or dump ever contains a usable key.
"""

from __future__ import annotations

import hashlib
import itertools
import secrets
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from ..config import TestbedConfig
from ..directory import NotFound, ResourceDirectory
from ..model import NodeRole, Urn
from .availability import Availability


class ReservationError(Exception):
    pass


class AuthError(ReservationError):
    pass


class UnknownReservationUrn(ReservationError):
    def __init__(self, urns: list[Urn]):
        super().__init__(f"unknown resources: {', '.join(map(str, urns))}")
        self.urns = urns


class NotReservable(ReservationError):
    def __init__(self, urns: list[Urn], why: str):
        super().__init__(f"not reservable ({why}): {', '.join(map(str, urns))}")
        self.urns = urns
        self.why = why


class ReservationConflict(ReservationError):
    def __init__(self, urns: list[Urn], interval: tuple[int, int]):
        super().__init__(
            f"interval [{interval[0]},{interval[1]}) collides on: {', '.join(map(str, urns))}"
        )
        self.urns = urns
        self.interval = interval


@dataclass
class Reservation:
    reservation_id: str
    urns: frozenset[Urn]
    start: int
    end: int
    owner: str
    key_digest: str
    cancelled: bool = False

    def overlaps(self, start: int, end: int) -> bool:
        return self.start < end and start < self.end

    def status(self, now: int) -> str:
        if self.cancelled:
            return "cancelled"
        if now < self.start:
            return "pending"
        if now < self.end:
            return "active"
        return "finished"

    def to_doc(self, now: int) -> dict:
        return {
            "id": self.reservation_id,
            "urns": sorted(u.render() for u in self.urns),
            "start": self.start,
            "end": self.end,
            "owner": self.owner,
            "status": self.status(now),
        }


class ReservationSystem:
    def __init__(
        self,
        clock: Callable[[], int],
        availability: Availability,
        rd: Optional[ResourceDirectory],
        config: TestbedConfig,
    ):
        self._clock = clock
        self._availability = availability
        self._rd = rd
        self.config = config
        self._lock = threading.RLock()
        self._reservations: dict[str, Reservation] = {}
        self._by_digest: dict[str, Reservation] = {}
        self._ids = itertools.count(1)

    # ------------------------------------------------------------------ API

    def authenticate(self, user: str, token: str) -> None:
        if self.config.users.get(user) != token:
            raise AuthError(f"bad credentials for {user!r}")

    def reserve(
        self, user: str, token: str, urns: Iterable[Urn], start: int, end: int
    ) -> tuple[Reservation, str]:
        """Reserve a node set for [start, end); returns the secret key once."""
        self.authenticate(user, token)
        urn_set = frozenset(urns)
        if not urn_set:
            raise ReservationError("empty reservation")
        gran = self.config.reservation_granularity_ms
        if start % gran or end % gran:
            raise ReservationError(f"interval must align to {gran} ms")
        now = self._clock()
        if end <= start:
            raise ReservationError("empty or inverted interval")
        if start < now:
            raise ReservationError("interval must start in the future")
        self._check_reservable(urn_set)
        with self._lock:
            colliding = sorted(
                {
                    urn
                    for r in self._reservations.values()
                    if not r.cancelled and r.overlaps(start, end)
                    for urn in (r.urns & urn_set)
                },
                key=str,
            )
            if colliding:
                raise ReservationConflict(colliding, (start, end))
            key = secrets.token_bytes(32).hex()
            digest = hashlib.sha256(bytes.fromhex(key)).hexdigest()
            reservation = Reservation(
                reservation_id=f"rsv-{next(self._ids):05d}",
                urns=urn_set,
                start=start,
                end=end,
                owner=user,
                key_digest=digest,
            )
            self._reservations[reservation.reservation_id] = reservation
            self._by_digest[digest] = reservation
            return reservation, key

    def _check_reservable(self, urn_set: frozenset[Urn]) -> None:
        available = self._availability.available
        unknown: list[Urn] = []
        service_only: list[Urn] = []
        unavailable: list[Urn] = []
        for urn in sorted(urn_set, key=str):
            if urn in available:
                continue
            desc = None
            if self._rd is not None:
                try:
                    desc = self._rd.get(urn)
                except NotFound:
                    desc = None
            if desc is None:
                unknown.append(urn)
            elif desc.role is NodeRole.SERVICE_ONLY:
                service_only.append(urn)
            else:
                unavailable.append(urn)
        if unknown:
            raise UnknownReservationUrn(unknown)
        if service_only:
            raise NotReservable(service_only, "service-only")
        if unavailable:
            raise NotReservable(unavailable, "not-currently-available")

    def cancel(self, reservation_id: str, user: str, token: str) -> None:
        self.authenticate(user, token)
        with self._lock:
            reservation = self._reservations.get(reservation_id)
            if reservation is None:
                raise ReservationError(f"no reservation {reservation_id}")
            if reservation.owner != user:
                raise AuthError("not the reservation owner")
            reservation.cancelled = True

    def find_by_key(self, key_hex: str) -> Optional[Reservation]:
        try:
            digest = hashlib.sha256(bytes.fromhex(key_hex)).hexdigest()
        except ValueError:
            return None
        with self._lock:
            return self._by_digest.get(digest)

    def calendar(self) -> list[Reservation]:
        with self._lock:
            return sorted(self._reservations.values(), key=lambda r: r.reservation_id)

    def available_for(self, start: int, end: int) -> list[Urn]:
        """Resources free over the whole interval."""
        with self._lock:
            busy = {
                urn
                for r in self._reservations.values()
                if not r.cancelled and r.overlaps(start, end)
                for urn in r.urns
            }
        return sorted(self._availability.available - busy, key=str)
