"""Application-support plane: observation ingestion, publish/subscribe access
and historical queries.

Only sources the service configurator has registered may feed the store
(registration choreography gates this); anything else is dropped with an
audit record. Timestamps are monotone per source at the ingest gate.
"""

from __future__ import annotations

import csv
import io
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from ..geo import haversine_m
from ..model import Observation, Urn, parse_urn


class NotServiceRegistered(ValueError):
    pass


class BadFilter(ValueError):
    pass


@dataclass(frozen=True)
class AsiFilter:
    phenomena: Optional[frozenset[str]] = None
    urns: Optional[frozenset[Urn]] = None
    geo: Optional[tuple[float, float, float]] = None  # lat, lon, radius m

    @classmethod
    def from_params(cls, params: dict[str, str]) -> "AsiFilter":
        phenomena = None
        urns = None
        lat = lon = radius = None
        for key, value in params.items():
            if key == "phenomenon":
                phenomena = frozenset(v for v in value.split(",") if v)
            elif key == "urn":
                try:
                    urns = frozenset(parse_urn(v) for v in value.split(",") if v)
                except ValueError as exc:
                    raise BadFilter(str(exc)) from None
            elif key in ("lat", "lon", "radius"):
                try:
                    num = float(value)
                except ValueError:
                    raise BadFilter(f"{key} must be numeric") from None
                if key == "lat":
                    lat = num
                elif key == "lon":
                    lon = num
                else:
                    radius = num
            else:
                raise BadFilter(f"unknown filter field {key!r}")
        geo = None
        if lat is not None or lon is not None or radius is not None:
            if lat is None or lon is None or radius is None:
                raise BadFilter("geo filters need lat, lon and radius together")
            geo = (lat, lon, radius)
        return cls(phenomena, urns, geo)

    def matches(self, obs: Observation) -> bool:
        if self.phenomena is not None and obs.phenomenon not in self.phenomena:
            return False
        if self.urns is not None and obs.source not in self.urns:
            return False
        if self.geo is not None:
            lat, lon, radius = self.geo
            if haversine_m(lat, lon, obs.position.lat, obs.position.lon) > radius:
                return False
        return True


@dataclass
class AsiSubscription:
    sub_id: str
    flt: AsiFilter
    deliver: Callable[[Observation], None]


class ServicePlane:
    def __init__(
        self,
        dispatch: Optional[Callable[[Callable[[], None]], None]] = None,
        persist_path: Optional[str] = None,
    ):
        self._lock = threading.RLock()
        self._records: list[Observation] = []
        self._by_source_last_ts: dict[Urn, int] = {}
        self._sources: set[Urn] = set()
        self._subs: dict[str, AsiSubscription] = {}
        self._sub_seq = 0
        self._dispatch = dispatch or (lambda fn: fn())
        self.audit: list[dict] = []
        self._log_fh = None
        if persist_path is not None:
            import os

            if os.path.exists(persist_path):
                self._replay(persist_path)
            os.makedirs(os.path.dirname(persist_path) or ".", exist_ok=True)
            self._log_fh = open(persist_path, "a", encoding="utf-8")

    # ----------------------------------------------------------- gate (bus)

    def register_source(self, urn: Urn) -> Optional[str]:
        with self._lock:
            self._sources.add(urn)
        return None

    def unregister_source(self, urn: Urn) -> None:
        with self._lock:
            self._sources.discard(urn)

    def is_registered(self, urn: Urn) -> bool:
        with self._lock:
            return urn in self._sources

    def sources(self) -> frozenset[Urn]:
        with self._lock:
            return frozenset(self._sources)

    # --------------------------------------------------------------- ingest

    def ingest(self, obs: Observation) -> None:
        with self._lock:
            if obs.source not in self._sources:
                self.audit.append(
                    {"t": obs.timestamp, "urn": obs.source.render(), "why": "not-service-registered"}
                )
                raise NotServiceRegistered(str(obs.source))
            last = self._by_source_last_ts.get(obs.source)
            if last is not None and obs.timestamp < last:
                self.audit.append(
                    {"t": obs.timestamp, "urn": obs.source.render(), "why": "non-monotone-timestamp"}
                )
                raise ValueError(f"timestamp regression for {obs.source}")
            self._by_source_last_ts[obs.source] = obs.timestamp
            self._records.append(obs)
            if self._log_fh is not None:
                from ..model import observation_to_json

                self._log_fh.write(observation_to_json(obs) + "\n")
            subs = list(self._subs.values())
        for sub in subs:
            if sub.flt.matches(obs):
                self._dispatch(lambda s=sub, o=obs: s.deliver(o))

    def offer(self, obs: Observation) -> bool:
        """Ingest variant for agents: drops (with audit) instead of raising."""
        try:
            self.ingest(obs)
            return True
        except (NotServiceRegistered, ValueError):
            return False

    # -------------------------------------------------------------- queries

    def query(self, flt: AsiFilter, t0: Optional[int] = None, t1: Optional[int] = None) -> list[Observation]:
        """Matching observations with timestamp in [t0, t1), deterministic order."""
        with self._lock:
            records = list(self._records)
        out = [
            o
            for o in records
            if (t0 is None or o.timestamp >= t0)
            and (t1 is None or o.timestamp < t1)
            and flt.matches(o)
        ]
        out.sort(key=lambda o: (o.timestamp, o.source.render(), o.phenomenon))
        return out

    def aggregate(
        self,
        flt: AsiFilter,
        t0: int,
        t1: int,
        op: str,
        window_ms: Optional[int] = None,
    ) -> list[dict]:
        """Windowed min/max/mean over the matching series."""
        if op not in ("min", "max", "mean"):
            raise BadFilter(f"unknown aggregate {op!r}")
        window = window_ms or (t1 - t0)
        if window <= 0:
            raise BadFilter("window must be positive")
        series = self.query(flt, t0, t1)
        out: list[dict] = []
        start = t0
        while start < t1:
            end = min(start + window, t1)
            values = [o.value for o in series if start <= o.timestamp < end]
            if values:
                if op == "min":
                    value = min(values)
                elif op == "max":
                    value = max(values)
                else:
                    value = sum(values) / len(values)
                out.append({"window-start": start, "value": value, "count": len(values)})
            start = end
        return out

    def subscribe(self, flt: AsiFilter, deliver: Callable[[Observation], None]) -> str:
        with self._lock:
            self._sub_seq += 1
            sub_id = f"asisub-{self._sub_seq:04d}"
            self._subs[sub_id] = AsiSubscription(sub_id, flt, deliver)
            return sub_id

    def unsubscribe(self, sub_id: str) -> None:
        with self._lock:
            self._subs.pop(sub_id, None)

    def count(self) -> int:
        with self._lock:
            return len(self._records)

    def latest_by_source(self, phenomenon: str, since: int, until: int) -> dict[Urn, Observation]:
        """Freshest reading per source in [since, until] for one phenomenon."""
        with self._lock:
            records = list(self._records)
        out: dict[Urn, Observation] = {}
        for obs in records:
            if obs.phenomenon != phenomenon or not (since <= obs.timestamp <= until):
                continue
            cur = out.get(obs.source)
            if cur is None or obs.timestamp >= cur.timestamp:
                out[obs.source] = obs
        return out

    def _replay(self, path: str) -> None:
        from ..model import observation_from_json

        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obs = observation_from_json(line)
                self._records.append(obs)
                last = self._by_source_last_ts.get(obs.source)
                if last is None or obs.timestamp > last:
                    self._by_source_last_ts[obs.source] = obs.timestamp

    def close(self) -> None:
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None

    @staticmethod
    def to_csv(series: Iterable[Observation]) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["timestamp", "urn", "phenomenon", "value", "unit", "lat", "lon"])
        for o in series:
            writer.writerow(
                [o.timestamp, o.source.render(), o.phenomenon, o.value, o.unit,
                 o.position.lat, o.position.lon]
            )
        return buf.getvalue()
