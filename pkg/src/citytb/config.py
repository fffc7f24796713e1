"""Tunable parameters for the control plane and protocols.

Everything the behavioral contracts leave open lives here as a config key
with the documented default; scenarios and the admin endpoint may override
at runtime.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union


@dataclass
class TestbedConfig:
    __test__ = False  # not a pytest class

    # gateway agents
    heartbeat_ms: int = 30_000
    probe_ms: int = 60_000
    probe_fail_threshold: int = 3
    probe_reply_timeout_ms: int = 5_000
    registration_retry_ms: int = 30_000

    # portal soft state
    invalidation_ms: int = 90_000  # 3 x heartbeat
    deletion_ms: int = 86_400_000  # 24 h simulated
    configurator_timeout_ms: int = 10_000
    timer_tick_ms: int = 1_000

    # flashing protocol
    motap_chunk_bytes: int = 64
    motap_retry_budget: int = 8
    motap_slot_ms: int = 100
    max_image_bytes: int = 262_144

    # overlay
    overlay_ack_timeout_ms: int = 500
    overlay_retries: int = 3

    # reservations
    reservation_granularity_ms: int = 1_000

    # application support
    heatmap_power: float = 2.0
    heatmap_cutoff_m: float = 250.0
    heatmap_staleness_ms: int = 600_000

    # authorization: static user table (user -> token)
    users: dict[str, str] = field(
        default_factory=lambda: {"admin": "admin-token", "alice": "wonderland", "bob": "builder"}
    )

    def with_timeouts(
        self,
        invalidation_ms: Optional[int] = None,
        deletion_ms: Optional[int] = None,
        configurator_timeout_ms: Optional[int] = None,
    ) -> "TestbedConfig":
        out = self
        if invalidation_ms is not None:
            out = replace(out, invalidation_ms=int(invalidation_ms))
        if deletion_ms is not None:
            out = replace(out, deletion_ms=int(deletion_ms))
        if configurator_timeout_ms is not None:
            out = replace(out, configurator_timeout_ms=int(configurator_timeout_ms))
        return out

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "TestbedConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(**data)

    def apply_overrides(self, overrides: dict) -> "TestbedConfig":
        known = {f for f in self.__dataclass_fields__}  # type: ignore[attr-defined]
        bad = set(overrides) - known
        if bad:
            raise ValueError(f"unknown config keys: {sorted(bad)}")
        return replace(self, **overrides)
