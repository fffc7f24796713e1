#!/usr/bin/env python3
"""Record console contract fixtures from the real HTTP endpoints.

Boots real testbeds, exercises the documented endpoints over HTTP, and
freezes the responses under frontend/tests/fixtures/. Rerun after changing
any endpoint shape:  python3 tools/record_fixtures.py
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from citytb.app import Testbed  # noqa: E402
from citytb.cli import HttpClient  # noqa: E402
from citytb.config import TestbedConfig  # noqa: E402
from citytb.httpd import ApiServer  # noqa: E402
from citytb.model import parse_urn  # noqa: E402
from citytb.seeds import seed_path  # noqa: E402

FIXTURES = ROOT / "frontend" / "tests" / "fixtures"


def save(name: str, payload) -> None:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    (FIXTURES / name).write_text(json.dumps(payload, indent=1), encoding="utf-8")
    size = (FIXTURES / name).stat().st_size
    print(f"wrote {name} ({size} bytes)")


def record_small() -> None:
    bed = Testbed(seed_path("small.topo"), seed=3)
    bed.start()
    bed.wait_for_cold_start()
    api = ApiServer(bed, port=0)
    api.start()
    client = HttpClient(api.base_url)

    save("resources_small.json", client.request("GET", "/resources"))
    save("nodes_small.json", client.request("GET", "/nodes"))
    save(
        "bus_registration.json",
        client.request("GET", "/bus/log", params={"topic": "registration.request"}),
    )

    # a reservation + session + broadcast flash with real trace records
    now = bed.kernel.now()
    start = now + 1_000 - ((now + 1_000) % 1000)
    urns = [f"urn:citytb:santander:n{i:02d}" for i in (1, 2, 3)]
    reservation = client.request(
        "POST",
        "/reservations",
        body={"user": "alice", "token": "wonderland", "urns": urns,
              "from": start, "to": start + 3_600_000},
    )
    save("reservation.json", reservation)
    bed.run_until(start)
    session = client.request("POST", "/sessions", body={"key": reservation["key"]})
    save("session.json", session)
    sid = session["session"]
    transfer = client.request(
        "POST",
        f"/sessions/{sid}/flash",
        raw=bytes(2048),
        params={"behavior": "echo", "mode": "broadcast",
                "targets": ",".join(urns), "image-id": "fixture-image"},
    )
    bed.run_for(120_000)
    done = client.request("GET", f"/sessions/{sid}/flash/{transfer['id']}")
    assert done["status"] == "complete", done
    save("transfer_complete.json", done)
    for i, urn in enumerate(urns):
        client.request("POST", f"/sessions/{sid}/send",
                       body={"urn": urn, "text": f"fixture-ping-{i}"})
        bed.run_for(2_000)
    client.request("POST", f"/sessions/{sid}/send", body={"urn": urns[0], "text": "again"})
    bed.run_for(5_000)
    trace = client.request("GET", f"/sessions/{sid}/trace", params={"history": "1"})
    assert any(r["kind"] == "flash-progress" for r in trace)
    assert any(r["kind"] == "flash-done" for r in trace)
    save("trace_flash.json", trace)

    # a dead gateway: the disabled cluster as the directory reports it
    gw01 = parse_urn("urn:citytb:santander:gw01")
    bed.world.inject_fault(gw01, "gw-death", at=bed.kernel.now())
    bed.run_for(bed.config.invalidation_ms + bed.config.probe_ms + 5_000)
    disabled = client.request("GET", "/resources", params={"state": "disabled"})
    assert len(disabled) == 11, len(disabled)
    save("resources_disabled.json", disabled)

    api.stop()
    bed.shutdown()


def record_santander() -> None:
    bed = Testbed(seed_path("santander.topo"), seed=42)
    bed.start()
    bed.wait_for_cold_start()
    api = ApiServer(bed, port=0)
    api.start()
    client = HttpClient(api.base_url)
    temperature = client.request("GET", "/resources", params={"phenomenon": "temperature"})
    assert len(temperature) == 775, len(temperature)
    save("resources_temperature.json", temperature)
    api.stop()
    bed.shutdown()


def main() -> int:
    t0 = time.monotonic()
    record_small()
    record_santander()
    print(f"done in {time.monotonic() - t0:.1f}s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
