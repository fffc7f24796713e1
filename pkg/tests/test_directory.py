"""Resource directory: publication, lookup, standing subscriptions."""

from __future__ import annotations

import random

import pytest

from citytb.directory import BadQuery, Conflict, NotFound, Query, ResourceDirectory
from citytb.model import (
    MOBILE,
    Capability,
    Connection,
    ConnectionType,
    NodeRole,
    NodeState,
    Position,
    ResourceDescription,
    Urn,
)


def _urn(i: int) -> Urn:
    return Urn("citytb", "testbed", f"node{i:04d}")


GW = Urn("citytb", "testbed", "gw01")

_PHENOMENA = ["temperature", "no2", "car-presence", "noise", "light"]


def make_desc(i: int, role=NodeRole.EXPERIMENTATION, state=NodeState.ACTIVE,
              phenomena=("temperature",), conn=ConnectionType.MESH,
              lat=43.4620, lon=-3.8100, meta=None) -> ResourceDescription:
    return ResourceDescription(
        urn=_urn(i),
        role=role,
        capabilities=tuple(Capability(p, "u") for p in phenomena),
        position=Position(lat, lon),
        connection=Connection(f"00:aa:{i:02x}", conn),
        state=state,
        parent_gateway=GW if conn is ConnectionType.MESH else None,
        hw_meta=meta or {},
        registered_at=0,
        last_seen=0,
    )


def test_register_returns_uri():
    rd = ResourceDirectory()
    uri = rd.register(make_desc(1))
    assert uri == "/resources/urn:citytb:testbed:node0001"
    assert rd.count() == 1


def test_identical_repost_is_idempotent():
    rd = ResourceDirectory()
    desc = make_desc(1)
    uri1 = rd.register(desc)
    uri2 = rd.register(desc)
    assert uri1 == uri2
    assert rd.count() == 1


def test_role_change_conflicts():
    rd = ResourceDirectory()
    rd.register(make_desc(1, role=NodeRole.EXPERIMENTATION))
    with pytest.raises(Conflict):
        rd.register(make_desc(1, role=NodeRole.SERVICE_ONLY))


def test_update_to_disabled_hides_from_default_lookup():
    rd = ResourceDirectory()
    rd.register(make_desc(1))
    rd.update(_urn(1), {"state": "disabled"})
    assert rd.lookup(Query.from_params({})) == []
    found = rd.lookup(Query.from_params({"state": "disabled"}))
    assert [d.urn for d in found] == [_urn(1)]


def test_delete_visible_only_with_deleted_filter():
    rd = ResourceDirectory()
    rd.register(make_desc(1))
    rd.delete(_urn(1))
    assert rd.lookup(Query.from_params({})) == []
    found = rd.lookup(Query.from_params({"state": "deleted"}))
    assert [d.urn for d in found] == [_urn(1)]


def test_update_unknown_urn_not_found():
    rd = ResourceDirectory()
    with pytest.raises(NotFound):
        rd.update(_urn(9), {"state": "disabled"})


def test_reregistration_after_delete_keeps_tombstone():
    rd = ResourceDirectory()
    rd.register(make_desc(1, phenomena=("temperature",)))
    rd.delete(_urn(1))
    rd.register(make_desc(1, phenomena=("no2",)))
    active = rd.lookup(Query.from_params({}))
    assert len(active) == 1 and active[0].phenomena() == {"no2"}
    deleted = rd.lookup(Query.from_params({"state": "deleted"}))
    assert len(deleted) == 1 and deleted[0].phenomena() == {"temperature"}


def test_unknown_query_field_rejected():
    with pytest.raises(BadQuery):
        Query.from_params({"colour": "red"})


def test_geo_query_excludes_mobile_tagged():
    rd = ResourceDirectory()
    rd.register(make_desc(1, lat=43.4620, lon=-3.8100))
    mobile = ResourceDescription(
        urn=_urn(2),
        role=NodeRole.EXPERIMENTATION,
        capabilities=(Capability("no2", "ppb"),),
        position=MOBILE,
        connection=Connection("x", ConnectionType.GPRS),
        state=NodeState.ACTIVE,
    )
    rd.register(mobile)
    found = rd.lookup(Query.from_params({"lat": "43.4620", "lon": "-3.8100", "radius": "100"}))
    assert [d.urn for d in found] == [_urn(1)]


def _random_store(rng: random.Random, rd: ResourceDirectory, n: int) -> list[ResourceDescription]:
    docs = []
    for i in range(n):
        role = rng.choice([NodeRole.EXPERIMENTATION, NodeRole.SERVICE_ONLY, NodeRole.INFRASTRUCTURAL])
        phen = tuple(rng.sample(_PHENOMENA, rng.randrange(1, 3))) if role is not NodeRole.INFRASTRUCTURAL else ()
        desc = make_desc(
            i,
            role=role,
            phenomena=phen or ("temperature",) if role is not NodeRole.INFRASTRUCTURAL else (),
            conn=rng.choice([ConnectionType.MESH, ConnectionType.GPRS, ConnectionType.WIRED]),
            lat=43.4 + rng.random() / 10,
            lon=-3.9 + rng.random() / 10,
            meta={"deployment": rng.choice(["pop", "parking", "mobile"])},
        )
        rd.register(desc)
        if rng.random() < 0.2:
            rd.update(desc.urn, {"state": "disabled"})
            desc = rd.get(desc.urn)
        else:
            desc = rd.get(desc.urn)
        docs.append(desc)
    return docs


def test_lookup_matches_brute_force_over_random_queries():
    rng = random.Random(31)
    rd = ResourceDirectory()
    docs = _random_store(rng, rd, 300)
    for _ in range(500):
        params: dict[str, str] = {}
        if rng.random() < 0.5:
            params["role"] = rng.choice(list(NodeRole)).value
        if rng.random() < 0.5:
            params["phenomenon"] = rng.choice(_PHENOMENA)
        if rng.random() < 0.3:
            params["state"] = rng.choice(["active", "disabled", "*", "active,disabled"])
        if rng.random() < 0.3:
            params["connection.type"] = rng.choice(["mesh", "gprs", "wired"])
        if rng.random() < 0.2:
            params["meta.deployment"] = rng.choice(["pop", "parking", "mobile"])
        if rng.random() < 0.2:
            params["lat"], params["lon"], params["radius"] = "43.45", "-3.85", "4000"
        query = Query.from_params(params)
        got = rd.lookup(query)
        expected = sorted(
            (d for d in docs if query.matches(d)), key=lambda d: d.urn.render()
        )
        assert got == expected


def test_subscription_appear_disappear_and_nonmatch():
    rd = ResourceDirectory()
    events = []
    rd.subscribe(Query.from_params({"phenomenon": "no2"}), lambda kind, urn: events.append((kind, urn)))
    rd.register(make_desc(1, phenomena=("no2",), conn=ConnectionType.GPRS))
    assert events == [("appeared", _urn(1))]
    rd.update(_urn(1), {"state": "disabled"})
    assert events == [("appeared", _urn(1)), ("disappeared", _urn(1))]
    rd.register(make_desc(2, phenomena=("temperature",)))  # no match, no event
    assert len(events) == 2


def test_subscription_completeness_replay_oracle():
    """Notifications equal the match-set deltas for a random op interleaving."""
    rng = random.Random(13)
    rd = ResourceDirectory()
    query = Query.from_params({"phenomenon": "temperature"})
    events: list[tuple[str, Urn]] = []
    rd.subscribe(query, lambda kind, urn: events.append((kind, urn)))
    match_set: set[Urn] = set()
    expected: list[tuple[str, Urn]] = []

    def snapshot_delta():
        current = {d.urn for d in rd.lookup(query)}
        for urn in sorted(current - match_set, key=str):
            expected.append(("appeared", urn))
        for urn in sorted(match_set - current, key=str):
            expected.append(("disappeared", urn))
        return current

    live: list[int] = []
    for step in range(200):
        op = rng.random()
        if op < 0.5 or not live:
            i = len(live)
            live.append(i)
            phen = ("temperature",) if rng.random() < 0.6 else ("noise",)
            rd.register(make_desc(i, phenomena=phen))
        elif op < 0.8:
            i = rng.choice(live)
            rd.update(_urn(i), {"state": rng.choice(["active", "disabled"])})
        else:
            i = rng.choice(live)
            try:
                rd.delete(_urn(i))
            except NotFound:
                pass
        match_set = snapshot_delta()
    assert events == expected


def test_persistence_round_trip(tmp_path):
    path = str(tmp_path / "rd.log")
    rd = ResourceDirectory(persist_path=path)
    rng = random.Random(7)
    _random_store(rng, rd, 50)
    rd.delete(_urn(3))
    before = rd.all_docs()
    tombs_before = rd.lookup(Query.from_params({"state": "deleted"}))
    rd.close()

    reborn = ResourceDirectory(persist_path=path)
    assert reborn.all_docs() == before
    assert reborn.lookup(Query.from_params({"state": "deleted"})) == tombs_before
