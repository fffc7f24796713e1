"""Core domain types: URNs, lifecycle transitions, description validation."""

from __future__ import annotations

import itertools
import random

import pytest

from citytb.model import (
    Capability,
    Connection,
    ConnectionType,
    IllegalTransition,
    LifecycleEvent,
    MalformedUrn,
    MOBILE,
    NodeRole,
    NodeState,
    Position,
    ResourceDescription,
    Urn,
    ValidationError,
    description_from_json,
    description_to_json,
    parse_urn,
    transition,
)


def test_parse_urn_basic():
    urn = parse_urn("urn:citytb:santander:node0352")
    assert urn == Urn("citytb", "santander", "node0352")
    assert urn.render() == "urn:citytb:santander:node0352"


def test_parse_urn_empty_node_id():
    with pytest.raises(MalformedUrn):
        parse_urn("urn:citytb:santander:")


@pytest.mark.parametrize(
    "bad",
    [
        "",
        "urn:citytb:santander",
        "urn:citytb:santander:a:b",
        "nrn:citytb:santander:a",
        "urn::santander:a",
        "urn:citytb::a",
        "urn:citytb:santander:has space",
        "urn:citytb:santander:has:colon",
    ],
)
def test_parse_urn_rejects_malformed(bad):
    with pytest.raises(MalformedUrn):
        parse_urn(bad)


def test_urn_round_trip_property():
    rng = random.Random(1234)
    alphabet = "abcdefghijklmnopqrstuvwxyz0123456789"
    tail = alphabet + "._-"
    for _ in range(1000):
        segs = []
        for _ in range(3):
            first = rng.choice(alphabet)
            rest = "".join(rng.choice(tail) for _ in range(rng.randrange(0, 12)))
            segs.append(first + rest)
        rendered = f"urn:{segs[0]}:{segs[1]}:{segs[2]}"
        assert parse_urn(rendered).render() == rendered


def test_transition_table():
    assert transition(NodeState.ACTIVE, LifecycleEvent.INVALIDATION_TIMEOUT) is NodeState.DISABLED
    assert transition(NodeState.DISABLED, LifecycleEvent.FRESH_HELLO) is NodeState.ACTIVE
    assert transition(NodeState.NEW, LifecycleEvent.REG_OK) is NodeState.ACTIVE
    assert transition(NodeState.DISABLED, LifecycleEvent.DELETION_TIMEOUT) is NodeState.DELETED
    assert transition(NodeState.DELETED, LifecycleEvent.REG_OK) is NodeState.NEW


def test_transition_rejects_deletion_from_active():
    with pytest.raises(IllegalTransition):
        transition(NodeState.ACTIVE, LifecycleEvent.DELETION_TIMEOUT)


def test_deleted_never_reached_without_disabled():
    """Exhaustively replay every event sequence up to length 6 from NEW."""
    events = list(LifecycleEvent)
    for length in range(1, 7):
        for seq in itertools.product(events, repeat=length):
            state = NodeState.NEW
            seen_disabled = False
            for ev in seq:
                try:
                    state = transition(state, ev)
                except IllegalTransition:
                    break
                if state is NodeState.DISABLED:
                    seen_disabled = True
                if state is NodeState.DELETED:
                    assert seen_disabled, f"reached DELETED without DISABLED via {seq}"


def _urn(i: int) -> Urn:
    return Urn("citytb", "santander", f"node{i:04d}")


def _naive_validate(desc: ResourceDescription) -> bool:
    """Independent validator: direct conjunction of the documented rules."""
    ok = True
    if desc.role in (NodeRole.EXPERIMENTATION, NodeRole.SERVICE_ONLY):
        ok = ok and len(desc.capabilities) > 0
    if desc.connection.type == ConnectionType.MESH:
        ok = ok and desc.parent_gateway is not None
    else:
        ok = ok and desc.parent_gateway is None
    if desc.role == NodeRole.PARTICIPATORY:
        ok = ok and desc.parent_gateway is None
    ok = ok and desc.last_seen >= desc.registered_at
    ok = ok and (desc.position == MOBILE or isinstance(desc.position, Position))
    return ok


def _random_description(rng: random.Random, i: int) -> ResourceDescription:
    role = rng.choice(list(NodeRole))
    conn_type = rng.choice(list(ConnectionType))
    caps = tuple(
        Capability(rng.choice(["temperature", "noise", "light"]), "u")
        for _ in range(rng.randrange(0, 3))
    )
    parent = _urn(999) if rng.random() < 0.5 else None
    reg = rng.randrange(0, 1000)
    seen = reg + rng.randrange(-100, 200)
    position = MOBILE if rng.random() < 0.2 else Position(43.46, -3.80)
    return ResourceDescription(
        urn=_urn(i),
        role=role,
        capabilities=caps,
        position=position,
        connection=Connection("addr", conn_type),
        state=NodeState.ACTIVE,
        parent_gateway=parent,
        registered_at=reg,
        last_seen=seen,
    )


def test_validation_differential_against_naive():
    rng = random.Random(77)
    for i in range(500):
        desc = _random_description(rng, i)
        assert (not desc.violations()) == _naive_validate(desc)


def test_description_json_round_trip():
    desc = ResourceDescription(
        urn=_urn(1),
        role=NodeRole.EXPERIMENTATION,
        capabilities=(Capability("temperature", "celsius", 0.5),),
        position=Position(43.4623, -3.8090),
        connection=Connection("00:11:22", ConnectionType.MESH),
        state=NodeState.ACTIVE,
        parent_gateway=_urn(0),
        hw_meta={"deployment": "pop"},
        registered_at=5,
        last_seen=9,
    ).validate()
    text = description_to_json(desc)
    assert description_from_json(text) == desc


def test_description_validation_error_lists_causes():
    desc = ResourceDescription(
        urn=_urn(2),
        role=NodeRole.EXPERIMENTATION,
        capabilities=(),
        position=Position(0, 0),
        connection=Connection("a", ConnectionType.MESH),
        state=NodeState.ACTIVE,
        parent_gateway=None,
        registered_at=10,
        last_seen=3,
    )
    with pytest.raises(ValidationError) as err:
        desc.validate()
    assert len(err.value.violations) == 3


def test_observation_phenomenon_must_match_capabilities():
    from citytb.model import Observation

    desc = ResourceDescription(
        urn=_urn(5),
        role=NodeRole.EXPERIMENTATION,
        capabilities=(Capability("temperature", "celsius"),),
        position=Position(43.46, -3.81),
        connection=Connection("a", ConnectionType.MESH),
        state=NodeState.ACTIVE,
        parent_gateway=_urn(0),
    )
    ok = Observation(_urn(5), "temperature", 20.5, "celsius", Position(43.46, -3.81), 10)
    assert ok.violations(desc) == []
    bad = Observation(_urn(5), "no2", 14.0, "ppb", Position(43.46, -3.81), 10)
    assert any("not in source capabilities" in v for v in bad.violations(desc))


def test_mobile_observation_requires_speed_and_course():
    from citytb.model import Observation

    desc = ResourceDescription(
        urn=_urn(6),
        role=NodeRole.EXPERIMENTATION,
        capabilities=(Capability("no2", "ppb"),),
        position=MOBILE,
        connection=Connection("a", ConnectionType.GPRS),
        state=NodeState.ACTIVE,
    )
    incomplete = Observation(_urn(6), "no2", 14.0, "ppb", Position(43.46, -3.81), 10)
    assert any("speed and course" in v for v in incomplete.violations(desc))
    complete = Observation(
        _urn(6), "no2", 14.0, "ppb", Position(43.46, -3.81), 10, speed=8.0, course=90.0
    )
    assert complete.violations(desc) == []
