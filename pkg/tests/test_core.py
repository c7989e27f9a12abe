import json

import numpy as np
import pytest

from aerolte.core import (
    ACTION_ORDER,
    CoreNetwork,
    SessionContext,
    UeSession,
    check_trace,
    compile_flow_table,
    explore_interleavings,
    quiescence_violations,
)

A, B, C, U = 1, 2, 3, 7


def settled(*ids, **kw):
    net = CoreNetwork(ids or (A, B), **kw)
    return net


# -- attach / locate ------------------------------------------------------------

def test_first_attach_converges():
    net = settled(A, B, C)
    net.attach(A, U)
    net.run_until_quiescent()
    assert all(net.locate_ue(x, U) == A for x in (A, B, C))
    assert net.agents[A].hss[U] == (A, 1)
    assert not quiescence_violations(net, [U])


def test_reattach_elsewhere_wins_by_version():
    net = settled(A, B, C)
    net.attach(A, U)
    net.run_until_quiescent()
    net.agents[A].sessions[U].state = "idle"
    net.attach(B, U)  # UE moved while idle, no handoff
    net.run_until_quiescent()
    assert {net.agents[x].hss[U] for x in (A, B, C)} == {(B, 2)}
    assert U not in net.agents[A].sessions
    assert not quiescence_violations(net, [U])


def test_duplicate_attach_is_noop():
    net = settled()
    s1 = net.attach(A, U)
    net.run_until_quiescent()
    before = net.agents[A].state_key()
    s2 = net.attach(A, U)
    assert s1 is s2 and net.agents[A].state_key() == before
    assert net.stats["duplicate_attach"] == 1


def test_unknown_ue_not_found():
    assert settled().locate_ue(A, 99) is None


# -- handoff -----------------------------------------------------------------------

def test_nominal_handoff():
    net = settled(A, B, C)
    net.attach(A, U)
    net.run_until_quiescent()
    net.handoff(A, B, U)
    net.run_until_quiescent()
    assert all(net.locate_ue(x, U) == B for x in (A, B, C))
    assert not net.agents[A].flow_table()
    assert [r.ue_id for r in net.agents[B].flow_table()] == [U, U]
    kinds = [r["kind"] for r in net.trace if r.get("status") == "delivered" and r["kind"].startswith(("handoff", "state"))]
    assert kinds == ["handoff_request", "state_transfer", "handoff_ack"]
    assert net.counters()["handoff_completed"] == 1


def test_handoff_to_disconnected_dst_aborts():
    net = CoreNetwork([A, B], hops=lambda a, b: None if {a, b} == {A, B} else 0)
    net.attach(A, U)
    before = net.agents[A].state_key()
    assert net.handoff(A, B, U) is None
    assert net.agents[A].state_key() == before
    assert net.stats["handoff_aborted"] == 1


def test_partition_mid_handoff_rolls_back_bit_identical():
    links = {"up": True}
    net = CoreNetwork([A, B], hops=lambda a, b: 0 if a == b else (1 if links["up"] else None))
    net.attach(A, U)
    net.run_until_quiescent()
    snap = {x: net.agents[x].state_key() for x in (A, B)}
    net.handoff(A, B, U)
    net.step()  # handoff_request reaches A, which sends state_transfer
    assert U in net.agents[A].transferring
    links["up"] = False
    net.run_until_quiescent()
    assert {x: net.agents[x].state_key() for x in (A, B)} == snap
    assert net.handoff_outcome == {1: "aborted"}
    assert not check_trace(net.trace)


def test_inflight_packet_forwarded_to_new_anchor():
    net = settled(A, B, C)
    net.attach(A, U)
    net.run_until_quiescent()
    net.handoff(A, B, U)
    net.step()  # request delivered, state_transfer in flight
    net.send_packet(C, U)  # C still thinks A
    net.step()  # state_transfer delivered: B installs, broadcasts, acks
    net.send_packet(A, U)  # A transferring: held until the ack
    net.run_until_quiescent()
    assert net.stats["packets_sent"] == net.stats["packets_delivered"] == 2
    assert not quiescence_violations(net, [U], lossless=True)
    assert not check_trace(net.trace)


def test_rollback_defers_to_newer_register_entry():
    net = settled()
    net.attach(A, U)
    net.run_until_quiescent()
    net.handoff(A, B, U)
    net.step()  # request -> A, state_transfer pending
    (transfer,) = net.pending
    net.deliver(transfer)  # B installs, broadcast + ack pending
    ack = next(m.msg_id for m in net.pending.values() if m.kind == "handoff_ack")
    net.lose(ack)
    # A's ack timer may fire before the broadcast arrives; the broadcast still wins
    ack_timer = next(t.timer_id for t in net.timers.values() if t.kind == "handoff_ack_timeout")
    net.fire(ack_timer)
    net.run_until_quiescent()
    assert net.locate_ue(A, U) == net.locate_ue(B, U) == B
    assert not quiescence_violations(net, [U])


# -- tracking area updates -----------------------------------------------------------------

def test_tau_moves_idle_anchor_and_paging_targets_it():
    net = settled(A, B, C)
    net.attach(A, U)
    net.set_idle(A, U)
    net.run_until_quiescent()
    net.tracking_area_update(B, U)
    net.run_until_quiescent()
    assert all(net.locate_ue(x, U) == B for x in (A, B, C))
    assert net.agents[B].sessions[U].state == "idle" and not net.agents[B].flow_table()
    net.send_packet(C, U)
    net.run_until_quiescent()
    pages = [r for r in net.trace if r["kind"] == "page_request"]
    assert [(p["src"], p["dst"]) for p in pages] == [(B, B)]
    assert net.stats["packets_delivered"] == 1


def test_tau_at_current_anchor_bumps_version():
    net = settled()
    net.attach(A, U)
    net.set_idle(A, U)
    net.tracking_area_update(A, U)
    net.run_until_quiescent()
    assert net.agents[B].hss[U] == (A, 2)


def test_concurrent_boundary_claims_resolve_to_one_anchor():
    net = settled(A, B, C)
    net.attach(A, U)
    net.set_idle(A, U)
    net.run_until_quiescent()
    net.tracking_area_update(B, U)
    net.tracking_area_update(C, U)  # same version 2 from both
    net.run_until_quiescent()
    assert {net.agents[x].hss[U] for x in (A, B, C)} == {(C, 2)}
    assert not quiescence_violations(net, [U])


# -- flow tables --------------------------------------------------------------------------

def _session(ue, state="active", anchor=A):
    return UeSession(ue, state, anchor, ue, SessionContext(f"k{ue}"))


def test_flow_table_empty_and_single():
    assert compile_flow_table({}, A) == ()
    table = compile_flow_table({U: _session(U)}, A)
    assert len(table) == 2
    for rule in table:
        assert [a.split(":")[0] for a in rule.actions] == list(ACTION_ORDER)


def test_flow_table_n_sessions_unique_and_deterministic():
    sessions = {u: _session(u) for u in (9, 3, 5, 1)}
    sessions[4] = _session(4, "idle")
    sessions[6] = _session(6, anchor=B)
    table = compile_flow_table(sessions, A)
    keys = [(r.ue_id, r.direction) for r in table]
    assert len(keys) == len(set(keys)) == 8
    assert [k[0] for k in keys] == sorted(k[0] for k in keys)
    assert compile_flow_table(dict(reversed(list(sessions.items()))), A) == table


# -- data packets ---------------------------------------------------------------------------

def test_local_packet_zero_hops():
    net = settled()
    net.attach(A, U)
    net.attach(A, 8)
    net.send_packet(A, U, 100, src_ue=8)
    assert net.stats["packets_delivered"] == 1
    assert not [r for r in net.trace if r["kind"] == "data_packet"]
    assert net.agents[A].charged_bytes == 200  # uplink and downlink charge


def test_neighbor_packet_one_hop():
    net = settled()
    net.attach(B, U)
    net.run_until_quiescent()
    net.send_packet(A, U)
    net.run_until_quiescent()
    hops = [r["hops"] for r in net.trace if r["kind"] == "data_packet" and r["status"] == "sent"]
    assert hops == [1] and net.stats["packets_delivered"] == 1


def test_partitioned_anchor_no_route():
    up = {"v": True}
    net = CoreNetwork([A, B], hops=lambda a, b: 0 if a == b else (1 if up["v"] else None))
    net.attach(B, U)
    net.run_until_quiescent()
    up["v"] = False
    net.send_packet(A, U)
    assert net.stats["packets_dropped_no_route"] == 1
    net.send_packet(A, 99)
    assert net.stats["packets_dropped_unknown_ue"] == 1


def test_migrate_all_moves_every_session():
    net = settled(A, B, C)
    for ue in (7, 8, 9):
        net.attach(A, ue)
    net.set_idle(A, 9)
    net.run_until_quiescent()
    assert net.migrate_all(A, B) == 3
    net.run_until_quiescent()
    assert not net.agents[A].sessions
    assert {u: s.state for u, s in net.agents[B].sessions.items()} == {7: "active", 8: "active", 9: "idle"}
    assert not quiescence_violations(net, [7, 8, 9])


# -- agents leaving and rejoining -------------------------------------------------------

def test_rejoined_agent_relearns_register():
    net = settled(A, B, C)
    net.attach(A, U)
    net.attach(B, 8)
    net.run_until_quiescent()
    net.remove_agent(C)
    net.add_agent(C)
    assert C in net.agents and not net.agents[C].hss
    net.run_until_quiescent()
    assert net.agents[C].hss == {U: (A, 1), 8: (B, 1)}
    assert not quiescence_violations(net, [U, 8])
    assert not check_trace(net.trace)


def test_add_existing_agent_is_noop():
    net = settled()
    net.attach(A, U)
    before = net.agents[A].state_key()
    net.add_agent(A)
    assert net.agents[A].state_key() == before


def test_removed_agent_drops_buffered_packets_as_link_down():
    net = settled(A, B, C)
    net.attach(A, U)
    net.run_until_quiescent()
    net.handoff(A, B, U)
    net.step()  # A now transferring: packets for U are buffered there
    net.send_packet(A, U)
    assert net.agents[A].buffers
    net.remove_agent(A)
    net.run_until_quiescent()
    assert net.stats["packets_dropped_link_down"] == 1
    assert net.stats["packets_sent"] == net.stats["packets_delivered"] + 1
    assert not check_trace(net.trace)


def test_messages_to_removed_agent_do_not_break_quiescence():
    net = settled(A, B, C)
    net.attach(A, U)  # broadcasts to B and C in flight
    net.remove_agent(C)
    net.run_until_quiescent()
    assert net.quiescent
    assert net.locate_ue(B, U) == A
    assert not check_trace(net.trace)


def test_counters_have_fixed_keys():
    assert set(settled().counters()) == set(CoreNetwork([A]).counters())
    assert settled().counters()["packets_dropped_no_route"] == 0


# -- model checking ---------------------------------------------------------------------------

SCRIPTS = {
    "handoff": [("attach", A, U), ("handoff", A, B, U), ("data", A, U), ("data", B, U)],
    "tau": [("attach", A, U), ("idle", A, U), ("tau", B, U), ("data", A, U)],
    "reattach": [("attach", A, U), ("attach", B, U), ("data", A, U)],
    "boundary_tau": [("attach", A, U), ("idle", A, U), ("tau", A, U), ("tau", B, U), ("data", B, U)],
}


@pytest.mark.parametrize("name", sorted(SCRIPTS))
def test_exhaustive_two_agent_interleavings(name):
    res = explore_interleavings([A, B], SCRIPTS[name], [U], max_losses=1)
    assert res.quiescent_states > 0
    assert not res.violations, res.violations[:3]


def random_trace(seed, agents=(A, B, C), ues=(7, 8), steps=80, loss=0.03):
    rng = np.random.default_rng(seed)
    net = CoreNetwork(agents)
    losses = 0
    for _ in range(steps):
        r = rng.random()
        if r < 0.3 or not (net.pending or net.timers):
            op = rng.integers(5)
            ue = int(rng.choice(ues))
            x, y = (int(v) for v in rng.choice(agents, 2, replace=False))
            try:
                if op == 0:
                    net.attach(x, ue)
                elif op == 1:
                    net.handoff(x, y, ue)
                elif op == 2:
                    net.tracking_area_update(x, ue)
                elif op == 3:
                    net.set_idle(x, ue)
                else:
                    net.send_packet(x, ue)
            except (ValueError, KeyError):
                pass
        elif net.pending and r < 0.9:
            mid = int(rng.choice(sorted(net.pending)))
            if rng.random() < loss:
                net.lose(mid)
                losses += 1
            else:
                net.deliver(mid)
        elif net.timers:
            net.fire(int(rng.choice(sorted(net.timers))))
    net.run_until_quiescent()
    return net, losses


@pytest.mark.parametrize("seed", range(100))
def test_three_agent_random_traces(seed):
    net, losses = random_trace(seed)
    assert not check_trace(net.trace)
    if losses <= 1:
        assert not quiescence_violations(net, [7, 8])


def test_trace_checker_catches_tampering():
    net, _ = random_trace(3)
    recs = [dict(r) for r in net.trace]
    delivered = next(i for i, r in enumerate(recs) if r.get("status") == "delivered")
    dup = dict(recs[delivered])
    assert check_trace(recs + [dup])
    sent_pkt = next(r for r in recs if r["kind"] == "packet" and r["status"] == "sent")
    assert check_trace([r for r in recs if not (r["kind"] == "packet" and r["packet"] == sent_pkt["packet"]
                                                and r["status"] != "sent")])


def test_trace_jsonl_round_trip(tmp_path):
    net, _ = random_trace(5)
    path = tmp_path / "trace.jsonl"
    net.write_trace(path)
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert recs == net.trace and not check_trace(recs)
