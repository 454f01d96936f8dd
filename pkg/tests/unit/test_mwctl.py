import threading
import time

import pytest
from pydantic import ValidationError

import main
from routers.bench import fanin_roles, fanin_verdict, p2p_verdict
from routers.launcher import EXIT_ENV, EXIT_PASS, store_barrier
from routers.rhombus import TOPOLOGY, expected_broken, live_roles, rhombus_verdict, worlds_of
from routers.scenarios import fault_layout, fault_verdict
from routers.store import run_store
from schemas.scenario_schema import BenchRecord, Scenario, ScenarioSpec


class FakeLauncher:
    """Stands in for a finished Launcher: only the collected records matter to verdicts."""

    def __init__(self, records):
        self._records = records

    def records(self, role=None, event=None):
        out = [r for r in self._records if role in (None, r["role"]) and event in (None, r["event"])]
        return sorted(out, key=lambda r: r["ts"])


def _rec(role, event, ts, world=None, **detail):
    return {"role": role, "event": event, "ts": ts, "world": world, "detail": detail}


# ScenarioSpec and BenchRecord
def test_kill_after_only_for_fault_and_rhombus():
    ScenarioSpec(scenario=Scenario.FAULT, role="leader", kill_after=10)
    with pytest.raises(ValidationError):
        ScenarioSpec(scenario=Scenario.JOIN, role="leader", kill_after=10)


def test_join_at_only_for_join():
    ScenarioSpec(scenario=Scenario.JOIN, role="leader", join_at=20)
    with pytest.raises(ValidationError):
        ScenarioSpec(scenario=Scenario.FAULT, role="leader", join_at=20)


def test_recover_needs_a_middle_stage_victim():
    with pytest.raises(ValidationError):
        ScenarioSpec(scenario=Scenario.RHOMBUS, role="P1", recover=True)
    spec = ScenarioSpec(scenario=Scenario.RHOMBUS, role="P1", kill="P3", recover=True, run_id="r1")
    assert spec.world("w2") == "r1-w2"
    assert live_roles(spec) == ["P1", "P2", "P4", "P5"]


def test_kill_names_any_stage_but_recovery_needs_a_middle_one():
    for victim in ("P1", "P4"):
        spec = ScenarioSpec(scenario=Scenario.RHOMBUS, role="P2", kill=victim)
        assert victim not in live_roles(spec)
        with pytest.raises(ValidationError):
            ScenarioSpec(scenario=Scenario.RHOMBUS, role="P2", kill=victim, recover=True)
    with pytest.raises(ValidationError):
        ScenarioSpec(scenario=Scenario.RHOMBUS, role="P2", kill="P9")


def test_bench_record_throughput():
    record = BenchRecord(role="receiver", path="MW", message_size=4096, messages=5000, duration=2.0)
    assert record.throughput == pytest.approx(4096 * 5000 / 2.0)


# Layouts
def test_rhombus_topology():
    assert worlds_of("P1") == {"w1": 0, "w2": 0}
    assert worlds_of("P4") == {"w3": 1, "w4": 1}
    assert expected_broken("P1") == {"w1", "w2"}
    assert expected_broken("P2") == {"w1", "w3"}
    assert expected_broken("P3") == {"w2", "w4"}
    assert expected_broken("P4") == {"w3", "w4"}
    assert expected_broken(None) == set()
    assert set(TOPOLOGY) == {"w1", "w2", "w3", "w4"}


def test_fault_layouts():
    assert fault_layout(False)["leader"] == [("w1", 2, 0), ("w2", 2, 0)]
    assert fault_layout(True)["workerB"] == [("w1", 3, 2)]
    assert fanin_roles(3) == ["receiver", "sender1", "sender2", "sender3"]


# Verdicts
def test_fault_verdict_passes_when_only_w2_breaks():
    spec = ScenarioSpec(scenario=Scenario.FAULT, role="launcher", message_count=30, kill_after=10)
    records = [_rec("leader", "received", float(i), "w1", index=i, src=1) for i in range(1, 31)]
    records.append(_rec("workerB", "killed", 20.0, "w2", after=10))
    records.append(_rec("leader", "world_broken", 22.5, "w2", kind="RemoteWorker"))
    verdict = fault_verdict(FakeLauncher(records), spec)
    assert verdict.passed, verdict.reasons
    assert verdict.summary["detection_seconds"] == pytest.approx(2.5)


def test_fault_verdict_fails_on_slow_detection_and_short_stream():
    spec = ScenarioSpec(scenario=Scenario.FAULT, role="launcher", message_count=30, kill_after=10)
    records = [_rec("leader", "received", float(i), "w1", index=i, src=1) for i in range(1, 12)]
    records.append(_rec("workerB", "killed", 5.0, "w2", after=10))
    records.append(_rec("leader", "world_broken", 10.0, "w2", kind="RemoteWorker"))
    verdict = fault_verdict(FakeLauncher(records), spec)
    assert not verdict.passed
    assert len(verdict.reasons) == 2


def test_rhombus_verdict_checks_broken_set():
    spec = ScenarioSpec(scenario=Scenario.RHOMBUS, role="launcher", kill="P3", kill_after=5, message_count=20)
    finals = [
        _rec("P1", "final", 1.0, broken=["w2"]),
        _rec("P2", "final", 1.0, broken=[]),
        _rec("P4", "final", 1.0, broken=["w4"], handled=15),
    ]
    closing = [
        _rec("P1", "closing_round", 0.5, results={"w1": True}),
        _rec("P2", "closing_round", 0.5, results={"w1": True, "w3": True}),
        _rec("P4", "closing_round", 0.5, results={"w3": True}),
    ]
    assert rhombus_verdict(FakeLauncher(finals + closing), spec).passed

    finals[0] = _rec("P1", "final", 1.0, broken=["w1", "w2"])
    verdict = rhombus_verdict(FakeLauncher(finals + closing), spec)
    assert not verdict.passed
    assert any("broken worlds" in r for r in verdict.reasons)


def test_rhombus_verdict_with_dead_sink():
    spec = ScenarioSpec(scenario=Scenario.RHOMBUS, role="launcher", kill="P4", kill_after=5, message_count=20)
    records = [
        _rec("P1", "final", 1.0, broken=[]),
        _rec("P2", "final", 1.0, broken=["w3"]),
        _rec("P3", "final", 1.0, broken=["w4"]),
        _rec("P1", "closing_round", 0.5, results={"w1": True, "w2": True}),
        _rec("P2", "closing_round", 0.5, results={"w1": True, "w3": False}),
        _rec("P3", "closing_round", 0.5, results={"w2": True}),
    ]
    verdict = rhombus_verdict(FakeLauncher(records), spec)
    assert verdict.passed, verdict.reasons
    assert verdict.summary["sink_received"] is None

    records[4] = _rec("P2", "closing_round", 0.5, results={"w1": False, "w3": False})
    assert not rhombus_verdict(FakeLauncher(records), spec).passed


def _throughput(path, size, value, world=None):
    return {"event": "throughput", "path": path, "message_size": size, "throughput": value, "world": world}


def test_p2p_verdict_overhead():
    records = [_throughput("SW", 409600, 100.0), _throughput("MW", 409600, 95.0, "mw"),
               _throughput("SW", 4096, 100.0), _throughput("MW", 4096, 50.0, "mw")]
    verdict = p2p_verdict(records)
    assert verdict.passed
    assert verdict.summary["overhead"]["409600"] == pytest.approx(0.05)

    records.append(_throughput("MW", 409600, 10.0, "mw"))
    records.append(_throughput("MW", 409600, 10.0, "mw"))
    assert not p2p_verdict(records).passed


def test_fanin_verdict_needs_every_size():
    spec = ScenarioSpec(scenario=Scenario.BENCH_FANIN, role="launcher", senders=2, sizes=[4096, 40960])
    assert not fanin_verdict([_throughput("MW-aggregate", 4096, 1.0)], spec).passed
    records = [_throughput("MW-aggregate", 4096, 1.0), _throughput("MW-aggregate", 40960, 2.0)]
    assert fanin_verdict(records, spec).passed


def test_fanin_verdict_holds_aggregate_to_single_sender():
    spec = ScenarioSpec(scenario=Scenario.BENCH_FANIN, role="launcher", senders=3, sizes=[4096, 409600])
    records = [_throughput("MW-solo", 4096, 10.0), _throughput("MW-aggregate", 4096, 5.0),
               _throughput("MW-solo", 409600, 100.0), _throughput("MW-aggregate", 409600, 150.0)]
    verdict = fanin_verdict(records, spec)
    assert verdict.passed, verdict.reasons
    assert verdict.summary["gain"] == {"4096": 0.5, "409600": 1.5}

    records[3] = _throughput("MW-aggregate", 409600, 50.0)
    verdict = fanin_verdict(records, spec)
    assert not verdict.passed
    assert "one sender" in verdict.reasons[0]


# Store barrier
def test_store_barrier_releases_all_parties(store):
    released = []

    def party():
        store_barrier(store, "mwctl/t/b", 3, timeout=5)
        released.append(time.monotonic())

    threads = [threading.Thread(target=party) for _ in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=10)
    assert len(released) == 3


# Command line
def test_catalog_defaults_reach_the_spec():
    args = main.resolve_defaults(main.build_parser().parse_args(["fault", "--role", "leader"]))
    spec = main.spec_from_args(args)
    assert spec.scenario is Scenario.FAULT
    assert spec.kill_after == 10
    assert spec.message_count == 30


def test_rhombus_without_kill_drops_kill_after():
    args = main.resolve_defaults(main.build_parser().parse_args(["rhombus"]))
    assert args.kill_after is None
    assert main.spec_from_args(args).role == "launcher"


def test_sample_interval_defaults_to_5000_messages():
    parser = main.build_parser()
    for command in ("join", "bench"):
        assert main.spec_from_args(main.resolve_defaults(parser.parse_args([command]))).interval == 5000
    assert parser.parse_args(["bench", "--interval", "20"]).interval == 20


def test_rhombus_kill_accepts_every_stage():
    parser = main.build_parser()
    for victim in ("P1", "P2", "P3", "P4"):
        assert main.spec_from_args(main.resolve_defaults(parser.parse_args(["rhombus", "--kill", victim]))).kill == victim
    with pytest.raises(SystemExit):
        parser.parse_args(["rhombus", "--kill", "P5"])


def test_passthrough_reproduces_the_spec():
    parser = main.build_parser()
    argv = ["bench", "--mode", "fanin", "--senders", "3", "--sizes", "4096,40960", "--count", "50"]
    args = main.resolve_defaults(parser.parse_args(argv))
    again = main.resolve_defaults(parser.parse_args(["bench", *main.passthrough_args(args), "--role", "receiver"]))
    first, second = main.spec_from_args(args, role="receiver"), main.spec_from_args(again)
    assert first == second
    assert second.scenario is Scenario.BENCH_FANIN
    assert second.sizes == [4096, 40960]


def test_bad_sizes_flag_exits_with_usage_error():
    with pytest.raises(SystemExit) as exc:
        main.build_parser().parse_args(["bench", "--sizes", "4k"])
    assert exc.value.code == 2


def test_store_command_exit_codes(store):
    assert run_store(store) == EXIT_ENV
    stop = threading.Event()
    stop.set()
    assert run_store("127.0.0.1:0", stop=stop) == EXIT_PASS
