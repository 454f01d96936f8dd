import time
from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class Scenario(str, Enum):
    RHOMBUS = "rhombus"
    FAULT = "fault"
    JOIN = "join"
    BENCH_P2P = "bench_p2p"
    BENCH_FANIN = "bench_fanin"


class ScenarioSpec(BaseModel):
    """
    Everything one mwctl role process needs to play its part.

    Attributes:
        scenario (Scenario): Which demo or benchmark this role belongs to.
        role (str): Process identity, e.g. "leader", "workerA", "P3", "receiver".
        store_addr (str): Rendezvous store endpoint.
        run_id (str): Namespace for world names and barrier keys of one run.
        message_size (int): Payload bytes per message.
        message_count (int): Messages per sender.
        rate (Optional[float]): Messages per second for the primary sender; None sends flat out.
        kill_after (Optional[int]): Victim exits after this many messages (fault, rhombus).
        join_at (Optional[float]): Seconds after start at which the late joiner initializes (join).
        single_world (bool): Fault scenario in one shared world.
        senders (int): Fan-in sender count, 1..3.
        interval (int): Messages per throughput sample.
        duration (float): Seconds the join scenario's senders keep sending.
        repeat (int): Benchmark repetitions per size.
        sizes (List[int]): Benchmark message sizes.
        kill (Optional[str]): Rhombus victim role.
        recover (bool): Rhombus replaces the victim with P5.
        listen_host (str): Host peers dial for this role's listeners.

    Raises:
        ValueError: If kill_after/join_at are given to a scenario that has no use for them.
    """
    model_config = ConfigDict(frozen=True)

    scenario: Scenario
    role: str
    store_addr: str = Field("127.0.0.1:29500")
    run_id: str = Field("manual", pattern=r"^[A-Za-z0-9_-]+$")
    message_size: int = Field(4096, ge=4)
    message_count: int = Field(30, ge=0)
    rate: Optional[float] = Field(None, gt=0)
    kill_after: Optional[int] = Field(None, ge=0)
    join_at: Optional[float] = Field(None, ge=0)
    single_world: bool = False
    senders: int = Field(1, ge=1, le=3)
    interval: int = Field(5000, ge=1)
    duration: float = Field(30.0, gt=0)
    repeat: int = Field(1, ge=1)
    sizes: List[int] = Field(default_factory=list)
    kill: Optional[str] = None
    recover: bool = False
    listen_host: str = "127.0.0.1"

    @model_validator(mode="after")
    def options_match_scenario(self):
        if self.kill_after is not None and self.scenario not in (Scenario.FAULT, Scenario.RHOMBUS):
            raise ValueError("kill_after is only valid for the fault and rhombus scenarios.")
        if self.join_at is not None and self.scenario != Scenario.JOIN:
            raise ValueError("join_at is only valid for the join scenario.")
        if self.kill is not None and self.kill not in ("P1", "P2", "P3", "P4"):
            raise ValueError(f"kill must name a pipeline stage P1..P4, got {self.kill!r}.")
        if self.recover and self.kill not in ("P2", "P3"):
            raise ValueError("recover needs --kill P2 or --kill P3.")
        return self

    def world(self, base: str) -> str:
        """Run-scoped world name."""
        return f"{self.run_id}-{base}"

    @property
    def listen_addr(self) -> str:
        return f"{self.listen_host}:0"


class ScenarioRecord(BaseModel):
    """One JSON line written by a role to stdout."""
    role: str
    event: str
    ts: float = Field(default_factory=time.time)
    world: Optional[str] = None
    detail: Dict[str, Any] = Field(default_factory=dict)


class BenchRecord(BaseModel):
    """
    One throughput sample.

    throughput = message_size * messages / duration, in bytes per second.
    """
    role: str
    event: str = "throughput"
    ts: float = Field(default_factory=time.time)
    path: str
    world: Optional[str] = None
    message_size: int
    messages: int
    duration: float
    throughput: float = 0.0
    interval_index: int = 0
    senders: int = 1
    repeat_index: int = 0

    @model_validator(mode="after")
    def fill_throughput(self):
        if not self.throughput and self.duration > 0:
            self.throughput = self.message_size * self.messages / self.duration
        return self


class ScenarioVerdict(BaseModel):
    scenario: Scenario
    passed: bool
    reasons: List[str] = Field(default_factory=list)
    summary: Dict[str, Any] = Field(default_factory=dict)
