"""Cycle clock, process scheduler and the transactional-memory abort channel.

Processes are generators. Each ``yield`` hands the machine one command
tuple and receives its result when the process is resumed. One memory
access is atomic; time only advances through command costs.

Two access flavours exist. ``ACCESS`` applies the cache update when issued
and resumes the caller after a fixed script cost (victim code, whose timing
is given by its own profile). ``LOAD`` is a timed load: the caller stalls
for the latency of the level it will be served from and the cache update is
applied when the data arrives. The attacker uses ``LOAD`` so that an
eviction caused by its fill happens only once the fill completes.

Ties at equal timestamps are broken by process priority: victim, then
attacker, then noise.
"""

from __future__ import annotations

import csv
import heapq
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Generator, Iterable, Optional

from .cache_model import CacheGeometry, HierarchyState, Level, AccessOutcome, LINE_BITS

VICTIM, ATTACKER, NOISE = 0, 1, 2

# command opcodes
ACCESS = 0
LOAD = 1
FLUSH = 2
FLUSH_LATER = 3
SLEEP = 4
TX_BEGIN = 5
TX_READ = 6
WAIT_ABORT = 7
TX_END = 8
NOW = 9


class AbortReason(Enum):
    READ_SET_EVICTED = "read_set_evicted"
    SPONTANEOUS = "spontaneous"


@dataclass(frozen=True)
class AbortInfo:
    reason: AbortReason
    timestamp: int
    line: Optional[int] = None


class TxError(RuntimeError):
    def __init__(self, code: str):
        super().__init__(code)
        self.code = code


@dataclass
class Transaction:
    active: bool = False
    read_set: set = field(default_factory=set)
    abort_info: Optional[AbortInfo] = None
    serial: int = 0

    def begin(self) -> None:
        if self.active:
            raise TxError("TX_NESTED")
        self.active = True
        self.read_set = set()
        self.abort_info = None
        self.serial += 1

    def add_read(self, line: int) -> None:
        if not self.active:
            raise TxError("TX_INACTIVE")
        self.read_set.add(line)

    def check_abort(self, evicted_line: Optional[int], timestamp: int) -> Optional[AbortInfo]:
        if not self.active or evicted_line is None or evicted_line not in self.read_set:
            return None
        return self.abort(AbortReason.READ_SET_EVICTED, timestamp, evicted_line)

    def abort(self, reason: AbortReason, timestamp: int, line: Optional[int] = None) -> AbortInfo:
        self.active = False
        self.abort_info = AbortInfo(reason, timestamp, line)
        return self.abort_info

    def commit(self) -> None:
        if not self.active:
            raise TxError("TX_INACTIVE")
        self.active = False


def tx_begin(tx: Transaction) -> None:
    tx.begin()


def tx_check_abort(tx: Transaction, evicted_l3_line: Optional[int], now: int, delivery: int = 0):
    return tx.check_abort(evicted_l3_line, now + delivery)


TRACE_FIELDS = ("cycle", "process_id", "event_kind", "set_index", "level_hit")


class EventTrace:
    """Ordered (cycle, process, kind, set, level) records."""

    def __init__(self, sets: Optional[Iterable[int]] = None, limit: Optional[int] = None):
        self.rows: list[tuple] = []
        self.sets = None if sets is None else set(sets)
        self.limit = limit
        self.dropped = 0

    def record(self, cycle: int, pid: str, kind: str, set_index, level: str = "") -> None:
        if self.sets is not None and set_index is not None and set_index not in self.sets:
            return
        if self.limit is not None and len(self.rows) >= self.limit:
            self.dropped += 1
            return
        self.rows.append((cycle, pid, kind, "" if set_index is None else set_index, level))

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(TRACE_FIELDS)
            w.writerows(self.rows)


class Process:
    __slots__ = ("gen", "name", "priority", "core", "token", "waiting_abort", "done", "result")

    def __init__(self, gen, name, priority, core):
        self.gen = gen
        self.name = name
        self.priority = priority
        self.core = core
        self.token = 0
        self.waiting_abort = False
        self.done = False
        self.result = None


class Machine:
    def __init__(
        self,
        geometry: Optional[CacheGeometry] = None,
        *,
        abort_delivery_latency: int = 180,
        spontaneous_abort_rate: float = 0.0,
        seed: int = 0,
        trace_sets: Optional[Iterable[int]] = None,
        trace_limit: Optional[int] = 200_000,
        insert_age: Optional[int] = None,
    ):
        geometry = geometry or CacheGeometry()
        kw = {} if insert_age is None else {"insert_age": insert_age}
        self.cache = HierarchyState(geometry, **kw)
        self.geometry = geometry
        self.abort_delivery_latency = abort_delivery_latency
        self.spontaneous_abort_rate = spontaneous_abort_rate
        self.rng = random.Random(seed)
        self.now = 0
        self.tx = Transaction()
        self.tx_owner: Optional[Process] = None
        self.trace = EventTrace(trace_sets, trace_limit)
        self.processes: list[Process] = []
        self.aborts: list[AbortInfo] = []
        self._heap: list = []
        self._seq = 0
        self._stopped = False
        self._mem = geometry.mem_latency

    # -- process management

    def spawn(self, gen: Generator, name: str, priority: int = ATTACKER, core: int = 0, start: int = 0) -> Process:
        p = Process(gen, name, priority, core)
        self.processes.append(p)
        self._schedule(p, max(start, self.now), None)
        return p

    def stop(self) -> None:
        self._stopped = True

    def _schedule(self, proc: Process, time: int, value, action=None) -> None:
        proc.token += 1
        self._seq += 1
        heapq.heappush(self._heap, (time, proc.priority, self._seq, proc, proc.token, value, action))

    def _machine_event(self, time: int, fn) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (time, -1, self._seq, None, 0, fn, None))

    def run_until(self, end_time: int) -> EventTrace:
        heap = self._heap
        while heap and not self._stopped:
            if heap[0][0] > end_time:
                break
            time, _prio, _seq, proc, token, value, action = heapq.heappop(heap)
            if proc is None:
                self.now = time
                value()
                continue
            if token != proc.token or proc.done:
                continue
            self.now = time
            proc.waiting_abort = False
            if action is not None:
                value = action()
            self._step(proc, value)
        return self.trace

    def _step(self, proc: Process, value) -> None:
        try:
            cmd = proc.gen.send(value)
        except StopIteration as stop:
            proc.done = True
            proc.result = stop.value
            return
        while True:
            try:
                self._dispatch(proc, cmd)
                return
            except TxError as err:
                try:
                    cmd = proc.gen.throw(err)
                except StopIteration as stop:
                    proc.done = True
                    proc.result = stop.value
                    return

    # -- command handling

    def _dispatch(self, proc: Process, cmd) -> None:
        op = cmd[0]
        now = self.now
        if op == ACCESS:
            out = self._apply(proc, cmd[1], issue_time=True)
            self._schedule(proc, now + cmd[2], out)
        elif op == LOAD or op == TX_READ:
            addr = cmd[1]
            if op == TX_READ and not self.tx.active:
                raise TxError("TX_INACTIVE")
            level = self.cache.peek(addr, proc.core)
            lat = self.geometry.latency(level)
            tx_read = op == TX_READ
            serial = self.tx.serial

            def complete(addr=addr, lat=lat, level=level, tx_read=tx_read, serial=serial):
                out = self._apply(proc, addr, issue_time=False, kind="tx_read" if tx_read else "load")
                if tx_read and self.tx.active and self.tx.serial == serial:
                    self.tx.add_read(addr >> LINE_BITS)
                # the caller observes the latency decided at issue
                out.level = level
                out.cost = lat
                return out

            self._schedule(proc, now + lat, None, complete)
        elif op == FLUSH:
            self._flush(proc, cmd[1])
            self._schedule(proc, now + cmd[2], None)
        elif op == FLUSH_LATER:
            addr, delay = cmd[1], cmd[2]
            self._machine_event(now + delay, lambda: self._flush(proc, addr))
            self._schedule(proc, now, None)
        elif op == SLEEP:
            self._schedule(proc, max(now, cmd[1]), None)
        elif op == NOW:
            self._schedule(proc, now, now)
        elif op == TX_BEGIN:
            self.tx.begin()
            self.tx_owner = proc
            self.trace.record(now, proc.name, "tx_begin", None)
            if self.spontaneous_abort_rate > 0:
                serial = self.tx.serial
                t = now + max(1, int(self.rng.expovariate(self.spontaneous_abort_rate)))
                self._machine_event(t, lambda serial=serial: self._spontaneous(serial))
            self._schedule(proc, now, None)
        elif op == TX_END:
            self.tx.commit()
            self._schedule(proc, now, None)
        elif op == WAIT_ABORT:
            deadline = cmd[1]
            info = self.tx.abort_info
            if info is not None and not self.tx.active:
                self._schedule(proc, max(now, info.timestamp), info)
            else:
                proc.waiting_abort = True
                self._schedule(proc, max(now, deadline), None)
        else:
            raise ValueError(f"unknown command {cmd!r}")

    def _apply(self, proc: Process, addr: int, issue_time: bool, kind: str = "access") -> AccessOutcome:
        out = self.cache.access(addr, proc.core)
        set_index = out.line & self.cache._l3_mask
        self.trace.record(self.now, proc.name, kind, set_index, out.level.name)
        if out.evicted_l3_line is not None and self.tx.active:
            # the displaced line leaves once the fill has arrived
            effective = self.now + (self._mem if issue_time else 0)
            info = self.tx.check_abort(out.evicted_l3_line, effective + self.abort_delivery_latency)
            if info is not None:
                self._deliver(info)
        return out

    def _flush(self, proc: Process, addr: int) -> None:
        line = addr >> LINE_BITS
        self.cache.flush(addr)
        self.trace.record(self.now, proc.name, "flush", line & self.cache._l3_mask)
        if self.tx.active and line in self.tx.read_set:
            self._deliver(self.tx.abort(AbortReason.READ_SET_EVICTED, self.now + self.abort_delivery_latency, line))

    def _spontaneous(self, serial: int) -> None:
        if self.tx.active and self.tx.serial == serial:
            self._deliver(self.tx.abort(AbortReason.SPONTANEOUS, self.now))

    def _deliver(self, info: AbortInfo) -> None:
        self.aborts.append(info)
        owner = self.tx_owner
        self.trace.record(info.timestamp, owner.name if owner else "", "abort", None, info.reason.value)
        if owner is not None and owner.waiting_abort:
            owner.waiting_abort = False
            self._schedule(owner, max(self.now, info.timestamp), info)


def noise_process(machine: Machine, sets: list[int], rate_per_set: float, rng: random.Random,
                  pool: int = 64, base: int = 0x7000_0000_0000):
    """Background activity: Poisson accesses to foreign lines in the given L3 sets."""
    if rate_per_set <= 0 or not sets:
        return
    stride = machine.geometry.l3.sets << LINE_BITS
    total = rate_per_set * len(sets)
    t = machine.now
    while True:
        t += max(1, int(rng.expovariate(total)))
        yield (SLEEP, t)
        s = sets[rng.randrange(len(sets))]
        addr = base + (s << LINE_BITS) + rng.randrange(pool) * stride
        yield (ACCESS, addr, 0)
