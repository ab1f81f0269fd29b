"""The attacker: eviction sets, stakeout, aim, wait, shoot and recover.

Attacker code runs as machine processes (generators). Everything it learns
comes from load latencies and abort timestamps; ground-truth victim
records are only consulted to label samples for evaluation and to fetch
the ciphertext the server publishes.
"""

from __future__ import annotations

import copy
import csv
import random
import statistics
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .cache_model import CacheGeometry, HierarchyState, Level, LINE_BITS
from .machine import (
    ATTACKER,
    FLUSH,
    FLUSH_LATER,
    LOAD,
    SLEEP,
    TX_BEGIN,
    TX_READ,
    VICTIM,
    WAIT_ABORT,
    AbortReason,
    Machine,
    TxError,
)
from .victims import AesVictim, GroundTruth, RsaVictim, aes_server, rsa_server, PREFETCH, LOOKUP


class SniperError(RuntimeError):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code


class Detection(Enum):
    TSX = "tsx"
    FLUSH_RELOAD = "flush_reload"


class Shoot(Enum):
    METHOD1_FLUSH = "method1"
    METHOD2_ACCESS = "method2"


class Verdict(Enum):
    ACCESSED = "accessed"
    NOT_ACCESSED = "not_accessed"
    INVALID = "invalid"


# earliest eviction, in cycles after detection, each shoot method can reach
MIN_LEAD = {Shoot.METHOD1_FLUSH: 60, Shoot.METHOD2_ACCESS: 250}

LABELS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"


# --------------------------------------------------------------------------
# eviction sets


@dataclass
class EvictionSet:
    addresses: list
    set_index: int

    @property
    def labels(self) -> list:
        return [LABELS[i] if i < len(LABELS) else f"X{i}" for i in range(len(self.addresses))]

    def __len__(self):
        return len(self.addresses)

    def __getitem__(self, label: str) -> int:
        return self.addresses[self.labels.index(label)]

    @property
    def sacrificial(self) -> int:
        return self.addresses[0]

    @property
    def probe(self) -> int:
        return self.addresses[1]


def build_eviction_set(geometry: CacheGeometry, target_set_index: int, seed: int = 0,
                       base: int = 0x10_0000_0000, pool: int = 4096) -> EvictionSet:
    """``ways`` distinct attacker addresses congruent to ``target_set_index`` in L3."""
    if not 0 <= target_set_index < geometry.l3.sets:
        raise ValueError(f"set index {target_set_index} out of range")
    stride = geometry.l3.sets << LINE_BITS
    rng = random.Random((seed, target_set_index).__hash__() & 0xFFFFFFFF)
    picks = rng.sample(range(pool), geometry.l3.ways)
    return EvictionSet([base + (target_set_index << LINE_BITS) + k * stride for k in picks], target_set_index)


# --------------------------------------------------------------------------
# L1/L2-aware access order


def _scratch_after_fill(geometry: CacheGeometry, evset: EvictionSet, core: int = 0) -> HierarchyState:
    h = HierarchyState(geometry)
    for a in evset.addresses:
        h.access(a, core)
    return h


def naive_order_levels(geometry: CacheGeometry, evset: EvictionSet, order: Optional[list] = None) -> list:
    """Levels served when re-touching ``order`` (default B..) right after a linear fill."""
    h = _scratch_after_fill(geometry, evset)
    order = evset.addresses[1:] if order is None else order
    return [h.access(a).level for a in order]


def plru_aware_order(geometry: CacheGeometry, evset: EvictionSet) -> list:
    """Order of every line but A whose accesses are all served by the L3.

    Depth-first search against the private-cache model, trying lines in
    label order first, so the naive order is returned whenever it works.
    """
    rest = evset.addresses[1:]
    start = _scratch_after_fill(geometry, evset)

    def dfs(h: HierarchyState, remaining: list, acc: list):
        if not remaining:
            return acc
        for a in remaining:
            if h.peek(a) != Level.L3:
                continue
            h2 = copy.deepcopy(h)
            h2.access(a)
            found = dfs(h2, [r for r in remaining if r != a], acc + [a])
            if found is not None:
                return found
        return None

    order = dfs(start, rest, [])
    if order is None:
        raise SniperError("NO_ORDER_FOUND", f"{len(evset)}-way set over {geometry.l1.ways}-way L1")
    return order


def verify_order(geometry: CacheGeometry, evset: EvictionSet, order: list) -> bool:
    return all(lv == Level.L3 for lv in naive_order_levels(geometry, evset, order))


# --------------------------------------------------------------------------
# plan and log


@dataclass
class AttackPlan:
    detection: Detection = Detection.TSX
    shoot: Shoot = Shoot.METHOD1_FLUSH
    wait_time: int = 0
    probe_delay: int = 400
    adaptive: bool = False
    target_miss_rate: float = 0.07
    adapt_window: int = 10_000
    adapt_down: float = 0.02
    adapt_up: int = 10
    wait_floor: int = 0
    wait_ceiling: int = 24_000
    wait_limit: int = 20
    shared_memory: bool = True
    flush_cycles: int = 10

    def validate(self) -> None:
        if self.shoot == Shoot.METHOD1_FLUSH and not self.shared_memory:
            raise SniperError("CONFIG_INVALID", "method 1 needs memory shared with the victim")
        if self.shoot_latency_lead() < MIN_LEAD[self.shoot]:
            raise SniperError(
                "WINDOW_TOO_EARLY",
                f"{self.shoot.value} cannot evict {self.shoot_latency_lead()} cycles after detection",
            )
        if not 0 < self.target_miss_rate < 1:
            raise SniperError("CONFIG_INVALID", "target_miss_rate must be in (0, 1)")

    def shoot_latency_lead(self) -> int:
        return self.wait_time + shoot_latency(self.shoot)


def shoot_latency(method: Shoot, geometry: Optional[CacheGeometry] = None) -> int:
    """Cycles between issuing the shot and the target leaving the cache."""
    if method == Shoot.METHOD1_FLUSH:
        return 0
    return (geometry or CacheGeometry()).mem_latency


@dataclass
class Sample:
    sample: int
    detect_ts: int
    shoot_ts: int
    verdict: Verdict
    valid: bool
    payload: str = ""
    run_id: int = -1
    reason: str = ""


LOG_FIELDS = ("sample", "detect_ts", "shoot_ts", "verdict", "validity", "payload")


@dataclass
class ObservationLog:
    samples: list = field(default_factory=list)
    spontaneous_aborts: int = 0
    staging_broken: int = 0

    def __len__(self):
        return len(self.samples)

    def append(self, s: Sample) -> None:
        self.samples.append(s)

    def valid(self):
        return [s for s in self.samples if s.valid]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(LOG_FIELDS)
            for s in self.samples:
                w.writerow((s.sample, s.detect_ts, s.shoot_ts, s.verdict.value,
                            "valid" if s.valid else "invalid", s.payload))

    @staticmethod
    def read_csv(path) -> "ObservationLog":
        log = ObservationLog()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                log.append(Sample(int(row["sample"]), int(row["detect_ts"]), int(row["shoot_ts"]),
                                  Verdict(row["verdict"]), row["validity"] == "valid", row["payload"]))
        return log


def adapt_wait_time(log: ObservationLog, plan: AttackPlan, window: Optional[int] = None) -> int:
    """New WAIT_TIME from the miss rate of the last ``window`` valid samples.

    Too many misses means the shot lands after the window (shrink by
    ``adapt_down``); far too few means it lands before the last prefetch
    (grow by ``adapt_up`` cycles).
    """
    n = window or plan.adapt_window
    recent = [s for s in log.samples[-n:] if s.valid]
    if not recent:
        return plan.wait_time
    rate = sum(s.verdict == Verdict.NOT_ACCESSED for s in recent) / len(recent)
    w = plan.wait_time
    if rate > plan.target_miss_rate:
        w = int(w * (1 - plan.adapt_down))
    elif rate < plan.target_miss_rate / 2:
        w = w + plan.adapt_up
    floor = max(plan.wait_floor, MIN_LEAD[plan.shoot] - shoot_latency(plan.shoot))
    return max(floor, min(plan.wait_ceiling, w))


# --------------------------------------------------------------------------
# attacker building blocks (sub-generators)


class Sniper:
    """Attacker state shared by the aim/shoot/recover steps."""

    def __init__(self, machine: Machine, plan: AttackPlan, evset: EvictionSet,
                 order: Optional[list] = None, name: str = "attacker"):
        self.m = machine
        self.plan = plan
        self.evset = evset
        self.order = order if order is not None else (
            plru_aware_order(machine.geometry, evset) if plan.shoot == Shoot.METHOD2_ACCESS else None
        )
        self.name = name
        self.mem = machine.geometry.mem_latency

    def flush_own(self, evset: Optional[EvictionSet] = None):
        for a in (evset or self.evset).addresses:
            yield (FLUSH, a, self.plan.flush_cycles)

    def clean_fill(self, evset: Optional[EvictionSet] = None, max_rounds: int = 16, fast: bool = False):
        """Make the set hold only attacker lines (checked by a timed second pass).

        With ``fast`` the first round skips the flush, which is enough when
        at most the free ways are missing (e.g. right after an abort).
        """
        ev = evset or self.evset
        for r in range(max_rounds):
            if r or not fast:
                yield from self.flush_own(ev)
            for a in ev.addresses:
                yield (LOAD, a)
            clean = True
            for a in ev.addresses:
                out = yield (LOAD, a)
                if out.level == Level.MEM:
                    clean = False
            if clean:
                return True
        return False

    def stage(self, evset: Optional[EvictionSet] = None, in_tx: bool = False, order: Optional[list] = None):
        """Linear fill into an emptied set, then L3-only touches of all but A.

        Leaves A one age step older than every other line and at way 0.
        Returns whether every touch was served by the L3.
        """
        ev = evset or self.evset
        order = order if order is not None else self.order
        ok = yield from self.clean_fill(ev)
        yield from self.flush_own(ev)
        op = TX_READ if in_tx else LOAD
        if in_tx:
            yield (TX_BEGIN,)
        try:
            for a in ev.addresses:
                out = yield (op, a)
                ok = ok and out.level == Level.MEM
            for a in order:
                out = yield (op, a)
                ok = ok and out.level == Level.L3
        except TxError:
            return False
        return ok

    def prime(self, target: Optional[int] = None, evset: Optional[EvictionSet] = None):
        """Prime+Abort arming: flush the shared target, fill the set, start the transaction."""
        ev = evset or self.evset
        if target is not None:
            yield (FLUSH, target, self.plan.flush_cycles)
        ok = yield from self.clean_fill(ev, fast=True)
        yield (TX_BEGIN,)
        try:
            for a in ev.addresses:
                yield (TX_READ, a)
        except TxError:
            pass  # aborted while priming; the abort is picked up by the wait
        return ok

    def arm(self, target: Optional[int]):
        """Aim step for TSX: returns once the transaction is live."""
        if self.plan.shoot == Shoot.METHOD2_ACCESS:
            return (yield from self.stage(in_tx=True))
        return (yield from self.prime(target))

    def shoot(self, target: int, evset: Optional[EvictionSet] = None):
        ev = evset or self.evset
        if self.plan.shoot == Shoot.METHOD1_FLUSH:
            yield (FLUSH, target, self.plan.flush_cycles)
            return True
        out = yield (LOAD, ev.sacrificial)
        if out.level != Level.MEM:
            return False  # staging broken: A was still cached
        return True

    def recover(self, target: int, evset: Optional[EvictionSet] = None):
        ev = evset or self.evset
        if self.plan.shoot == Shoot.METHOD1_FLUSH:
            out = yield (LOAD, target)
            return Verdict.ACCESSED if out.level != Level.MEM else Verdict.NOT_ACCESSED
        out = yield (LOAD, ev.probe)
        return Verdict.ACCESSED if out.level == Level.MEM else Verdict.NOT_ACCESSED


def aim_tsx(sniper: Sniper, target: Optional[int], deadline: int):
    """Arm and spin until the transaction aborts. Returns the AbortInfo or None at deadline."""
    yield from sniper.arm(target)
    info = yield (WAIT_ABORT, deadline)
    return info


def aim_flush_reload(machine: Machine, line: int, wait_limit: int, iter_cycles: int,
                     flush_settle: int, deadline: int, next_event: Optional[Callable[[], int]] = None,
                     reload_miss: Optional[int] = None):
    """Flush, count to ``wait_limit``, timed reload; returns the detection timestamp.

    The flush needs ``flush_settle`` cycles to take effect and a reload is
    ordered behind it. ``next_event`` lets the loop skip idle iterations in
    bulk when nothing else will touch the line before then; an idle
    iteration leaves the cache exactly as the previous one did.
    """
    miss = reload_miss if reload_miss is not None else machine.geometry.mem_latency
    issue = 1
    period_idle = max(issue + wait_limit * iter_cycles, flush_settle) + miss
    while machine.now < deadline:
        if next_event is not None:
            t_next = next_event()
            gap = t_next - machine.now
            if gap > 3 * period_idle:
                skip = gap // period_idle - 2
                yield (SLEEP, machine.now + skip * period_idle)
        t0 = machine.now
        yield (FLUSH_LATER, line, flush_settle)
        reload_at = max(t0 + issue + wait_limit * iter_cycles, t0 + flush_settle)
        yield (SLEEP, reload_at)
        out = yield (LOAD, line)
        if out.level != Level.MEM:
            return machine.now
    return None


# --------------------------------------------------------------------------
# stakeout


@dataclass
class StakeoutResult:
    wait_time: int
    probe_delay: int
    detect_latency: int
    lead: int


def aes_target_window(victim: AesVictim, line: int, jitter: int = 0) -> tuple[int, int]:
    """Offsets [lo, hi] where evicting ``line`` isolates the last-round lookups."""
    lo = victim.step_offset(10, PREFETCH, line, jitter)
    hi = victim.step_offset(10, LOOKUP, 0, jitter) - 1
    return lo, hi


def rsa_target_window(victim: RsaVictim) -> tuple[int, int]:
    return victim.last_mul_operand_offset() + 1, victim.copy_offset()


def _measure_tsx_latency(victim, monitored: int, geometry: CacheGeometry, runs: int, seed: int,
                         delivery: int) -> list:
    """Detection latencies (abort ts minus victim start) on a replica."""
    m = Machine(geometry, abort_delivery_latency=delivery, seed=seed, trace_limit=0)
    rng = random.Random(seed)
    truth = GroundTruth()
    ev = build_eviction_set(geometry, m.cache.l3_index(monitored), seed)
    plan = AttackPlan(shoot=Shoot.METHOD1_FLUSH)
    sn = Sniper(m, plan, ev)
    lat = []

    def attacker():
        while True:
            info = yield from aim_tsx(sn, monitored, 1 << 62)
            if info is None:
                return
            if info.reason == AbortReason.READ_SET_EVICTED and truth.records:
                lat.append(info.timestamp - truth.records[-1].start)
            yield (SLEEP, m.now + 30_000)

    if isinstance(victim, AesVictim):
        m.spawn(aes_server(m, victim, truth, runs, rng, mean_us=20, first_start=20_000), "victim", VICTIM, 0)
    else:
        short = RsaVictim(victim.bits[:1], victim.r_base, victim.code_base, victim.timing)
        m.spawn(rsa_server(m, short, truth, runs, rng, mean_us=20, first_start=20_000), "victim", VICTIM, 0)
    m.spawn(attacker(), "attacker", ATTACKER, 1)
    m.run_until(20_000 + (runs + 2) * 76_000)
    return lat


def stakeout(victim, plan: AttackPlan, *, monitored: int, target_line: Optional[int] = None,
             geometry: Optional[CacheGeometry] = None, runs: int = 15, seed: int = 0,
             delivery: int = 180, end_margin: int = 60) -> StakeoutResult:
    """Profile a victim replica and derive WAIT_TIME for ``plan.shoot``.

    Detection latency is measured on the simulator; the target window comes
    from the replica's own step timing. Raises WINDOW_TOO_EARLY when the
    shoot method cannot reach the window in time.
    """
    geometry = geometry or CacheGeometry()
    lat = _measure_tsx_latency(victim, monitored, geometry, runs, seed, delivery)
    if not lat:
        raise SniperError("NO_DETECTION", "stakeout saw no aborts")
    det = int(statistics.median(lat))
    if isinstance(victim, AesVictim):
        # the replica runs with the typical (mean) jitter delay
        jit = victim.timing.jitter_clamp if victim.timing.jitter_sigma > 0 else 0
        lo, hi = aes_target_window(victim, target_line if target_line is not None else 0, jit)
        end = victim.timing.nominal_cycles
    else:
        lo, hi = rsa_target_window(victim)
        end = victim.red_end_offset()
    target = (lo + hi) // 2
    lead = target - det
    if lead < MIN_LEAD[plan.shoot]:
        raise SniperError("WINDOW_TOO_EARLY", f"window opens {lead} cycles after detection, "
                          f"{plan.shoot.value} needs {MIN_LEAD[plan.shoot]}")
    wait = lead - shoot_latency(plan.shoot, geometry)
    return StakeoutResult(wait, end - det + end_margin, det, lead)
