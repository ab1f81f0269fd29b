import random

import pytest
from hypothesis import given, settings, strategies as st

from snipersim.cache_model import CacheGeometry, Level
from snipersim.machine import (
    ACCESS,
    ATTACKER,
    FLUSH,
    LOAD,
    NOISE,
    NOW,
    SLEEP,
    TX_BEGIN,
    TX_END,
    TX_READ,
    VICTIM,
    WAIT_ABORT,
    AbortReason,
    Machine,
    Transaction,
    TxError,
    noise_process,
)

G = CacheGeometry()
STRIDE = G.l3.sets << 6


def set_lines(s, n, base=0x1000_0000):
    return [base + (s << 6) + k * STRIDE for k in range(n)]


def run(m, gen, core=1, until=10**7, prio=ATTACKER):
    p = m.spawn(gen, "p", prio, core)
    m.run_until(until)
    return p.result


def test_load_latency_and_level():
    m = Machine(trace_limit=0)
    a = 0x4000_0040

    def proc():
        t0 = yield (NOW,)
        first = yield (LOAD, a)
        t1 = yield (NOW,)
        second = yield (LOAD, a)
        t2 = yield (NOW,)
        return first.level, t1 - t0, second.level, t2 - t1

    assert run(m, proc()) == (Level.MEM, 200, Level.L1, 4)


def test_load_reports_level_seen_at_issue():
    # a flush landing while the load is in flight does not turn the hit into a miss
    m = Machine(trace_limit=0)
    a = 0x4000_0040
    m.cache.access(a, 1)
    m.cache.access(a, 0)
    m.cache.flush(a)
    m.cache.access(a, 1)

    def proc():
        out = yield (LOAD, a)
        return out.level

    assert run(m, proc(), core=1) == Level.L1


def test_tx_abort_on_read_set_eviction_with_delivery_latency():
    m = Machine(trace_limit=0, abort_delivery_latency=180)
    lines = set_lines(9, G.l3.ways)
    victim_line = set_lines(9, 1, base=0x7000_0000)[0]

    def attacker():
        for a in lines:
            yield (LOAD, a)
        yield (TX_BEGIN,)
        for a in lines:
            yield (TX_READ, a)
        info = yield (WAIT_ABORT, 10**6)
        return info

    def victim():
        yield (SLEEP, 50_000)
        yield (ACCESS, victim_line, 1)

    m.spawn(victim(), "v", VICTIM, 0)
    info = run(m, attacker())
    assert info.reason == AbortReason.READ_SET_EVICTED
    assert info.timestamp == 50_000 + 200 + 180


def test_wait_abort_times_out():
    m = Machine(trace_limit=0)

    def proc():
        yield (TX_BEGIN,)
        return (yield (WAIT_ABORT, 5000))

    assert run(m, proc()) is None
    assert m.now == 5000


def test_tx_errors_are_thrown_into_the_process():
    m = Machine(trace_limit=0)

    def proc():
        try:
            yield (TX_READ, 0x40)
        except TxError as e:
            return e.code

    assert run(m, proc()) == "TX_INACTIVE"
    tx = Transaction()
    tx.begin()
    with pytest.raises(TxError, match="TX_NESTED"):
        tx.begin()
    tx.commit()
    with pytest.raises(TxError):
        tx.commit()


def test_flush_of_read_set_line_aborts():
    m = Machine(trace_limit=0)
    a = 0x4000_0080

    def proc():
        yield (TX_BEGIN,)
        yield (TX_READ, a)
        yield (FLUSH, a, 10)
        return (yield (WAIT_ABORT, 10**5))

    info = run(m, proc())
    assert info.reason == AbortReason.READ_SET_EVICTED and info.line == a >> 6


def test_spontaneous_aborts_follow_the_hazard():
    m = Machine(trace_limit=0, spontaneous_abort_rate=1e-4, seed=3)
    gaps = []

    def proc():
        for _ in range(300):
            t0 = m.now
            yield (TX_BEGIN,)
            info = yield (WAIT_ABORT, 10**9)
            assert info.reason == AbortReason.SPONTANEOUS
            gaps.append(info.timestamp - t0)

    run(m, proc(), until=10**9)
    mean = sum(gaps) / len(gaps)
    assert 8000 < mean < 12000


def test_commit_keeps_cache_state():
    m = Machine(trace_limit=0)
    a = 0x4000_00C0

    def proc():
        yield (TX_BEGIN,)
        yield (TX_READ, a)
        yield (TX_END,)

    run(m, proc())
    assert m.cache.in_l3(a)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20))
def test_no_rollback_after_abort(seed, extra):
    """Whatever the transaction touched stays cached after the abort."""
    rng = random.Random(seed)
    m = Machine(trace_limit=0, abort_delivery_latency=180)
    lines = set_lines(rng.randrange(1024), G.l3.ways)
    others = [0x3000_0000 + rng.randrange(1 << 20) * 64 for _ in range(extra)]
    snaps = {}

    def attacker():
        yield (TX_BEGIN,)
        for a in lines + others:
            yield (TX_READ, a)
        info = yield (WAIT_ABORT, 10**7)
        snaps["at"] = m.cache.snapshot()
        yield (SLEEP, m.now + 1000)
        snaps["later"] = m.cache.snapshot()
        return info

    def victim():
        yield (SLEEP, 100_000)
        yield (ACCESS, set_lines(lines[0] >> 6 & 1023, 1, base=0x7000_0000)[0], 1)

    m.spawn(victim(), "v", VICTIM, 0)
    info = run(m, attacker())
    assert info is not None
    assert snaps["at"] == snaps["later"]
    assert all(m.cache.in_l3(a) for a in others)


def test_same_seed_same_trace():
    def once():
        m = Machine(seed=5, spontaneous_abort_rate=1e-5)
        m.spawn(noise_process(m, [3, 4], 1e-3, random.Random(2)), "n", NOISE, 2)

        def proc():
            for _ in range(50):
                yield (TX_BEGIN,)
                try:
                    for a in set_lines(3, 12):
                        yield (TX_READ, a)
                except TxError:
                    pass
                yield (WAIT_ABORT, m.now + 20_000)
                if m.tx.active:
                    yield (TX_END,)

        m.spawn(proc(), "a", ATTACKER, 1)
        m.run_until(2_000_000)
        return list(m.trace)

    assert once() == once()


def test_trace_filters_sets_and_limits_rows():
    m = Machine(trace_sets=[1], trace_limit=3)

    def proc():
        for k in range(5):
            yield (LOAD, (1 << 6) + k * STRIDE)
        yield (LOAD, 2 << 6)

    run(m, proc())
    assert len(m.trace) == 3 and m.trace.dropped == 2
    assert all(r[3] == 1 for r in m.trace)
