import random

import pytest
from hypothesis import given, settings, strategies as st

from snipersim.cache_model import CacheGeometry, Level
from snipersim.config import ScenarioConfig
from snipersim.experiments import aes_truth_accessed, run_aes_attack
from snipersim.machine import ACCESS, ATTACKER, SLEEP, VICTIM, Machine
from snipersim.sniper import (
    MIN_LEAD,
    AttackPlan,
    Detection,
    ObservationLog,
    Sample,
    Shoot,
    Sniper,
    SniperError,
    Verdict,
    adapt_wait_time,
    build_eviction_set,
    naive_order_levels,
    plru_aware_order,
    shoot_latency,
    stakeout,
    verify_order,
)
from snipersim.victims import AesVictim, RsaVictim

G = CacheGeometry()


def test_eviction_set_is_congruent_and_distinct():
    ev = build_eviction_set(G, 77, seed=4)
    assert len(ev) == 12 and len(set(ev.addresses)) == 12
    assert {(a >> 6) & 1023 for a in ev.addresses} == {77}
    assert ev["A"] == ev.sacrificial and ev["B"] == ev.probe
    with pytest.raises(ValueError):
        build_eviction_set(G, 1024)


def test_naive_order_hits_l1_and_aware_order_does_not():
    ev = build_eviction_set(G, 5)
    levels = naive_order_levels(G, ev)
    assert levels[0] == Level.L1  # B survives the linear fill in L1
    order = plru_aware_order(G, ev)
    assert sorted(order) == sorted(ev.addresses[1:])
    assert verify_order(G, ev, order)


def test_aware_order_is_naive_on_a_sixteen_way_llc():
    g = G.with_l3_ways(16)
    ev = build_eviction_set(g, 5)
    assert plru_aware_order(g, ev) == ev.addresses[1:]


def test_no_order_when_the_set_fits_in_l1():
    g = G.with_l3_ways(4)
    ev = build_eviction_set(g, 5)
    with pytest.raises(SniperError) as e:
        plru_aware_order(g, ev)
    assert e.value.code == "NO_ORDER_FOUND"


def _staged(seed=0):
    m = Machine(trace_limit=0)
    ev = build_eviction_set(G, 33, seed)
    sn = Sniper(m, AttackPlan(shoot=Shoot.METHOD2_ACCESS, wait_time=100), ev)
    return m, ev, sn


def test_stage_leaves_a_oldest_at_way_zero():
    m, ev, sn = _staged()
    out = {}

    def proc():
        out["ok"] = yield from sn.stage()

    m.spawn(proc(), "a", ATTACKER, 1)
    m.run_until(10**6)
    s = m.cache.l3_set(33)
    assert out["ok"]
    assert s.lines[0] == ev.sacrificial >> 6
    assert s.valid_ages() == [2] + [1] * 11


def _shoot_cycle(victim_reloads: bool, seed=0):
    m, ev, sn = _staged(seed)
    target = 0x4000_0000 + (33 << 6)
    res = {}

    def victim():
        yield (SLEEP, 100_000)
        yield (ACCESS, target, 1)
        if victim_reloads:
            yield (SLEEP, 101_000)
            yield (ACCESS, target, 1)

    def attacker():
        yield from sn.stage()
        yield (SLEEP, 100_500)
        before = {x for x in m.cache.l3_set(33).lines if x is not None}
        res["ok"] = yield from sn.shoot(target)
        res["diff"] = (before, {x for x in m.cache.l3_set(33).lines if x is not None})
        yield (SLEEP, 102_000)
        res["verdict"] = yield from sn.recover(target)

    m.spawn(victim(), "v", VICTIM, 0)
    m.spawn(attacker(), "a", ATTACKER, 1)
    m.run_until(10**6)
    return res, ev, target


def test_method2_shoot_is_surgical():
    res, ev, target = _shoot_cycle(False)
    before, after = res["diff"]
    assert res["ok"]
    assert before - after == {target >> 6}
    assert after - before == {ev.sacrificial >> 6}


@pytest.mark.parametrize("reload,verdict", [(True, Verdict.ACCESSED), (False, Verdict.NOT_ACCESSED)])
def test_method2_probe_verdict(reload, verdict):
    res, _ev, _t = _shoot_cycle(reload)
    assert res["verdict"] == verdict


def test_shoot_reports_broken_staging_when_a_is_cached():
    m, ev, sn = _staged()
    res = {}

    def attacker():
        yield from sn.stage()
        yield (ACCESS, ev.sacrificial, 1)  # a stray touch of A
        res["ok"] = yield from sn.shoot(0x4000_0000 + (33 << 6))

    m.spawn(attacker(), "a", ATTACKER, 1)
    m.run_until(10**6)
    assert res["ok"] is False


def test_method1_shoot_and_recover():
    m = Machine(trace_limit=0)
    ev = build_eviction_set(G, 1)
    sn = Sniper(m, AttackPlan(), ev)
    line = 0x4000_0040
    res = {}

    def attacker():
        yield from sn.shoot(line)  # absent line: no-op
        yield (ACCESS, line, 1)
        yield from sn.shoot(line)
        res["gone"] = not m.cache.in_l3(line)
        res["v1"] = yield from sn.recover(line)
        res["v2"] = yield from sn.recover(line)

    m.spawn(attacker(), "a", ATTACKER, 1)
    m.run_until(10**6)
    assert res == {"gone": True, "v1": Verdict.NOT_ACCESSED, "v2": Verdict.ACCESSED}


def test_plan_validation():
    AttackPlan(wait_time=100).validate()
    with pytest.raises(SniperError) as e:
        AttackPlan(shoot=Shoot.METHOD2_ACCESS, wait_time=0).validate()
    assert e.value.code == "WINDOW_TOO_EARLY"
    with pytest.raises(SniperError) as e:
        AttackPlan(wait_time=100, shared_memory=False).validate()
    assert e.value.code == "CONFIG_INVALID"
    assert shoot_latency(Shoot.METHOD2_ACCESS) == 200 and shoot_latency(Shoot.METHOD1_FLUSH) == 0


def _log(rate, n=1000):
    log = ObservationLog()
    k = int(rate * n)
    for i in range(n):
        log.append(Sample(i, i, i, Verdict.NOT_ACCESSED if i < k else Verdict.ACCESSED, True))
    return log


def test_adaptation_directions():
    plan = AttackPlan(wait_time=1000, adaptive=True)
    assert adapt_wait_time(_log(1.0), plan) == 980
    assert adapt_wait_time(_log(0.07), plan) == 1000
    assert adapt_wait_time(_log(0.0), plan) == 1010
    low = AttackPlan(wait_time=MIN_LEAD[Shoot.METHOD1_FLUSH])
    assert adapt_wait_time(_log(1.0), low) == MIN_LEAD[Shoot.METHOD1_FLUSH]


def test_observation_log_round_trip(tmp_path):
    log = ObservationLog()
    log.append(Sample(0, 10, 20, Verdict.ACCESSED, True, "ab" * 16))
    log.append(Sample(1, 30, 40, Verdict.INVALID, False, "cd" * 16))
    p = tmp_path / "obs.csv"
    log.write_csv(p)
    back = ObservationLog.read_csv(p)
    assert [(s.sample, s.detect_ts, s.shoot_ts, s.verdict, s.valid, s.payload) for s in back.samples] == \
           [(s.sample, s.detect_ts, s.shoot_ts, s.verdict, s.valid, s.payload) for s in log.samples]
    assert p.read_text().splitlines()[0] == "sample,detect_ts,shoot_ts,verdict,validity,payload"


def test_stakeout_aes():
    v = AesVictim(bytes(16))
    so = stakeout(v, AttackPlan(), monitored=v.line_addr(0), target_line=0, geometry=G)
    assert so.detect_latency == 380
    assert so.wait_time == 127
    with pytest.raises(SniperError) as e:
        stakeout(v, AttackPlan(shoot=Shoot.METHOD2_ACCESS), monitored=v.line_addr(0), target_line=0, geometry=G)
    assert e.value.code == "WINDOW_TOO_EARLY"


def test_stakeout_rsa_leaves_room_for_method2():
    v = RsaVictim([1, 0])
    so = stakeout(v, AttackPlan(shoot=Shoot.METHOD2_ACCESS), monitored=v.mul_code, geometry=G)
    assert so.lead >= MIN_LEAD[Shoot.METHOD2_ACCESS]
    assert so.wait_time + 200 == so.lead


def test_noiseless_verdicts_match_ground_truth():
    cfg = ScenarioConfig(samples=400, stop_when_recovered=False, arrival_mean_us=50, trace_limit=0)
    res = run_aes_attack(cfg)
    by_id = {r.run_id: r for r in res.truth.records}
    assert len(res.log) == 400
    for s in res.log.samples:
        assert s.valid
        rec = by_id[s.run_id]
        recovery_at = s.detect_ts + res.plan.probe_delay
        touched = aes_truth_accessed(res.victim, rec, cfg.monitored_line, s.shoot_ts, recovery_at)
        assert (s.verdict == Verdict.ACCESSED) == touched


def test_tsx_detection_latency_is_constant():
    cfg = ScenarioConfig(samples=50, stop_when_recovered=False, arrival_mean_us=50, trace_limit=0)
    res = run_aes_attack(cfg)
    starts = {r.run_id: r.start for r in res.truth.records}
    assert {s.detect_ts - starts[s.run_id] for s in res.log.samples} == {380}
