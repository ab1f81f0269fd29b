"""Policy oracles run by ``snipersim validate``.

Each suite replays a small scenario directly against the cache model and
reports a counterexample when the expected behaviour is not observed.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

from .cache_model import CacheGeometry, HierarchyState, Level
from .sniper import EvictionSet, build_eviction_set, naive_order_levels, plru_aware_order, verify_order

ATTACKER_CORE = 1
VICTIM_CORE = 0
NOISE_CORE = 2


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str = ""
    counterexample: Optional[dict] = None


@dataclass
class ValidationReport:
    suites: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)

    def lines(self) -> list[str]:
        out = []
        for s in self.suites:
            out.append(f"{'PASS' if s.passed else 'FAIL'} {s.name}: {s.detail}")
            if s.counterexample:
                for k, v in s.counterexample.items():
                    out.append(f"    {k} = {v}")
        return out


def _target_line(geometry: CacheGeometry, set_index: int) -> int:
    # a victim address in the same L3 set, outside the attacker's range
    return 0x4000_0000 + (set_index << 6)


def stage_sync(h: HierarchyState, ev: EvictionSet, order: list, core: int = ATTACKER_CORE,
               max_rounds: int = 16) -> bool:
    """The attacker's staging sequence without timing: clean fill, flush, linear fill, touches."""
    for r in range(max_rounds):
        for a in ev.addresses:
            h.flush(a)
        for a in ev.addresses:
            h.access(a, core)
        if all(h.in_l3(a) for a in ev.addresses):
            break
    else:
        return False
    for a in ev.addresses:
        h.flush(a)
    ok = all(h.access(a, core).level == Level.MEM for a in ev.addresses)
    return ok and all(h.access(a, core).level == Level.L3 for a in order)


def _set_lines(h: HierarchyState, set_index: int) -> set:
    return {x for x in h.l3_set(set_index).lines if x is not None}


def surgical_eviction_trial(geometry: CacheGeometry, rng: random.Random, insert_age: int = 2,
                            ev: Optional[EvictionSet] = None, order: Optional[list] = None) -> Optional[dict]:
    """One randomized staging + shoot. Returns None on success, else a counterexample."""
    set_index = ev.set_index if ev else rng.randrange(geometry.l3.sets)
    ev = ev or build_eviction_set(geometry, set_index, rng.randrange(1 << 16))
    order = order or plru_aware_order(geometry, ev)
    h = HierarchyState(geometry, insert_age=insert_age)
    stride = geometry.l3.sets << 6
    # random prior contents: foreign lines, some attacker lines, random hits
    foreign = [0x7000_0000_00 + (set_index << 6) + k * stride for k in rng.sample(range(4096), 16)]
    pool = foreign + list(ev.addresses)
    for _ in range(rng.randrange(40)):
        a = rng.choice(pool)
        h.access(a, rng.choice((ATTACKER_CORE, NOISE_CORE, VICTIM_CORE)))
    if not stage_sync(h, ev, order):
        return {"step": "staging", "set": set_index}
    target = _target_line(geometry, set_index) + rng.randrange(64) * stride
    h.access(target, VICTIM_CORE)
    before = _set_lines(h, set_index)
    h.access(ev.sacrificial, ATTACKER_CORE)
    after = _set_lines(h, set_index)
    t_line = target >> 6
    a_line = ev.sacrificial >> 6
    if before - after != {t_line} or after - before != {a_line}:
        return {"step": "shoot", "set": set_index, "evicted": sorted(before - after),
                "inserted": sorted(after - before), "expected_out": t_line}
    # victim reload must displace the probe line B
    h.access(target, VICTIM_CORE)
    if h.in_l3(ev.probe):
        return {"step": "probe", "set": set_index, "ages": h.l3_set(set_index).valid_ages()}
    return None


def staging_replay(geometry: Optional[CacheGeometry] = None, insert_age: int = 2,
                   trials: int = 200, seed: int = 0) -> SuiteResult:
    geometry = geometry or CacheGeometry()
    ev = build_eviction_set(geometry, 5, seed)
    order = plru_aware_order(geometry, ev)
    # the canonical replay first, so a policy change shows up with its age vector
    h = HierarchyState(geometry, insert_age=insert_age)
    stage_sync(h, ev, order)
    ages = h.l3_set(ev.set_index).valid_ages()
    want = [2] + [1] * (len(ev) - 1)
    if ages != want:
        return SuiteResult("staging_replay", False, "stage ages differ from the expected vector",
                           {"insert_age": insert_age, "ages": ages, "expected": want})
    rng = random.Random(seed)
    for i in range(trials):
        bad = surgical_eviction_trial(geometry, rng, insert_age)
        if bad is not None:
            bad["trial"] = i
            return SuiteResult("staging_replay", False, "randomized replay failed", bad)
    return SuiteResult("staging_replay", True, f"canonical replay and {trials} randomized set states")


def plru_survivors(geometry: Optional[CacheGeometry] = None, seed: int = 0) -> tuple[list, SuiteResult]:
    """Labels of the first L1-ways lines still in L1 after a linear fill of the whole set."""
    geometry = geometry or CacheGeometry()
    ev = build_eviction_set(geometry, 5, seed)
    h = HierarchyState(geometry)
    for a in ev.addresses:
        h.access(a, ATTACKER_CORE)
    labels = ev.labels
    kept = [labels[i] for i, a in enumerate(ev.addresses[: geometry.l1.ways])
            if h.in_private(a, ATTACKER_CORE) == Level.L1]
    expect = ["B", "D", "F", "H"]
    ok = kept == expect if (geometry.l1.ways, geometry.l3.ways) == (8, 12) else True
    return kept, SuiteResult("plru_survivors", ok, f"L1 survivors {{{', '.join(kept)}}}",
                             None if ok else {"expected": expect})


def order_check(geometry: Optional[CacheGeometry] = None, seed: int = 0) -> SuiteResult:
    geometry = geometry or CacheGeometry()
    ev = build_eviction_set(geometry, 5, seed)
    naive = naive_order_levels(geometry, ev)
    order = plru_aware_order(geometry, ev)
    ok = verify_order(geometry, ev, order)
    lab = dict(zip(ev.addresses, ev.labels))
    served_l1 = [lab[a] for a, lv in zip(ev.addresses[1:], naive) if lv != Level.L3]
    return SuiteResult("plru_aware_order", ok,
                       f"order {''.join(lab[a] for a in order)} all-L3; naive order served from L1/L2 on {served_l1}",
                       None if ok else {"order": [lab[a] for a in order]})


def inclusivity_audit(geometry: Optional[CacheGeometry] = None, steps: int = 20_000, seed: int = 0) -> SuiteResult:
    geometry = geometry or CacheGeometry()
    rng = random.Random(seed)
    h = HierarchyState(geometry)
    stride = geometry.l3.sets << 6
    # a few hot sets so evictions and back-invalidations actually happen
    addrs = [(s << 6) + k * stride for s in (0, 1, 64) for k in range(40)]
    for i in range(steps):
        a = rng.choice(addrs)
        if rng.random() < 0.05:
            h.flush(a)
        else:
            h.access(a, rng.randrange(geometry.cores))
        if i % 97 == 0:
            bad = h.inclusivity_violations()
            if bad:
                return SuiteResult("inclusivity", False, f"violation after {i + 1} operations",
                                   {"core_line": bad[:5]})
        ages = [x for s in h.l3.values() for x in s.valid_ages() if x is not None]
        if any(not 0 <= x <= 3 for x in ages):
            return SuiteResult("inclusivity", False, "age outside 0..3", {"step": i})
    return SuiteResult("inclusivity", True, f"{steps} random operations, no private line outside L3")


def validate_policies(insert_age: int = 2, trials: int = 200, seed: int = 0,
                      geometry: Optional[CacheGeometry] = None) -> ValidationReport:
    geometry = geometry or CacheGeometry()
    rep = ValidationReport()
    rep.suites.append(staging_replay(geometry, insert_age, trials, seed))
    rep.suites.append(plru_survivors(geometry, seed)[1])
    rep.suites.append(order_check(geometry, seed))
    rep.suites.append(inclusivity_audit(geometry, seed=seed))
    return rep
