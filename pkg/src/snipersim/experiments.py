"""End-to-end scenarios built from the machine, the victims and the attacker."""

from __future__ import annotations

import bisect
import math
import random
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import aes
from .cache_model import CacheGeometry, LINE_BITS
from .config import ScenarioConfig
from .machine import ATTACKER, NOISE, SLEEP, VICTIM, WAIT_ABORT, ACCESS, AbortReason, Machine, noise_process
from .recovery import BitTrace, KeyHypothesisSet, ProgressRecorder, aes_eliminate, key_search_space, rsa_decode
from .sniper import (
    AttackPlan,
    Detection,
    ObservationLog,
    Sample,
    Shoot,
    Sniper,
    SniperError,
    Verdict,
    adapt_wait_time,
    aim_flush_reload,
    build_eviction_set,
    plru_aware_order,
    stakeout,
    verify_order,
)
from .victims import (
    AesTiming,
    AesVictim,
    CiphertextRecord,
    GroundTruth,
    RsaTiming,
    RsaVictim,
    aes_server,
    random_exponent,
    rsa_server,
)

FAR_FUTURE = 1 << 62


def make_key(cfg: ScenarioConfig) -> bytes:
    if cfg.key != "random":
        return bytes.fromhex(cfg.key)
    return random.Random(cfg.key_seed).randbytes(16)


def make_plan(cfg: ScenarioConfig) -> AttackPlan:
    return AttackPlan(
        detection=Detection(cfg.detection),
        shoot=Shoot(cfg.shoot),
        adaptive=cfg.adaptive,
        target_miss_rate=cfg.target_miss_rate,
        adapt_window=cfg.adapt_window,
        adapt_down=cfg.adapt_down,
        adapt_up=cfg.adapt_up,
        wait_limit=cfg.wait_limit,
        shared_memory=cfg.shared_memory,
    )


def _machine(cfg: ScenarioConfig, trace_sets) -> Machine:
    return Machine(
        cfg.geometry(),
        abort_delivery_latency=cfg.abort_delivery_latency,
        spontaneous_abort_rate=cfg.spontaneous_abort_rate,
        seed=cfg.seed,
        trace_sets=trace_sets,
        trace_limit=cfg.trace_limit,
        insert_age=cfg.insert_age,
    )


def discover_table(victim: AesVictim, geometry: CacheGeometry, seed: int = 0) -> int:
    """Stakeout step: find which of the four S-Boxes the server uses.

    Probes line 0 of each table with a Flush+Reload on a replica run.
    """
    for t in range(4):
        m = Machine(geometry, seed=seed, trace_limit=0)
        truth = GroundTruth()
        replica = AesVictim(bytes(16), victim.sbox_base, victim.table_choice, victim.timing)
        m.spawn(aes_server(m, replica, truth, 1, random.Random(seed), first_start=1000), "victim", VICTIM, 0)
        m.run_until(1000 + victim.timing.nominal_cycles + 100)
        if m.cache.in_l3(victim.line_addr(0, t)):
            return t
    raise SniperError("NO_DETECTION", "no S-Box table touched")


# --------------------------------------------------------------------------
# AES


@dataclass
class AesRunResult:
    log: ObservationLog
    hyp: KeyHypothesisSet
    progress: ProgressRecorder
    truth: GroundTruth
    machine: Machine
    plan: AttackPlan
    victim: AesVictim
    wait_history: list = field(default_factory=list)
    stakeout: Optional[object] = None

    @property
    def recovered_last_round_key(self) -> Optional[bytes]:
        return self.hyp.unique_key()

    @property
    def recovered_key(self) -> Optional[bytes]:
        k = self.recovered_last_round_key
        return None if k is None else aes.invert_key_schedule(k)

    @property
    def search_space_bits(self) -> float:
        return key_search_space(self.hyp)


def _record_for(truth: GroundTruth, ts: int):
    """Latest victim run started at or before ``ts``."""
    # records are appended in time order and the match is almost always the last one
    for r in reversed(truth.records):
        if r.start <= ts:
            return r
    return None


def aes_attacker(m: Machine, sn: Sniper, target: int, truth: GroundTruth, log: ObservationLog,
                 on_sample=None, deadline: int = FAR_FUTURE):
    """Aim, wait, shoot and recover, once per detected encryption."""
    plan = sn.plan
    n = 0
    while True:
        info = None
        yield from sn.arm(target)
        info = yield (WAIT_ABORT, deadline)
        if info is None:
            return
        if info.reason == AbortReason.SPONTANEOUS:
            log.spontaneous_aborts += 1
            continue
        det = info.timestamp
        shoot_at = det + plan.wait_time
        valid, reason = True, ""
        if m.now > shoot_at:
            valid, reason = False, "late"
        yield (SLEEP, shoot_at)
        ok = yield from sn.shoot(target)
        if not ok:
            valid, reason = False, "staging_broken"
            log.staging_broken += 1
        yield (SLEEP, det + plan.probe_delay)
        verdict = yield from sn.recover(target)
        rec = _record_for(truth, det)
        if rec is None or det > rec.end:
            # no request in flight: the client knows its own request/response times
            valid, reason, rec = False, "no_request", None
        s = Sample(n, det, shoot_at, verdict if valid else Verdict.INVALID, valid,
                   rec.ciphertext.hex() if rec else "", rec.run_id if rec else -1, reason)
        log.append(s)
        n += 1
        if on_sample is not None:
            on_sample(s)
        if plan.adaptive and n % plan.adapt_window == 0:
            plan.wait_time = adapt_wait_time(log, plan)


def run_aes_attack(cfg: ScenarioConfig, progress_every: int = 0) -> AesRunResult:
    geom = cfg.geometry()
    timing = AesTiming(jitter_sigma=cfg.aes_jitter_sigma)
    victim = AesVictim(make_key(cfg), table_choice=cfg.table_choice, timing=timing)
    table = discover_table(victim, geom, cfg.seed)
    target = victim.line_addr(cfg.monitored_line, table)
    l3_set = (target >> LINE_BITS) & (geom.l3.sets - 1)

    plan = make_plan(cfg)
    so = None
    if cfg.wait_time == "auto":
        so = stakeout(victim, plan, monitored=target, target_line=cfg.monitored_line, geometry=geom,
                      seed=cfg.seed, delivery=cfg.abort_delivery_latency)
        plan.wait_time, plan.probe_delay = so.wait_time, so.probe_delay
    else:
        plan.wait_time = int(cfg.wait_time)
        plan.probe_delay = victim.timing.nominal_cycles - 380 + 60
    plan.wait_ceiling = victim.timing.nominal_cycles
    plan.validate()

    m = _machine(cfg, [l3_set])
    evset = build_eviction_set(geom, l3_set, cfg.seed)
    order = None
    if plan.shoot == Shoot.METHOD2_ACCESS:
        order = plru_aware_order(geom, evset)
        if not verify_order(geom, evset, order):
            raise SniperError("NO_ORDER_FOUND", "order failed verification")
    sn = Sniper(m, plan, evset, order)

    truth = GroundTruth()
    log = ObservationLog()
    hyp = KeyHypothesisSet(noisy=cfg.noisy_recovery)
    prog = ProgressRecorder(hyp)
    res = AesRunResult(log, hyp, prog, truth, m, plan, victim, [(0, plan.wait_time)], so)
    rng = random.Random(cfg.seed)

    def on_sample(s: Sample):
        if s.valid:
            aes_eliminate(hyp, bytes.fromhex(s.payload), cfg.monitored_line, s.verdict)
        n = len(log)
        prog.record(n, force=bool(progress_every) and n % progress_every == 0)
        if res.wait_history[-1][1] != plan.wait_time:
            res.wait_history.append((n, plan.wait_time))
        if n >= cfg.samples or (cfg.stop_when_recovered and not hyp.noisy and key_search_space(hyp) == 0):
            m.stop()

    m.spawn(aes_server(m, victim, truth, cfg.samples * 2 + 10, rng, cfg.arrival_mean_us, cfg.arrival_jitter_us,
                       cfg.cycles_per_us), "victim", VICTIM, 0)
    m.spawn(aes_attacker(m, sn, target, truth, log, on_sample), "attacker", ATTACKER, 1)
    _spawn_noise(m, cfg, [l3_set], cfg.noise_rate_per_set)
    m.run_until(FAR_FUTURE)
    prog.record(len(log), force=True)
    return res


def _spawn_noise(m: Machine, cfg: ScenarioConfig, sets, rate):
    if rate > 0:
        m.spawn(noise_process(m, sets, rate, random.Random(cfg.seed * 7919 + sets[0])), f"noise{sets[0]}", NOISE, 2)


def aes_truth_accessed(victim: AesVictim, rec: CiphertextRecord, line: int, after: int, until: int) -> bool:
    """Did the victim touch ``line`` in (after, until]? Evaluation only."""
    for off in victim.line_access_offsets(rec.plaintext, line, rec.jitter):
        t = rec.start + off
        if after < t <= until:
            return True
    return False


# --------------------------------------------------------------------------
# RSA


@dataclass
class RsaRunResult:
    log: ObservationLog
    traces: list
    truth: GroundTruth
    victim: RsaVictim
    decode: object
    machine: Machine
    plan: AttackPlan
    stakeout: Optional[object] = None


def rsa_attacker(m: Machine, sn_r0: Sniper, sn_det: Sniper, victim: RsaVictim, truth: GroundTruth,
                 log: ObservationLog, det_latency: int = 380, tolerance: float = 0.10,
                 deadline: int = FAR_FUTURE):
    """Stage R[0]'s set, arm on the multiply code line, then shoot and probe.

    Multiplies recur with a known period, so an abort far from the
    predicted phase is logged as an invalid detection and only the
    transaction is re-armed. The phase is anchored at the request time of
    each decryption, which the attacker (as the client) observes.
    """
    plan = sn_r0.plan
    period = victim.timing.period
    tol = tolerance * period
    n = 0
    need_stage = True
    anchor = None  # (run_id, timestamp of last in-phase detection)
    while True:
        if need_stage:
            staged = yield from sn_r0.stage(in_tx=False)
        yield from sn_det.prime(victim.mul_code)
        info = yield (WAIT_ABORT, deadline)
        if info is None:
            return
        if info.reason == AbortReason.SPONTANEOUS:
            # R[0]'s set was not touched; only the transaction needs re-arming
            log.spontaneous_aborts += 1
            need_stage = False
            continue
        det = info.timestamp
        rec = _record_for(truth, det)
        run_id = rec.run_id if rec else -1
        if rec is not None and (anchor is None or anchor[0] != run_id):
            anchor = (run_id, rec.start + det_latency - period)
        in_phase = False
        if anchor is not None:
            gap = det - anchor[1]
            k = round(gap / period)
            in_phase = k >= 1 and abs(gap - k * period) <= tol
        if not in_phase:
            log.append(Sample(n, det, det, Verdict.INVALID, False, str(run_id), run_id, "out_of_phase"))
            n += 1
            need_stage = False
            continue
        anchor = (run_id, det)
        need_stage = True
        shoot_at = det + plan.wait_time
        # tidy the detection set while waiting, so re-arming later is quick
        yield from sn_det.clean_fill(fast=True, max_rounds=2)
        valid, reason = True, ""
        if not staged:
            valid, reason = False, "staging_broken"
        if m.now > shoot_at:
            valid, reason = False, "late"
        yield (SLEEP, shoot_at)
        ok = yield from sn_r0.shoot(victim.r_addr(0))
        if not ok:
            valid, reason = False, "staging_broken"
        if not valid and reason == "staging_broken":
            log.staging_broken += 1
        yield (SLEEP, det + plan.probe_delay)
        verdict = yield from sn_r0.recover(victim.r_addr(0))
        log.append(Sample(n, det, shoot_at, verdict if valid else Verdict.INVALID, valid,
                          str(run_id), run_id, reason))
        n += 1


def run_rsa_attack(cfg: ScenarioConfig) -> RsaRunResult:
    geom = cfg.geometry()
    rng = random.Random(cfg.key_seed)
    bits = random_exponent(cfg.exponent_bits, rng)
    victim = RsaVictim(bits, timing=RsaTiming(jitter_sigma=cfg.rsa_jitter_sigma))

    plan = make_plan(cfg)
    if plan.shoot != Shoot.METHOD2_ACCESS:
        raise SniperError("CONFIG_INVALID", "RSA operands are private: use shoot = method2")
    so = None
    if cfg.wait_time == "auto":
        so = stakeout(victim, plan, monitored=victim.mul_code, geometry=geom, seed=cfg.seed,
                      delivery=cfg.abort_delivery_latency)
        plan.wait_time, plan.probe_delay = so.wait_time, so.probe_delay
    else:
        plan.wait_time = int(cfg.wait_time)
        plan.probe_delay = victim.red_end_offset() - 380 + 60
    plan.wait_ceiling = victim.timing.period
    plan.validate()

    mask = geom.l3.sets - 1
    r0_set = (victim.r_addr(0) >> LINE_BITS) & mask
    det_set = (victim.mul_code >> LINE_BITS) & mask
    m = _machine(cfg, [r0_set, det_set])
    ev_r0 = build_eviction_set(geom, r0_set, cfg.seed)
    ev_det = build_eviction_set(geom, det_set, cfg.seed, base=0x20_0000_0000)
    order = plru_aware_order(geom, ev_r0)
    if not verify_order(geom, ev_r0, order):
        raise SniperError("NO_ORDER_FOUND", "order failed verification")
    sn_r0 = Sniper(m, plan, ev_r0, order)
    sn_det = Sniper(m, AttackPlan(shoot=Shoot.METHOD1_FLUSH), ev_det)

    truth = GroundTruth()
    log = ObservationLog()
    srv_rng = random.Random(cfg.seed)
    first = 200_000
    m.spawn(rsa_server(m, victim, truth, cfg.samples, srv_rng, cfg.arrival_mean_us, cfg.arrival_jitter_us,
                       cfg.cycles_per_us, first_start=first), "victim", VICTIM, 0)
    det_latency = so.detect_latency if so else 380
    m.spawn(rsa_attacker(m, sn_r0, sn_det, victim, truth, log, det_latency), "attacker", ATTACKER, 1)
    _spawn_noise(m, cfg, [r0_set], cfg.noise_rate_per_set)
    det_rate = cfg.noise_rate_per_set if cfg.detection_noise_rate < 0 else cfg.detection_noise_rate
    _spawn_noise(m, cfg, [det_set], det_rate)

    span = victim.timing.period * len(bits) + 200_000
    gap = int(cfg.arrival_mean_us * cfg.cycles_per_us)
    end = first + cfg.samples * (span + gap + int(cfg.arrival_jitter_us * cfg.cycles_per_us))
    while True:
        m.run_until(end)
        if len(truth) >= cfg.samples and truth.records[-1].end > truth.records[-1].start:
            break
        end += span
    traces = rsa_traces(log, truth, det_latency=det_latency)
    dec = rsa_decode(traces, len(bits), bits, period=victim.timing.period)
    return RsaRunResult(log, traces, truth, victim, dec, m, plan, so)


def rsa_traces(log: ObservationLog, truth: GroundTruth, det_latency: int = 380) -> list:
    """Group detections per decryption; the request time anchors window 0.

    Invalid samples still mark a detection but decode to an unknown bit.
    """
    traces = []
    for rec in truth.records:
        t = BitTrace(origin=rec.start + det_latency, truth_ts=[b + det_latency for b in rec.bit_starts])
        for s in log.samples:
            if rec.start <= s.detect_ts <= rec.end:
                t.add(s.detect_ts, s.verdict)
        traces.append(t)
    return traces


# --------------------------------------------------------------------------
# detection calibration


@dataclass
class DetectionStats:
    encryptions: int
    detected: int  # any victim-caused abort during the encryption
    latencies: list
    spontaneous: int
    window_cycles: int
    hazard: float
    nominal_latency: int = 380
    tolerance: int = 5

    @property
    def proper(self) -> int:
        return sum(abs(x - self.nominal_latency) <= self.tolerance for x in self.latencies)

    @property
    def rate(self) -> float:
        """Share of encryptions detected at the nominal latency."""
        return self.proper / self.encryptions if self.encryptions else 0.0

    @property
    def any_rate(self) -> float:
        return self.detected / self.encryptions if self.encryptions else 0.0


def arm_duration(geometry: Optional[CacheGeometry] = None, seed: int = 0) -> int:
    """Cycles from an abort until the Prime+Abort transaction is live again."""
    geometry = geometry or CacheGeometry()
    victim = AesVictim(bytes(16))
    m = Machine(geometry, seed=seed, trace_limit=0)
    target = victim.line_addr(0)
    ev = build_eviction_set(geometry, m.cache.l3_index(target), seed)
    sn = Sniper(m, AttackPlan(), ev)
    out = {}

    def proc():
        yield from sn.arm(target)
        yield (SLEEP, 10_000)
        m.tx.abort(AbortReason.SPONTANEOUS, m.now)
        t0 = m.now
        yield from sn.arm(target)
        out["d"] = m.now - t0

    m.spawn(proc(), "a", ATTACKER, 1)
    m.run_until(100_000)
    return out["d"]


def vulnerable_window(geometry: Optional[CacheGeometry] = None, seed: int = 0, step: int = 5,
                      latency: int = 380, tolerance: int = 5) -> int:
    """Cycles before a victim start in which a spontaneous abort costs the detection.

    Replays an abort at every offset before a single encryption and counts
    the offsets after which the encryption is not detected at the nominal
    latency.
    """
    geometry = geometry or CacheGeometry()
    arm = arm_duration(geometry, seed)
    victim = AesVictim(bytes(16))
    target = victim.line_addr(0)
    lost = 0
    for delta in range(0, arm + 10 * step, step):
        m = Machine(geometry, seed=seed, trace_limit=0)
        ev = build_eviction_set(geometry, m.cache.l3_index(target), seed)
        sn = Sniper(m, AttackPlan(), ev)
        t_abort = 20_000
        got = []

        def attacker():
            yield from sn.arm(target)
            yield (SLEEP, t_abort)
            m.tx.abort(AbortReason.SPONTANEOUS, m.now)
            yield from sn.arm(target)
            info = yield (WAIT_ABORT, t_abort + delta + 5000)
            if info is not None:
                got.append(info.timestamp)

        truth = GroundTruth()
        m.spawn(aes_server(m, victim, truth, 1, random.Random(seed), first_start=t_abort + delta), "v", VICTIM, 0)
        m.spawn(attacker(), "a", ATTACKER, 1)
        m.run_until(t_abort + delta + 6000)
        if not got or abs(got[0] - truth.records[0].start - latency) > tolerance:
            lost += 1
    return lost * step


def hazard_for_miss_rate(miss: float, vulnerable_cycles: int) -> float:
    """Per-cycle Poisson rate giving ``miss`` chance of an abort inside the window."""
    return -math.log(1.0 - miss) / vulnerable_cycles


def run_detection_calibration(encryptions: int = 10_000, miss: float = 0.03, seed: int = 1,
                              arrival_mean_us: float = 20.0, hazard: Optional[float] = None,
                              geometry: Optional[CacheGeometry] = None) -> DetectionStats:
    """Count TSX detections over many encryptions with spontaneous aborts on.

    An encryption is missed when a spontaneous abort leaves the attacker
    re-arming as the victim starts, so the hazard is set from the measured
    vulnerable window. Only detections at the nominal latency count. Arrivals are compressed (the idle gap only adds aborts that
    are re-armed long before the next request).
    """
    geometry = geometry or CacheGeometry()
    arm = vulnerable_window(geometry, seed)
    h = hazard if hazard is not None else hazard_for_miss_rate(miss, arm)
    victim = AesVictim(random.Random(seed).randbytes(16))
    target = victim.line_addr(0)
    m = Machine(geometry, spontaneous_abort_rate=h, seed=seed, trace_limit=0)
    truth = GroundTruth()
    ev = build_eviction_set(geometry, m.cache.l3_index(target), seed)
    sn = Sniper(m, AttackPlan(), ev)
    dets: list[int] = []
    spont = [0]

    def attacker():
        while True:
            yield from sn.arm(target)
            info = yield (WAIT_ABORT, FAR_FUTURE)
            if info is None:
                return
            if info.reason == AbortReason.SPONTANEOUS:
                spont[0] += 1
                continue
            dets.append(info.timestamp)
            yield (SLEEP, info.timestamp + 400)

    def server():
        yield from aes_server(m, victim, truth, encryptions, random.Random(seed), arrival_mean_us, 0.0, 3800)
        yield (SLEEP, m.now + 1000)
        m.stop()

    m.spawn(server(), "victim", VICTIM, 0)
    m.spawn(attacker(), "attacker", ATTACKER, 1)
    m.run_until(FAR_FUTURE)
    lat = []
    di = 0
    for rec in truth.records:
        while di < len(dets) and dets[di] < rec.start:
            di += 1
        if di < len(dets) and dets[di] <= rec.end + 400:
            lat.append(dets[di] - rec.start)
    return DetectionStats(len(truth), len(lat), lat, spont[0], arm, h)


# --------------------------------------------------------------------------
# Flush+Reload wait sweep


@dataclass
class SweepRow:
    wait_limit: int
    runs: int
    detected: int
    valid: int

    @property
    def detected_pct(self) -> float:
        return 100.0 * self.detected / self.runs

    @property
    def valid_pct(self) -> float:
        return 100.0 * self.valid / self.runs


def flush_reload_trial(wait_limit: int, runs: int = 400, seed: int = 1, iter_cycles: int = 20,
                       flush_settle: int = 165, valid_before: Optional[int] = None,
                       gap: int = 20_000, geometry: Optional[CacheGeometry] = None) -> SweepRow:
    """Flush+Reload detection against ``runs`` encryptions.

    A detection is valid when it arrives early enough to still flush ahead
    of the last-round lookups (the method 1 minimum lead before the last
    prefetch).
    """
    geometry = geometry or CacheGeometry()
    victim = AesVictim(random.Random(seed).randbytes(16))
    line = victim.line_addr(0)
    if valid_before is None:
        from .sniper import MIN_LEAD, aes_target_window
        valid_before = aes_target_window(victim, 0)[0] - MIN_LEAD[Shoot.METHOD1_FLUSH]
    rng = random.Random(seed)
    # start phases are randomized relative to the attacker loop
    starts = []
    t = 50_000
    for _ in range(runs):
        t += gap + rng.randrange(gap)
        starts.append(t)
    m = Machine(geometry, seed=seed, trace_limit=0)
    truth = GroundTruth()
    dets: list[int] = []

    def victim_proc():
        for i, s in enumerate(starts):
            yield (SLEEP, s)
            pt = rng.randbytes(16)
            ct, script = victim.encrypt_script(pt)
            rec = CiphertextRecord(i, pt, ct, m.now, m.now)
            truth.records.append(rec)
            for addr, cost, _lab in script:
                if addr is None:
                    yield (SLEEP, m.now + cost)
                else:
                    yield (ACCESS, addr, cost)
            rec.end = m.now

    def next_start():
        i = bisect.bisect_right(starts, m.now)
        return starts[i] if i < len(starts) else FAR_FUTURE

    def attacker():
        while True:
            ts = yield from aim_flush_reload(m, line, wait_limit, iter_cycles, flush_settle,
                                             starts[-1] + 10_000, next_event=next_start)
            if ts is None:
                return
            dets.append(ts)
            # the attack would now wait, shoot and probe; idle past this encryption
            yield (SLEEP, ts + 5000)

    miss = geometry.mem_latency
    loop_period = max(1 + wait_limit * iter_cycles, flush_settle) + miss
    m.spawn(victim_proc(), "victim", VICTIM, 0)
    m.spawn(attacker(), "attacker", ATTACKER, 1)
    m.run_until(starts[-1] + 10_000)
    detected = valid = 0
    di = 0
    for rec in truth.records:
        while di < len(dets) and dets[di] < rec.start:
            di += 1
        if di < len(dets) and dets[di] <= rec.end + loop_period + miss:
            detected += 1
            if dets[di] - rec.start <= valid_before:
                valid += 1
    return SweepRow(wait_limit, runs, detected, valid)


DEFAULT_SWEEP = (0, 5, 10, 15, 20, 25, 30, 40, 50, 60, 80, 100, 125, 150)


def wait_flush_sweep(limits=DEFAULT_SWEEP, runs: int = 400, seed: int = 1, **kw) -> list:
    return [flush_reload_trial(w, runs, seed, **kw) for w in limits]


# --------------------------------------------------------------------------
# last-round non-access curve


def aes_nonaccess_curve(samples: int = 100_000, seed: int = 1, line: int = 0):
    """Analytic and Monte Carlo chance that ``line`` is untouched by lookups k..16.

    Returns rows (k, analytic, monte_carlo) as fractions.
    """
    rng = np.random.default_rng(seed)
    keys = rng.integers(0, 256, size=(samples, 16), dtype=np.uint8)
    pts = rng.integers(0, 256, size=(samples, 16), dtype=np.uint8)
    _, last = aes.encrypt_batch(keys, pts, with_last_round=True)
    hits = (last >> 6) == line  # (n, 16) in lookup order
    # untouched from k on  <=>  no hit at positions k-1..15
    suffix_any = np.flip(np.logical_or.accumulate(np.flip(hits, axis=1), axis=1), axis=1)
    rows = []
    for k in range(1, 17):
        mc = 1.0 - suffix_any[:, k - 1].mean()
        rows.append((k, 0.75 ** (17 - k), float(mc)))
    return rows


def full_encryption_nonaccess(samples: int = 20_000, seed: int = 2, line: int = 0) -> float:
    """Fraction of encryptions whose 160 lookups never hit ``line`` (prefetches excluded)."""
    rng = random.Random(seed)
    untouched = 0
    for _ in range(samples):
        rk = aes.expand_key(rng.randbytes(16))
        _, lookups = aes.encrypt_trace(rk, rng.randbytes(16))
        if all(x >> 6 != line for r in lookups for x in r):
            untouched += 1
    return untouched / samples
