"""Key recovery from attacker observations.

AES: a last-round line that was *not* touched rules out, for every
ciphertext byte, the 64 key values that would have required it. RSA: the
verdict on R[0] after each multiply gives the exponent bit directly.
"""

from __future__ import annotations

import bisect
import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .aes import SBOX

SBOX_NP = np.array(SBOX, dtype=np.uint8)


class RecoveryError(ValueError):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code


def line_values(line_index: int) -> np.ndarray:
    """S-Box outputs stored in one 64-byte line of the table."""
    if not 0 <= line_index < 4:
        raise ValueError(f"line_index must be 0..3, got {line_index}")
    return SBOX_NP[64 * line_index : 64 * (line_index + 1)]


@dataclass
class KeyHypothesisSet:
    """Per-byte candidate sets for the last round key.

    In hard mode a candidate is alive until eliminated once; in noisy mode
    every candidate stays and collects a score (lower is more likely).
    """

    noisy: bool = False
    alive: np.ndarray = field(default_factory=lambda: np.ones((16, 256), dtype=bool))
    scores: np.ndarray = field(default_factory=lambda: np.zeros((16, 256), dtype=np.int64))
    updates: int = 0

    def counts(self) -> list[int]:
        return [int(c) for c in self.alive.sum(axis=1)]

    def unique_key(self) -> Optional[bytes]:
        if self.noisy:
            return bytes(int(np.argmin(self.scores[i])) for i in range(16))
        if all(c == 1 for c in self.counts()):
            return bytes(int(np.flatnonzero(self.alive[i])[0]) for i in range(16))
        return None


def aes_eliminate(hyp: KeyHypothesisSet, ciphertext: bytes, line_index: int, verdict) -> None:
    """Fold one observation into ``hyp``. Only non-access observations carry information."""
    if _verdict_name(verdict) != "not_accessed":
        return
    vals = line_values(line_index)
    ct = np.frombuffer(bytes(ciphertext), dtype=np.uint8)
    cand = ct[:, None] ^ vals[None, :]  # (16, 64)
    rows = np.repeat(np.arange(16), 64)
    if hyp.noisy:
        np.add.at(hyp.scores, (rows, cand.ravel()), 1)
    else:
        hyp.alive[rows, cand.ravel()] = False
    hyp.updates += 1


def _verdict_name(v) -> str:
    return v.value if isinstance(v, Enum) else str(v)


def key_search_space(hyp: KeyHypothesisSet) -> float:
    """Remaining brute-force effort in bits."""
    total = 0.0
    for c in hyp.counts():
        if c == 0:
            return float("nan")
        total += math.log2(c)
    return total


def noisy_rank(hyp: KeyHypothesisSet, byte_index: int) -> list[int]:
    """Candidates for one byte, best first (ascending score, ties by value)."""
    return [int(x) for x in np.argsort(hyp.scores[byte_index], kind="stable")]


def true_rank(hyp: KeyHypothesisSet, byte_index: int, true_value: int) -> int:
    """1-based rank of ``true_value``; ties count against it."""
    s = hyp.scores[byte_index]
    return int((s < s[true_value]).sum()) + 1


PROGRESS_FIELDS = ["samples", "search_space_bits"] + [f"byte{i}" for i in range(16)]


class ProgressRecorder:
    """Search-space series; a row is kept whenever the candidate counts change."""

    def __init__(self, hyp: KeyHypothesisSet):
        self.hyp = hyp
        self.rows: list[tuple] = []
        self._last: Optional[list[int]] = None
        self.record(0)

    def record(self, samples: int, force: bool = False) -> None:
        counts = self.hyp.counts()
        if force or counts != self._last:
            self.rows.append((samples, round(key_search_space(self.hyp), 6), *counts))
            self._last = counts

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(PROGRESS_FIELDS)
            w.writerows(self.rows)


def recover_aes_from_log(rows: Iterable, line_index: int, noisy: bool = False) -> KeyHypothesisSet:
    """Replay an observation log (sample objects or CSV dict rows)."""
    hyp = KeyHypothesisSet(noisy=noisy)
    for r in rows:
        valid = r.valid if hasattr(r, "valid") else r["validity"] == "valid"
        if not valid:
            continue
        verdict = r.verdict if hasattr(r, "verdict") else r["verdict"]
        payload = r.payload if hasattr(r, "payload") else r["payload"]
        aes_eliminate(hyp, bytes.fromhex(payload), line_index, verdict)
    return hyp


# --------------------------------------------------------------------------
# RSA


UNKNOWN = -1


@dataclass
class BitTrace:
    """Detections from one decryption: (abort timestamp, verdict on R[0])."""

    detections: list = field(default_factory=list)
    origin: Optional[int] = None  # expected timestamp of the first window's detection
    truth_ts: Optional[list] = None  # evaluation only: expected detection time of every window

    def add(self, ts: int, verdict) -> None:
        self.detections.append((ts, _verdict_name(verdict)))


@dataclass
class AlignedTrace:
    bits: list  # per window: 0, 1 or UNKNOWN
    detected: list  # per window: bool
    window_ts: list  # per window: accepted timestamp or None
    rejected: int  # detections outside every window tolerance
    duplicates: int


def align_trace(trace: BitTrace, nbits: int, period: int = 24_000, tolerance: float = 0.10) -> AlignedTrace:
    """Assign detections to multiply windows by walking the inter-detection gaps.

    Each detection is placed ``round(gap / period)`` windows after the last
    accepted one and kept only if the gap is within ``tolerance`` of a whole
    number of periods. When two detections land in one window the one
    closer to the expected time wins.
    """
    tol = tolerance * period
    bits = [UNKNOWN] * nbits
    detected = [False] * nbits
    ts_at: list = [None] * nbits
    err_at = [math.inf] * nbits
    rejected = dups = 0
    dets = sorted(trace.detections)
    if not dets:
        return AlignedTrace(bits, detected, ts_at, 0, 0)
    if trace.origin is None:
        prev_ts, prev_idx = dets[0][0] - period, -1
    else:
        prev_ts, prev_idx = trace.origin - period, -1
    for ts, verdict in dets:
        gap = ts - prev_ts
        n = round(gap / period)
        err = abs(gap - n * period)
        if n < 1 or err > tol:
            rejected += 1
            continue
        idx = prev_idx + n
        if idx >= nbits:
            rejected += 1
            continue
        if detected[idx]:
            dups += 1
            if err >= err_at[idx]:
                continue
        detected[idx] = True
        ts_at[idx] = ts
        err_at[idx] = err
        if verdict == "accessed":
            bits[idx] = 0
        elif verdict == "not_accessed":
            bits[idx] = 1
        prev_ts, prev_idx = ts, idx
    return AlignedTrace(bits, detected, ts_at, rejected, dups)


def _score_detections(trace: BitTrace, tol: float) -> tuple[int, int]:
    """(windows with a detection near their true time, detections near no window)."""
    expected = sorted(trace.truth_ts)
    seen = set()
    false = 0
    for ts, _v in trace.detections:
        i = bisect.bisect_left(expected, ts)
        best = min((j for j in (i - 1, i) if 0 <= j < len(expected)), key=lambda j: abs(expected[j] - ts), default=None)
        if best is None or abs(expected[best] - ts) > tol or best in seen:
            false += 1
        else:
            seen.add(best)
    return len(seen), false


@dataclass
class DecodeResult:
    bits: list
    metrics: dict


def majority_vote(columns: Sequence[Sequence[int]]) -> list:
    out = []
    for col in zip(*columns):
        votes = Counter(b for b in col if b != UNKNOWN)
        if not votes:
            out.append(UNKNOWN)
            continue
        (b0, c0), *rest = votes.most_common()
        out.append(UNKNOWN if rest and rest[0][1] == c0 else b0)
    return out


def rsa_decode(traces: Sequence[BitTrace], nbits: int, truth: Optional[Sequence[int]] = None,
               period: int = 24_000, tolerance: float = 0.10, truth_tol: int = 1000) -> DecodeResult:
    """Decode exponent bits from one or more traces and score them against ``truth``.

    Precision treats "R[0] accessed" (bit 0) as the positive class and is
    measured over detected windows.
    """
    if not traces:
        raise RecoveryError("EMPTY_TRACE", "no traces given")
    aligned = [align_trace(t, nbits, period, tolerance) for t in traces]
    bits = aligned[0].bits if len(aligned) == 1 else majority_vote([a.bits for a in aligned])
    total_dets = sum(len(t.detections) for t in traces)
    windows = nbits * len(traces)
    if all(t.truth_ts is not None for t in traces):
        hit, false_dets = 0, 0
        for t in traces:
            h, f = _score_detections(t, truth_tol)
            hit += h
            false_dets += f
    else:
        hit = sum(sum(a.detected) for a in aligned)
        false_dets = total_dets - hit
    m = {
        "windows": windows,
        "detections": total_dets,
        "detection_rate": hit / windows if windows else 0.0,
        "false_positive_rate": false_dets / total_dets if total_dets else 0.0,
        "decoded": sum(b != UNKNOWN for b in bits),
    }
    if truth is not None:
        if len(truth) != nbits:
            raise RecoveryError("LENGTH_MISMATCH", f"{len(truth)} truth bits for {nbits} windows")
        tp = fp = tn = fn = 0
        for a in aligned:
            for b, t, d in zip(a.bits, truth, a.detected):
                if not d or b == UNKNOWN:
                    continue
                if b == 0 and t == 0:
                    tp += 1
                elif b == 0:
                    fp += 1
                elif t == 1:
                    tn += 1
                else:
                    fn += 1
        m.update(
            true_positive_rate=tp / (tp + fn) if tp + fn else 0.0,
            true_negative_rate=tn / (tn + fp) if tn + fp else 0.0,
            precision=tp / (tp + fp) if tp + fp else 0.0,
        )
        known = [(b, t) for b, t in zip(bits, truth) if b != UNKNOWN]
        m["bit_errors"] = sum(b != t for b, t in known)
        m["bit_accuracy"] = sum(b == t for b, t in known) / nbits
    return DecodeResult(bits, m)
