"""Command line entry point: ``snipersim run|figures|validate``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Optional

from . import aes
from .config import ConfigError, ScenarioConfig, dump_config, load_config, parse_config, preset_names
from .experiments import (
    DEFAULT_SWEEP,
    aes_nonaccess_curve,
    make_key,
    run_aes_attack,
    run_rsa_attack,
    wait_flush_sweep,
)
from .recovery import BitTrace, RecoveryError, align_trace, key_search_space, recover_aes_from_log, rsa_decode, true_rank
from .sniper import ObservationLog, SniperError

log = logging.getLogger("snipersim")

FIGURES = ("aes_last", "wait_flush", "flush_count_tot")


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


def _round(x: float) -> float:
    return round(float(x), 6)


# --------------------------------------------------------------------------
# run


def run_scenario(cfg: ScenarioConfig, out_dir: Optional[Path] = None) -> dict:
    """Run one scenario and write its artifacts. Returns the summary."""
    cfg.validate()
    if cfg.detection != "tsx":
        raise ConfigError(["detection: `run` drives TSX detection; flush_reload is swept by `figures wait_flush`"])
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(dump_config(cfg))
    if cfg.victim == "aes":
        summary = _run_aes(cfg, out)
    else:
        summary = _run_rsa(cfg, out)
    summary["config"] = cfg.name
    summary["seed"] = cfg.seed
    summary["config_digest"] = _digest(dump_config(cfg).encode())
    summary["scenario"] = dataclasses.asdict(cfg)
    _write_json(out / "summary.json", summary)
    return summary


def _run_aes(cfg: ScenarioConfig, out: Path) -> dict:
    res = run_aes_attack(cfg)
    res.machine.trace.write_csv(out / "trace.csv")
    res.log.write_csv(out / "observations.csv")
    res.progress.write_csv(out / "recovery.csv")
    _write_rows(out / "ground_truth.csv", ("run_id", "start", "end", "plaintext", "ciphertext", "key_digest"),
                [(r.run_id, r.start, r.end, r.plaintext.hex(), r.ciphertext.hex(), res.victim.key_digest())
                 for r in res.truth.records])
    n = len(res.log)
    valid = len(res.log.valid())
    key = res.recovered_key
    bits = res.search_space_bits
    return {
        "victim": "aes",
        "encryptions": len(res.truth),
        "samples": n,
        "valid_samples": valid,
        "detection_rate": _round(len({s.run_id for s in res.log.valid()}) / len(res.truth)) if len(res.truth) else 0.0,
        "valid_rate": _round(valid / n) if n else 0.0,
        "spontaneous_aborts": res.log.spontaneous_aborts,
        "staging_broken": res.log.staging_broken,
        "wait_time": res.plan.wait_time,
        "search_space_bits": _round(bits),
        "recovered_key": key.hex() if key is not None else None,
        "key_correct": key == make_key(cfg) if key is not None else False,
        "runtime_cycles": res.machine.now,
        **_rank_bits(res.hyp, make_key(cfg)),
    }


def _rank_bits(hyp, key: bytes) -> dict:
    """Noisy mode only: log2 of the enumeration effort to reach the true key."""
    if not hyp.noisy:
        return {}
    last = bytes(aes.expand_key(key)[-1])
    return {"true_key_rank_bits": _round(sum(math.log2(true_rank(hyp, i, last[i])) for i in range(16)))}


def _run_rsa(cfg: ScenarioConfig, out: Path) -> dict:
    res = run_rsa_attack(cfg)
    res.machine.trace.write_csv(out / "trace.csv")
    res.log.write_csv(out / "observations.csv")
    bits = res.victim.bits
    rows = []
    for tid, tr in enumerate(res.traces):
        al = align_trace(tr, len(bits), res.victim.timing.period)
        for i in range(len(bits)):
            rows.append((tid, i, int(al.detected[i]), al.window_ts[i] if al.window_ts[i] is not None else "",
                         al.bits[i]))
    _write_rows(out / "recovery.csv", ("trace", "window", "detected", "detect_ts", "bit"), rows)
    _write_rows(out / "ground_truth.csv", ("run_id", "window", "bit_start", "bit", "run_start", "run_end", "key_digest"),
                [(r.run_id, i, b, bits[i], r.start, r.end, r.key_digest)
                 for r in res.truth.records for i, b in enumerate(r.bit_starts)])
    m = res.decode.metrics
    det_latency = res.stakeout.detect_latency if res.stakeout else 380
    return {
        "victim": "rsa",
        "decryptions": len(res.truth),
        "samples": len(res.log),
        "valid_samples": len(res.log.valid()),
        "spontaneous_aborts": res.log.spontaneous_aborts,
        "staging_broken": res.log.staging_broken,
        "wait_time": res.plan.wait_time,
        "detect_latency": det_latency,
        "period": res.victim.timing.period,
        **{k: (_round(v) if isinstance(v, float) else v) for k, v in m.items()},
        "runtime_cycles": res.machine.now,
    }


def recompute_summary(out_dir: Path) -> dict:
    """Metrics rebuilt from the CSV artifacts alone (for drift checks)."""
    out = Path(out_dir)
    summary = json.loads((out / "summary.json").read_text())
    obs = ObservationLog.read_csv(out / "observations.csv")
    if summary["victim"] == "aes":
        cfg = parse_config((out / "config.cfg").read_text())
        with open(out / "observations.csv", newline="") as f:
            hyp = recover_aes_from_log(csv.DictReader(f), cfg.monitored_line, cfg.noisy_recovery)
        return {"samples": len(obs), "valid_samples": len(obs.valid()),
                "search_space_bits": _round(key_search_space(hyp)), **_rank_bits(hyp, make_key(cfg))}
    with open(out / "ground_truth.csv", newline="") as f:
        gt = list(csv.DictReader(f))
    runs: dict = {}
    for r in gt:
        runs.setdefault(int(r["run_id"]), []).append(r)
    lat = summary["detect_latency"]
    traces, truth_bits = [], None
    for rid in sorted(runs):
        rr = runs[rid]
        start, end = int(rr[0]["run_start"]), int(rr[0]["run_end"])
        t = BitTrace(origin=start + lat, truth_ts=[int(r["bit_start"]) + lat for r in rr])
        for s in obs.samples:
            if start <= s.detect_ts <= end:
                t.add(s.detect_ts, s.verdict)
        traces.append(t)
        truth_bits = [int(r["bit"]) for r in rr]
    dec = rsa_decode(traces, len(truth_bits), truth_bits, period=summary["period"])
    return {k: (_round(v) if isinstance(v, float) else v) for k, v in dec.metrics.items()}


# --------------------------------------------------------------------------
# figures


def emit_figure_data(which: str, cfg: ScenarioConfig, out_dir: Path, samples: Optional[int] = None,
                     runs: Optional[int] = None, limits=DEFAULT_SWEEP) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{which}.csv"
    if which == "aes_last":
        rows = aes_nonaccess_curve(samples or 100_000, cfg.seed, cfg.monitored_line)
        _write_rows(path, ("eviction_op", "analytic_pct", "monte_carlo_pct"),
                    [(k, _round(100 * a), _round(100 * mc)) for k, a, mc in rows])
    elif which == "wait_flush":
        sweep = wait_flush_sweep(limits, runs or 2000, cfg.seed, iter_cycles=cfg.fr_iter_cycles,
                                 flush_settle=cfg.fr_flush_settle, geometry=cfg.geometry())
        _write_rows(path, ("wait_limit", "runs", "detected_pct", "valid_pct"),
                    [(r.wait_limit, r.runs, _round(r.detected_pct), _round(r.valid_pct)) for r in sweep])
    elif which == "flush_count_tot":
        if cfg.victim != "aes":
            raise ConfigError(["victim: flush_count_tot needs an aes scenario"])
        res = run_aes_attack(cfg)
        res.progress.write_csv(path)
    else:
        raise ConfigError([f"figure: unknown {which!r}, expected one of {', '.join(FIGURES)}"])
    return path


# --------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snipersim", description="Deterministic simulator of a precisely timed cache eviction attack.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run a scenario and write CSV/JSON artifacts")
    r.add_argument("config", help=f"config file or preset ({', '.join(preset_names())})")
    r.add_argument("--out", help="output directory (default: output_dir from the config)")
    r.add_argument("--seed", type=int, help="override the scenario seed")

    f = sub.add_parser("figures", help="emit the CSV series behind a figure")
    f.add_argument("which", choices=FIGURES)
    f.add_argument("config", help="config file or preset")
    f.add_argument("--out", default="figures")
    f.add_argument("--seed", type=int)
    f.add_argument("--samples", type=int, help="Monte Carlo samples (aes_last)")
    f.add_argument("--runs", type=int, help="encryptions per wait_limit (wait_flush)")

    v = sub.add_parser("validate", help="run the cache-policy oracles")
    v.add_argument("--insert-age", type=int, default=2, help="L3 insertion age under test")
    v.add_argument("--trials", type=int, default=200)
    v.add_argument("--seed", type=int, default=0)
    return p


def _load(spec: str, seed: Optional[int]) -> ScenarioConfig:
    cfg = load_config(spec)
    return cfg.replace(seed=seed) if seed is not None else cfg


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    t0 = time.perf_counter()
    try:
        if args.cmd == "run":
            cfg = _load(args.config, args.seed)
            summary = run_scenario(cfg, Path(args.out) if args.out else None)
            print(json.dumps(summary, indent=2, sort_keys=True))
            ok = summary.get("key_correct", True) if summary["victim"] == "aes" else True
            rc = 0 if ok or not cfg.stop_when_recovered else 1
        elif args.cmd == "figures":
            cfg = _load(args.config, args.seed)
            path = emit_figure_data(args.which, cfg, Path(args.out), args.samples, args.runs)
            print(path)
            rc = 0
        else:
            from .validate import validate_policies
            rep = validate_policies(args.insert_age, args.trials, args.seed)
            print("\n".join(rep.lines()))
            rc = 0 if rep.passed else 1
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return 2
    except (SniperError, RecoveryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    log.info("wall time %.1f s", time.perf_counter() - t0)
    return rc


if __name__ == "__main__":
    sys.exit(main())
