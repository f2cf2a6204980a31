"""Duty-cycle energy model for experiment plans.

The device is in one of three current levels:

    sleep      i_sleep
    awake      i_sleep + awake_overhead
    busy/high  awake + i_cpu_high

Each polling plugin costs ``poll_work_ms * cost`` of CPU time per poll.  While
the gap between polls is at least the work plus the governor scale-down window,
the CPU returns to idle between polls and only the busy time is charged at the
high level.  Once polls arrive faster than that the governor never lowers the
frequency and the plugin pins the CPU at the high level for the whole run.
Plugin loads add up and saturate at one fully pinned CPU.

All quantities are steady-state per-cycle averages (closed form), which is why
the run must cover at least ten cycles of the fastest poller.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from probekit.model import COARSE_THRESHOLD_MS, ExperimentManifest, parse_manifest
from probekit.scheduler import compute_wake_plan

DEFAULT_DURATION_MS = 3_600_000

# Relative CPU cost of one poll, in units of poll_work_ms.
PLUGIN_COST = {
    "synth_sensor": 1.0,
    "sys_cpu": 1.0,
    "sys_mem": 1.0,
    "net_traffic": 2.0,
    "proc_list": 4.0,
}


@dataclass(frozen=True)
class EnergyParams:
    i_sleep_ma: float = 8.0
    awake_overhead_ma: float = 35.0
    i_cpu_high_ma: float = 55.0
    governor_scale_down_ms: float = 100.0
    poll_work_ms: float = 19.0
    coarse_wakeup_ms: float = 1000.0
    screen_on_ma: float = 400.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
                raise ValueError(f"{f.name} must be a positive number, got {v!r}")

    @property
    def awake_ma(self) -> float:
        return self.i_sleep_ma + self.awake_overhead_ma

    @property
    def high_ma(self) -> float:
        return self.awake_ma + self.i_cpu_high_ma

    @classmethod
    def from_json(cls, obj: dict) -> "EnergyParams":
        known = {f.name for f in fields(cls)}
        extra = set(obj) - known
        if extra:
            raise ValueError(f"unknown energy parameters: {', '.join(sorted(extra))}")
        return cls(**{**asdict(cls()), **obj})


def default_params() -> EnergyParams:
    return EnergyParams()


@dataclass(frozen=True)
class PollLoad:
    plugin_id: str
    interval_ms: int
    cost: float = 1.0


@dataclass(frozen=True)
class BusyLoad:
    """Constant CPU activity (input logging, audio capture) as a busy fraction."""
    name: str
    busy_fraction: float


@dataclass(frozen=True)
class Scenario:
    name: str
    description: str
    polls: tuple[PollLoad, ...] = ()
    busy: tuple[BusyLoad, ...] = ()
    wakelock: bool = False
    screen_on: bool = False


def _poll(pid: str, interval: int) -> PollLoad:
    return PollLoad(pid, interval, PLUGIN_COST.get(pid, 1.0))


_INPUT = BusyLoad("touch_and_keys", 0.17)
_AUDIO = BusyLoad("audio_capture", 0.25)

SCENARIOS: dict[str, Scenario] = {s.name: s for s in (
    Scenario("idle", "idle device, deep sleeping"),
    Scenario("idle_wl", "idle device, held awake", wakelock=True),
    Scenario("a1", "one sensor polled every 50 ms", (_poll("synth_sensor", 50),)),
    Scenario("a2", "two sensors polled every 100 ms",
             (_poll("synth_sensor", 100), _poll("sys_mem", 100))),
    Scenario("a3", "one sensor polled every 200 ms", (_poll("synth_sensor", 200),)),
    Scenario("a4", "network traffic polled every 50 ms", (_poll("net_traffic", 50),)),
    Scenario("events", "event plugins only"),
    Scenario("idle_on", "device in use, no experiment", screen_on=True),
    Scenario("b1", "touch and keystrokes logged", busy=(_INPUT,), screen_on=True),
    Scenario("b2", "b1 plus two sensors every 50 ms",
             (_poll("synth_sensor", 50), _poll("sys_mem", 50)), (_INPUT,), screen_on=True),
    Scenario("b3", "b1 plus audio recorded", busy=(_INPUT, _AUDIO), screen_on=True),
    Scenario("b4", "b2 plus audio recorded",
             (_poll("synth_sensor", 50), _poll("sys_mem", 50)), (_INPUT, _AUDIO), screen_on=True),
)}


def scenario_from_manifest(manifest: ExperimentManifest, threshold_ms: int = COARSE_THRESHOLD_MS) -> Scenario:
    plan = compute_wake_plan(list(manifest.plugin_configs), manifest.wake_policy, threshold_ms)
    polls = tuple(_poll(pid, i) for pid, i in plan.precise_polling + plan.coarse_polling)
    return Scenario(manifest.name or manifest.experiment_id, manifest.description, polls,
                    wakelock=plan.holds_wakelock)


def single_plugin(plugin_id: str, interval_ms: int, threshold_ms: int = COARSE_THRESHOLD_MS) -> Scenario:
    return Scenario(f"{plugin_id}@{interval_ms}", "", (_poll(plugin_id, interval_ms),),
                    wakelock=interval_ms <= threshold_ms)


@dataclass(frozen=True)
class EnergyReport:
    scenario: str
    duration_ms: int
    avg_current_ma: float
    awake_fraction: float
    high_freq_fraction: float
    wakeup_count: int
    screen_on: bool = False

    def to_json(self) -> dict:
        return asdict(self)


def _resolve(target: Union[str, Scenario, ExperimentManifest]) -> Scenario:
    if isinstance(target, Scenario):
        return target
    if isinstance(target, ExperimentManifest):
        return scenario_from_manifest(target)
    try:
        return SCENARIOS[target.lower()]
    except KeyError:
        raise ValueError(f"unknown scenario {target!r}; known: {', '.join(SCENARIOS)}") from None


def simulate(target: Union[str, Scenario, ExperimentManifest], duration_ms: int = DEFAULT_DURATION_MS,
             params: Optional[EnergyParams] = None, screen_on: Optional[bool] = None,
             threshold_ms: int = COARSE_THRESHOLD_MS) -> EnergyReport:
    p = params or default_params()
    sc = _resolve(target)
    screen = sc.screen_on if screen_on is None else screen_on
    if duration_ms <= 0:
        raise ValueError("duration must be positive")
    if sc.polls:
        fastest = min(pl.interval_ms for pl in sc.polls)
        if duration_ms < 10 * fastest:
            raise ValueError(f"duration {duration_ms} ms is shorter than ten cycles of the {fastest} ms poller")

    precise = [pl for pl in sc.polls if pl.interval_ms <= threshold_ms]
    coarse = [pl for pl in sc.polls if pl.interval_ms > threshold_ms]
    held = screen or sc.wakelock or bool(precise)

    cpu, high = 0.0, 0.0
    for pl in sc.polls:
        work = p.poll_work_ms * pl.cost
        if pl.interval_ms < work + p.governor_scale_down_ms:
            cpu += 1.0
            high += 1.0
        else:
            cpu += work / pl.interval_ms
            high += (work + p.governor_scale_down_ms) / pl.interval_ms
    for b in sc.busy:
        cpu += b.busy_fraction
        high += b.busy_fraction
    cpu, high = min(cpu, 1.0), min(high, 1.0)

    if held:
        awake, wakeups = 1.0, 0
    elif coarse:
        awake = min(1.0, sum(max(p.coarse_wakeup_ms, p.poll_work_ms * pl.cost + p.governor_scale_down_ms)
                             / pl.interval_ms for pl in coarse))
        wakeups = sum(duration_ms // pl.interval_ms for pl in coarse)
    else:
        awake, wakeups = 0.0, 0
    high = min(high, awake)
    cpu = min(cpu, awake)

    avg = p.i_sleep_ma + p.awake_overhead_ma * awake + p.i_cpu_high_ma * cpu
    if screen:
        avg += p.screen_on_ma
    return EnergyReport(sc.name, int(duration_ms), avg, awake, high, int(wakeups), screen)


@dataclass
class Comparison:
    reports: list[EnergyReport]
    ratios: list[float] = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [{**r.to_json(), "ratio": q} for r, q in zip(self.reports, self.ratios)]


def compare(scenarios: Sequence, duration_ms: int = DEFAULT_DURATION_MS,
            params: Optional[EnergyParams] = None, screen_on: Optional[bool] = None) -> Comparison:
    """Simulate each scenario; ratios are against the first one."""
    reports = [simulate(s, duration_ms, params, screen_on) for s in scenarios]
    if not reports:
        return Comparison([], [])
    base = reports[0].avg_current_ma
    return Comparison(reports, [r.avg_current_ma / base for r in reports])


def sweep(plugin_id: str, intervals: Iterable[int], duration_ms: Optional[int] = None,
          params: Optional[EnergyParams] = None) -> list[EnergyReport]:
    out = []
    for i in intervals:
        d = duration_ms if duration_ms is not None else max(DEFAULT_DURATION_MS, 10 * i)
        out.append(simulate(single_plugin(plugin_id, i), d, params))
    return out


# ---------------------------------------------------------------- output

def format_table(rows: list[dict]) -> str:
    head = f"{'scenario':<20} {'avg mA':>9} {'ratio':>7} {'awake':>6} {'high':>6} {'wakeups':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        ratio = f"{r['ratio']:.3f}" if "ratio" in r else "-"
        lines.append(f"{r['scenario']:<20} {r['avg_current_ma']:>9.3f} {ratio:>7} "
                     f"{r['awake_fraction']:>6.3f} {r['high_freq_fraction']:>6.3f} {r['wakeup_count']:>8d}")
    return "\n".join(lines)


def write_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="probekit-esim", description="Estimate average current draw of experiment plans.")
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", action="append", metavar="NAME",
                     help=f"built-in scenario, repeatable; first is the baseline ({', '.join(SCENARIOS)})")
    src.add_argument("--manifest", action="append", metavar="FILE", help="experiment manifest JSON, repeatable")
    src.add_argument("--sweep", metavar="PLUGIN", help="sweep one polling plugin over --intervals")
    ap.add_argument("--intervals", default="20,50,100,119,120,200,500,1000,2000,5000",
                    help="comma separated intervals for --sweep (ms)")
    ap.add_argument("--duration", type=int, default=None, help=f"simulated ms (default {DEFAULT_DURATION_MS})")
    ap.add_argument("--params", type=Path, help="JSON file overriding energy parameters")
    ap.add_argument("--screen-on", action="store_true", help="force the screen on for every scenario")
    ap.add_argument("--json", action="store_true", help="print JSON instead of a table")
    ap.add_argument("--report-dir", type=Path, help="write report.csv and a PNG figure here")
    args = ap.parse_args(argv)

    try:
        params = EnergyParams.from_json(json.loads(args.params.read_text())) if args.params else default_params()
        screen = True if args.screen_on else None
        if args.sweep:
            intervals = [int(x) for x in args.intervals.split(",") if x.strip()]
            reports = sweep(args.sweep, intervals, args.duration, params)
            rows = [{**r.to_json(), "interval_ms": i} for r, i in zip(reports, intervals)]
        else:
            targets = args.scenario or [parse_manifest(Path(f).read_bytes()) for f in args.manifest]
            rows = compare(targets, args.duration or DEFAULT_DURATION_MS, params, screen).rows()
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    print(json.dumps(rows, indent=2) if args.json else format_table(rows))
    if args.report_dir:
        from probekit import energyplot

        csv_path = write_csv(rows, args.report_dir / "report.csv")
        if args.sweep:
            fig = energyplot.sweep_figure(rows, args.report_dir / "sweep.png", params)
        else:
            fig = energyplot.compare_figure(rows, args.report_dir / "compare.png")
        print(f"wrote {csv_path} and {fig}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
