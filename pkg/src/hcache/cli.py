"""Command line entry point: ``hcache <verb> [flags]``.

Verbs: gen-trace, profile, plan, run, report, ablate.  Any flag can also come
from a flat ``key = value`` file passed with ``--config`` (keys use the flag
names without dashes, e.g. ``model_preset = 13b``); command-line flags win.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import tempfile
from pathlib import Path

from .config import MODEL_PRESETS, model_preset, parse_kv_text
from .cost import HARDWARE_PRESETS, HardwareProfile
from .restore import (ClockMode, ThrottleConfig, bubble_fraction, simulate_restore,
                      simulate_token_wise, token_wise_split)
from .scheduler import Method, ProfiledTimings, RestorationPlan, makespan, plan
from .serving import (Metrics, ServingConfig, Strategy, Trace, TraceKind, gen_trace,
                      profile_hardware, report, run, simulate_decode)
from .storage import DevicePool, StorageManager

DEFAULTS = {
    "model_preset": "7b",
    "hardware": "a100",
    "devices": 4,
    "device_bw": 6.9e9,
    "link_bw": None,
    "flops": None,
    "efficiency": 0.6,
    "step": 256,
    "seed": 0,
    "mode": "sim",
    "minibatch": 1024,
}


def _profile(opts) -> HardwareProfile:
    base = HARDWARE_PRESETS[opts.hardware]
    return dataclasses.replace(
        base,
        flops=float(opts.flops) if opts.flops else base.flops,
        bw=float(opts.link_bw) if opts.link_bw else base.bw,
        efficiency=float(opts.efficiency),
    )


def _throttle(opts) -> ThrottleConfig:
    prof = _profile(opts)
    return ThrottleConfig(device_bw=float(opts.device_bw) if opts.device_bw else None,
                          link_bw=prof.bw, flops=prof.effective_flops,
                          step=int(opts.step) or None, n_devices=int(opts.devices))


def _serving_config(opts, execute: bool = True) -> ServingConfig:
    return ServingConfig(
        timing_model=model_preset(opts.model_preset),
        profile=_profile(opts),
        n_devices=int(opts.devices),
        device_bw=float(opts.device_bw) if opts.device_bw else None,
        step=int(opts.step) or None,
        minibatch=int(opts.minibatch),
        execute=execute,
        planner=not getattr(opts, "no_planner", False),
    )


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _timings_text(t: ProfiledTimings) -> str:
    return "".join(f"{k} = {getattr(t, k)!r}\n" for k in ("io_h", "io_kv", "c_h", "c_token", "n_layers"))


def _load_timings(path) -> ProfiledTimings:
    values = parse_kv_text(Path(path).read_text())
    return ProfiledTimings(float(values["io_h"]), float(values["io_kv"]), float(values["c_h"]),
                           float(values["c_token"]), int(values["n_layers"]))


def _require_sim(opts, verb: str) -> None:
    if opts.mode != "sim":
        raise SystemExit(f"{verb} runs on the simulated clock only (--mode sim)")


# -- verbs ------------------------------------------------------------------


def cmd_gen_trace(opts) -> int:
    params = {}
    for item in opts.param or []:
        key, _, value = item.partition("=")
        params[key.strip().replace("-", "_")] = float(value)
    trace = gen_trace(TraceKind(opts.kind.replace("-", "_")), params, int(opts.seed))
    _emit(trace.to_json() + "\n", opts.out)
    return 0


def cmd_profile(opts) -> int:
    config = model_preset(opts.model_preset)
    if opts.mode == "sim":
        timings = profile_hardware(config, throttle=_throttle(opts), minibatch=int(opts.minibatch))
    else:
        with tempfile.TemporaryDirectory(prefix="hcache-profile-") as tmp:
            root = opts.workdir or tmp
            bw = float(opts.device_bw) if opts.device_bw and opts.throttle_wall else None
            storage = StorageManager(DevicePool.under(root, int(opts.devices), bw))
            timings = profile_hardware(config, storage, ThrottleConfig(mode=ClockMode.WALL),
                                       minibatch=int(opts.minibatch))
    _emit(_timings_text(timings), opts.out)
    return 0


def cmd_plan(opts) -> int:
    if opts.timings:
        timings = _load_timings(opts.timings)
    else:
        timings = profile_hardware(model_preset(opts.model_preset), throttle=_throttle(opts),
                                   minibatch=int(opts.minibatch))
    chosen = plan(timings)
    lines = [
        f"plan = {chosen.describe()}",
        f"record = {chosen.to_record()}",
        f"makespan_s = {makespan(chosen, timings)!r}",
        f"hidden_only_s = {makespan(RestorationPlan.uniform(Method.HIDDEN, timings.n_layers), timings)!r}",
        f"kv_offload_s = {timings.io_kv * timings.n_layers!r}",
    ]
    _emit("\n".join(lines) + "\n", opts.out)
    return 0


def cmd_run(opts) -> int:
    _require_sim(opts, "run")
    trace = Trace.load(opts.trace) if opts.trace else gen_trace(
        TraceKind.CONVERSATION, {"n_sessions": 4, "rounds": 3}, int(opts.seed))
    names = [s for item in (opts.strategy or ["all"]) for s in item.split(",")]
    strategies = list(Strategy) if "all" in names else [Strategy.parse(s) for s in names]
    cfg = _serving_config(opts, execute=not opts.no_execute)
    results = [run(trace, s, cfg) for s in strategies]
    if opts.out:
        out = Path(opts.out)
        out.mkdir(parents=True, exist_ok=True)
        for m in results:
            (out / f"{m.strategy.value}.json").write_text(m.to_json())
    sys.stdout.write(report(results))
    return 0


def cmd_report(opts) -> int:
    paths = []
    for item in opts.metrics:
        p = Path(item)
        paths.extend(sorted(p.glob("*.json")) if p.is_dir() else [p])
    metrics = [Metrics.from_json(p.read_text()) for p in paths]
    _emit(report(metrics, opts.format), opts.out)
    return 0


def _ablate_partition(opts) -> list[str]:
    config = model_preset(opts.model_preset)
    throttle = _throttle(opts)
    n = int(opts.minibatch)
    timings = profile_hardware(config, throttle=throttle, minibatch=n)
    layer_plan = plan(timings)
    layer_s = simulate_restore(layer_plan, n, config, throttle).total_s
    n_h, complement = token_wise_split(timings, n)
    grid = throttle.step or 1
    rounded = min(n, max(grid, round(n_h / grid) * grid))
    rows = [f"layer-wise  {layer_plan.describe():>14}  {layer_s * 1e3:9.3f} ms  1.000"]
    tail = "RE" if complement is Method.RECOMPUTE else "KV"
    for label, split in (("token-wise", n_h), ("rounded", rounded)):
        t = simulate_token_wise((split, n - split), config, throttle, complement).total_s
        shape = f"{split}H/{n - split}{tail}"
        rows.append(f"{label:<10}  {shape:>14}  {t * 1e3:9.3f} ms  {t / layer_s:.3f}")
    return ["partition (restore time, ratio to layer-wise)"] + rows


def _ablate_saving(opts) -> list[str]:
    config = model_preset(opts.model_preset)
    prof = _profile(opts)
    kw = dict(n_devices=int(opts.devices), device_bw=float(opts.device_bw),
              write_latency_s=float(opts.write_latency))
    rows = ["saving (mean TBT ms by batch: ideal / direct / two-stage)"]
    for batch in (1, 4, 16, 32):
        vals = [simulate_decode(batch, 1024, 16, config, prof, mode, **kw)["tbt_s"]
                for mode in ("none", "direct", "two_stage")]
        rows.append(f"batch {batch:>3}  " + "  ".join(f"{v * 1e3:8.3f}" for v in vals)
                    + f"  direct x{vals[1] / vals[0]:.3f}  two-stage x{vals[2] / vals[0]:.3f}")
    return rows


def _ablate_bubble(opts) -> list[str]:
    config = model_preset(opts.model_preset)
    throttle = _throttle(opts)
    n = int(opts.minibatch)
    timings = profile_hardware(config, throttle=throttle, minibatch=n)
    rows = ["bubbles (restore ms, bubble fraction)"]
    for label, p in (("kv-offload", RestorationPlan.uniform(Method.KV_OFFLOAD, config.n_layers)),
                     ("hidden-only", RestorationPlan.uniform(Method.HIDDEN, config.n_layers)),
                     ("scheduled", plan(timings))):
        tl = simulate_restore(p, n, config, throttle)
        rows.append(f"{label:<12} {p.describe():>14}  {tl.total_s * 1e3:9.3f} ms  "
                    f"{bubble_fraction(tl):.3f}")
    return rows


def cmd_ablate(opts) -> int:
    _require_sim(opts, "ablate")
    parts = {"partition": _ablate_partition, "saving": _ablate_saving, "bubble": _ablate_bubble}
    chosen = list(parts) if opts.what == "all" else [opts.what]
    lines = []
    for name in chosen:
        lines.extend(parts[name](opts))
        lines.append("")
    _emit("\n".join(lines), opts.out)
    return 0


# -- parser -----------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file with defaults for these flags")
    p.add_argument("--model-preset", choices=sorted(MODEL_PRESETS))
    p.add_argument("--hardware", choices=sorted(HARDWARE_PRESETS))
    p.add_argument("--devices", type=int, metavar="N")
    p.add_argument("--device-bw", type=float, help="bytes/s per storage device")
    p.add_argument("--link-bw", type=float, help="host link bytes/s")
    p.add_argument("--flops", type=float, help="peak FLOP/s")
    p.add_argument("--efficiency", type=float, help="achieved fraction of peak FLOP/s")
    p.add_argument("--step", type=int, help="GEMM token plateau (0 disables)")
    p.add_argument("--minibatch", type=int, help="profiling mini-batch tokens")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["wall", "sim"])
    p.add_argument("--out", help="output file (directory for run)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hcache", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-trace", help="generate a synthetic trace (JSON)")
    _common(p)
    p.add_argument("--kind", default="conversation", choices=["conversation", "long-context", "long_context"])
    p.add_argument("--param", action="append", help="trace parameter key=value")
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("profile", help="per-layer stage timings")
    _common(p)
    p.add_argument("--workdir", help="storage root for wall-clock profiling")
    p.add_argument("--throttle-wall", action="store_true",
                   help="apply --device-bw as a real throttle in wall mode")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("plan", help="choose a layer split")
    _common(p)
    p.add_argument("--timings", help="key = value timings file (as written by profile)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="serve a trace under one or more strategies")
    _common(p)
    p.add_argument("--trace", help="trace JSON (default: a small generated conversation)")
    p.add_argument("--strategy", action="append",
                   help="hcache, kv_offload, recompute, ideal or all (repeatable)")
    p.add_argument("--no-planner", action="store_true", help="HCACHE without the layer split")
    p.add_argument("--no-execute", action="store_true", help="timing only, skip the model")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="compare saved metrics")
    p.add_argument("metrics", nargs="+", help="metrics JSON files or directories")
    p.add_argument("--format", default="text", choices=["text", "csv"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", help="partition, saving and bubble ablations")
    _common(p)
    p.add_argument("--what", default="all", choices=["all", "partition", "saving", "bubble"])
    p.add_argument("--write-latency", type=float, default=20e-6,
                   help="seconds per synchronous device write")
    p.set_defaults(func=cmd_ablate)
    return parser


def _apply_defaults(opts) -> None:
    file_values = parse_kv_text(Path(opts.config).read_text()) if getattr(opts, "config", None) else {}
    for key, default in DEFAULTS.items():
        if not hasattr(opts, key):
            continue
        if getattr(opts, key) is None:
            setattr(opts, key, file_values.get(key, default))
    unknown = set(file_values) - set(DEFAULTS)
    if unknown:
        raise SystemExit(f"unknown config keys: {sorted(unknown)}")


def main(argv=None) -> int:
    parser = build_parser()
    opts = parser.parse_args(argv)
    _apply_defaults(opts)
    try:
        return opts.func(opts)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        parser.exit(2, f"hcache {opts.verb}: error: {exc}\n")


if __name__ == "__main__":
    sys.exit(main())
