"""Command-line entry point: generate, mix, train, compile, simulate, evaluate.

Exit status is 0 on success, 2 for usage errors and unreadable inputs, and 1
when a pipeline stage fails. Options can also come from a ``--config`` file
of ``key = value`` lines (keys are flag names without the leading dashes);
flags on the command line take precedence.
"""

from __future__ import annotations

import argparse
import logging
import multiprocessing
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from .compiler import CompileError, compile_model, read_rules, write_rules
from .dataplane import RunResult, run_trace, write_detections, read_detections
from .embedding import TrainingConfig
from .features import DEFAULT_TW_US, assign_windows
from .harness import (DEFAULT_NAT_IP, DEFAULT_VPN_OVERHEAD, DEMO_DEVICES, EvaluationError,
                      MixConfig, MixMode, evaluate, ground_truth_windows, mix_traces,
                      split_indices, synthetic_scenario)
from .keypackets import DEFAULT_N_KEYS, ExtractionConfig
from .model import DeviceFingerprintModel, ModelFileError, ModelParams, StageError, train_device_model
from .neighbors import DEFAULT_LAMBDA, DEFAULT_MIN_FREQ
from .pcap import parse_pcap
from .report import write_report
from .trace import DEFAULT_LAN_PREFIXES, Trace, TraceError, ip_to_int, parse_csv, write_csv
from .tree import MAX_LEAVES

log = logging.getLogger("iotfp")

_EMB = TrainingConfig()
_EXT = ExtractionConfig()


class UsageError(Exception):
    """Bad flag combination or unreadable input (exit status 2)."""


class CliStageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


# -- argument parsing --------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file of default options")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_seed(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iotfp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic device and background traces")
    _add_common(p)
    _add_seed(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--duration-s", type=float, default=600.0)
    p.add_argument("--devices", type=int, default=len(DEMO_DEVICES),
                   help=f"number of built-in synthetic devices (1-{len(DEMO_DEVICES)})")
    p.add_argument("--base-rate", type=float, default=100.0,
                   help="background packets per IoT packet (default 100)")
    p.add_argument("--jitter", type=float, default=0.01, help="burst jitter as a fraction of the period")

    p = sub.add_parser("mix", help="replay device and background traces through NAT or VPN")
    _add_common(p)
    _add_seed(p)
    p.add_argument("--device-trace", action="append", required=True, help="labelled device trace (repeatable)")
    p.add_argument("--background", required=True)
    p.add_argument("--mode", choices=[m.value for m in MixMode], default=MixMode.NAT.value)
    p.add_argument("--nat-ip", default=None, help="public NAT address")
    p.add_argument("--vpn-overhead", type=int, default=DEFAULT_VPN_OVERHEAD)
    p.add_argument("--out", required=True, help="mixed trace CSV")

    p = sub.add_parser("train", help="train one device model")
    _add_common(p)
    _add_seed(p)
    p.add_argument("--device-trace", required=True, help="device traffic captured before the gateway")
    p.add_argument("--background", required=True, help="background traffic captured before the gateway")
    p.add_argument("--mixed", help="labelled monitor-side trace to train on instead of mixing")
    p.add_argument("--device-id", help="device label (default: the trace's only label)")
    p.add_argument("--mode", choices=[m.value for m in MixMode], default=MixMode.NAT.value)
    p.add_argument("--vpn-overhead", type=int, default=DEFAULT_VPN_OVERHEAD)
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--tw-us", type=int, default=DEFAULT_TW_US)
    p.add_argument("--n-keys", type=int, default=DEFAULT_N_KEYS)
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--min-freq", type=int, default=DEFAULT_MIN_FREQ)
    p.add_argument("--tb-us", type=int, default=_EXT.t_b_us)
    p.add_argument("--eta", type=float, default=_EXT.eta)
    p.add_argument("--min-bursts", type=int, default=_EXT.min_bursts)
    p.add_argument("--dim", type=int, default=_EMB.d)
    p.add_argument("--context", type=int, default=_EMB.c)
    p.add_argument("--negatives", type=int, default=_EMB.k)
    p.add_argument("--lr", type=float, default=_EMB.learning_rate)
    p.add_argument("--epochs", type=int, default=_EMB.epochs)
    p.add_argument("--max-leaves", type=int, default=MAX_LEAVES)

    p = sub.add_parser("compile", help="compile a model into match-action rules")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--ip-slots", type=int, default=65536)
    p.add_argument("--out", required=True, help="rule file")

    p = sub.add_parser("simulate", help="run a trace through compiled pipelines")
    _add_common(p)
    p.add_argument("--rules", action="append", required=True, help="rule file (repeatable)")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True, help="detection CSV")
    p.add_argument("--debug", action="store_true", help="replay-check every register snapshot")
    p.add_argument("--no-flush", action="store_true", help="drop windows still open at the end")

    p = sub.add_parser("evaluate", help="score detections against a labelled trace")
    _add_common(p)
    _add_seed(p)
    p.add_argument("--detections", required=True)
    p.add_argument("--trace", required=True, help="labelled trace the detections were made on")
    p.add_argument("--tw-us", type=int, default=DEFAULT_TW_US)
    p.add_argument("--split", choices=["all", "train", "val", "test"], default="all",
                   help="score only one part of the 4:3:3 window split")
    p.add_argument("--out", required=True, help="report CSV; figures are written next to it")
    p.add_argument("--no-figures", action="store_true")
    return parser


def _config_tokens(path: str) -> list[str]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc.strerror}") from exc
    tokens = []
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"--config: {path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        if value.lower() in ("true", "yes", "on"):
            tokens.append(flag)
        elif value.lower() not in ("false", "no", "off"):
            tokens += [flag, value]
    return tokens


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    argv = list(argv)
    args = parser.parse_args(argv)
    if args.config:
        pos = argv.index(args.command)
        argv = argv[:pos + 1] + _config_tokens(args.config) + argv[pos + 1:]
        args = parser.parse_args(argv)
    return args


# -- helpers -----------------------------------------------------------------

def _load_trace(path: str | None, flag: str, label: str | None = None) -> Trace:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file: {path}")
    try:
        if p.suffix in (".pcap", ".cap"):
            trace = parse_pcap(p, DEFAULT_LAN_PREFIXES)
        else:
            trace = parse_csv(p)
    except TraceError as exc:
        raise CliStageError("input", f"{flag}: {exc}") from exc
    if trace.reordered:
        log.warning("%s: %d out-of-order records re-sorted", path, trace.reordered)
    if label is not None and not any(trace.labels()):
        trace = trace.with_label(label)
    return trace


def _require_file(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file: {path}")
    return p


def _device_label(trace: Trace, wanted: str | None) -> str:
    labels = sorted({x for x in trace.labels() if x is not None})
    if wanted is not None:
        if labels and wanted not in labels:
            raise UsageError(f"--device-id: {wanted} does not occur in --device-trace")
        return wanted
    if len(labels) != 1:
        raise UsageError("--device-id is required when the device trace is not labelled "
                         f"with exactly one device (found {len(labels)})")
    return labels[0]


# -- subcommands -------------------------------------------------------------

def cmd_generate(args) -> int:
    if not 1 <= args.devices <= len(DEMO_DEVICES):
        raise UsageError(f"--devices must be between 1 and {len(DEMO_DEVICES)}")
    if args.duration_s <= 0 or args.base_rate <= 0:
        raise UsageError("--duration-s and --base-rate must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    catalog = dict(list(DEMO_DEVICES.items())[:args.devices])
    rng = np.random.default_rng(args.seed)
    devices, background = synthetic_scenario(rng, int(args.duration_s * 1_000_000),
                                             args.base_rate, catalog, args.jitter)
    for dev, trace in devices.items():
        write_csv(trace, out / f"{dev}.csv")
        print(f"{dev}: {len(trace)} packets -> {out / (dev + '.csv')}")
    write_csv(background, out / "background.csv")
    print(f"background: {len(background)} packets -> {out / 'background.csv'}")
    return 0


def _mix_config(args) -> MixConfig:
    nat_ip = DEFAULT_NAT_IP if getattr(args, "nat_ip", None) is None else ip_to_int(args.nat_ip)
    return MixConfig(mode=MixMode(args.mode), nat_ip=nat_ip,
                     vpn_overhead_bytes=args.vpn_overhead, rng_seed=args.seed)


def cmd_mix(args) -> int:
    devices = [_load_trace(p, "--device-trace") for p in args.device_trace]
    background = _load_trace(args.background, "--background")
    mixed = mix_traces(devices, background, _mix_config(args))
    write_csv(mixed, args.out)
    print(f"mixed {len(mixed)} packets ({args.mode}) -> {args.out}")
    return 0


def cmd_train(args) -> int:
    if not 1 <= args.max_leaves <= MAX_LEAVES:
        raise UsageError(f"--max-leaves must be between 1 and {MAX_LEAVES} (inference stage bound)")
    device = _load_trace(args.device_trace, "--device-trace", label=args.device_id)
    device_id = _device_label(device, args.device_id)
    device = device.select(device_id)
    background = _load_trace(args.background, "--background").select(None)
    cfg = _mix_config(args)
    if args.mixed:
        monitored = _load_trace(args.mixed, "--mixed")
    else:
        monitored = mix_traces([device], background, cfg)
    if not any(x == device_id for x in monitored.labels()):
        raise UsageError(f"no packet of {device_id} in the monitored trace")
    try:
        params = ModelParams(
            embedding=TrainingConfig(c=args.context, k=args.negatives, d=args.dim,
                                     learning_rate=args.lr, epochs=args.epochs,
                                     rng_seed=args.seed, t_b_us=args.tb_us),
            extraction=ExtractionConfig(t_b_us=args.tb_us, eta=args.eta, min_bursts=args.min_bursts),
            lam=args.lam, min_freq=args.min_freq, n_keys=args.n_keys, t_w_us=args.tw_us,
            max_leaves=args.max_leaves, split_seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    model, summary = train_device_model(
        device_id, monitored.select(device_id), monitored.select(None), monitored, params,
        key_trace=device, size_map=cfg.rewrite_dir_size)
    model.save(args.out)
    for line in summary.lines():
        print(line)
    print(f"model -> {args.out}")
    return 0


def cmd_compile(args) -> int:
    _require_file(args.model, "--model")
    try:
        model = DeviceFingerprintModel.load(args.model)
    except ModelFileError as exc:
        raise CliStageError("model", f"--model: {exc}") from exc
    try:
        tables = compile_model(model, args.ip_slots)
    except CompileError as exc:
        raise CliStageError("compile", str(exc)) from exc
    write_rules(tables, args.out)
    for table, n in tables.rule_counts().items():
        print(f"{table}: {n} rules")
    print(f"rules -> {args.out}")
    return 0


_SHARED_TRACE: Trace | None = None


def _simulate_one(args):
    tables, debug, flush = args
    return run_trace(_SHARED_TRACE, [tables], debug=debug, flush_at_end=flush)


def cmd_simulate(args) -> int:
    global _SHARED_TRACE
    table_sets = []
    for path in args.rules:
        _require_file(path, "--rules")
        try:
            table_sets.append(read_rules(path))
        except (CompileError, ValueError) as exc:
            raise CliStageError("rules", f"{path}: {exc}") from exc
    ids = [t.device_id for t in table_sets]
    if len(set(ids)) != len(ids):
        raise UsageError("--rules: two rule files for the same device")
    trace = _load_trace(args.trace, "--trace")
    result = RunResult()
    if args.jobs > 1 and len(table_sets) > 1:
        _SHARED_TRACE = trace
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(min(args.jobs, len(table_sets)), mp_context=ctx) as pool:
            parts = list(pool.map(_simulate_one, [(t, args.debug, not args.no_flush) for t in table_sets]))
        _SHARED_TRACE = None
        for part in parts:
            result.detections.update(part.detections)
            result.stats.update(part.stats)
    else:
        result = run_trace(trace, table_sets, debug=args.debug, flush_at_end=not args.no_flush)
    write_detections(args.out, result.all_detections())
    for dev in sorted(result.stats):
        print(f"{dev}: {result.stats[dev].summary()}")
    print(f"detections -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    _require_file(args.detections, "--detections")
    try:
        detections = read_detections(args.detections)
    except ValueError as exc:
        raise CliStageError("evaluate", f"--detections: {exc}") from exc
    trace = _load_trace(args.trace, "--trace")
    if not any(x is not None for x in trace.labels()):
        raise CliStageError("evaluate", "--trace carries no device labels")
    truth = ground_truth_windows(trace, args.tw_us)
    restrict = None
    if args.split != "all":
        windows = assign_windows(trace.timestamps, trace.hosts, args.tw_us)
        part = split_indices(len(windows), (4, 3, 3), args.seed)[("train", "val", "test").index(args.split)]
        keys = windows.keys()
        restrict = {keys[i] for i in part}
    devices = sorted({d.device_id for d in detections})
    try:
        reports = evaluate(detections, truth, devices, restrict)
    except EvaluationError as exc:
        raise CliStageError("evaluate", f"{exc} (is --tw-us the one used in simulation?)") from exc
    for rep in reports.values():
        line = rep.summary()
        if rep.unmatched:
            line += f" unmatched={rep.unmatched}"
        print(line)
    for path in write_report(reports, args.out, figures=not args.no_figures):
        print(f"wrote {path}")
    return 0


COMMANDS = {"generate": cmd_generate, "mix": cmd_mix, "train": cmd_train,
            "compile": cmd_compile, "simulate": cmd_simulate, "evaluate": cmd_evaluate}


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    prog = "iotfp"
    try:
        args = parse_args(argv)
        prog = f"iotfp {args.command}"
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"{prog}: error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"{prog}: stage {exc.stage} failed: {exc}", file=sys.stderr)
        return 1
    except CliStageError as exc:
        print(f"{prog}: stage {exc.stage} failed: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
