"""Command-line entry point: ``qkvcomm <command> ...``.

Exit codes: 0 success, 2 input error, 3 payload format error, 4 transport error.
Machine-readable output goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import threading
from pathlib import Path

from . import calibration, cachefile, config, pipeline
from .errors import InvalidInput, QKVError, TransportFailure, WireError
from .extraction import extract_facts, format_facts_summary
from .kv_model import generate_attention, generate_cache
from .memory import MemoryCache, content_hash
from .quantizer import allocate_bits, bucket_sizes, profile_sensitivity

log = logging.getLogger("qkvcomm")

EXIT_OK, EXIT_INPUT, EXIT_FORMAT, EXIT_TRANSPORT = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _read_cache(path) -> "pipeline.KvCache":
    try:
        return cachefile.read_cache(path)
    except OSError as exc:
        raise CliError(f"cannot read cache file {path}: {exc}")
    except WireError as exc:
        raise CliError(f"{path} is not a valid cache file: {exc}")


def _sender_config(args, cfg: dict) -> pipeline.SenderConfig:
    selection = config.selection_from(cfg)
    if args.ratio is not None:
        selection = config.SelectionConfig(selection.alpha, selection.gamma_mu,
                                           selection.gamma_sigma, args.ratio)
    bits = config.bits_from(cfg)
    if args.bits:
        if len(args.bits) != 3:
            raise CliError("--bits takes max,target,min")
        bits = tuple(args.bits)
    return pipeline.SenderConfig(selection, bits, cfg.get("facts_budget", 8))


def _context_text(args) -> str:
    if not getattr(args, "text", None):
        return ""
    try:
        return Path(args.text).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CliError(f"cannot read text file {args.text}: {exc}")


def _print_report(report: pipeline.TransferReport) -> None:
    for line in report.lines():
        print(line)


# -- commands -------------------------------------------------------------------

def cmd_generate(args, cfg):
    spec = config.spec_from(cfg)
    if args.seed is not None:
        spec = config.SyntheticSpec(**{**spec.__dict__, "seed": args.seed})
    cache = generate_cache(spec)
    cachefile.write_cache(args.out, cache)
    print(f"layers={cache.num_layers}")
    print(f"shape={','.join(map(str, cache.shape))}")
    print(f"bytes={cache.nbytes}")


def cmd_profile(args, cfg):
    cache = _read_cache(args.cache)
    hi, mid, lo = config.bits_from(cfg)
    probe = args.bits[0] if args.bits else cfg.get("probe_bits", lo)
    report = profile_sensitivity([cache], probe)
    alloc = allocate_bits(report, hi, mid, lo)
    top, middle, _ = bucket_sizes(cache.num_layers)
    ranked = sorted(range(cache.num_layers), key=lambda i: (-report.per_layer_error[i], i))
    rank = {layer: r for r, layer in enumerate(ranked)}
    for l, err in enumerate(report.per_layer_error):
        r = rank[l]
        bucket = "max" if r < top else "target" if r < top + middle else "min"
        print(f"{l}\t{err!r}\t{bucket}\t{alloc.per_layer_bits[l]}")


def cmd_compress(args, cfg):
    cache = _read_cache(args.cache)
    sender = _sender_config(args, cfg)
    attention = generate_attention(cache, args.seed if args.seed is not None else cfg.get("seed", 0))
    body, report = pipeline.compress(cache, attention, _context_text(args), sender)
    Path(args.out).write_bytes(body)
    _print_report(report)


def cmd_decompress(args, cfg):
    try:
        body = Path(args.payload).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read payload {args.payload}: {exc}")
    try:
        cache, facts, summary = pipeline.decode_body(body)
    except WireError as exc:
        raise CliError(f"invalid payload: {exc}", EXIT_FORMAT)
    cachefile.write_cache(args.out, cache)
    print(f"layers={cache.num_layers}")
    print(f"layer_indices={','.join(map(str, cache.indices))}")
    print(f"facts={len(facts)}")
    if args.summary_out:
        Path(args.summary_out).write_text(summary, encoding="utf-8")


def cmd_send(args, cfg):
    if not args.address:
        raise CliError("--address is required")
    cache = _read_cache(args.cache)
    sender = _sender_config(args, cfg)
    attention = generate_attention(cache, args.seed if args.seed is not None else cfg.get("seed", 0))
    text = _context_text(args)
    with pipeline.TcpTransport(args.address) as transport:
        for _ in range(args.count):
            report = pipeline.send(cache, attention, text, sender, transport)
            log.info("payload_bytes=%d", report.payload_bytes)
            _print_report(report)


def cmd_serve(args, cfg):
    if not args.address:
        raise CliError("--address is required")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    spill = args.spill_dir or cfg.get("spill_dir") or None
    store = MemoryCache(cfg.get("cache_capacity_bytes", 256 << 20),
                        cfg.get("eviction_threshold", 0.8), spill)
    counter = {"n": 0}
    lock = threading.Lock()
    done = threading.Event()

    def handle(body: bytes, peer) -> None:
        cache, _, summary = pipeline.decode_body(body)
        with lock:
            n = counter["n"]
            counter["n"] += 1
            key = content_hash(body)
            if key not in store:
                store.put(key, body)
            cachefile.write_cache(out_dir / f"payload_{n:04d}.qkvt", cache)
            (out_dir / f"payload_{n:04d}.facts.txt").write_text(summary, encoding="utf-8")
            log.info("payload_bytes=%d from %s:%d -> payload_%04d", len(body), *peer[:2], n)
            if args.max_frames and counter["n"] >= args.max_frames:
                done.set()

    try:
        server = pipeline.FrameServer(args.address, handle)
    except OSError as exc:
        raise CliError(f"cannot listen on {args.address}: {exc}", EXIT_TRANSPORT)
    with server:
        server.start()
        print(f"listening={server.address}", flush=True)
        try:
            done.wait()
        except KeyboardInterrupt:
            pass
        server.shutdown()
    print(f"frames={counter['n']}")


def cmd_bench(args, cfg):
    spec = config.spec_from(cfg)
    if args.seed is not None:
        spec = config.SyntheticSpec(**{**spec.__dict__, "seed": args.seed})
    targets = args.bits if args.bits is not None else list(cfg.get("sweep_bits", (4, 6, 8)))
    if not targets:
        raise CliError("benchmark sweep is empty")
    base = _sender_config(argparse.Namespace(ratio=args.ratio, bits=None), cfg)
    sweep = [pipeline.sweep_config(t, base) for t in targets]
    reports = pipeline.run_benchmark(spec, sweep)
    header = f"{'bits':>4} {'ratio':>10} {'payload_bytes':>14} {'mse':>14} {'elapsed_s':>10}"
    print(header)
    rows = []
    for t, r in zip(targets, reports):
        rows.append((t, r.compression_ratio, r.payload_bytes, r.mse, r.elapsed))
        print(f"{t:>4} {r.compression_ratio:>10.4f} {r.payload_bytes:>14} {r.mse:>14.6e} {r.elapsed:>10.4f}")
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["bits", "ratio", "payload_bytes", "mse", "elapsed_s"])
            w.writerows(rows)


def cmd_extract(args, cfg):
    text = _context_text(args)
    facts = extract_facts(text, args.budget or cfg.get("facts_budget", 8)) if text.strip() else []
    print(format_facts_summary(facts))


def cmd_calibrate(args, cfg):
    caches = [_read_cache(p) for p in args.caches]
    profile = calibration.compute_profile(caches, args.mode, pooled=args.pooled)
    Path(args.out).write_bytes(calibration.dump_profile(profile))
    print(f"model_id={profile.model_id}")
    print(f"mode={profile.mode}")
    print(f"layers={len(profile.per_layer)}")


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (default: $QKVCOMM_CONFIG)")
    common.add_argument("--bits", type=_int_list, help="bit-widths; meaning depends on command")
    common.add_argument("--ratio", type=float, help="layer selection ratio")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--spill-dir")
    common.add_argument("--address", help="host:port")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="qkvcomm", description="Compressed KV cache transfer.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("generate", parents=[common], help="write a synthetic cache from a spec config")
    s.set_defaults(func=cmd_generate, need_out=True)

    s = sub.add_parser("profile", parents=[common], help="per-layer sensitivity table")
    s.add_argument("cache")
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("compress", parents=[common], help="cache file -> .qkvc payload")
    s.add_argument("cache")
    s.add_argument("--text", help="context text file for fact extraction")
    s.set_defaults(func=cmd_compress, need_out=True)

    s = sub.add_parser("decompress", parents=[common], help=".qkvc payload -> cache file")
    s.add_argument("payload")
    s.add_argument("--summary-out", help="write the facts summary here")
    s.set_defaults(func=cmd_decompress, need_out=True)

    s = sub.add_parser("send", parents=[common], help="stream a compressed cache over tcp")
    s.add_argument("cache")
    s.add_argument("--text")
    s.add_argument("--count", type=int, default=1, help="payloads to send on one connection")
    s.set_defaults(func=cmd_send)

    s = sub.add_parser("serve", parents=[common], help="receive payloads over tcp")
    s.add_argument("--max-frames", type=int, default=0, help="exit after this many frames")
    s.set_defaults(func=cmd_serve, need_out=True)

    s = sub.add_parser("bench", parents=[common], help="bit-width sweep over a synthetic cache")
    s.add_argument("--csv")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("extract", parents=[common], help="print the facts summary of a text file")
    s.add_argument("text")
    s.add_argument("--budget", type=int)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("calibrate", parents=[common], help="build a calibration profile")
    s.add_argument("caches", nargs="+")
    s.add_argument("--mode", choices=calibration.MODES, default=calibration.PER_DIMENSION)
    s.add_argument("--pooled", action="store_true", help="one global entry for all layers")
    s.set_defaults(func=cmd_calibrate, need_out=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose or args.command in ("serve", "send")
                        else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "need_out", False) and not args.out:
            raise CliError("--out is required")
        cfg = config.load_config(args.config)
        args.func(args, cfg)
    except CliError as exc:
        print(f"qkvcomm: {exc}", file=sys.stderr)
        return exc.code
    except TransportFailure as exc:
        print(f"qkvcomm: transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except WireError as exc:
        print(f"qkvcomm: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (InvalidInput, QKVError, OSError) as exc:
        print(f"qkvcomm: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
