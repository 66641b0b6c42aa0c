"""Sender/receiver orchestration and frame transports.

The sender path is select -> extract -> allocate -> quantize -> pack ->
serialize -> frame; the receiver reverses it and optionally calibrates.
Frames are a u32 little-endian length followed by the payload bytes.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import wire
from .bitpack import pack_tensor, unpack_tensor
from .calibration import CalibrationProfile, calibrate_cache
from .errors import DimensionMismatch, EmptyInput, FrameIncomplete, InvalidInput, TransportFailure
from .extraction import Fact, extract_facts, format_facts_summary
from .kv_model import AttentionMap, KvCache, SyntheticSpec, generate_attention, generate_cache
from .layer_select import SelectionConfig, score_layers, select_layers
from .memory import MemoryCache, content_hash
from .quantizer import (
    BitAllocation,
    allocate_bits,
    check_bit_triple,
    dequantize,
    profile_sensitivity,
    quantize,
)

log = logging.getLogger(__name__)

FRAME_HEADER = struct.Struct("<I")
MAX_FRAME = 1 << 31


@dataclass(frozen=True)
class SenderConfig:
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    bits: tuple[int, int, int] = (8, 6, 4)
    facts_budget: int = 0
    # sender-side calibration runs only when both profiles are present
    sender_profile: CalibrationProfile | None = None
    receiver_profile: CalibrationProfile | None = None
    allocation: BitAllocation | None = None

    def __post_init__(self):
        check_bit_triple(*self.bits)
        if self.facts_budget < 0:
            raise InvalidInput("facts_budget must be >= 0")


@dataclass(frozen=True)
class TransferReport:
    original_bytes: int
    payload_bytes: int
    compression_ratio: float
    selected_layers: int
    per_layer_bits: tuple[int, ...]
    elapsed: float
    layer_indices: tuple[int, ...] = ()
    mse: float | None = None

    def lines(self) -> list[str]:
        out = [
            f"original_bytes={self.original_bytes}",
            f"payload_bytes={self.payload_bytes}",
            f"compression_ratio={self.compression_ratio!r}",
            f"selected_layers={self.selected_layers}",
            f"layer_indices={','.join(map(str, self.layer_indices))}",
            f"per_layer_bits={','.join(map(str, self.per_layer_bits))}",
        ]
        if self.mse is not None:
            out.append(f"mse={self.mse!r}")
        out.append(f"elapsed={self.elapsed:.6f}")
        return out


# -- transports -----------------------------------------------------------------

def encode_frame(body: bytes) -> bytes:
    if len(body) >= MAX_FRAME:
        raise TransportFailure("payload too large for a frame")
    return FRAME_HEADER.pack(len(body)) + body


class InMemoryTransport:
    """FIFO of frames; writer and reader share the object."""

    def __init__(self):
        self._frames: deque[bytes] = deque()
        self._lock = threading.Lock()
        self.wire_log: list[bytes] = []

    def write_frame(self, body: bytes) -> None:
        framed = encode_frame(body)
        with self._lock:
            self.wire_log.append(framed)
            self._frames.append(framed)

    def read_frame(self) -> bytes | None:
        with self._lock:
            if not self._frames:
                return None
            framed = self._frames.popleft()
        return decode_frames(framed)[0]


def decode_frames(stream: bytes) -> list[bytes]:
    frames, pos = [], 0
    while pos < len(stream):
        if len(stream) - pos < FRAME_HEADER.size:
            raise FrameIncomplete("stream ends inside a frame header")
        (n,) = FRAME_HEADER.unpack_from(stream, pos)
        pos += FRAME_HEADER.size
        if len(stream) - pos < n:
            raise FrameIncomplete(f"frame declares {n} bytes, {len(stream) - pos} available")
        frames.append(stream[pos:pos + n])
        pos += n
    return frames


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            break
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_socket_frame(sock: socket.socket, max_frame: int = MAX_FRAME) -> bytes | None:
    """Next frame body, or ``None`` on a clean close between frames."""
    head = _recv_exact(sock, FRAME_HEADER.size)
    if not head:
        return None
    if len(head) < FRAME_HEADER.size:
        raise FrameIncomplete("connection closed inside a frame header")
    (n,) = FRAME_HEADER.unpack(head)
    if n > max_frame:
        raise TransportFailure(f"frame of {n} bytes exceeds limit {max_frame}")
    body = _recv_exact(sock, n)
    if len(body) < n:
        raise FrameIncomplete(f"connection closed after {len(body)} of {n} frame bytes")
    return body


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not host or not port.isdigit() or not 0 <= int(port) <= 65535:
        raise InvalidInput(f"address must be host:port, got {address!r}")
    return host.strip("[]"), int(port)


class TcpTransport:
    """Client side of a framed TCP connection, opened lazily."""

    def __init__(self, address: str, timeout: float = 10.0):
        self.address = parse_address(address)
        self.timeout = timeout
        self._sock: socket.socket | None = None

    def _connect(self) -> socket.socket:
        if self._sock is None:
            try:
                self._sock = socket.create_connection(self.address, timeout=self.timeout)
            except OSError as exc:
                raise TransportFailure(f"cannot connect to {self.address}: {exc}") from exc
        return self._sock

    def write_frame(self, body: bytes) -> None:
        framed = encode_frame(body)
        sock = self._connect()
        try:
            sock.sendall(framed)
        except OSError as exc:
            raise TransportFailure(f"send failed: {exc}") from exc

    def read_frame(self) -> bytes | None:
        return read_socket_frame(self._connect())

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class SocketTransport:
    """Wraps an accepted server-side connection."""

    def __init__(self, sock: socket.socket):
        self.sock = sock

    def read_frame(self) -> bytes | None:
        return read_socket_frame(self.sock)

    def write_frame(self, body: bytes) -> None:
        try:
            self.sock.sendall(encode_frame(body))
        except OSError as exc:
            raise TransportFailure(f"send failed: {exc}") from exc


class FrameServer(socketserver.ThreadingTCPServer):
    """Threaded TCP server calling ``handler(body, peer)`` for each frame.

    Frames of one connection are handled in arrival order; connections run
    concurrently.  Errors are collected in ``errors`` rather than raised.
    """

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: str, handler: Callable[[bytes, tuple], None]):
        self.frame_handler = handler
        self.errors: list[Exception] = []
        self.frames_handled = 0
        self._count_lock = threading.Lock()
        super().__init__(parse_address(address), _FrameRequestHandler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t


class _FrameRequestHandler(socketserver.BaseRequestHandler):
    def handle(self):
        server: FrameServer = self.server
        while True:
            try:
                body = read_socket_frame(self.request)
            except TransportFailure as exc:
                server.errors.append(exc)
                return
            if body is None:
                return
            try:
                server.frame_handler(body, self.client_address)
            except Exception as exc:  # noqa: BLE001 - surfaced through server.errors
                log.warning("frame from %s rejected: %s", self.client_address, exc)
                server.errors.append(exc)
            with server._count_lock:
                server.frames_handled += 1


# -- sender ---------------------------------------------------------------------

def _check_inputs(cache: KvCache, attention: AttentionMap) -> None:
    if cache.num_layers == 0:
        raise EmptyInput("cache has no layers")
    if cache.layer_indices is not None:
        raise InvalidInput("sender needs a full cache, not a sparse one")
    if not cache.uniform_seq:
        raise DimensionMismatch("sender cache layers disagree on sequence length")
    _, heads, seq, _ = cache.shape
    if attention.weights.shape != (cache.num_layers, heads, seq):
        raise DimensionMismatch(
            f"attention map {attention.weights.shape} does not match cache "
            f"({cache.num_layers}, {heads}, {seq})")


def cached_facts(text: str, budget: int, fact_cache: MemoryCache | None) -> list[Fact]:
    if budget == 0 or not text.strip():
        return []
    if fact_cache is None:
        return extract_facts(text, budget)
    key = content_hash(f"{budget}\0{text}".encode("utf-8"))
    hit = fact_cache.get(key)
    if hit is not None:
        return list(wire.decode_facts(hit))
    facts = extract_facts(text, budget)
    if facts:
        fact_cache.put(key, wire.encode_facts(facts))
    return facts


def build_payload(cache: KvCache, attention: AttentionMap, context_text: str,
                  cfg: SenderConfig, fact_cache: MemoryCache | None = None):
    """Compress ``cache`` into a :class:`wire.Payload` plus the selected indices and bits."""
    _check_inputs(cache, attention)
    scores = score_layers(attention, cfg.selection)
    selected = select_layers(scores.combined, cfg.selection.ratio)

    allocation = cfg.allocation
    if allocation is None:
        hi, mid, lo = cfg.bits
        report = profile_sensitivity([cache], probe_bits=lo)
        allocation = allocate_bits(report, hi, mid, lo)
    elif len(allocation.per_layer_bits) != cache.num_layers:
        raise DimensionMismatch("bit allocation does not cover every layer")

    calibrated = cfg.sender_profile is not None and cfg.receiver_profile is not None
    source = calibrate_cache(cache, cfg.sender_profile, cfg.receiver_profile) if calibrated else cache

    records = []
    for idx in selected:
        k, v = source.layers[idx]
        b = allocation.per_layer_bits[idx]
        records.append(wire.LayerRecord(idx, pack_tensor(quantize(k, b)), pack_tensor(quantize(v, b))))

    facts = tuple(cached_facts(context_text, cfg.facts_budget, fact_cache))
    header = wire.make_header(cache.model_id, cache.num_layers, records, facts,
                              cache.shape[2], calibrated)
    bits = tuple(allocation.per_layer_bits[i] for i in selected)
    return wire.Payload(header, tuple(records), facts), tuple(selected), bits


def compress(cache: KvCache, attention: AttentionMap, context_text: str, cfg: SenderConfig,
             fact_cache: MemoryCache | None = None) -> tuple[bytes, TransferReport]:
    start = time.perf_counter()
    payload, selected, bits = build_payload(cache, attention, context_text, cfg, fact_cache)
    body = wire.serialize(payload)
    original = cache.nbytes
    report = TransferReport(original, len(body), original / len(body), len(selected), bits,
                            time.perf_counter() - start, selected)
    return body, report


def send(cache: KvCache, attention: AttentionMap, context_text: str, cfg: SenderConfig,
         transport, fact_cache: MemoryCache | None = None) -> TransferReport:
    body, report = compress(cache, attention, context_text, cfg, fact_cache)
    transport.write_frame(body)
    log.info("sent payload of %d bytes", report.payload_bytes)
    return report


# -- receiver -------------------------------------------------------------------

def reconstruct(payload: wire.Payload, receiver_profile: CalibrationProfile | None = None,
                sender_profile: CalibrationProfile | None = None) -> KvCache:
    layers = tuple(
        (dequantize(unpack_tensor(rec.key)), dequantize(unpack_tensor(rec.value)))
        for rec in payload.layers
    )
    cache = KvCache(layers, payload.header.sender_model_id,
                    tuple(rec.index for rec in payload.layers))
    if receiver_profile is not None and sender_profile is not None and not payload.calibrated:
        cache = calibrate_cache(cache, sender_profile, receiver_profile)
    return cache


def decode_body(body: bytes, receiver_profile=None, sender_profile=None):
    payload = wire.deserialize(body)
    cache = reconstruct(payload, receiver_profile, sender_profile)
    facts = list(payload.facts)
    return cache, facts, format_facts_summary(facts)


def receive(transport, receiver_profile: CalibrationProfile | None = None,
            sender_profile: CalibrationProfile | None = None):
    """Read one frame and return ``(cache, facts, summary)``."""
    body = transport.read_frame()
    if body is None:
        raise FrameIncomplete("no frame available")
    log.info("received payload of %d bytes", len(body))
    return decode_body(body, receiver_profile, sender_profile)


def integrate(sender_cache: KvCache, receiver_cache: KvCache) -> KvCache:
    """Prepend sender positions to the receiver's along the sequence axis.

    Sender layers are matched to receiver layers by original index; receiver
    layers without a sender counterpart pass through unchanged.
    """
    if sender_cache.num_layers == 0:
        return receiver_cache
    if receiver_cache.num_layers == 0:
        raise DimensionMismatch("receiver cache has no layers")
    sb, sh, _, sd = sender_cache.shape
    rb, rh, _, rd = receiver_cache.shape
    if (sb, sh, sd) != (rb, rh, rd):
        raise DimensionMismatch(
            f"sender (batch, heads, head_dim)={(sb, sh, sd)} vs receiver {(rb, rh, rd)}")
    by_index = dict(zip(sender_cache.indices, sender_cache.layers))
    if max(by_index) >= receiver_cache.num_layers:
        raise DimensionMismatch("sender layer index beyond receiver depth")
    layers = []
    for idx, (k, v) in zip(receiver_cache.indices, receiver_cache.layers):
        if idx in by_index:
            sk, sv = by_index[idx]
            k, v = np.concatenate([sk, k], axis=2), np.concatenate([sv, v], axis=2)
        layers.append((k, v))
    return KvCache(tuple(layers), receiver_cache.model_id, receiver_cache.layer_indices)


# -- benchmark ------------------------------------------------------------------

def sweep_config(target_bits: int, base: SenderConfig | None = None) -> SenderConfig:
    """Config for a target bit-width: (min(t+2, 8), t, max(t-2, 2))."""
    base = base or SenderConfig()
    triple = (min(target_bits + 2, 8), target_bits, max(target_bits - 2, 2))
    return SenderConfig(base.selection, triple, base.facts_budget)


def reconstruction_mse(original: KvCache, received: KvCache) -> float:
    total, count = 0.0, 0
    for idx, (k, v) in zip(received.indices, received.layers):
        ok, ov = original.layers[idx]
        for a, b in ((ok, k), (ov, v)):
            d = a.astype(np.float64) - b.astype(np.float64)
            total += float(np.dot(d.ravel(), d.ravel()))
            count += d.size
    return total / count if count else 0.0


def run_benchmark(spec: SyntheticSpec, sweep: Sequence[SenderConfig],
                  context_text: str = "") -> list[TransferReport]:
    if not sweep:
        raise EmptyInput("benchmark sweep is empty")
    cache = generate_cache(spec)
    attention = generate_attention(cache, spec.seed)
    reports = []
    for cfg in sweep:
        transport = InMemoryTransport()
        report = send(cache, attention, context_text, cfg, transport)
        received, _, _ = receive(transport)
        reports.append(TransferReport(
            report.original_bytes, report.payload_bytes, report.compression_ratio,
            report.selected_layers, report.per_layer_bits, report.elapsed,
            report.layer_indices, reconstruction_mse(cache, received)))
    return reports
