"""One-shot agent/server calibration round, in-process or over TCP.

Wire format: newline-delimited JSON, one message per line.  Every real
number travels both as a shortest round-trip decimal and as a hex-float
string, and receivers reconstruct from the hex, so a networked round is
bit-exact with the simulated one.  The +inf sentinel is the string "inf".

Upstream payload for the one-shot methods is exactly
(round_id, agent_id, q, n) — never raw scores, features, or labels.  The
pooled-scores baseline does ship raw score arrays and its audit records are
flagged non-one-shot.

The per-round alpha is folded into the wire round-id, so agents and server
calibrated at different levels fail loudly with a round mismatch instead of
silently aggregating incomparable quantiles.
"""

from __future__ import annotations

import json
import math
import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .aggregation import (
    AggregatedThreshold,
    AggregationMethod,
    local_only,
    pooled_scores_threshold,
    quantile_of_quantiles,
    unweighted_average,
    weighted_average,
)
from .calibration import CalibrationConfig, LocalQuantileSummary, ScoreSample, local_threshold
from .errors import ProtocolError, RoundAbortedError, TransportError, ValidationError

SCORE_CHUNK = 512
DEFAULT_TIMEOUT_S = 30.0


@dataclass(frozen=True)
class CalibrationRoundConfig:
    """Round parameters every participant must agree on."""

    alpha: float
    method: AggregationMethod
    agent_count: int
    round_id: str
    timeout_s: float = DEFAULT_TIMEOUT_S

    def __post_init__(self):
        CalibrationConfig(self.alpha)
        object.__setattr__(self, "method", AggregationMethod(self.method))
        if self.agent_count < 1:
            raise ValidationError(f"agent_count must be >= 1, got {self.agent_count}")
        if not self.round_id:
            raise ValidationError("round_id must be non-empty")

    def wire_round_id(self) -> str:
        # alpha is part of the round identity: mismatched levels must not
        # be aggregated together
        return f"{self.round_id}|a={self.alpha!r}"

    def calibration(self) -> CalibrationConfig:
        return CalibrationConfig(self.alpha)


# ---------------------------------------------------------------------------
# wire encoding
# ---------------------------------------------------------------------------


def _float_to_wire(x: float):
    if x == math.inf:
        return "inf", "inf"
    if not math.isfinite(x):
        raise ValidationError(f"cannot serialize {x}")
    return float(x), float(x).hex()


def _float_from_wire(dec, hex_str) -> float:
    if hex_str == "inf" or dec == "inf":
        return math.inf
    try:
        return float.fromhex(hex_str)
    except (TypeError, ValueError):
        return float(dec)


def encode_message(msg: dict) -> bytes:
    return (json.dumps(msg, separators=(",", ":")) + "\n").encode("utf-8")


def summary_message(round_id: str, summary: LocalQuantileSummary) -> dict:
    q_dec, q_hex = _float_to_wire(summary.q)
    return {
        "type": "summary",
        "round_id": round_id,
        "agent_id": summary.agent_id,
        "q": q_dec,
        "q_hex": q_hex,
        "n": summary.n,
    }


def threshold_message(round_id: str, method: AggregationMethod, q_hat: float) -> dict:
    q_dec, q_hex = _float_to_wire(q_hat)
    return {
        "type": "threshold",
        "round_id": round_id,
        "method": AggregationMethod(method).value,
        "q_hat": q_dec,
        "q_hat_hex": q_hex,
    }


def error_message(round_id: str, code: str, detail: str) -> dict:
    return {"type": "error", "round_id": round_id, "code": code, "detail": detail}


def score_chunk_messages(round_id: str, agent_id: int, values: np.ndarray) -> list[dict]:
    chunks = [values[i : i + SCORE_CHUNK] for i in range(0, len(values), SCORE_CHUNK)]
    total = len(chunks)
    msgs = []
    for i, chunk in enumerate(chunks):
        msgs.append(
            {
                "type": "scores",
                "round_id": round_id,
                "agent_id": int(agent_id),
                "chunk": i,
                "of": total,
                "values": [float(v) for v in chunk],
                "values_hex": [float(v).hex() for v in chunk],
            }
        )
    return msgs


# ---------------------------------------------------------------------------
# audit log
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AuditRecord:
    direction: str  # "up" (agent -> server) or "down" (server -> agent)
    n_bytes: int
    timestamp: float
    line: str
    one_shot: bool = True


@dataclass
class AuditLog:
    records: list[AuditRecord] = field(default_factory=list)

    def add(self, direction: str, payload: bytes, one_shot: bool = True) -> None:
        self.records.append(
            AuditRecord(
                direction=direction,
                n_bytes=len(payload),
                timestamp=time.time(),
                line=payload.decode("utf-8", errors="replace").rstrip("\n"),
                one_shot=one_shot,
            )
        )

    def upstream(self) -> list[AuditRecord]:
        return [r for r in self.records if r.direction == "up"]

    def downstream(self) -> list[AuditRecord]:
        return [r for r in self.records if r.direction == "down"]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(
                    json.dumps(
                        {
                            "direction": r.direction,
                            "bytes": r.n_bytes,
                            "timestamp": r.timestamp,
                            "one_shot": r.one_shot,
                            "line": r.line,
                        }
                    )
                    + "\n"
                )


# ---------------------------------------------------------------------------
# simulated round
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoundResult:
    threshold: AggregatedThreshold | list[AggregatedThreshold]
    audit: AuditLog
    summaries: tuple[LocalQuantileSummary, ...] = ()


def run_round_simulated(
    samples: list[ScoreSample],
    cfg: CalibrationRoundConfig,
    agent_ids: list[int] | None = None,
) -> RoundResult:
    """Execute the whole round in-process.

    The exact wire messages are synthesized into the audit log so payload
    audits (message counts, fields, canary scans) see the same bytes a
    networked round would produce.
    """
    if len(samples) == 0:
        raise ValidationError("round needs at least one agent")
    if len(samples) != cfg.agent_count:
        raise ValidationError(f"round configured for {cfg.agent_count} agents, got {len(samples)}")
    if agent_ids is None:
        agent_ids = list(range(len(samples)))
    audit = AuditLog()
    rid = cfg.wire_round_id()
    cal_cfg = cfg.calibration()
    summaries = [local_threshold(s, cal_cfg, agent_id=a) for a, s in zip(agent_ids, samples)]

    if cfg.method is AggregationMethod.LOCAL_ONLY:
        # non-federated baseline: nothing is transmitted
        return RoundResult(local_only(summaries), audit, tuple(summaries))

    if cfg.method is AggregationMethod.POOLED_SCORES:
        for agent_id, sample in zip(agent_ids, samples):
            for msg in score_chunk_messages(rid, agent_id, sample.values):
                audit.add("up", encode_message(msg), one_shot=False)
        result = pooled_scores_threshold(samples, cal_cfg, agent_ids=agent_ids)
    else:
        for summary in summaries:
            audit.add("up", encode_message(summary_message(rid, summary)))
        if cfg.method is AggregationMethod.WEIGHTED_AVERAGE:
            result = weighted_average(summaries)
        elif cfg.method is AggregationMethod.UNWEIGHTED_AVERAGE:
            result = unweighted_average(summaries)
        else:
            result = quantile_of_quantiles(summaries, cal_cfg)

    reply = encode_message(threshold_message(rid, cfg.method, result.q_hat))
    one_shot = cfg.method is not AggregationMethod.POOLED_SCORES
    for _ in agent_ids:
        audit.add("down", reply, one_shot=one_shot)
    return RoundResult(result, audit, tuple(summaries))


# ---------------------------------------------------------------------------
# networked round
# ---------------------------------------------------------------------------


def _parse_addr(addr) -> tuple[str, int]:
    if isinstance(addr, tuple):
        return addr[0], int(addr[1])
    host, _, port = str(addr).rpartition(":")
    if not host:
        raise ValidationError(f"address must be host:port, got {addr!r}")
    return host, int(port)


class FederationServer:
    """Collects exactly M summaries for one round, aggregates once, replies.

    Stragglers are not tolerated: if M summaries do not arrive before the
    timeout the round aborts and every connected agent gets an error —
    a partial aggregate is never broadcast.
    """

    def __init__(self, bind_addr, cfg: CalibrationRoundConfig):
        self.cfg = cfg
        host, port = _parse_addr(bind_addr)
        self._sock = socket.create_server((host, port))
        self._sock.settimeout(0.05)
        self.audit = AuditLog()
        self._lock = threading.Lock()
        self._done = threading.Event()
        self._result: AggregatedThreshold | None = None
        self._error: Exception | None = None
        self._summaries: dict[int, LocalQuantileSummary] = {}
        self._agent_conns: dict[int, socket.socket] = {}
        self._open_conns: list[socket.socket] = []
        self._chunks: dict[int, dict] = {}
        self._scores: dict[int, np.ndarray] = {}
        self._closing = False
        self._deadline = 0.0
        self._threads: list[threading.Thread] = []

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._sock.getsockname()[:2]
        return host, port

    def start(self) -> "FederationServer":
        self._deadline = time.monotonic() + self.cfg.timeout_s
        t = threading.Thread(target=self._accept_loop, name="fedcal-accept", daemon=True)
        t.start()
        self._threads.append(t)
        return self

    # -- threads ------------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._done.is_set() and not self._closing:
            if time.monotonic() > self._deadline:
                self._abort("round_timeout", f"round incomplete after {self.cfg.timeout_s}s")
                return
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            with self._lock:
                if self._done.is_set():
                    conn.close()
                    continue
                self._open_conns.append(conn)
            t = threading.Thread(target=self._handle_conn, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _handle_conn(self, conn: socket.socket) -> None:
        try:
            conn.settimeout(self.cfg.timeout_s + 1.0)
            reader = conn.makefile("rb")
            for raw in reader:
                with self._lock:
                    if self._done.is_set():
                        return
                    keep_open = self._on_line(conn, raw)
                if not keep_open or self._done.is_set():
                    return
        except (OSError, ValueError):
            return

    # -- protocol (all called under the lock) --------------------------------

    def _reply_error(self, conn, code: str, detail: str) -> bool:
        payload = encode_message(error_message(self.cfg.wire_round_id(), code, detail))
        self._send(conn, payload)
        self._drop_conn(conn)
        return False

    def _send(self, conn, payload: bytes, one_shot: bool = True) -> None:
        try:
            conn.sendall(payload)
            self.audit.add("down", payload, one_shot=one_shot)
        except OSError:
            pass

    def _drop_conn(self, conn) -> None:
        if conn in self._open_conns:
            self._open_conns.remove(conn)
        try:
            conn.close()
        except OSError:
            pass

    def _on_line(self, conn, raw: bytes) -> bool:
        one_shot = self.cfg.method is not AggregationMethod.POOLED_SCORES
        self.audit.add("up", raw, one_shot=one_shot)
        try:
            msg = json.loads(raw.decode("utf-8"))
            if not isinstance(msg, dict):
                raise ValueError("message must be a JSON object")
        except (ValueError, UnicodeDecodeError) as exc:
            return self._reply_error(conn, "parse_error", str(exc))

        msg_type = msg.get("type")
        if msg.get("round_id") != self.cfg.wire_round_id():
            return self._reply_error(conn, "round_mismatch", f"unknown round {msg.get('round_id')!r}")
        if msg_type == "summary":
            return self._on_summary(conn, msg)
        if msg_type == "scores":
            return self._on_scores(conn, msg)
        return self._reply_error(conn, "unexpected_message", f"type {msg_type!r} not valid here")

    def _on_summary(self, conn, msg) -> bool:
        if self.cfg.method is AggregationMethod.POOLED_SCORES:
            return self._reply_error(conn, "unexpected_message", "pooled round expects score chunks")
        try:
            agent_id = int(msg["agent_id"])
            n = int(msg["n"])
            q = _float_from_wire(msg["q"], msg.get("q_hex"))
            summary = LocalQuantileSummary(agent_id=agent_id, q=q, n=n)
        except (KeyError, TypeError, ValueError, ValidationError) as exc:
            return self._reply_error(conn, "invalid_summary", str(exc))
        if agent_id in self._summaries:
            return self._reply_error(conn, "duplicate_agent", f"agent {agent_id} already reported")
        self._summaries[agent_id] = summary
        self._agent_conns[agent_id] = conn
        if len(self._summaries) == self.cfg.agent_count:
            self._finish()
            return False
        return True

    def _on_scores(self, conn, msg) -> bool:
        if self.cfg.method is not AggregationMethod.POOLED_SCORES:
            return self._reply_error(conn, "unexpected_message", "one-shot round expects a summary")
        try:
            agent_id = int(msg["agent_id"])
            chunk_i = int(msg["chunk"])
            total = int(msg["of"])
            values = [
                _float_from_wire(dec, hx) for dec, hx in zip(msg["values"], msg["values_hex"], strict=True)
            ]
        except (KeyError, TypeError, ValueError) as exc:
            return self._reply_error(conn, "invalid_scores", str(exc))
        if agent_id in self._scores:
            return self._reply_error(conn, "duplicate_agent", f"agent {agent_id} already reported")
        book = self._chunks.setdefault(agent_id, {"of": total, "parts": {}})
        if book["of"] != total or chunk_i in book["parts"] or not (0 <= chunk_i < total):
            return self._reply_error(conn, "invalid_scores", f"bad chunk {chunk_i}/{total}")
        book["parts"][chunk_i] = values
        self._agent_conns[agent_id] = conn
        if len(book["parts"]) == total:
            merged = [v for i in range(total) for v in book["parts"][i]]
            if len(merged) == 0:
                return self._reply_error(conn, "invalid_scores", "empty score sample")
            self._scores[agent_id] = np.asarray(merged)
            del self._chunks[agent_id]
            if len(self._scores) == self.cfg.agent_count:
                self._finish()
                return False
        return True

    def _finish(self) -> None:
        # reached exactly once: len(summaries) == M under the lock
        if self.cfg.method is AggregationMethod.POOLED_SCORES:
            ids = sorted(self._scores)
            result = pooled_scores_threshold(
                [ScoreSample(self._scores[a]) for a in ids], self.cfg.calibration(), agent_ids=ids
            )
        else:
            summaries = [self._summaries[a] for a in sorted(self._summaries)]
            if self.cfg.method is AggregationMethod.WEIGHTED_AVERAGE:
                result = weighted_average(summaries)
            elif self.cfg.method is AggregationMethod.UNWEIGHTED_AVERAGE:
                result = unweighted_average(summaries)
            elif self.cfg.method is AggregationMethod.QUANTILE_OF_QUANTILES:
                result = quantile_of_quantiles(summaries, self.cfg.calibration())
            else:
                raise ProtocolError(f"method {self.cfg.method} has no server-side aggregation")
        payload = encode_message(threshold_message(self.cfg.wire_round_id(), self.cfg.method, result.q_hat))
        one_shot = self.cfg.method is not AggregationMethod.POOLED_SCORES
        for agent_id in sorted(self._agent_conns):
            self._send(self._agent_conns[agent_id], payload, one_shot=one_shot)
        for conn in list(self._open_conns):
            self._drop_conn(conn)
        self._result = result
        self._done.set()

    def _abort(self, code: str, detail: str) -> None:
        with self._lock:
            if self._done.is_set():
                return
            payload = encode_message(error_message(self.cfg.wire_round_id(), code, detail))
            for conn in list(self._open_conns):
                self._send(conn, payload)
                self._drop_conn(conn)
            self._error = RoundAbortedError(f"{code}: {detail}")
            self._done.set()

    # -- public API -----------------------------------------------------------

    def result(self, timeout: float | None = None) -> AggregatedThreshold:
        """Block until the round completes; raises if it aborted."""
        wait_s = timeout if timeout is not None else self.cfg.timeout_s + 5.0
        if not self._done.wait(wait_s):
            self._abort("round_timeout", "result() wait expired")
        if self._error is not None:
            raise self._error
        return self._result

    def close(self) -> None:
        self._closing = True
        if not self._done.is_set():
            self._abort("server_closed", "server shut down before round completed")
        try:
            self._sock.close()
        except OSError:
            pass
        for t in self._threads:
            t.join(timeout=1.0)


def serve(bind_addr, cfg: CalibrationRoundConfig) -> FederationServer:
    """Bind, start the accept loop, and return the running server handle."""
    return FederationServer(bind_addr, cfg).start()


def run_agent(connect_addr, agent_id: int, sample: ScoreSample, cfg: CalibrationRoundConfig) -> AggregatedThreshold:
    """Agent side: calibrate locally, send one summary, await the broadcast."""
    rid = cfg.wire_round_id()
    if cfg.method is AggregationMethod.POOLED_SCORES:
        outgoing = [encode_message(m) for m in score_chunk_messages(rid, agent_id, sample.values)]
    else:
        summary = local_threshold(sample, cfg.calibration(), agent_id=agent_id)
        outgoing = [encode_message(summary_message(rid, summary))]

    host, port = _parse_addr(connect_addr)
    try:
        sock = socket.create_connection((host, port), timeout=cfg.timeout_s)
    except OSError as exc:
        raise TransportError(f"cannot reach server at {host}:{port}: {exc}") from exc
    try:
        sock.settimeout(cfg.timeout_s + 1.0)
        for payload in outgoing:
            sock.sendall(payload)
        reader = sock.makefile("rb")
        raw = reader.readline()
    except OSError as exc:
        raise TransportError(f"connection to {host}:{port} failed: {exc}") from exc
    finally:
        sock.close()
    if not raw:
        raise TransportError("server closed the connection without a reply")
    try:
        msg = json.loads(raw.decode("utf-8"))
    except ValueError as exc:
        raise ProtocolError(f"unparseable server reply: {exc}") from exc
    if msg.get("type") == "error":
        raise ProtocolError(f"server error {msg.get('code')}: {msg.get('detail')}")
    if msg.get("type") != "threshold":
        raise ProtocolError(f"unexpected reply type {msg.get('type')!r}")
    if msg.get("round_id") != rid:
        raise ProtocolError(f"reply for round {msg.get('round_id')!r}, expected {rid!r}")
    if msg.get("method") != cfg.method.value:
        raise ProtocolError(f"server aggregated with {msg.get('method')!r}, expected {cfg.method.value!r}")
    q_hat = _float_from_wire(msg["q_hat"], msg.get("q_hat_hex"))
    return AggregatedThreshold(q_hat=q_hat, method=cfg.method, total_n=None, agent_count=None)
