"""Wire protocol between the integration server and the sites.

Every message is one JSON object on one line, UTF-8, terminated by ``\\n``.
Keys appear in a fixed order and reals are written with 17 significant
digits, so the same message always produces the same bytes.

Connection lifecycle: Hello -> (Weights -> Report)* -> Terminate -> close.

Two interchangeable backends carry the lines: ``InProcessTransport`` calls
site endpoints directly, ``SocketServerTransport``/``SocketSiteClient`` use
TCP streams. Both feed the same inbox-based round barrier.
"""
import json
import math
import queue
import socket
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Optional, Sequence, Union

from services.consensus_service import SiteRegistry, SiteReport, SiteState, site_step
from services.lasso_service import FeatureSet, PenaltyVector
from services.tabular_service import Metrics
from utils.errors import BarrierTimeoutError, MessageError, ProtocolError
from utils.logger import get_logger

logger = get_logger(__name__)

DEFAULT_PORT = 7711
DEFAULT_BARRIER_TIMEOUT = 600.0


@dataclass(frozen=True)
class HelloMessage:
    site_id: str
    n_subjects: int
    n_features: int


@dataclass(frozen=True)
class WeightsMessage:
    round: int
    penalty: tuple[float, ...]

    @classmethod
    def from_penalty(cls, round: int, penalty: PenaltyVector) -> "WeightsMessage":
        return cls(round=round, penalty=tuple(float(f) for f in penalty.factors))

    def to_penalty(self) -> PenaltyVector:
        return PenaltyVector(list(self.penalty))


@dataclass(frozen=True)
class ReportMessage:
    site_id: str
    round: int
    selected: tuple[int, ...]
    accuracy: float
    specificity: float
    sensitivity: float

    @classmethod
    def from_site_report(cls, report: SiteReport) -> "ReportMessage":
        return cls(
            site_id=report.site_id,
            round=report.round,
            selected=report.selected.indices,
            accuracy=report.metrics.accuracy,
            specificity=report.metrics.specificity,
            sensitivity=report.metrics.sensitivity,
        )

    def to_site_report(self) -> SiteReport:
        return SiteReport(
            site_id=self.site_id,
            round=self.round,
            selected=FeatureSet(self.selected),
            metrics=Metrics(self.accuracy, self.specificity, self.sensitivity),
        )


@dataclass(frozen=True)
class TerminateMessage:
    round: int


Message = Union[HelloMessage, WeightsMessage, ReportMessage, TerminateMessage]

# wire field order per message type
_FIELDS = {
    "hello": ("site_id", "n_subjects", "n_features"),
    "weights": ("round", "penalty"),
    "report": ("site_id", "round", "selected", "accuracy", "specificity", "sensitivity"),
    "terminate": ("round",),
}
_TYPE_OF = {
    HelloMessage: "hello",
    WeightsMessage: "weights",
    ReportMessage: "report",
    TerminateMessage: "terminate",
}


def format_real(value: float) -> str:
    value = float(value)
    if not math.isfinite(value):
        raise MessageError(f"Refusing to serialize non-finite value {value}")
    text = format(value, ".17g")
    if not any(ch in text for ch in ".en"):
        text += ".0"
    return text


def _encode_value(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return format_real(value)
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{_encode_value(v)}" for k, v in value.items()) + "}"
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(_encode_value(v) for v in value) + "]"
    # numpy scalars
    if hasattr(value, "item"):
        return _encode_value(value.item())
    raise MessageError(f"Cannot serialize value of type {type(value).__name__}")


def dumps_line(record: dict) -> str:
    """Serialize a dict in insertion order with the wire float format, plus ``\\n``."""
    return _encode_value(record) + "\n"


def encode_message(msg: Message) -> bytes:
    type_name = _TYPE_OF.get(type(msg))
    if type_name is None:
        raise MessageError(f"Unknown message class {type(msg).__name__}")
    record = {"type": type_name}
    for name in _FIELDS[type_name]:
        value = getattr(msg, name)
        if name in ("penalty",):
            value = [float(v) for v in value]
        elif name in ("accuracy", "specificity", "sensitivity"):
            value = float(value)
        elif name == "selected":
            value = [int(v) for v in value]
        record[name] = value
    return dumps_line(record).encode("utf-8")


def _require_int(record: dict, name: str, minimum: int = 0) -> int:
    value = record[name]
    if isinstance(value, bool) or not isinstance(value, int):
        raise MessageError(f"Field '{name}' must be an integer")
    if value < minimum:
        raise MessageError(f"Field '{name}' must be at least {minimum}, got {value}")
    return value


def _require_real(value: Any, name: str, low: float = 0.0, high: float = 1.0) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise MessageError(f"Field '{name}' must be a number")
    value = float(value)
    if not (math.isfinite(value) and low <= value <= high):
        raise MessageError(f"Field '{name}' must lie in [{low}, {high}], got {value}")
    return value


def decode_message(line: Union[bytes, str], n_features: Optional[int] = None) -> Message:
    """Parse and validate one framed line.

    ``n_features`` is the feature count negotiated at Hello; when given,
    penalty lengths and report indices are checked against it.
    """
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as e:
            raise MessageError(f"Line is not valid UTF-8: {e}") from e
    if line.endswith("\n"):
        line = line[:-1]
    if "\n" in line:
        raise MessageError("Line contains an interior newline")
    try:
        record = json.loads(line)
    except json.JSONDecodeError as e:
        raise MessageError(f"Malformed JSON line: {e}") from e
    if not isinstance(record, dict):
        raise MessageError("A message must be a JSON object")

    type_name = record.get("type")
    if type_name not in _FIELDS:
        raise MessageError(f"Unknown message type {type_name!r}")
    expected = set(_FIELDS[type_name]) | {"type"}
    if set(record) != expected:
        extra = sorted(set(record) - expected)
        missing = sorted(expected - set(record))
        raise MessageError(f"Bad fields for '{type_name}': missing {missing}, unexpected {extra}")

    if type_name == "hello":
        site_id = record["site_id"]
        if not isinstance(site_id, str) or not site_id:
            raise MessageError("Field 'site_id' must be a nonempty string")
        return HelloMessage(
            site_id=site_id,
            n_subjects=_require_int(record, "n_subjects", minimum=1),
            n_features=_require_int(record, "n_features", minimum=1),
        )

    if type_name == "terminate":
        return TerminateMessage(round=_require_int(record, "round"))

    if type_name == "weights":
        penalty = record["penalty"]
        if not isinstance(penalty, list):
            raise MessageError("Field 'penalty' must be a list")
        if n_features is not None and len(penalty) != n_features:
            raise MessageError(f"Penalty has {len(penalty)} entries, expected {n_features}")
        return WeightsMessage(
            round=_require_int(record, "round"),
            penalty=tuple(_require_real(v, "penalty") for v in penalty),
        )

    site_id = record["site_id"]
    if not isinstance(site_id, str) or not site_id:
        raise MessageError("Field 'site_id' must be a nonempty string")
    selected = record["selected"]
    if not isinstance(selected, list) or any(isinstance(i, bool) or not isinstance(i, int) for i in selected):
        raise MessageError("Field 'selected' must be a list of integers")
    if any(b <= a for a, b in zip(selected, selected[1:])):
        raise MessageError("Field 'selected' must be strictly increasing")
    upper = n_features if n_features is not None else math.inf
    if selected and (selected[0] < 0 or selected[-1] >= upper):
        raise MessageError(f"Selected index out of range for {n_features} features")
    return ReportMessage(
        site_id=site_id,
        round=_require_int(record, "round"),
        selected=tuple(selected),
        accuracy=_require_real(record["accuracy"], "accuracy"),
        specificity=_require_real(record["specificity"], "specificity"),
        sensitivity=_require_real(record["sensitivity"], "sensitivity"),
    )


def round_barrier(
    inbox: "queue.Queue[tuple[str, Optional[bytes]]]",
    site_ids: Sequence[str],
    round: int,
    timeout: float,
    n_features: Optional[int] = None,
) -> list[SiteReport]:
    """Block until exactly one report per site for ``round`` has arrived.

    ``inbox`` yields ``(site_id of the channel, line)``; a ``None`` line means
    the channel closed. Reports come back ordered by site id.
    """
    expected = set(site_ids)
    received: dict[str, SiteReport] = {}
    deadline = time.monotonic() + timeout
    while len(received) < len(expected):
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise BarrierTimeoutError(round, expected - set(received))
        try:
            origin, line = inbox.get(timeout=remaining)
        except queue.Empty:
            raise BarrierTimeoutError(round, expected - set(received)) from None
        if line is None:
            raise ProtocolError("Connection closed before reporting", round=round, site_id=origin)
        msg = decode_message(line, n_features)
        if not isinstance(msg, ReportMessage):
            raise ProtocolError(f"Expected a report, got '{_TYPE_OF[type(msg)]}'", round=round, site_id=origin)
        if msg.site_id != origin or msg.site_id not in expected:
            raise ProtocolError(f"Report claims site '{msg.site_id}'", round=round, site_id=origin)
        if msg.round != round:
            raise ProtocolError(f"Report for round {msg.round}", round=round, site_id=origin)
        if msg.site_id in received:
            raise ProtocolError("Duplicate report", round=round, site_id=origin)
        received[msg.site_id] = msg.to_site_report()
    return [received[site_id] for site_id in sorted(received)]


class SiteNode:
    """Site-side protocol endpoint: turns Weights lines into Report lines."""

    def __init__(self, state: SiteState):
        self.state = state
        self.terminated_at: Optional[int] = None
        logger.info(f"SiteNode initialized for site '{state.site_id}'")

    @property
    def site_id(self) -> str:
        return self.state.site_id

    def hello(self) -> bytes:
        return encode_message(
            HelloMessage(site_id=self.site_id, n_subjects=self.state.n_subjects, n_features=self.state.n_features)
        )

    def handle(self, line: bytes) -> Optional[bytes]:
        """Answer one server line; returns None once terminated."""
        msg = decode_message(line, self.state.n_features)
        if isinstance(msg, TerminateMessage):
            self.terminated_at = msg.round
            logger.info(f"Site '{self.site_id}' received terminate at round {msg.round}")
            return None
        if not isinstance(msg, WeightsMessage):
            raise ProtocolError(f"Site cannot handle '{_TYPE_OF[type(msg)]}' messages", site_id=self.site_id)
        if self.terminated_at is not None:
            raise ProtocolError("Weights received after terminate", round=msg.round, site_id=self.site_id)
        report = site_step(self.state, msg.to_penalty(), round=msg.round)
        return encode_message(ReportMessage.from_site_report(report))


class Transport(ABC):
    """Server-side view of the m site channels."""

    def __init__(self):
        self.inbox: "queue.Queue[tuple[str, Optional[bytes]]]" = queue.Queue()
        self.registry: Optional[SiteRegistry] = None
        self.n_features: Optional[int] = None

    @abstractmethod
    def open(self) -> SiteRegistry:
        """Perform the Hello handshake with every site and build the registry."""
        pass

    @abstractmethod
    def broadcast(self, msg: Union[WeightsMessage, TerminateMessage]) -> None:
        pass

    def close(self) -> None:
        pass

    def round_barrier(self, round: int, timeout: float = DEFAULT_BARRIER_TIMEOUT) -> list[SiteReport]:
        if self.registry is None:
            raise ProtocolError("Transport used before the handshake")
        return round_barrier(self.inbox, self.registry.site_ids, round, timeout, self.n_features)

    def _register(self, hellos: Sequence[HelloMessage]) -> SiteRegistry:
        feature_counts = {hello.n_features for hello in hellos}
        if len(feature_counts) != 1:
            raise ProtocolError(f"Sites disagree on the number of features: {sorted(feature_counts)}")
        ids = [hello.site_id for hello in hellos]
        if len(set(ids)) != len(ids):
            duplicate = next(site_id for site_id in ids if ids.count(site_id) > 1)
            raise ProtocolError("Duplicate hello", site_id=duplicate)
        self.n_features = feature_counts.pop()
        self.registry = SiteRegistry(tuple((hello.site_id, hello.n_subjects) for hello in hellos))
        logger.info(
            f"Registered {self.registry.m} sites ({self.registry.total_subjects} subjects, "
            f"{self.n_features} features)"
        )
        return self.registry

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()


class InProcessTransport(Transport):
    """Deterministic backend: sites are called directly, in site-id order."""

    def __init__(self, nodes: Sequence[SiteNode], workers: int = 1):
        super().__init__()
        self.nodes = sorted(nodes, key=lambda node: node.site_id)
        self.workers = max(1, int(workers))

    def open(self) -> SiteRegistry:
        return self._register([decode_message(node.hello()) for node in self.nodes])

    def broadcast(self, msg: Union[WeightsMessage, TerminateMessage]) -> None:
        line = encode_message(msg)
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                replies = list(pool.map(lambda node: node.handle(line), self.nodes))
        else:
            replies = [node.handle(line) for node in self.nodes]
        for node, reply in zip(self.nodes, replies):
            if reply is not None:
                self.inbox.put((node.site_id, reply))


class _Connection:
    def __init__(self, sock: socket.socket, site_id: str, reader):
        self.sock = sock
        self.site_id = site_id
        self.reader = reader
        self.write_lock = threading.Lock()

    def send(self, line: bytes) -> None:
        with self.write_lock:
            self.sock.sendall(line)


class SocketServerTransport(Transport):
    """TCP backend for the integration server.

    The listening socket is bound in the constructor, so ``port=0`` picks an
    ephemeral port available through ``address``.
    """

    def __init__(self, host: str, port: int, n_sites: int, accept_timeout: float = DEFAULT_BARRIER_TIMEOUT):
        super().__init__()
        if n_sites < 1:
            raise ValueError(f"n_sites must be at least 1, got {n_sites}")
        self.n_sites = n_sites
        self.accept_timeout = accept_timeout
        self.connections: list[_Connection] = []
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(accept_timeout)
        logger.info(f"SocketServerTransport listening on {self.address[0]}:{self.address[1]}")

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    def open(self) -> SiteRegistry:
        hellos = []
        while len(self.connections) < self.n_sites:
            try:
                sock, peer = self._listener.accept()
            except socket.timeout:
                raise ProtocolError(
                    f"Only {len(self.connections)} of {self.n_sites} sites connected"
                ) from None
            sock.settimeout(self.accept_timeout)
            reader = sock.makefile("rb")
            line = reader.readline()
            if not line:
                sock.close()
                raise ProtocolError(f"Connection from {peer} closed before hello")
            hello = decode_message(line)
            if not isinstance(hello, HelloMessage):
                sock.close()
                raise ProtocolError(f"First message from {peer} is not a hello")
            sock.settimeout(None)
            logger.info(f"Site '{hello.site_id}' connected from {peer[0]}:{peer[1]}")
            hellos.append(hello)
            self.connections.append(_Connection(sock, hello.site_id, reader))
        registry = self._register(hellos)
        self.connections.sort(key=lambda conn: conn.site_id)
        for conn in self.connections:
            threading.Thread(target=self._read_loop, args=(conn,), daemon=True).start()
        return registry

    def _read_loop(self, conn: _Connection) -> None:
        try:
            for line in conn.reader:
                self.inbox.put((conn.site_id, line))
        except OSError as e:
            logger.debug(f"Reader for site '{conn.site_id}' stopped: {e}")
        self.inbox.put((conn.site_id, None))

    def broadcast(self, msg: Union[WeightsMessage, TerminateMessage]) -> None:
        line = encode_message(msg)
        for conn in self.connections:
            conn.send(line)

    def close(self) -> None:
        for conn in self.connections:
            try:
                conn.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.sock.close()
        self._listener.close()


class SocketSiteClient:
    """TCP client that serves one SiteNode until the server terminates."""

    def __init__(self, node: SiteNode, host: str, port: int, connect_timeout: float = 30.0):
        self.node = node
        self.host = host
        self.port = port
        self.connect_timeout = connect_timeout

    def _connect(self) -> socket.socket:
        deadline = time.monotonic() + self.connect_timeout
        while True:
            try:
                return socket.create_connection((self.host, self.port), timeout=self.connect_timeout)
            except OSError as e:
                if time.monotonic() >= deadline:
                    raise ProtocolError(
                        f"Could not reach server at {self.host}:{self.port}: {e}", site_id=self.node.site_id
                    ) from e
                time.sleep(0.1)

    def run(self) -> int:
        """Returns the round carried by the terminate message."""
        with self._connect() as sock:
            sock.settimeout(None)
            sock.sendall(self.node.hello())
            logger.info(f"Site '{self.node.site_id}' connected to {self.host}:{self.port}")
            with sock.makefile("rb") as reader:
                for line in reader:
                    reply = self.node.handle(line)
                    if reply is None:
                        return self.node.terminated_at
                    sock.sendall(reply)
        raise ProtocolError("Server closed the connection before terminating", site_id=self.node.site_id)
