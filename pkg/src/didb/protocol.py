"""Wire codecs for the verification, sync and directory conversations.

All three are LF-terminated ASCII command lines over TCP.  Sync payloads
(manifest and chunk bytes) follow their header line, length-prefixed.  Every
decoder accepts exactly the lines its encoder can produce and raises a
:class:`~didb.errors.ProtocolError` subclass for anything else.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .core import RECORD_LEN, parse_record
from .errors import BadParameter, LengthMismatch, MalformedFrame, MalformedLine, RecordParseError

PROTOCOL_VERSION = 1
MAX_LINE = 1024
MAX_PAYLOAD = 64 * 2**20

_DEC = r"(?:0|[1-9][0-9]{0,18})"
_PORT = r"(?:[1-9][0-9]{0,4})"
_HOST = r"[A-Za-z0-9](?:[A-Za-z0-9.-]{0,252})"


def _line_text(line) -> str:
    if isinstance(line, (bytes, bytearray, memoryview)):
        line = bytes(line)
        if line.endswith(b"\n"):
            line = line[:-1]
        if not line.isascii():
            raise MalformedLine("non-ASCII line")
        text = line.decode("ascii")
    elif isinstance(line, str):
        text = line[:-1] if line.endswith("\n") else line
        if not text.isascii():
            raise MalformedLine("non-ASCII line")
    else:
        raise MalformedLine(f"unsupported line type {type(line).__name__}")
    if "\n" in text or "\r" in text or len(text) > MAX_LINE:
        raise MalformedLine("bad line framing")
    return text


# verification -------------------------------------------------------------

FOUND, NOT_FOUND, ERR = "FOUND", "NOT_FOUND", "ERR"
VERIFY_ERROR_CODES = ("BAD_PARAM", "NOT_READY", "INTERNAL")


@dataclass(frozen=True)
class VerifyRequest:
    parameter: str

    def __post_init__(self):
        try:
            parse_record(self.parameter)
        except (RecordParseError, TypeError) as exc:
            raise BadParameter(str(exc)) from None


@dataclass(frozen=True)
class VerifyResponse:
    status: str
    didb_version: int | None = None
    error_code: str | None = None

    def __post_init__(self):
        if self.status in (FOUND, NOT_FOUND):
            if not isinstance(self.didb_version, int) or self.didb_version < 0 or self.error_code is not None:
                raise ValueError(f"{self.status} needs a version and no error code")
        elif self.status == ERR:
            if self.error_code not in VERIFY_ERROR_CODES or self.didb_version is not None:
                raise ValueError(f"bad ERR code {self.error_code!r}")
        else:
            raise ValueError(f"unknown status {self.status!r}")


_VERIFY_RE = re.compile(r"VERIFY (.*)\Z", re.S)
_RESULT_RE = re.compile(rf"(FOUND|NOT_FOUND) ({_DEC})\Z")
_VERR_RE = re.compile(r"ERR (BAD_PARAM|NOT_READY|INTERNAL)\Z")


def encode_verification(msg) -> str:
    if isinstance(msg, VerifyRequest):
        return f"VERIFY {msg.parameter}"
    if isinstance(msg, VerifyResponse):
        if msg.status == ERR:
            return f"ERR {msg.error_code}"
        return f"{msg.status} {msg.didb_version}"
    raise TypeError(f"not a verification message: {msg!r}")


def decode_verification_request(line) -> VerifyRequest:
    text = _line_text(line)
    m = _VERIFY_RE.match(text)
    if not m:
        raise MalformedLine(f"expected VERIFY, got {text[:60]!r}")
    if len(m[1]) != RECORD_LEN:
        raise BadParameter(f"parameter must be {RECORD_LEN} chars")
    return VerifyRequest(m[1])


def decode_verification_response(line) -> VerifyResponse:
    text = _line_text(line)
    m = _RESULT_RE.match(text)
    if m:
        return VerifyResponse(m[1], int(m[2]))
    m = _VERR_RE.match(text)
    if m:
        return VerifyResponse(ERR, error_code=m[1])
    raise MalformedLine(f"bad verification response {text[:60]!r}")


def decode_verification(line):
    text = _line_text(line)
    if text.startswith("VERIFY"):
        return decode_verification_request(text)
    return decode_verification_response(text)


# sync ---------------------------------------------------------------------

SYNC_ERROR_CODES = ("NO_SUCH_CHUNK", "NOT_READY", "BAD_REQUEST")


@dataclass(frozen=True)
class Hello:
    version: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class ManifestRequest:
    pass


@dataclass(frozen=True)
class ManifestData:
    data: bytes


@dataclass(frozen=True)
class GetChunk:
    index: int


@dataclass(frozen=True)
class ChunkData:
    index: int
    data: bytes


@dataclass(frozen=True)
class SyncError:
    code: str

    def __post_init__(self):
        if self.code not in SYNC_ERROR_CODES:
            raise ValueError(f"unknown sync error {self.code!r}")


_HELLO_RE = re.compile(rf"HELLO ({_DEC})\Z")
_GET_RE = re.compile(rf"GET_CHUNK ({_DEC})\Z")
_MANIFEST_HDR_RE = re.compile(rf"MANIFEST ({_DEC})\Z")
_CHUNK_HDR_RE = re.compile(rf"CHUNK ({_DEC}) ({_DEC})\Z")
_SERR_RE = re.compile(r"ERR (NO_SUCH_CHUNK|NOT_READY|BAD_REQUEST)\Z")


def encode_sync(msg) -> bytes:
    if isinstance(msg, Hello):
        return f"HELLO {msg.version}\n".encode()
    if isinstance(msg, ManifestRequest):
        return b"MANIFEST\n"
    if isinstance(msg, ManifestData):
        return f"MANIFEST {len(msg.data)}\n".encode() + msg.data
    if isinstance(msg, GetChunk):
        return f"GET_CHUNK {msg.index}\n".encode()
    if isinstance(msg, ChunkData):
        return f"CHUNK {msg.index} {len(msg.data)}\n".encode() + msg.data
    if isinstance(msg, SyncError):
        return f"ERR {msg.code}\n".encode()
    raise TypeError(f"not a sync message: {msg!r}")


def parse_sync_header(line):
    """Parse a sync header line.

    Returns ``(message, payload_length)``; for payload-bearing headers the
    message is a factory taking the payload bytes, otherwise the message
    itself with length ``None``.
    """
    try:
        text = _line_text(line)
    except MalformedLine as exc:
        raise MalformedFrame(str(exc)) from None
    if text == "MANIFEST":
        return ManifestRequest(), None
    m = _HELLO_RE.match(text)
    if m:
        return Hello(int(m[1])), None
    m = _GET_RE.match(text)
    if m:
        return GetChunk(int(m[1])), None
    m = _SERR_RE.match(text)
    if m:
        return SyncError(m[1]), None
    m = _MANIFEST_HDR_RE.match(text)
    if m:
        return ManifestData, int(m[1])
    m = _CHUNK_HDR_RE.match(text)
    if m:
        idx = int(m[1])
        return (lambda data: ChunkData(idx, data)), int(m[2])
    raise MalformedFrame(f"bad sync header {text[:60]!r}")


def decode_sync(frame: bytes):
    frame = bytes(frame)
    nl = frame.find(b"\n")
    if nl < 0:
        raise MalformedFrame("missing header terminator")
    msg, length = parse_sync_header(frame[:nl])
    rest = frame[nl + 1:]
    if length is None:
        if rest:
            raise MalformedFrame("trailing bytes after header-only frame")
        return msg
    if len(rest) != length:
        raise LengthMismatch(f"declared {length} bytes, got {len(rest)}")
    return msg(rest)


def read_sync(rfile):
    """Read one sync message from a binary file-like stream.

    Returns ``None`` on clean EOF before any header byte.
    """
    line = rfile.readline(MAX_LINE + 1)
    if not line:
        return None
    if not line.endswith(b"\n"):
        raise MalformedFrame("header line unterminated or too long")
    msg, length = parse_sync_header(line)
    if length is None:
        return msg
    if length > MAX_PAYLOAD:
        raise MalformedFrame(f"payload of {length} bytes exceeds limit")
    data = rfile.read(length)
    if len(data) != length:
        raise LengthMismatch(f"declared {length} bytes, got {len(data)}")
    return msg(data)


# directory ----------------------------------------------------------------

@dataclass(frozen=True)
class NodeDescriptor:
    host: str
    port: int

    def __post_init__(self):
        if not isinstance(self.port, int) or not 1 <= self.port <= 65535:
            raise ValueError(f"port out of range: {self.port!r}")
        if not re.fullmatch(_HOST, self.host or ""):
            raise ValueError(f"bad host {self.host!r}")

    def __str__(self):
        return f"{self.host}:{self.port}"

    @classmethod
    def parse(cls, text: str) -> "NodeDescriptor":
        m = _NODE_RE.match(text)
        if not m or int(m[2]) > 65535:
            raise MalformedLine(f"bad host:port {text[:80]!r}")
        return cls(m[1], int(m[2]))


@dataclass(frozen=True)
class Register:
    port: int

    def __post_init__(self):
        if not 1 <= self.port <= 65535:
            raise ValueError(f"port out of range: {self.port}")


@dataclass(frozen=True)
class ListRequest:
    pass


@dataclass(frozen=True)
class Ping:
    pass


@dataclass(frozen=True)
class Ok:
    pass


@dataclass(frozen=True)
class Pong:
    pass


@dataclass(frozen=True)
class NodeList:
    nodes: tuple = ()


@dataclass(frozen=True)
class DirError:
    code: str = "BAD_REQUEST"


_NODE_RE = re.compile(rf"({_HOST}):({_PORT})\Z")
_REGISTER_RE = re.compile(rf"REGISTER ({_PORT})\Z")
_DERR_RE = re.compile(r"ERR ([A-Z_]{1,32})\Z")


def encode_directory(msg) -> list[str]:
    if isinstance(msg, Register):
        return [f"REGISTER {msg.port}"]
    if isinstance(msg, ListRequest):
        return ["LIST"]
    if isinstance(msg, Ping):
        return ["PING"]
    if isinstance(msg, Ok):
        return ["OK"]
    if isinstance(msg, Pong):
        return ["PONG"]
    if isinstance(msg, NodeList):
        return [str(n) for n in msg.nodes] + ["END"]
    if isinstance(msg, DirError):
        return [f"ERR {msg.code}"]
    raise TypeError(f"not a directory message: {msg!r}")


def decode_directory_request(line):
    text = _line_text(line)
    if text == "LIST":
        return ListRequest()
    if text == "PING":
        return Ping()
    m = _REGISTER_RE.match(text)
    if m and int(m[1]) <= 65535:
        return Register(int(m[1]))
    raise MalformedLine(f"bad directory request {text[:60]!r}")


def decode_directory_response(lines):
    """Decode a full response given as its list of lines (``END`` included for LIST)."""
    texts = [_line_text(x) for x in lines]
    if not texts:
        raise MalformedLine("empty directory response")
    if len(texts) == 1:
        t = texts[0]
        if t == "OK":
            return Ok()
        if t == "PONG":
            return Pong()
        m = _DERR_RE.match(t)
        if m:
            return DirError(m[1])
    if texts[-1] != "END":
        raise MalformedLine("node list must end with END")
    return NodeList(tuple(NodeDescriptor.parse(t) for t in texts[:-1]))


def decode_directory(lines):
    """Decode either side: a single request line or a response's lines."""
    if isinstance(lines, (str, bytes, bytearray)):
        lines = [lines]
    lines = list(lines)
    if len(lines) == 1:
        try:
            return decode_directory_request(lines[0])
        except MalformedLine:
            pass
    return decode_directory_response(lines)


def read_line(rfile) -> str | None:
    """Read one LF-terminated ASCII line from a binary stream, without the LF."""
    raw = rfile.readline(MAX_LINE + 1)
    if not raw:
        return None
    if not raw.endswith(b"\n"):
        raise MalformedLine("line unterminated or too long")
    return _line_text(raw)
