"""Append-only, hash-chained, signed ledgers.

A chain is a list of blocks; each block commits to a payload digest and to
the digest of the block before it, and carries a signature by its author.
Blocks can be persisted to a length-prefixed binary log with a text index
(``<height> <offset>`` per line) and exported as JSON lines for audit.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Protocol

ZERO_DIGEST = bytes(32)
_MAGIC = b"TGCHAIN1"


class LedgerError(Exception):
    pass


class Signer(Protocol):
    """Anything that can sign and verify messages on behalf of authors."""

    def is_registered(self, author_id: str) -> bool: ...

    def sign(self, author_id: str, message: bytes) -> bytes: ...

    def verify(self, author_id: str, message: bytes, signature: bytes) -> bool: ...


class KeyedDigestSigner:
    """HMAC-SHA256 signer with one shared secret per author.

    Built either from explicit keys or from a master secret, in which case
    every author's key is derived from it on registration.
    """

    def __init__(self, keys: dict[str, bytes] | None = None, master_secret: bytes | None = None,
                 auto_register: bool = False) -> None:
        self._keys = dict(keys or {})
        self._master = master_secret
        self._auto = auto_register and master_secret is not None

    def register(self, author_id: str, key: bytes | None = None) -> None:
        if key is None:
            if self._master is None:
                raise LedgerError("no key given and no master secret to derive one")
            key = hmac.new(self._master, _enc(author_id), hashlib.sha256).digest()
        self._keys[author_id] = key

    def is_registered(self, author_id: str) -> bool:
        if author_id not in self._keys and self._auto:
            self.register(author_id)
        return author_id in self._keys

    def sign(self, author_id: str, message: bytes) -> bytes:
        if not self.is_registered(author_id):
            raise LedgerError(f"author {author_id!r} has no registered key")
        return hmac.new(self._keys[author_id], message, hashlib.sha256).digest()

    def verify(self, author_id: str, message: bytes, signature: bytes) -> bool:
        if not self.is_registered(author_id):
            return False
        expected = hmac.new(self._keys[author_id], message, hashlib.sha256).digest()
        return hmac.compare_digest(expected, signature)


def _enc(s: str) -> bytes:
    return s.encode("utf-8", "surrogateescape")


def _lp(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


def canonical_json(obj: Any) -> bytes:
    """Deterministic JSON bytes; dict order is preserved, not sorted."""
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False, allow_nan=True).encode("utf-8")


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class LedgerBlock:
    height: int
    timestamp: float
    author_id: str
    payload: bytes
    payload_digest: bytes
    prev_digest: bytes
    signature: bytes

    def signing_message(self) -> bytes:
        return signing_message(self.height, self.timestamp, self.author_id,
                               self.payload_digest, self.prev_digest)

    def block_digest(self) -> bytes:
        return digest(self.signing_message() + _lp(self.signature))

    def payload_obj(self) -> Any:
        return json.loads(self.payload.decode("utf-8"))

    def to_bytes(self) -> bytes:
        return (
            struct.pack(">Qd", self.height, self.timestamp)
            + _lp(_enc(self.author_id))
            + _lp(self.payload)
            + _lp(self.payload_digest)
            + _lp(self.prev_digest)
            + _lp(self.signature)
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "LedgerBlock":
        height, ts = struct.unpack_from(">Qd", data, 0)
        pos = 16
        parts = []
        for _ in range(5):
            (n,) = struct.unpack_from(">I", data, pos)
            pos += 4
            if pos + n > len(data):
                raise LedgerError("truncated block record")
            parts.append(bytes(data[pos:pos + n]))
            pos += n
        if pos != len(data):
            raise LedgerError("trailing bytes in block record")
        author, payload, pdig, prev, sig = parts
        return cls(height, ts, author.decode("utf-8", "surrogateescape"), payload, pdig, prev, sig)

    def to_record(self) -> dict:
        try:
            payload: Any = self.payload_obj()
        except (UnicodeDecodeError, json.JSONDecodeError):
            payload = {"raw_hex": self.payload.hex()}
        return {
            "height": self.height,
            "timestamp": self.timestamp,
            "author_id": self.author_id,
            "payload_digest": self.payload_digest.hex(),
            "prev_digest": self.prev_digest.hex(),
            "signature": self.signature.hex(),
            "block_digest": self.block_digest().hex(),
            "payload": payload,
        }


def signing_message(height: int, timestamp: float, author_id: str,
                    payload_digest: bytes, prev_digest: bytes) -> bytes:
    return (
        struct.pack(">Qd", height, timestamp)
        + _lp(_enc(author_id))
        + _lp(payload_digest)
        + _lp(prev_digest)
    )


@dataclass(frozen=True)
class AnchorMode:
    mode: str = "synchronous"
    batch_size: int = 1
    max_delay: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in ("synchronous", "batched"):
            raise ValueError(f"unknown anchor mode {self.mode!r}")
        if self.mode == "batched" and (self.batch_size < 1 or self.max_delay <= 0):
            raise ValueError("batched mode needs batch_size >= 1 and max_delay > 0")

    @classmethod
    def synchronous(cls) -> "AnchorMode":
        return cls("synchronous")

    @classmethod
    def batched(cls, batch_size: int = 16, max_delay: float = 1.0) -> "AnchorMode":
        return cls("batched", batch_size, max_delay)


class Chain:
    """One append-only ledger with a single logical writer.

    In batched mode payloads queue until ``batch_size`` are pending or the
    oldest has waited ``max_delay`` seconds of the caller's clock; the block
    timestamp is always the submission time, so both modes commit identical
    blocks for identical input.
    """

    def __init__(self, name: str, signer: Signer, mode: AnchorMode = AnchorMode(),
                 path: str | Path | None = None) -> None:
        self.name = name
        self.signer = signer
        self.mode = mode
        self.path = Path(path) if path is not None else None
        self._blocks: list[LedgerBlock] = []
        self._pending: list[tuple[float, str, bytes]] = []
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "wb") as fh:
                fh.write(_MAGIC)
            with open(self.index_path, "w", encoding="utf-8"):
                pass

    @classmethod
    def open(cls, name: str, signer: Signer, path: str | Path,
             mode: AnchorMode = AnchorMode()) -> "Chain":
        """Reopen a persisted chain for further appends; it must verify."""
        blocks = read_chain_file(path)
        bad = verify_chain(blocks, signer)
        expected = committed_count(path)
        if bad is not None or (expected is not None and expected != len(blocks)):
            raise LedgerError(f"{path} fails verification at height "
                              f"{bad if bad is not None else len(blocks)}")
        chain = cls.__new__(cls)
        chain.name = name
        chain.signer = signer
        chain.mode = mode
        chain.path = Path(path)
        chain._blocks = blocks
        chain._pending = []
        chain._lock = threading.Lock()
        return chain

    @property
    def index_path(self) -> Path:
        assert self.path is not None
        return self.path.with_name(self.path.name + ".idx")

    @property
    def height(self) -> int:
        """Number of committed blocks."""
        return len(self._blocks)

    @property
    def pending(self) -> int:
        return len(self._pending)

    def __len__(self) -> int:
        return len(self._blocks)

    def __iter__(self) -> Iterator[LedgerBlock]:
        return iter(list(self._blocks))

    def __getitem__(self, height: int) -> LedgerBlock:
        return self._blocks[height]

    def blocks(self) -> tuple[LedgerBlock, ...]:
        with self._lock:
            return tuple(self._blocks)

    def head_digest(self) -> bytes:
        return self._blocks[-1].block_digest() if self._blocks else ZERO_DIGEST

    def append(self, payload: Any, author: str, now: float) -> int:
        """Submit a payload; returns the height it has (or will have)."""
        if not self.signer.is_registered(author):
            raise LedgerError(f"author {author!r} is not registered with the signer")
        data = payload if isinstance(payload, bytes) else canonical_json(payload)
        with self._lock:
            height = len(self._blocks) + len(self._pending)
            self._pending.append((now, author, data))
            if self.mode.mode == "synchronous" or len(self._pending) >= self.mode.batch_size:
                self._flush_locked()
        return height

    def tick(self, now: float) -> None:
        """Flush a batch whose oldest entry has waited at least max_delay."""
        with self._lock:
            if self._pending and now - self._pending[0][0] >= self.mode.max_delay:
                self._flush_locked()

    def flush(self) -> None:
        with self._lock:
            self._flush_locked()

    def _flush_locked(self) -> None:
        if not self._pending:
            return
        new_blocks = []
        prev = self.head_digest()
        base = len(self._blocks)
        for i, (ts, author, data) in enumerate(self._pending):
            pdig = digest(data)
            msg = signing_message(base + i, ts, author, pdig, prev)
            block = LedgerBlock(base + i, ts, author, data, pdig, prev, self.signer.sign(author, msg))
            new_blocks.append(block)
            prev = block.block_digest()
        if self.path is not None:
            self._persist(new_blocks)
        self._blocks.extend(new_blocks)
        self._pending.clear()

    def _persist(self, blocks: list[LedgerBlock]) -> None:
        # Offsets are computed before writing so a failed write leaves the
        # queue intact and the file can be truncated back.
        assert self.path is not None
        size = self.path.stat().st_size
        offset = size
        lines = []
        chunks = []
        for b in blocks:
            rec = b.to_bytes()
            chunks.append(struct.pack(">I", len(rec)) + rec)
            lines.append(f"{b.height} {offset}\n")
            offset += 4 + len(rec)
        try:
            with open(self.path, "ab") as fh:
                fh.write(b"".join(chunks))
                fh.flush()
                os.fsync(fh.fileno())
            with open(self.index_path, "a", encoding="utf-8") as fh:
                fh.write("".join(lines))
        except OSError as exc:
            with open(self.path, "r+b") as fh:
                fh.truncate(size)
            raise LedgerError(f"flush to {self.path} failed: {exc}") from exc

    def verify(self) -> int | None:
        return verify_chain(self.blocks(), self.signer)

    def export_jsonl(self, path: str | Path) -> None:
        export_jsonl(self.blocks(), path)


def verify_chain(blocks, signer: Signer) -> int | None:
    """Lowest height whose linkage, digest or signature fails; None if intact."""
    prev = ZERO_DIGEST
    for expected_height, b in enumerate(blocks):
        if (
            b.height != expected_height
            or b.prev_digest != prev
            or digest(b.payload) != b.payload_digest
            or not signer.verify(b.author_id, b.signing_message(), b.signature)
        ):
            return expected_height
        prev = b.block_digest()
    return None


def read_chain_file(path: str | Path) -> list[LedgerBlock]:
    """Load a persisted chain.

    A record that cannot be parsed ends the load; the returned prefix then
    fails verification no later than the corrupted height, because the
    index records how many blocks were committed.
    """
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(_MAGIC):
        raise LedgerError(f"{path} is not a chain file")
    blocks = []
    pos = len(_MAGIC)
    while pos < len(data):
        if pos + 4 > len(data):
            break
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if pos + n > len(data):
            break
        try:
            blocks.append(LedgerBlock.from_bytes(data[pos:pos + n]))
        except (LedgerError, struct.error):
            break
        pos += n
    return blocks


def committed_count(path: str | Path) -> int | None:
    idx = Path(str(path) + ".idx")
    if not idx.exists():
        return None
    with open(idx, encoding="utf-8") as fh:
        return sum(1 for line in fh if line.strip())


def verify_chain_file(path: str | Path, signer: Signer) -> int | None:
    blocks = read_chain_file(path)
    bad = verify_chain(blocks, signer)
    expected = committed_count(path)
    if bad is None and expected is not None and len(blocks) < expected:
        return len(blocks)
    return bad


def export_jsonl(blocks, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for b in blocks:
            fh.write(json.dumps(b.to_record(), separators=(",", ":"), ensure_ascii=False))
            fh.write("\n")
