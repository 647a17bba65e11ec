"""Deterministic in-memory transport with cost accounting.

Every protocol message is sent through a :class:`Network`. The network keeps
the full transcript, a per-event :class:`CostLedger`, and a log of every
``kdf2``/XOR evaluation made while an event is active (the adversary module
uses that log to bound its derivation rules).

Byte accounting follows the abstract size model (ids, nonces and integers are
``int_bytes``, keys/digests/signatures are ``key_bytes``); IVs and tags only
show up in the separate ``phys_bytes`` column.
"""
from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Iterable, Iterator

from . import primitives as prim
from .primitives import Nonce, SealedBox

TRANSCRIPT_FORMAT = "sgrs-transcript/1"


class Mode(str, Enum):
    UNICAST = "UC"
    BROADCAST = "BC"
    # delivered by the authentication stub over its own channel
    OUT_OF_BAND = "OOB"


class DeliveryError(RuntimeError):
    pass


@dataclass(frozen=True)
class SizeModel:
    int_bytes: int = 4
    key_bytes: int = 32

    def __post_init__(self) -> None:
        if self.int_bytes <= 0 or self.key_bytes <= 0:
            raise ValueError("sizes must be positive")

    @classmethod
    def parse(cls, text: str) -> "SizeModel":
        """Parse ``"int=4,key=32"``."""
        vals = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            name, _, num = part.partition("=")
            if name not in ("int", "key"):
                raise ValueError(f"unknown size field {name!r}")
            vals[f"{name}_bytes"] = int(num)
        return cls(**vals)


# step tag -> mode; protocols register their steps at import time
STEPS: dict[str, Mode] = {}


def register_step(tag: str, mode: Mode) -> str:
    STEPS[tag] = mode
    return tag


# ---------------------------------------------------------------- payloads


@dataclass(frozen=True)
class Payload:
    """Typed plaintext of a message.

    Items are tuples: ``("nonce", Nonce)``, ``("rand", bytes)``, ``("id", int)``, ``("int", int)``,
    ``("key", name, bytes)``, ``("sig", bytes)``, ``("box", SealedBox, ints, keys)``.
    """

    items: tuple

    def __post_init__(self) -> None:
        if not self.items:
            raise ValueError("a protocol message needs a non-empty payload")

    def composition(self) -> tuple[int, int]:
        ints = keys = 0
        for item in self.items:
            kind = item[0]
            if kind in ("nonce", "rand", "id", "int"):
                ints += 1
            elif kind in ("key", "sig"):
                keys += 1
            elif kind == "box":
                ints += item[2]
                keys += item[3]
            else:
                raise ValueError(f"unknown payload item {kind!r}")
        return ints, keys

    # typed accessors
    def nonces(self) -> list[Nonce]:
        return [it[1] for it in self.items if it[0] == "nonce"]

    def rands(self) -> list[bytes]:
        return [it[1] for it in self.items if it[0] == "rand"]

    def ids(self) -> list[int]:
        return [it[1] for it in self.items if it[0] == "id"]

    def ints(self) -> list[int]:
        return [it[1] for it in self.items if it[0] == "int"]

    def keys(self) -> dict[str, bytes]:
        return {it[1]: it[2] for it in self.items if it[0] == "key"}

    def sigs(self) -> list[bytes]:
        return [it[1] for it in self.items if it[0] == "sig"]

    def boxes(self) -> list[SealedBox]:
        return [it[1] for it in self.items if it[0] == "box"]

    def encode(self) -> bytes:
        out = []
        for it in self.items:
            kind = it[0]
            if kind == "nonce":
                n = it[1]
                out.append(["nonce", n.origin, n.version, n.value.hex()])
            elif kind in ("id", "int"):
                out.append([kind, it[1]])
            elif kind == "key":
                out.append(["key", it[1], it[2].hex()])
            elif kind in ("sig", "rand"):
                out.append([kind, it[1].hex()])
            elif kind == "box":
                b = it[1]
                out.append(["box", b.iv.hex(), b.ciphertext.hex(), b.tag.hex(), b.ad.hex(), it[2], it[3]])
        return json.dumps(out, separators=(",", ":")).encode()

    @classmethod
    def decode(cls, data: bytes) -> "Payload":
        items = []
        for it in json.loads(data):
            kind = it[0]
            if kind == "nonce":
                items.append(("nonce", Nonce(bytes.fromhex(it[3]), it[1], it[2])))
            elif kind in ("id", "int"):
                items.append((kind, it[1]))
            elif kind == "key":
                items.append(("key", it[1], bytes.fromhex(it[2])))
            elif kind in ("sig", "rand"):
                items.append((kind, bytes.fromhex(it[1])))
            elif kind == "box":
                box = SealedBox(*(bytes.fromhex(x) for x in it[1:5]))
                items.append(("box", box, it[5], it[6]))
        return cls(tuple(items))


def box_item(box: SealedBox, inner: Payload) -> tuple:
    ints, keys = inner.composition()
    return ("box", box, ints, keys)


# ---------------------------------------------------------------- ledger


@dataclass
class Counts:
    uc: int = 0
    bc: int = 0
    oob: int = 0
    bytes: int = 0
    oob_bytes: int = 0
    phys_bytes: int = 0
    hash_ops: int = 0
    crypt_ops: int = 0
    auth_ops: int = 0

    def add(self, other: "Counts") -> None:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))

    @property
    def messages(self) -> int:
        return self.uc + self.bc

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class EventLedger:
    index: int
    kind: str
    params: dict
    totals: Counts = field(default_factory=Counts)
    per_step: dict[str, Counts] = field(default_factory=dict)
    hash_by_label: dict[str, int] = field(default_factory=dict)

    def step(self, tag: str) -> Counts:
        if tag not in self.per_step:
            self.per_step[tag] = Counts()
        return self.per_step[tag]

    def frozen(self) -> "EventLedger":
        return EventLedger(
            self.index,
            self.kind,
            dict(self.params),
            replace(self.totals),
            {k: replace(v) for k, v in self.per_step.items()},
            dict(self.hash_by_label),
        )


@dataclass
class CostLedger:
    totals: Counts
    per_event: list[EventLedger]

    @property
    def uc_count(self) -> int:
        return self.totals.uc

    @property
    def bc_count(self) -> int:
        return self.totals.bc

    @property
    def bytes_total(self) -> int:
        return self.totals.bytes


# ---------------------------------------------------------------- messages


@dataclass(frozen=True)
class Message:
    seq: int
    event: int
    step_tag: str
    mode: Mode
    sender: int
    recipients: tuple[int, ...]
    key_hint: frozenset[int]
    box: SealedBox
    ints: int
    keys: int
    abstract_bytes: int
    # simulator bookkeeping, never read by protocol parties
    seal_key: bytes = field(repr=False, default=b"")
    inner: tuple[tuple[SealedBox, bytes], ...] = field(repr=False, default=())


AUTH_SENDER = -1


@dataclass(frozen=True)
class Receipt:
    seq: int
    recipients: tuple[int, ...]


@dataclass(frozen=True)
class EpochRecord:
    """One group key as it came into force."""

    event: int
    group: str
    epoch: int
    key: bytes
    members: frozenset[int]


class Network:
    def __init__(self, sizes: SizeModel | None = None):
        self.sizes = sizes or SizeModel()
        self.transcript: list[Message] = []
        self.events: list[EventLedger] = []
        # (label, a, b) -> (out, first event)
        self.derivations: dict[tuple[bytes, bytes, bytes], tuple[bytes, int]] = {}
        self.xors: dict[tuple[bytes, ...], tuple[bytes, int]] = {}
        self.epochs: list[EpochRecord] = []
        # party id -> (event, knowledge atoms) at removal
        self.removals: list[tuple[int, frozenset[int], dict[int, dict[bytes, str]]]] = []
        # (event, admitted party ids, host group)
        self.admissions: list[tuple[int, frozenset[int], str]] = []
        self._current: EventLedger | None = None
        self._step: str | None = None

    # -------------------------------------------------- event scoping
    @contextlib.contextmanager
    def event(self, kind: str, **params) -> Iterator[int]:
        if self._current is not None:
            raise RuntimeError("membership events are processed strictly one at a time")
        led = EventLedger(len(self.events), kind, params)
        self.events.append(led)
        self._current = led
        try:
            with prim.metered(self):
                yield led.index
        finally:
            self._current = None
            self._step = None

    @contextlib.contextmanager
    def step(self, tag: str) -> Iterator[None]:
        if tag not in STEPS:
            raise DeliveryError(f"unregistered step tag {tag!r}")
        prev = self._step
        self._step = tag
        try:
            yield
        finally:
            self._step = prev

    @property
    def current_event(self) -> int:
        if self._current is None:
            raise RuntimeError("no active event")
        return self._current.index

    def _counts(self) -> tuple[Counts | None, Counts | None]:
        led = self._current
        if led is None:
            return None, None
        return led.totals, led.step(self._step or "local")

    def _auth_step(self) -> bool:
        return self._step is not None and STEPS.get(self._step) is Mode.OUT_OF_BAND

    # -------------------------------------------------- primitive hooks
    def on_hash(self, label: bytes, a: bytes, b: bytes, out: bytes) -> None:
        tot, stp = self._counts()
        if tot is None:
            return
        key = (label, a, b)
        if key not in self.derivations:
            self.derivations[key] = (out, self._current.index)
        attr = "auth_ops" if self._auth_step() else "hash_ops"
        for c in (tot, stp):
            setattr(c, attr, getattr(c, attr) + 1)
        if attr == "hash_ops":
            name = label.decode()
            hb = self._current.hash_by_label
            hb[name] = hb.get(name, 0) + 1

    def on_xor(self, values: tuple[bytes, ...], out: bytes) -> None:
        if self._current is None:
            return
        if values not in self.xors:
            self.xors[values] = (out, self._current.index)

    def on_crypt(self, op: str, key: bytes, box: SealedBox, ok: bool) -> None:
        tot, stp = self._counts()
        if tot is None or not ok:
            return
        attr = "auth_ops" if self._auth_step() else "crypt_ops"
        for c in (tot, stp):
            setattr(c, attr, getattr(c, attr) + 1)

    def count_auth(self, n: int = 1) -> None:
        """Signature/MAC work, tallied apart from E."""
        tot, stp = self._counts()
        if tot is None:
            return
        tot.auth_ops += n
        stp.auth_ops += n

    # -------------------------------------------------- transport
    def send(
        self,
        sender: int,
        recipients: Iterable[int],
        payload: Payload,
        key: bytes,
        key_hint: Iterable[int] = (),
        ad: bytes = b"",
        inner: tuple[tuple[SealedBox, bytes], ...] = (),
        prebuilt: SealedBox | None = None,
    ) -> Message:
        """Seal ``payload`` under ``key`` and record it.

        ``prebuilt`` forwards a box sealed earlier by someone else (for
        instance the authentication stub); ``payload`` then only describes
        its contents for the byte count.
        """
        if self._current is None or self._step is None:
            raise DeliveryError("send outside of an event step")
        mode = STEPS[self._step]
        recipients = tuple(recipients)
        if not recipients:
            raise DeliveryError("message without recipients")
        if mode is Mode.UNICAST and len(recipients) != 1:
            raise DeliveryError("unicast needs exactly one recipient")
        ad = ad or self._step.encode()
        box = prebuilt if prebuilt is not None else prim.seal(key, ad, payload.encode())
        ints, keys = payload.composition()
        size = ints * self.sizes.int_bytes + keys * self.sizes.key_bytes
        msg = Message(
            seq=len(self.transcript),
            event=self._current.index,
            step_tag=self._step,
            mode=mode,
            sender=sender,
            recipients=recipients,
            key_hint=frozenset(key_hint),
            box=box,
            ints=ints,
            keys=keys,
            abstract_bytes=size,
            seal_key=key,
            inner=inner,
        )
        self.transcript.append(msg)
        phys = len(box.iv) + len(box.ciphertext) + len(box.tag)
        tot, stp = self._counts()
        for c in (tot, stp):
            if mode is Mode.UNICAST:
                c.uc += 1
            elif mode is Mode.BROADCAST:
                c.bc += 1
            else:
                c.oob += 1
            if mode is Mode.OUT_OF_BAND:
                c.oob_bytes += size
            else:
                c.bytes += size
            c.phys_bytes += phys
        return msg

    def receive(self, msg: Message, member: int, key: bytes) -> Payload:
        if member not in msg.recipients:
            raise DeliveryError(f"member {member} is not a recipient of message {msg.seq}")
        return Payload.decode(prim.open_box(key, msg.box))

    def open_inner(self, box: SealedBox, key: bytes) -> Payload:
        return Payload.decode(prim.open_box(key, box))

    # -------------------------------------------------- bookkeeping
    def record_epoch(self, group: str, epoch: int, key: bytes, members: Iterable[int]) -> None:
        ev = self._current.index if self._current is not None else -1
        self.epochs.append(EpochRecord(ev, group, epoch, key, frozenset(members)))

    def record_removal(self, parties: Iterable[int], knowledge: dict[int, dict[bytes, str]]) -> None:
        self.removals.append((self.current_event, frozenset(parties), knowledge))

    def record_admission(self, parties: Iterable[int], group: str) -> None:
        self.admissions.append((self.current_event, frozenset(parties), group))

    def ledger_for_event(self, index: int) -> EventLedger:
        if not 0 <= index < len(self.events):
            raise IndexError(f"unknown event index {index}")
        return self.events[index].frozen()

    def totals(self) -> CostLedger:
        tot = Counts()
        for led in self.events:
            tot.add(led.totals)
        return CostLedger(tot, [led.frozen() for led in self.events])

    def export_transcript(self) -> str:
        lines = [
            f"# {TRANSCRIPT_FORMAT} sizes=int:{self.sizes.int_bytes},key:{self.sizes.key_bytes}",
            "event\tseq\tstep\tmode\tsender\trecipients\tkey_hint\tints\tkeys\tbytes",
        ]
        for m in self.transcript:
            lines.append(
                "\t".join(
                    [
                        str(m.event),
                        str(m.seq),
                        m.step_tag,
                        m.mode.value,
                        "auth" if m.sender == AUTH_SENDER else str(m.sender),
                        ",".join(map(str, m.recipients)),
                        ",".join(map(str, sorted(m.key_hint))) or "-",
                        str(m.ints),
                        str(m.keys),
                        str(m.abstract_bytes),
                    ]
                )
            )
        return "\n".join(lines) + "\n"


def parse_transcript(text: str) -> list[dict]:
    """Read back :meth:`Network.export_transcript` output."""
    rows = []
    header = None
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        if header is None:
            header = cols
            continue
        row = dict(zip(header, cols))
        for k in ("event", "seq", "ints", "keys", "bytes"):
            row[k] = int(row[k])
        rows.append(row)
    return rows


def recompute_bytes(rows: list[dict], sizes: SizeModel) -> int:
    return sum(
        r["ints"] * sizes.int_bytes + r["keys"] * sizes.key_bytes for r in rows if r["mode"] != Mode.OUT_OF_BAND.value
    )
