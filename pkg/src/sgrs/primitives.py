"""Hashing, XOR combination, authenticated sealing and seeded nonces.

Every call site that needs ``Hash(x, y)`` goes through :func:`kdf2` with one
of the registered labels below, so the two inputs are always in a fixed
position:

============  =====================  =====================
label         first input            second input
============  =====================  =====================
``GK-join``   current group key      sponsor nonce
``GK-leave``  rehashed sponsor nonce random nonce
``NR``        nonce being rehashed   mixing value
``MK``        XOR of indexed nonces  group key
``SG``        current supergroup key child group key
============  =====================  =====================

Instrumentation: protocol code runs kdf2/xor/seal/open inside an active
:class:`Meter` (see :func:`metered`). Outside of one the functions are pure
and nothing is counted.
"""
from __future__ import annotations

import contextlib
import contextvars
import hashlib
import hmac
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Protocol

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

DIGEST_SIZE = 32
IV_SIZE = 12

HASH_NAME = "sha256"
CIPHER_NAME = "aes-256-gcm"
KDF_ENCODING = "sha256(u8 len(label) || label || a || b)"

LABELS = frozenset({b"GK-join", b"GK-leave", b"NR", b"MK", b"SG"})


class ConfigurationError(ValueError):
    """An unregistered kdf label or malformed primitive input."""


class AuthFailure(Exception):
    """The box could not be opened with the given key."""


@dataclass(frozen=True, order=True)
class Nonce:
    value: bytes
    origin: int
    version: int = 0

    def __post_init__(self) -> None:
        if len(self.value) != DIGEST_SIZE:
            raise ConfigurationError(f"nonce must be {DIGEST_SIZE} bytes, got {len(self.value)}")
        if self.version < 0:
            raise ConfigurationError("nonce version must be non-negative")

    def rehashed(self, mix: bytes) -> "Nonce":
        return Nonce(kdf2(b"NR", self.value, mix), self.origin, self.version + 1)

    def __repr__(self) -> str:
        return f"Nonce(n{self.origin}v{self.version}:{self.value[:4].hex()})"


@dataclass(frozen=True)
class SealedBox:
    iv: bytes
    ciphertext: bytes
    tag: bytes
    ad: bytes = b""


class Meter(Protocol):
    def on_hash(self, label: bytes, a: bytes, b: bytes, out: bytes) -> None: ...
    def on_xor(self, values: tuple[bytes, ...], out: bytes) -> None: ...
    def on_crypt(self, op: str, key: bytes, box: SealedBox, ok: bool) -> None: ...


_meter: contextvars.ContextVar[Meter | None] = contextvars.ContextVar("sgrs_meter", default=None)


@contextlib.contextmanager
def metered(meter: Meter) -> Iterator[Meter]:
    """Route primitive calls made inside the block to ``meter``."""
    token = _meter.set(meter)
    try:
        yield meter
    finally:
        _meter.reset(token)


@contextlib.contextmanager
def unmetered() -> Iterator[None]:
    token = _meter.set(None)
    try:
        yield
    finally:
        _meter.reset(token)


def _check32(name: str, value: bytes) -> None:
    if len(value) != DIGEST_SIZE:
        raise ConfigurationError(f"{name} must be {DIGEST_SIZE} bytes, got {len(value)}")


def kdf2(label: bytes | str, a: bytes, b: bytes) -> bytes:
    """Labelled two-input hash returning a 32-byte digest."""
    if isinstance(label, str):
        label = label.encode()
    if label not in LABELS:
        raise ConfigurationError(f"unregistered kdf label {label!r}")
    _check32("a", a)
    _check32("b", b)
    out = hashlib.sha256(bytes([len(label)]) + label + a + b).digest()
    meter = _meter.get()
    if meter is not None:
        meter.on_hash(label, a, b, out)
    return out


def xor_bytes(values: Iterable[bytes]) -> bytes:
    acc = 0
    count = 0
    for v in values:
        _check32("xor operand", v)
        acc ^= int.from_bytes(v, "big")
        count += 1
    if count == 0:
        raise ValueError("xor over an empty set")
    return acc.to_bytes(DIGEST_SIZE, "big")


def xor_combine(nonces: Iterable[Nonce]) -> bytes:
    """Byte-wise XOR of a non-empty set of nonces."""
    nonces = list(nonces)
    if not nonces:
        raise ValueError("xor_combine needs at least one nonce")
    if len({(n.origin, n.version) for n in nonces}) != len(nonces):
        raise ValueError("xor_combine operands must be distinct by (origin, version)")
    values = tuple(sorted(n.value for n in nonces))
    out = xor_bytes(values)
    meter = _meter.get()
    if meter is not None:
        meter.on_xor(values, out)
    return out


def _synthetic_iv(key: bytes, ad: bytes, plaintext: bytes) -> bytes:
    # deterministic IV; repeats only for identical (key, ad, plaintext)
    mac = hmac.new(key, len(ad).to_bytes(4, "big") + ad + plaintext, hashlib.sha256)
    return mac.digest()[:IV_SIZE]


def seal(key: bytes, ad: bytes, plaintext: bytes) -> SealedBox:
    _check32("key", key)
    iv = _synthetic_iv(key, ad, plaintext)
    ct = AESGCM(key).encrypt(iv, plaintext, ad)
    box = SealedBox(iv=iv, ciphertext=ct[:-16], tag=ct[-16:], ad=ad)
    meter = _meter.get()
    if meter is not None:
        meter.on_crypt("seal", key, box, True)
    return box


def open_box(key: bytes, box: SealedBox) -> bytes:
    """Open ``box``; raises :class:`AuthFailure` on any mismatch, never anything else."""
    ok = False
    try:
        if len(key) != DIGEST_SIZE or len(box.iv) != IV_SIZE:
            raise AuthFailure("bad key or iv length")
        try:
            pt = AESGCM(key).decrypt(box.iv, box.ciphertext + box.tag, box.ad)
        except (InvalidTag, ValueError, TypeError) as exc:
            raise AuthFailure(str(exc) or "authentication failed") from None
        ok = True
        return pt
    finally:
        meter = _meter.get()
        if meter is not None:
            meter.on_crypt("open", key, box, ok)


def mac(key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, hashlib.sha256).digest()


def mac_verify(key: bytes, data: bytes, tag: bytes) -> bool:
    return hmac.compare_digest(mac(key, data), tag)


@dataclass
class SeededRng:
    """Counter-mode SHA-256 stream; identical seeds give identical nonces."""

    seed: int
    counter: int = field(default=0)

    def __post_init__(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must fit in 64 bits")

    def next_bytes(self) -> bytes:
        block = hashlib.sha256(
            b"sgrs-rng" + self.seed.to_bytes(8, "big") + self.counter.to_bytes(8, "big")
        ).digest()
        self.counter += 1
        return block

    def next_nonce(self, origin: int) -> Nonce:
        return Nonce(self.next_bytes(), origin, 0)

    def randrange(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` drawn from the same stream."""
        if n <= 0:
            raise ValueError("empty range")
        limit = (2**256 // n) * n
        while True:
            x = int.from_bytes(self.next_bytes(), "big")
            if x < limit:
                return x % n

    def sample(self, items: list, k: int) -> list:
        pool = list(items)
        out = []
        for _ in range(k):
            out.append(pool.pop(self.randrange(len(pool))))
        return out

    def choice(self, items):
        items = list(items)
        return items[self.randrange(len(items))]


def next_nonce(rng: SeededRng, origin: int) -> Nonce:
    return rng.next_nonce(origin)


def primitive_ids() -> dict[str, str]:
    return {"hash": HASH_NAME, "cipher": CIPHER_NAME, "kdf": KDF_ENCODING}
