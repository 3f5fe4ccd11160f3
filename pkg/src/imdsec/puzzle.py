"""Stateless hash puzzles gating the reader-server handshake under load.

The server derives ``x = H(reader_id || t || K_S)`` and hands out ``H(x)`` plus
``x`` with its leading ``k`` bits cleared. Verification recomputes ``x`` from
the same inputs, so nothing is stored per challenge.
"""

from __future__ import annotations

from dataclasses import dataclass

from .crypto import CryptoSuite
from .types import EntityId, Reason, SymmetricKey

DEFAULT_EXPIRY_MS = 10_000
DEFAULT_LOAD_THRESHOLD = 100


@dataclass(frozen=True)
class Puzzle:
    hx: bytes
    partial_x: bytes
    t: int
    k: int

    def __post_init__(self) -> None:
        if not 0 <= self.k < len(self.partial_x) * 8:
            raise ValueError("difficulty must be below the hash width")


@dataclass(frozen=True)
class PuzzleSolution:
    bits: bytes  # leading k bits of x, right-aligned in ceil(k/8) bytes
    evaluations: int = 0


def _x(suite: CryptoSuite, reader_id: EntityId, t: int, secret: SymmetricKey) -> bytes:
    return suite.hash(reader_id.raw + t.to_bytes(8, "big") + secret.raw)


def _split(x: bytes, k: int) -> tuple[int, bytes]:
    n = len(x) * 8
    value = int.from_bytes(x, "big")
    head = value >> (n - k) if k else 0
    rest = value & ((1 << (n - k)) - 1)
    return head, rest.to_bytes(len(x), "big")


def _solution_bytes(head: int, k: int) -> bytes:
    return head.to_bytes((k + 7) // 8, "big")


def issue_puzzle(suite: CryptoSuite, secret: SymmetricKey, reader_id: EntityId, now_ms: int, k: int) -> Puzzle:
    x = _x(suite, reader_id, now_ms, secret)
    _, partial = _split(x, k)
    return Puzzle(suite.hash(x), partial, now_ms, k)


def solve_puzzle(suite: CryptoSuite, puzzle: Puzzle) -> PuzzleSolution:
    """Exhaustive search over the missing bits, lowest candidate first."""
    n = len(puzzle.partial_x) * 8
    rest = int.from_bytes(puzzle.partial_x, "big")
    for evaluations, head in enumerate(range(1 << puzzle.k), start=1):
        candidate = ((head << (n - puzzle.k)) | rest).to_bytes(len(puzzle.partial_x), "big")
        if suite.hash(candidate) == puzzle.hx:
            return PuzzleSolution(_solution_bytes(head, puzzle.k), evaluations)
    raise ValueError("puzzle has no solution")


def verify_puzzle(
    suite: CryptoSuite,
    secret: SymmetricKey,
    reader_id: EntityId,
    t: int,
    k: int,
    solution: bytes,
    now_ms: int,
    expiry_ms: int = DEFAULT_EXPIRY_MS,
) -> Reason | None:
    if t > now_ms or now_ms - t > expiry_ms:
        return Reason.PUZZLE_EXPIRED
    head, _ = _split(_x(suite, reader_id, t, secret), k)
    if bytes(solution) != _solution_bytes(head, k):
        return Reason.PUZZLE_WRONG
    return None
