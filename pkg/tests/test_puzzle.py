import random
import statistics

import pytest

from imdsec.crypto import CryptoSuite
from imdsec.protocol import reader_solve_puzzle, server_issue_puzzle, server_verify_puzzle
from imdsec.puzzle import issue_puzzle, solve_puzzle, verify_puzzle
from imdsec.types import EntityId, KeyRole, Reason, SymmetricKey

suite = CryptoSuite()
secret = SymmetricKey(bytes(range(16)), KeyRole.SERVER_SECRET)
rid = EntityId.from_name("reader-1")


def test_zero_difficulty():
    p = issue_puzzle(suite, secret, rid, 0, 0)
    sol = solve_puzzle(suite, p)
    assert sol.bits == b""
    assert verify_puzzle(suite, secret, rid, 0, 0, sol.bits, 0) is None


def test_deterministic_given_secret():
    assert issue_puzzle(suite, secret, rid, 42, 10) == issue_puzzle(suite, secret, rid, 42, 10)


def test_solution_restores_preimage():
    p = issue_puzzle(suite, secret, rid, 7, 8)
    sol = solve_puzzle(suite, p)
    assert sol.evaluations <= 256
    head = int.from_bytes(sol.bits, "big")
    n = len(p.partial_x) * 8
    x = ((head << (n - 8)) | int.from_bytes(p.partial_x, "big")).to_bytes(len(p.partial_x), "big")
    assert suite.hash(x) == p.hx


def test_k12_mean_work_near_2_pow_11():
    rng = random.Random(0)
    work = []
    for t in range(1000):
        s = SymmetricKey(rng.randbytes(16), KeyRole.SERVER_SECRET)
        work.append(solve_puzzle(suite, issue_puzzle(suite, s, rid, t, 12)).evaluations)
    mean = statistics.fmean(work)
    # Uniform over 1..4096: mean 2048.5, sd of the mean about 37.
    assert abs(mean - 2048.5) < 4 * 4096 / (12**0.5) / 1000**0.5


def test_random_guess_rate_at_k8():
    rng = random.Random(1)
    trials, hits = 20_000, 0
    for t in range(trials):
        guess = bytes([rng.randrange(256)])
        hits += verify_puzzle(suite, secret, rid, t, 8, guess, t) is None
    p = 2**-8
    sd = (p * (1 - p) / trials) ** 0.5
    assert abs(hits / trials - p) < 4 * sd


def test_expiry_and_wrong_solution():
    p = issue_puzzle(suite, secret, rid, 1000, 6)
    sol = solve_puzzle(suite, p)
    assert verify_puzzle(suite, secret, rid, 1000, 6, sol.bits, 1000 + 10_000) is None
    assert verify_puzzle(suite, secret, rid, 1000, 6, sol.bits, 1000 + 10_001) is Reason.PUZZLE_EXPIRED
    wrong = bytes([sol.bits[0] ^ 1])
    assert verify_puzzle(suite, secret, rid, 1000, 6, wrong, 1000) is Reason.PUZZLE_WRONG
    assert verify_puzzle(suite, secret, EntityId.from_name("other"), 1000, 6, sol.bits, 1000) in (None, Reason.PUZZLE_WRONG)


def test_server_wrappers(eco):
    eco.server.background_load = 1000
    p = server_issue_puzzle(eco.server, rid, 5)
    assert p.k == eco.server.required_difficulty() > 0
    sol = reader_solve_puzzle(p)
    assert server_verify_puzzle(eco.server, rid, p.t, p.k, sol.bits, 6) is None


def test_difficulty_bounds():
    with pytest.raises(ValueError):
        issue_puzzle(suite, secret, rid, 0, 256)
