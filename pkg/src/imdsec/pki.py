"""In-memory certificate authority. Revocation lives on the server as a plain set."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Optional

from .crypto import CryptoSuite, KeyPair
from .types import SIG_BYTES, Certificate, EntityId, Privilege, Reason

NEVER = (1 << 63) - 1


@dataclass
class CertificateAuthority:
    keypair: KeyPair
    suite: CryptoSuite = CryptoSuite()

    @classmethod
    def create(cls, rng: random.Random, suite: CryptoSuite = CryptoSuite()) -> "CertificateAuthority":
        return cls(KeyPair.generate(rng), suite)

    @property
    def public_key(self) -> bytes:
        return self.keypair.public

    def issue(
        self, subject: EntityId, public_key: bytes, privilege: Optional[Privilege] = None, not_after: int = NEVER
    ) -> Certificate:
        unsigned = Certificate(subject, privilege, public_key, not_after, bytes(SIG_BYTES))
        return Certificate(subject, privilege, public_key, not_after, self.suite.sign(self.keypair, unsigned.tbs()))


def self_signed(keypair: KeyPair, subject: EntityId, suite: CryptoSuite, privilege: Optional[Privilege] = None) -> Certificate:
    """What a forged reader presents: well-formed, but not signed by the CA."""
    unsigned = Certificate(subject, privilege, keypair.public, NEVER, bytes(SIG_BYTES))
    return Certificate(subject, privilege, keypair.public, NEVER, suite.sign(keypair, unsigned.tbs()))


def check_certificate(
    cert: Certificate,
    ca_public: bytes,
    suite: CryptoSuite,
    now_ms: int,
    subject: Optional[EntityId] = None,
    revoked: frozenset | set = frozenset(),
    expired_reason: Reason = Reason.CERT_INVALID,
    revoked_reason: Reason = Reason.CERT_REVOKED,
) -> Optional[Reason]:
    """Return the first failing check, or None if the certificate is acceptable."""
    if not suite.verify_sig(ca_public, cert.tbs(), cert.signature):
        return Reason.CERT_INVALID
    if subject is not None and cert.subject != subject:
        return Reason.CERT_INVALID
    if now_ms > cert.not_after:
        return expired_reason
    if cert.subject in revoked:
        return revoked_reason
    return None
