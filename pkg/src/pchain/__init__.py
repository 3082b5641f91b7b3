"""Personal transaction chains: one tamper-evident, single-writer ledger per customer."""

from .bcs import BlockCreationService, Composite, MaxBytes, MaxCount, PeriodEnd
from .crypto import HASH_ALGORITHM, SIGNATURE_SCHEME, Digest, KeyPair
from .errors import ChainError
from .gateway import ChainRegistration, Gateway
from .ledger import VerifyResult, make_genesis, seal_block, verify_block
from .model import (
    Action,
    Block,
    BlockHeader,
    Certificate,
    FinancialTransaction,
    PermissionRecord,
    Role,
    Scope,
    SignedTransaction,
    canonical_decode,
    canonical_encode,
)
from .replay import ChainState, PermissionSet, replay
from .reporting import IntegrityReport, QueryFilter, ReportingService, SummaryReport
from .store import FileBackend, MemoryBackend, migrate, open_backend
from .uas import UserAccountService, effective_permissions

__version__ = "0.1.0"

__all__ = [
    "HASH_ALGORITHM",
    "SIGNATURE_SCHEME",
    "Digest",
    "KeyPair",
    "ChainError",
    "VerifyResult",
    "make_genesis",
    "seal_block",
    "verify_block",
    "Action",
    "Block",
    "BlockHeader",
    "Certificate",
    "FinancialTransaction",
    "PermissionRecord",
    "Role",
    "Scope",
    "SignedTransaction",
    "canonical_decode",
    "canonical_encode",
    "ChainState",
    "PermissionSet",
    "replay",
    "FileBackend",
    "MemoryBackend",
    "migrate",
    "open_backend",
    "UserAccountService",
    "effective_permissions",
    "BlockCreationService",
    "Composite",
    "MaxBytes",
    "MaxCount",
    "PeriodEnd",
    "ChainRegistration",
    "Gateway",
    "IntegrityReport",
    "QueryFilter",
    "ReportingService",
    "SummaryReport",
]
