"""Shared error types. Every error carries a stable machine-readable code."""

from __future__ import annotations


class LinkwerkError(Exception):
    """Base class; `code` is the stable identifier used in API responses."""

    code = "ERROR"

    def __init__(self, message: str = "", **context):
        super().__init__(message or self.code)
        self.context = context


class EmptyIdentityError(LinkwerkError):
    code = "EMPTY_IDENTITY"


class KeyNotFoundError(LinkwerkError):
    code = "KEY_NOT_FOUND"


class ParamsMismatchError(LinkwerkError):
    code = "PARAMS_MISMATCH"


class StageError(LinkwerkError):
    code = "STAGE_ERROR"


class WrongKeyError(LinkwerkError):
    code = "WRONG_KEY"


class ConfigError(LinkwerkError):
    code = "CONFIG_ERROR"


class KvnrConflictPatientError(LinkwerkError):
    code = "KVNR_CONFLICT_PATIENT"


class KvnrConflictOtherError(LinkwerkError):
    code = "KVNR_CONFLICT_OTHER"


class UnknownDomainError(LinkwerkError):
    code = "UNKNOWN_DOMAIN"


class UnknownPatientError(LinkwerkError):
    code = "UNKNOWN_PATIENT"


class InvalidKeyError(LinkwerkError):
    code = "INVALID_KEY"


class SelfMergeError(LinkwerkError):
    code = "SELF_MERGE"


class UnauthorizedError(LinkwerkError):
    code = "UNAUTHORIZED"


class InvalidSubsetError(LinkwerkError):
    code = "INVALID_SUBSET"


class ConsentInactiveError(LinkwerkError):
    code = "CONSENT_INACTIVE"


class DuplicateTxError(LinkwerkError):
    code = "DUPLICATE_TX"


class UnknownPseudonymError(LinkwerkError):
    code = "UNKNOWN_PSEUDONYM"


class CallerIsSiteError(LinkwerkError):
    code = "CALLER_IS_SITE"


class WrongStatusError(LinkwerkError):
    code = "WRONG_STATUS"


class NotInvolvedError(LinkwerkError):
    code = "NOT_INVOLVED"


class AlreadyWithdrawnError(LinkwerkError):
    code = "ALREADY_WITHDRAWN"


class UnknownConsentError(LinkwerkError):
    code = "UNKNOWN_CONSENT"


class UnknownRecordError(LinkwerkError):
    code = "UNKNOWN_RECORD"
