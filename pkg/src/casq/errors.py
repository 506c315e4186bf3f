"""Exception hierarchy shared across the toolkit."""


class CasqError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(CasqError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(CasqError):
    """A configuration value violates a documented constraint."""


class NumericError(CasqError):
    """Input contains non-finite values where finite ones are required."""


class ContractError(CasqError):
    """An operation was called outside its documented contract."""


class VocabError(CasqError):
    """A token id falls outside the configured vocabulary."""


class TrainingDiverged(CasqError):
    """Training loss became non-finite; carries step diagnostics."""
