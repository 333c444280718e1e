"""Exception types shared across the package."""


class ConceptGuideError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(ConceptGuideError):
    """Bad or unknown configuration value (template id, encoder name, flag)."""


class ContractViolation(ConceptGuideError):
    """Shape, length, or digest mismatch between pipeline stages."""


class SchemaError(ConceptGuideError):
    """Persisted file violates its schema (duplicate ids, bad fields)."""


class MigrationError(SchemaError):
    """File written under a different schema version; refuse to guess."""


class BankError(ConceptGuideError):
    """Concept-bank state violation (unknown id, empty disease entry)."""


class ConflictError(BankError):
    """Re-deciding an already-decided concept without the force flag."""


class GeneratorTransportError(ConceptGuideError):
    """Retryable transport failure while calling the concept generator."""


class DataError(ConceptGuideError):
    """Dataset-level violation (bad pool, missing split)."""


class ManifestError(DataError):
    """Manifest file failed row-level validation."""


class EncoderError(ConceptGuideError):
    """Encoder adapter failure (unknown name, sequence too long, bad input)."""


class TrainingError(ConceptGuideError):
    """Stage-1 optimization failure (NaN loss, empty pool, unfrozen bank)."""


class UnsupportedOperationError(ConceptGuideError):
    """Operation not defined for this model kind."""
