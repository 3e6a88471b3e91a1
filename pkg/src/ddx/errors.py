"""Exception hierarchy. Every error carries a short machine-readable ``code``."""


class DdxError(Exception):
    code = "error"

    def __init__(self, message: str = "", code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class DomainError(DdxError):
    code = "out_of_range"


class ConfigError(DdxError):
    code = "infeasible_config"


class ParseError(DdxError):
    code = "parse"


class KbInvalidError(DdxError):
    code = "kb_invalid"

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(f"{v.code}: {v.detail}" for v in self.violations[:10])
        super().__init__(f"knowledge base failed validation ({len(self.violations)} violations): {lines}")


class DataError(DdxError):
    """Raised for dataset-level contract failures (empty requests, too few cases, ...)."""

    code = "data"


class FingerprintMismatch(DdxError):
    code = "fingerprint_mismatch"


class DivergedError(DdxError):
    code = "diverged"

    def __init__(self, message: str, last_finite_loss: float | None = None):
        super().__init__(message)
        self.last_finite_loss = last_finite_loss
