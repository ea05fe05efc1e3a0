"""Shared exception taxonomy.

Every module raises from this small set so the CLI can map failures to
stable exit codes without inspecting messages.
"""


class EditForgeError(Exception):
    """Base class for all package errors."""


class ShapeError(EditForgeError):
    """Tensor/image extents incompatible with the requested operation."""


class ContractError(EditForgeError):
    """A caller violated an operation's precondition."""


class NumericError(EditForgeError):
    """Non-finite values where finite ones are required."""


class ConfigError(EditForgeError):
    """Invalid or inconsistent configuration document."""


class ProviderError(EditForgeError):
    """A remote provider (text-gen, embedder, detector, ...) failed."""


class ParseError(EditForgeError):
    """Structured parse failure; carries a machine-readable reason code."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason}: {detail}" if detail else reason)
