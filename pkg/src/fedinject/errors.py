"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A caller broke a structural precondition."""


class InputError(ValueError):
    """User-supplied data or configuration is invalid."""


class CapabilityError(RuntimeError):
    """The model cannot handle a modality it was never trained on."""


class ParseError(ValueError):
    """Base class for wire-format decoding failures."""


class BadMagicError(ParseError):
    pass


class VersionError(ParseError):
    pass


class TruncatedError(ParseError):
    pass


class ChecksumError(ParseError):
    pass


class LayoutError(ParseError):
    """Declared shapes, lengths or names are inconsistent with the payload."""


class RoundError(RuntimeError):
    """A client failed during a communication round."""

    def __init__(self, round_index: int, client_id: int, cause: BaseException):
        super().__init__(f"round {round_index}, client {client_id}: "
                         f"{type(cause).__name__}: {cause}")
        self.round_index = round_index
        self.client_id = client_id
        self.cause = cause
