"""Exception hierarchy shared by all simulator components."""


class HeteeError(Exception):
    """Base class for every error raised by the simulator."""


# fabric
class FabricError(HeteeError):
    pass


class InvalidToken(FabricError):
    pass


class UnknownDevice(FabricError):
    pass


class UnknownEndpoint(FabricError):
    pass


class UnknownQueue(FabricError):
    pass


class LaneBudgetExceeded(FabricError):
    pass


class AccessDenied(FabricError):
    pass


class NotRouted(FabricError):
    pass


# accelerators
class AccelError(HeteeError):
    pass


class DeviceBusy(AccelError):
    pass


class ShapeMismatch(AccelError):
    pass


# wire protocol
class ProtocolError(HeteeError):
    pass


class ParseError(ProtocolError):
    pass


class BadMagic(ParseError):
    pass


class BadVersion(ParseError):
    pass


class Truncated(ParseError):
    pass


class LengthMismatch(ParseError):
    pass


class AuthFailure(ProtocolError):
    pass


class SequenceViolation(ProtocolError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"expected seq {expected}, got {got}")
        self.expected = expected
        self.got = got


class MalformedBody(ProtocolError):
    pass


class ProgramInvalid(ProtocolError):
    pass


# attestation
class AttestationFailed(HeteeError):
    def __init__(self, reason):
        super().__init__(f"attestation failed: {reason.value if hasattr(reason, 'value') else reason}")
        self.reason = reason


class ConfirmationFailed(HeteeError):
    pass


class HandshakeError(HeteeError):
    pass


# controller
class ControllerError(HeteeError):
    pass


class BootSignatureInvalid(ControllerError):
    pass


class ResourceExhausted(ControllerError):
    pass


class CommandAlreadyActive(ControllerError):
    pass


class EnclaveNotRunning(ControllerError):
    pass


class UnknownTask(ControllerError):
    pass


# host
class HostError(HeteeError):
    pass


class Timeout(HostError):
    pass


class ResultGap(HostError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"result stream gap: expected seq {expected}, got {got}")
        self.expected = expected
        self.got = got


class DevicesUnavailable(HostError):
    pass


class ConfigInvalid(HeteeError):
    pass


class MissingCell(HeteeError):
    pass
