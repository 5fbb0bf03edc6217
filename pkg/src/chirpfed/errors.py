"""Exception hierarchy shared by all chirpfed modules."""


class ChirpfedError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(ChirpfedError):
    """A parameter object violates one of its invariants."""


class InputError(ChirpfedError):
    """Runtime input (waveform, batch, vector) has the wrong shape or content."""


class ParseError(ChirpfedError):
    """A serialized file is malformed; carries the byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(ChirpfedError):
    """Training diverged; carries round/step context."""

    def __init__(self, message, round_index=None, step_index=None):
        ctx = []
        if round_index is not None:
            ctx.append(f"round {round_index}")
        if step_index is not None:
            ctx.append(f"step {step_index}")
        if ctx:
            message = f"{message} ({', '.join(ctx)})"
        super().__init__(message)
        self.round_index = round_index
        self.step_index = step_index


class ValidityError(ChirpfedError):
    """A closed-form bound was evaluated outside its region of validity."""


class EmptyRoundError(ChirpfedError):
    """No scheduled node decoded successfully; the caller keeps the previous
    global parameters instead of aggregating."""
