"""Exception types shared across the package.

Every error raised on a documented failure path derives from FatSpeechError so
the CLI can map them onto its exit codes without string matching.
"""


class FatSpeechError(Exception):
    """Base class for all package errors."""


class ShapeError(FatSpeechError):
    """Operand shapes are incompatible for an op.

    Carries the op name and both shapes so the message survives being raised
    from deep inside a training step.
    """

    def __init__(self, op, shape_a, shape_b=None, detail=""):
        self.op = op
        self.shape_a = tuple(shape_a) if shape_a is not None else None
        self.shape_b = tuple(shape_b) if shape_b is not None else None
        parts = [f"{op}: incompatible shapes {self.shape_a}"]
        if shape_b is not None:
            parts.append(f"and {self.shape_b}")
        if detail:
            parts.append(f"({detail})")
        super().__init__(" ".join(parts))


class DataError(FatSpeechError):
    """A corpus, manifest, or file-format problem attributable to the input data."""


class FormatError(DataError):
    """A binary or text container failed validation (magic, version, truncation)."""


class ConfigMismatchError(FatSpeechError):
    """Two configurations disagree on fields that must match.

    `fields` lists the offending field names.
    """

    def __init__(self, fields, detail=""):
        self.fields = list(fields)
        msg = "config mismatch on: " + ", ".join(self.fields)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DivergenceError(FatSpeechError):
    """Training produced a non-finite loss; carries the last finite checkpoint path."""

    def __init__(self, step, last_checkpoint=None):
        self.step = step
        self.last_checkpoint = last_checkpoint
        msg = f"non-finite loss at step {step}"
        if last_checkpoint:
            msg += f"; last finite checkpoint: {last_checkpoint}"
        super().__init__(msg)


class UsageError(FatSpeechError):
    """Bad command-line usage detected after argparse (e.g. missing role flags)."""
