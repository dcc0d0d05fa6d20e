"""Exception hierarchy shared across the package.

Every exception carries a short machine-parsable ``code``; the CLI prints
``P2MX-ERR-<code>: <message>`` on a single line and exits nonzero.
"""


class P2mxError(Exception):
    """Base class for all package errors."""

    code = "INTERNAL"


class ShapeMismatchError(P2mxError):
    """Tensor operation applied to non-conforming shapes."""

    code = "SHAPE"

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        msg = f"op '{op}' got incompatible shapes {list(shapes)}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class MeshError(P2mxError):
    code = "MESH"


class ObjFormatError(MeshError):
    """Malformed OBJ input; carries the 1-based offending line number."""

    code = "FORMAT"

    def __init__(self, line_no, message):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class CameraFormatError(P2mxError):
    code = "FORMAT"


class FmapFormatError(P2mxError):
    code = "FORMAT"


class CheckpointError(P2mxError):
    code = "CKPT"


class ConfigError(P2mxError):
    code = "CONFIG"


class DatasetError(P2mxError):
    code = "DATA"


class TrainingDivergedError(P2mxError):
    """Raised when the training loss goes non-finite."""

    code = "NAN"
