"""Exception types shared across the package.

Every error carries a short machine-readable ``kind`` so the CLI can emit a
single parsable line (``error: <kind>: <message>``) on failure.
"""


class TreeTxError(Exception):
    kind = "Error"


# tree data model
class MalformedTree(TreeTxError, ValueError):
    kind = "MalformedTree"


class UnknownToken(TreeTxError, KeyError):
    kind = "UnknownToken"

    def __str__(self):
        return Exception.__str__(self)


class KindMismatch(TreeTxError, ValueError):
    kind = "KindMismatch"


class SexprSyntaxError(TreeTxError, ValueError):
    kind = "SyntaxError"


class VocabularyError(TreeTxError, ValueError):
    kind = "VocabularyError"


# numeric core
class ShapeMismatch(TreeTxError, ValueError):
    kind = "ShapeMismatch"


class NonFinite(TreeTxError, FloatingPointError):
    kind = "NonFinite"


# model
class TokenOutOfRange(TreeTxError, IndexError):
    kind = "TokenOutOfRange"


class MaskViolation(TreeTxError, AssertionError):
    kind = "MaskViolation"


# edit distance
class SizeLimit(TreeTxError, ValueError):
    kind = "SizeLimit"


# training
class OversizedExample(TreeTxError, ValueError):
    kind = "OversizedExample"


class DataExhausted(TreeTxError, RuntimeError):
    kind = "DataExhausted"


class CheckpointError(TreeTxError, ValueError):
    kind = "CheckpointError"


class ConfigError(TreeTxError, ValueError):
    kind = "ConfigError"


# decoding
class LimitExceeded(TreeTxError, RuntimeError):
    kind = "LimitExceeded"


class Terminated(TreeTxError, RuntimeError):
    kind = "Terminated"


class IllegalToken(TreeTxError, ValueError):
    kind = "IllegalToken"


# synthetic task generation
class DepthExceeded(TreeTxError, RuntimeError):
    kind = "DepthExceeded"


class PairRejected(TreeTxError, RuntimeError):
    kind = "PairRejected"


class GrammarError(TreeTxError, ValueError):
    kind = "GrammarError"
