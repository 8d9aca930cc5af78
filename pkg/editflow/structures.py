from enum import Enum
from typing import List, NamedTuple, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

# --- Errors ---

class EditFlowError(Exception):
    """Root of every error raised by the package."""


class EditError(EditFlowError, ValueError):
    pass


class AlignmentError(EditFlowError, ValueError):
    pass


class PathError(EditFlowError, ValueError):
    pass


class ModelError(EditFlowError, ValueError):
    pass


class GuidanceError(EditFlowError, ValueError):
    pass


class SamplerError(EditFlowError, RuntimeError):
    pass


class TrainingDivergedError(EditFlowError, RuntimeError):
    pass


class OracleError(EditFlowError, ValueError):
    pass


class ConfigError(EditFlowError, ValueError):
    pass


DEFAULT_MAX_LENGTH = 256

# A sequence is a tuple of token ids whose first entry is always the BOS id.
Sequence = Tuple[int, ...]


class Vocab(BaseModel):
    """Dense integer vocabulary. Content tokens are 0..size-1, BOS is the reserved id `size`.

    BOS sits one past the content ids; every trace, heatmap and checkpoint the
    CLI writes keeps this layout.
    """
    model_config = ConfigDict(frozen=True)

    size: int = Field(ge=1, description="Number of content tokens M.")
    names: Optional[Tuple[str, ...]] = Field(
        default=None,
        description="Optional single-character display names for the content tokens, used only for string round-trips.",
    )

    @model_validator(mode="after")
    def _check_names(self):
        if self.names is not None and len(self.names) != self.size:
            raise ValueError(f"Expected {self.size} token names, got {len(self.names)}")
        return self

    @property
    def bos_id(self) -> int:
        return self.size

    def empty(self) -> Sequence:
        return (self.bos_id,)

    def make(self, tokens) -> Sequence:
        """Prepend BOS to content tokens and validate them."""
        seq = (self.bos_id, *(int(a) for a in tokens))
        self.validate_sequence(seq)
        return seq

    def validate_sequence(self, x: Sequence, max_length: Optional[int] = None) -> None:
        if len(x) == 0 or x[0] != self.bos_id:
            raise EditError("Sequence must start with BOS")
        for a in x[1:]:
            if not 0 <= a < self.size:
                raise EditError(f"Token id {a} is not a content token of a size-{self.size} vocabulary")
        if max_length is not None and len(x) - 1 > max_length:
            raise EditError(f"Sequence has {len(x) - 1} tokens, more than the maximum {max_length}")

    def decode(self, x: Sequence) -> str:
        names = self.names or tuple(chr(ord("A") + a) for a in range(self.size))
        return "".join(names[a] for a in x[1:])

    def encode(self, text: str) -> Sequence:
        names = self.names or tuple(chr(ord("A") + a) for a in range(self.size))
        lookup = {name: a for a, name in enumerate(names)}
        try:
            return (self.bos_id, *(lookup[ch] for ch in text))
        except KeyError as e:
            raise EditError(f"Unknown token name {e.args[0]!r}") from None


# --- Edit operations ---

class EditKind(str, Enum):
    INSERT = "insert"
    DELETE = "delete"
    SUBSTITUTE = "substitute"


class EditOp(NamedTuple):
    kind: EditKind
    pos: int
    token: Optional[int] = None

    def to_record(self) -> dict:
        return {"kind": self.kind.value, "pos": self.pos, "token": self.token}

    @classmethod
    def from_record(cls, record: dict) -> "EditOp":
        return cls(EditKind(record["kind"]), int(record["pos"]), record.get("token"))


def insert(pos: int, token: int) -> EditOp:
    return EditOp(EditKind.INSERT, pos, token)


def delete(pos: int) -> EditOp:
    return EditOp(EditKind.DELETE, pos)


def substitute(pos: int, token: int) -> EditOp:
    return EditOp(EditKind.SUBSTITUTE, pos, token)


def check_edit(x: Sequence, op: EditOp, max_length: Optional[int] = DEFAULT_MAX_LENGTH) -> None:
    n = len(x)
    if op.kind is EditKind.INSERT:
        if not 0 <= op.pos < n:
            raise EditError(f"Insert anchor {op.pos} out of range for length-{n} sequence")
        if op.token is None:
            raise EditError("Insert requires a token")
        if max_length is not None and n > max_length:
            raise EditError(f"Insert would exceed the maximum length {max_length}")
    else:
        if op.pos == 0:
            raise EditError("BOS cannot be deleted or substituted")
        if not 1 <= op.pos < n:
            raise EditError(f"{op.kind.value} anchor {op.pos} out of range for length-{n} sequence")
        if op.kind is EditKind.SUBSTITUTE and op.token is None:
            raise EditError("Substitute requires a token")


def apply_edit(x: Sequence, op: EditOp, max_length: Optional[int] = DEFAULT_MAX_LENGTH) -> Sequence:
    check_edit(x, op, max_length)
    i = op.pos
    if op.kind is EditKind.INSERT:
        return x[: i + 1] + (op.token,) + x[i + 1:]
    if op.kind is EditKind.DELETE:
        return x[:i] + x[i + 1:]
    return x[:i] + (op.token,) + x[i + 1:]


def enumerate_edits(
    x: Sequence, vocab: Vocab, max_length: Optional[int] = DEFAULT_MAX_LENGTH
) -> List[Tuple[EditOp, Sequence]]:
    """Every legal one-edit neighbor of x, as (op, result) pairs.

    Order: insertions by anchor then token, deletions, then substitutions by
    position then token. Distinct ops may produce equal results.
    """
    n = len(x)
    neighbors = []
    if max_length is None or n - 1 < max_length:
        for i in range(n):
            for a in range(vocab.size):
                neighbors.append((insert(i, a), x[: i + 1] + (a,) + x[i + 1:]))
    for i in range(1, n):
        neighbors.append((delete(i), x[:i] + x[i + 1:]))
    for i in range(1, n):
        for a in range(vocab.size):
            if a != x[i]:
                neighbors.append((substitute(i, a), x[:i] + (a,) + x[i + 1:]))
    return neighbors


def apply_simultaneous(x: Sequence, edits: List[EditOp]) -> Sequence:
    """Apply edits that all refer to positions of x.

    At most one delete/substitute and one insert per anchor. At a shared
    anchor the delete/substitute happens first and the insertion lands where
    x[pos] stood.
    """
    changes = {}
    inserts = {}
    for op in edits:
        if op.kind is EditKind.INSERT:
            if op.pos in inserts:
                raise EditError(f"Two insertions at anchor {op.pos}")
            if not 0 <= op.pos < len(x):
                raise EditError(f"Insert anchor {op.pos} out of range")
            inserts[op.pos] = op.token
        else:
            if op.pos in changes:
                raise EditError(f"Two delete/substitute edits at position {op.pos}")
            if not 1 <= op.pos < len(x):
                raise EditError(f"{op.kind.value} anchor {op.pos} out of range")
            changes[op.pos] = op
    out = []
    for i, a in enumerate(x):
        op = changes.get(i)
        if op is None:
            out.append(a)
        elif op.kind is EditKind.SUBSTITUTE:
            out.append(op.token)
        if i in inserts:
            out.append(inserts[i])
    return tuple(out)
