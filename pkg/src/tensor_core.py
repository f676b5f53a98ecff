"""
Tensor Core - float64 tensors, compute tape and seeded randomness

Everything downstream (denoiser, baseline, attacks, fine-tuning) computes
through the primitives in this module. Storage and the reverse pass are
torch's; this module adds:

    - a ComputeTape scope that records every primitive executed while it
      is active and owns the backward call,
    - primitives that validate shapes, indices and finiteness,
    - a central-difference gradient checker,
    - counter-based random streams keyed by (seed, stream_id, counter).
"""

import contextvars
import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

DTYPE = torch.float64
Tensor = torch.Tensor
Number = Union[int, float]

_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("active_tape", default=None)


class ShapeError(ValueError):
    """Operands of a primitive have non-conformable shapes."""


class TapeError(RuntimeError):
    """Backward was requested on an empty or disconnected tape."""


def tensor(values, requires_grad: bool = False) -> Tensor:
    """Create a float64 tensor that owns its storage."""
    out = torch.as_tensor(values, dtype=DTYPE).clone()
    out.requires_grad_(requires_grad)
    return out


# ============================================================
# COMPUTE TAPE
# ============================================================

@dataclass
class TapeEntry:
    op: str
    inputs: tuple
    output: Tensor

    @property
    def input_shapes(self) -> tuple:
        return tuple(tuple(t.shape) for t in self.inputs)


class ComputeTape:
    """
    Ordered record of the primitives executed inside a `with` block.

    A tape is confined to the thread/context that entered it. Primitives
    record themselves only when at least one input requires grad, so pure
    inference leaves the tape empty.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._token = None

    def __enter__(self) -> "ComputeTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        self.clear()
        return False

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, op: str, inputs: Sequence, output: Tensor) -> None:
        tensors = tuple(t for t in inputs if isinstance(t, Tensor))
        self.entries.append(TapeEntry(op, tensors, output))

    def ops(self) -> list[str]:
        """Primitive names in execution order."""
        return [entry.op for entry in self.entries]

    def backward_order(self) -> list[str]:
        """Primitive names in the order the reverse pass visits them."""
        return [entry.op for entry in reversed(self.entries)]

    def untracked_inputs(self) -> list[str]:
        """
        Ops fed by a differentiable tensor that is neither a leaf nor the
        output of an earlier entry, i.e. produced by an unrecorded op.
        Empty for a graph built entirely from tensor_core primitives.
        """
        produced: set[int] = set()
        gaps = []
        for entry in self.entries:
            for t in entry.inputs:
                if t.requires_grad and not t.is_leaf and id(t) not in produced:
                    gaps.append(entry.op)
                    break
            produced.add(id(entry.output))
        return gaps

    def clear(self) -> None:
        self.entries.clear()

    def _check_connected(self, loss: Tensor) -> None:
        if len(self.entries) == 0:
            raise TapeError("backward called on an empty tape")
        if not loss.requires_grad:
            raise TapeError("loss is not connected to any tensor that requires grad")

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's .grad."""
        if loss.numel() != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
        self._check_connected(loss)
        logger.debug(f"backward over {len(self.entries)} recorded ops")
        loss.backward()
        self.clear()

    def gradient(self, outputs: Tensor, inputs: Tensor) -> Tensor:
        """
        Gradient of sum(outputs) with respect to `inputs`, without touching
        any .grad buffer (parameters stay clean during attacks).
        """
        self._check_connected(outputs)
        grad = torch.autograd.grad(
            outputs=outputs,
            inputs=inputs,
            grad_outputs=torch.ones_like(outputs),
        )[0]
        self.clear()
        return grad


def current_tape() -> Optional[ComputeTape]:
    return _ACTIVE_TAPE.get()


def backward(loss: Tensor) -> None:
    """Run the reverse pass over the active tape."""
    tape = current_tape()
    if tape is None:
        raise TapeError("backward called with no active tape")
    tape.backward(loss)


def input_gradient(fn: Callable[[Tensor], Tensor], x: Tensor) -> tuple[Tensor, Tensor]:
    """
    Evaluate a per-sample objective and its gradient with respect to x.

    Args:
        fn: maps a batch (B, d) to per-sample values (B,)
        x: input batch; it is copied, never modified

    Returns:
        (values, grad) both detached; grad has the shape of x
    """
    x = x.detach().clone().requires_grad_(True)
    with ComputeTape() as tape:
        values = fn(x)
        grad = tape.gradient(values, x)
    return values.detach(), grad.detach()


# ============================================================
# PRIMITIVES
# ============================================================

def _requires_grad(inputs: Sequence) -> bool:
    return any(isinstance(t, Tensor) and t.requires_grad for t in inputs)


def _finish(op: str, inputs: Sequence, out: Tensor) -> Tensor:
    if out.is_floating_point() and not bool(torch.isfinite(out).all()):
        raise FloatingPointError(f"{op}: non-finite values in result")
    tape = _ACTIVE_TAPE.get()
    if tape is not None and _requires_grad(inputs):
        tape.record(op, inputs, out)
    return out


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(
            f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}"
        ) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("add", a, b)
    return _finish("add", (a, b), a + b)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("subtract", a, b)
    return _finish("subtract", (a, b), a - b)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("multiply", a, b)
    return _finish("multiply", (a, b), a * b)


def scale(a: Tensor, c: Number) -> Tensor:
    return _finish("scale", (a,), a * float(c))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    inner_b = b.shape[0] if b.dim() == 1 else b.shape[-2]
    if a.dim() == 0 or b.dim() == 0 or a.shape[-1] != inner_b:
        raise ShapeError(f"matmul: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return _finish("matmul", (a, b), a @ b)


def affine(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight.T + bias, with weight laid out as (d_out, d_in)."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"affine: shape mismatch {tuple(x.shape)} vs {tuple(weight.shape)}")
    if bias is not None and tuple(bias.shape) != (weight.shape[0],):
        raise ShapeError(f"affine: shape mismatch {tuple(weight.shape)} vs {tuple(bias.shape)}")
    return _finish("affine", (x, weight, bias), F.linear(x, weight, bias))


def silu(x: Tensor) -> Tensor:
    return _finish("silu", (x,), F.silu(x))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis; leading extents must agree."""
    lead = tuple(tensors[0].shape[:-1])
    for t in tensors[1:]:
        if tuple(t.shape[:-1]) != lead:
            raise ShapeError(
                f"concat: shape mismatch {tuple(tensors[0].shape)} vs {tuple(t.shape)}"
            )
    return _finish("concat", tuple(tensors), torch.cat(tuple(tensors), dim=-1))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError(
                f"stack: shape mismatch {tuple(tensors[0].shape)} vs {tuple(t.shape)}"
            )
    return _finish("stack", tuple(tensors), torch.stack(tuple(tensors)))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.reshape(tuple(shape))
    except RuntimeError:
        raise ShapeError(f"reshape: shape mismatch {tuple(a.shape)} vs {tuple(shape)}") from None
    return _finish("reshape", (a,), out)


def broadcast_rows(a: Tensor, n: int) -> Tensor:
    """n copies of a vector (d,) as the rows of an (n, d) matrix."""
    if a.dim() != 1:
        raise ShapeError(f"broadcast_rows: expected a vector, got shape {tuple(a.shape)}")
    return _finish("broadcast_rows", (a,), a.unsqueeze(0).expand(int(n), -1))


def take(a: Tensor, index: Union[int, Tensor]) -> Tensor:
    """Entries of `a` along the leading axis (an int drops that axis)."""
    rows = a.shape[0] if a.dim() else 0
    picked = torch.as_tensor(index, dtype=torch.long)
    if picked.numel() and (int(picked.min()) < -rows or int(picked.max()) >= rows):
        raise IndexError(f"take: index out of range for leading extent {rows}")
    out = a[int(index)] if isinstance(index, int) else a[picked]
    return _finish("take", (a,), out)


def embedding(indices: Tensor, table: Tensor) -> Tensor:
    """Rows of `table` selected by integer `indices`."""
    indices = torch.as_tensor(indices, dtype=torch.long)
    if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= table.shape[0]):
        raise IndexError(
            f"embedding: index out of range for table with {table.shape[0]} rows"
        )
    return _finish("embedding", (table,), F.embedding(indices, table))


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    out = a.mean() if axis is None else a.mean(dim=axis)
    return _finish("mean", (a,), out)


def sum_(a: Tensor, axis: Optional[int] = None) -> Tensor:
    out = a.sum() if axis is None else a.sum(dim=axis)
    return _finish("sum", (a,), out)


def squared_l2(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """||a - b||^2 reduced over `axis`."""
    if a.shape != b.shape:
        raise ShapeError(f"squared_l2: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return _finish("squared_l2", (a, b), ((a - b) ** 2).sum(dim=axis))


def clip(a: Tensor, low: float, high: float) -> Tensor:
    if low > high:
        raise ValueError(f"clip: empty interval [{low}, {high}]")
    return _finish("clip", (a,), torch.clamp(a, low, high))


def log_softmax(logits: Tensor) -> Tensor:
    return _finish("log_softmax", (logits,), F.log_softmax(logits, dim=-1))


def cross_entropy(logits: Tensor, labels: Tensor) -> Tensor:
    """Per-row cross-entropy of integer labels under softmax(logits)."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.dim() != 2 or labels.shape != logits.shape[:1]:
        raise ShapeError(
            f"cross_entropy: shape mismatch {tuple(logits.shape)} vs {tuple(labels.shape)}"
        )
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]):
        raise IndexError(f"cross_entropy: label out of range for {logits.shape[1]} classes")
    out = F.cross_entropy(logits, labels, reduction="none")
    return _finish("cross_entropy", (logits,), out)


# ============================================================
# GRADIENT CHECK
# ============================================================

def _evaluate_at(f: Callable[[Tensor], Tensor], x: Tensor) -> float:
    value = float(f(x))
    if not math.isfinite(value):
        raise FloatingPointError(f"grad_check: non-finite value {value} at sample point")
    return value


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor,
               step: float = 1e-6, floor: float = 1e-12) -> float:
    """
    Compare the tape gradient of a scalar function with central differences.

    Args:
        f: scalar-valued tensor function
        point: where to differentiate
        step: finite-difference step
        floor: added to |numeric| in the denominator

    Returns:
        max over coordinates of |analytic - numeric| / (|numeric| + floor)
    """
    x = point.detach().clone().to(DTYPE).requires_grad_(True)
    with ComputeTape() as tape:
        tape.backward(f(x))
    analytic = x.grad.detach().reshape(-1)

    flat = point.detach().clone().to(DTYPE).reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            original = float(flat[i])
            flat[i] = original + step
            f_plus = _evaluate_at(f, flat.view(point.shape))
            flat[i] = original - step
            f_minus = _evaluate_at(f, flat.view(point.shape))
            flat[i] = original
            numeric[i] = (f_plus - f_minus) / (2.0 * step)

    error = (analytic - numeric).abs() / (numeric.abs() + floor)
    return float(error.max())


# ============================================================
# RANDOM STREAMS
# ============================================================

def stream_key(*parts) -> int:
    """Stable 64-bit identifier for a tuple of names and integers."""
    digest = hashlib.blake2b(repr(parts).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(seed: int, *parts) -> int:
    """Child seed for a named component of a seeded run."""
    return stream_key(int(seed), *parts) >> 1


@dataclass
class RngStream:
    """
    Counter-based random stream (Philox keyed by seed and stream_id).

    Every draw is a pure function of (seed, stream_id, counter) and advances
    the counter past the blocks it consumed, so streams with different ids
    never share draws and the order in which streams are used never matters.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def _draw(self, sample: Callable[[np.random.Generator], np.ndarray]) -> np.ndarray:
        key = (int(self.seed) % 2**64) | ((int(self.stream_id) % 2**64) << 64)
        bitgen = np.random.Philox(key=key, counter=self.counter)
        values = sample(np.random.Generator(bitgen))
        self.counter = int(bitgen.state["state"]["counter"][0]) + 1
        return values

    def spawn(self, *parts) -> "RngStream":
        """Independent stream for a named sub-purpose of this one."""
        return RngStream(self.seed, stream_key(self.stream_id, *parts))

    def normal(self, shape) -> Tensor:
        shape = tuple(shape) if not isinstance(shape, int) else (shape,)
        return tensor(self._draw(lambda g: g.standard_normal(shape)))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> Tensor:
        shape = tuple(shape) if not isinstance(shape, int) else (shape,)
        return tensor(self._draw(lambda g: g.uniform(low, high, size=shape)))

    def integers(self, low: int, high: int, size: int) -> Tensor:
        values = self._draw(lambda g: g.integers(low, high, size=size))
        return torch.as_tensor(values, dtype=torch.long)

    def permutation(self, n: int) -> np.ndarray:
        return self._draw(lambda g: g.permutation(n))


def randn(stream: RngStream, shape) -> Tensor:
    """i.i.d. standard normal draws from `stream`."""
    return stream.normal(shape)
