"""Dense tensors and the reverse-mode gradient tape.

The tape is define-by-run: while a ``Tape`` is active (as a context manager,
per thread), every primitive op appends one record, and ``backward`` replays
the records in exact reverse recording order. Gradients accumulate by
summation at fan-out points. A new tape is built for every forward pass.
"""

from __future__ import annotations

import threading

import numpy as np

from trivit.errors import ContractError

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape():
    """Tape currently recording on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Contiguous row-major float array plus gradient bookkeeping.

    float32 is the working precision; pass float64 arrays (or dtype=) to run
    the verification path. ``grad`` is populated by ``Tape.backward`` and
    accumulates across calls until ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"


class Tape:
    """Ordered record of primitive ops for one forward pass."""

    def __init__(self):
        self._records = []          # (out_id, input_ids, backward_fn)
        self._ids = {}              # id(tensor) -> node id
        self._tensors = []          # node id -> tensor (keeps ids alive)
        self._leaves = {}           # node id -> tensor, requires_grad inputs
        self._produced = set()      # node ids that are op outputs

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def _node_id(self, t):
        nid = self._ids.get(id(t))
        if nid is None:
            nid = len(self._tensors)
            self._ids[id(t)] = nid
            self._tensors.append(t)
            if t.requires_grad and nid not in self._produced:
                self._leaves[nid] = t
        return nid

    def record(self, out, inputs, backward_fn):
        """Append one primitive: ``backward_fn(gy)`` must return one gradient
        array (or None) per input, in order."""
        in_ids = tuple(self._node_id(t) for t in inputs)
        out_id = self._node_id(out)
        self._produced.add(out_id)
        self._leaves.pop(out_id, None)
        self._records.append((out_id, in_ids, backward_fn))

    def backward(self, loss, params=None, accumulate=True):
        """Propagate d(loss)/d(tensor) to every requires_grad leaf.

        Returns {tensor: gradient array}. Leaves that never participated in
        the loss get zeros, as do any extra tensors passed via ``params``.
        Gradients also accumulate into each leaf's ``.grad`` unless
        ``accumulate`` is off (parallel callers reduce the returned dicts
        themselves to keep float summation order fixed).
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {}
        loss_id = self._ids.get(id(loss))
        if loss_id is not None:
            grads[loss_id] = np.ones_like(loss.data)
        for out_id, in_ids, backward_fn in reversed(self._records):
            gy = grads.get(out_id)
            if gy is None:
                continue
            gxs = backward_fn(gy)
            for nid, gx in zip(in_ids, gxs):
                if gx is None:
                    continue
                acc = grads.get(nid)
                grads[nid] = gx if acc is None else acc + gx

        result = {}
        seen = set()
        for t in list(self._leaves.values()) + list(params or ()):
            if id(t) in seen:
                continue
            seen.add(id(t))
            nid = self._ids.get(id(t))
            g = grads.get(nid) if nid is not None else None
            if g is None:
                g = np.zeros_like(t.data)
            result[t] = g
            if accumulate:
                t.grad = g.copy() if t.grad is None else t.grad + g
        return result

    def __len__(self):
        return len(self._records)


def backward(loss, tape=None, params=None):
    """Free-function form: uses the active tape when none is given."""
    tape = tape or active_tape()
    if tape is None:
        raise ContractError("backward called with no active tape")
    return tape.backward(loss, params=params)
