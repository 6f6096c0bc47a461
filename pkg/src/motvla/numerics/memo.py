"""Recording and replay of op calls for repeated evaluations of one function.

The finite-difference oracle evaluates the same loss thousands of times with
a single parameter entry nudged.  A :class:`ReplayCache` records every op
call of one baseline evaluation; :meth:`ReplayCache.propagate` then skips the
surrounding Python code and re-executes only the recorded ops downstream of
the nudged tensor.  A recomputed output equal to the recorded one stops the
recomputation from spreading further.

This is exact as long as code outside the ops reads tensor values only
through functions marked with :func:`decision`.  A decision whose output
changes raises :class:`ReplayDiverged` and the caller must fall back to a
full evaluation.
"""
from __future__ import annotations

import functools
import heapq

import numpy as np

from .tensor import Tensor, active_tape

_CACHES: list["ReplayCache"] = []


class ReplayDiverged(RuntimeError):
    """A data-dependent decision changed, so the recorded graph no longer applies."""


class _Entry:
    __slots__ = ("fn", "args", "kwargs", "out", "end", "deps", "decision", "flat", "radius", "snap")

    def __init__(self, fn, args, kwargs, out, end, decision, radius=0.0):
        self.fn, self.args, self.kwargs, self.out, self.end = fn, args, kwargs, out, end
        self.decision = decision
        self.deps = frozenset(id(t) for t in _tensors((args, kwargs)))
        # positional arguments with no nesting take a cheaper substitution path
        self.flat = not kwargs and not any(isinstance(a, (tuple, list, dict)) for a in args)
        self.radius = radius
        self.snap = {id(t): t.data.copy() for t in _tensors((args, kwargs))} if radius > 0 else None

    def arguments(self, changed: dict):
        if self.flat:
            return [changed.get(id(a), a) if type(a) is Tensor else a for a in self.args], {}
        return _substitute(self.args, changed), _substitute(self.kwargs, changed)

    def within_radius(self, changed: dict) -> bool:
        """True when every changed tensor argument moved less than the recorded radius."""
        if not self.snap:
            return False
        for key, old in self.snap.items():
            new = changed.get(key)
            if new is not None and new.data.shape == old.shape:
                if not np.abs(new.data - old).max(initial=0.0) < self.radius:
                    return False
            elif new is not None:
                return False
        return True


def _tensors(obj):
    if isinstance(obj, Tensor):
        yield obj
    elif isinstance(obj, (tuple, list)):
        for x in obj:
            yield from _tensors(x)
    elif isinstance(obj, dict):
        for x in obj.values():
            yield from _tensors(x)


def _substitute(obj, changed: dict):
    if isinstance(obj, Tensor):
        return changed.get(id(obj), obj)
    if isinstance(obj, tuple):
        return tuple(_substitute(x, changed) for x in obj)
    if isinstance(obj, list):
        return [_substitute(x, changed) for x in obj]
    if isinstance(obj, dict):
        return {k: _substitute(v, changed) for k, v in obj.items()}
    return obj


def _equal_values(a, b) -> bool:
    if isinstance(a, Tensor):
        a = a.data
    if isinstance(b, Tensor):
        b = b.data
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        a, b = np.asarray(a), np.asarray(b)
        return a.shape == b.shape and bool((a == b).all())
    if isinstance(a, (tuple, list)):
        return isinstance(b, (tuple, list)) and len(a) == len(b) and all(map(_equal_values, a, b))
    return type(a) is type(b) and bool(a == b)


class ReplayCache:
    def __init__(self):
        self.entries: list[_Entry | None] = []
        self._top: list[_Entry] | None = None
        self._differs: dict[frozenset, set[int]] = {}

    def __enter__(self) -> "ReplayCache":
        _CACHES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _CACHES.pop()
        assert popped is self

    def call(self, fn, args, kwargs, decision: bool = False, radius=None):
        i = len(self.entries)
        self.entries.append(None)
        out = fn(*args, **kwargs)
        if isinstance(out, Tensor) and out.data.base is not None:
            # a view could alias a parameter that is later perturbed in place
            out.data = out.data.copy()
        r = float(radius(*args, **kwargs)) if radius is not None else 0.0
        self.entries[i] = _Entry(fn, args, kwargs, out, len(self.entries), decision, r)
        self._top = None
        return out

    # --- dataflow replay -----------------------------------------------------

    def _top_level(self) -> list[_Entry]:
        if self._top is None:
            top, i = [], 0
            while i < len(self.entries):
                e = self.entries[i]
                top.append(e)
                i = e.end
            self._top = top
            self._consumers: dict[int, list[int]] = {}
            for j, e in enumerate(top):
                for key in e.deps:
                    self._consumers.setdefault(key, []).append(j)
        return self._top

    def propagate(self, result, sources) -> object:
        """Recompute ``result`` after the tensors in ``sources`` changed in place.

        Only recorded ops reachable from ``sources`` run, in recording order.
        Raises :class:`ReplayDiverged` when a recorded decision would come out
        differently.
        """
        top = self._top_level()
        consumers = self._consumers
        changed = {id(t): t for t in sources}
        # entries already seen to change for these sources skip the equality probe
        differs = self._differs.setdefault(frozenset(changed), set())
        queue = sorted({j for key in changed for j in consumers.get(key, ())})
        queued = set(queue)
        while queue:
            i = heapq.heappop(queue)
            e = top[i]
            if e.decision:
                if e.within_radius(changed):
                    continue
                args, kwargs = e.arguments(changed)
                if not _equal_values(e.fn(*args, **kwargs), e.out):
                    raise ReplayDiverged(getattr(e.fn, "__name__", "decision"))
                continue
            args, kwargs = e.arguments(changed)
            out = e.fn(*args, **kwargs)
            if i not in differs:
                if isinstance(out, Tensor) and _equal_values(out, e.out):
                    continue
                differs.add(i)
            changed[id(e.out)] = out
            for j in consumers.get(id(e.out), ()):
                if j not in queued:
                    queued.add(j)
                    heapq.heappush(queue, j)
        return _substitute(result, changed)


def replayable(fn):
    """Route calls of ``fn`` through the active :class:`ReplayCache`, if any."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        if not _CACHES or active_tape() is not None:
            return fn(*args, **kwargs)
        return _CACHES[-1].call(fn, args, kwargs)

    return wrapper


def decision(fn=None, *, radius=None):
    """Mark ``fn`` as reading tensor values to make a non-differentiable choice.

    Code outside of ops must read tensor values only through such functions
    so that dataflow replay can detect when a choice flips.  ``fn`` receives
    its tensors as direct (or list/tuple nested) arguments.

    ``radius``, called with the same arguments, returns a distance such that
    moving every tensor argument by less than it (in max-norm) provably
    leaves the output unchanged; replay then reuses the recorded output.
    """
    if fn is None:
        return functools.partial(decision, radius=radius)

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        if not _CACHES or active_tape() is not None:
            return fn(*args, **kwargs)
        return _CACHES[-1].call(fn, args, kwargs, decision=True, radius=radius)

    return wrapper
