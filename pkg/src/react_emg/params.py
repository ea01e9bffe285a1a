"""Named, grouped parameter collections."""

from __future__ import annotations

import hashlib

import numpy as np

from .ndcore import Tensor


class ParamSet:
    """Ordered mapping of dotted names to leaf tensors.

    Every parameter belongs to one group (``"encoder.conv"``,
    ``"conditioning"``, ...).  Groups carry a freeze flag and a depth tag
    measured from the output side, used for layer-wise learning-rate decay.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._group: dict[str, str] = {}
        self._frozen: set[str] = set()

    def add(self, name, value, group):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=group not in self._frozen)
        self._params[name] = t
        self._group[name] = group
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def group_of(self, name):
        return self._group[name]

    def groups(self):
        return sorted(set(self._group.values()))

    def names(self, groups=None):
        if groups is None:
            return list(self._params)
        groups = _match_groups(groups)
        return [n for n in self._params if groups(self._group[n])]

    # ------------------------------------------------------------ freezing

    def freeze(self, *groups):
        match = _match_groups(groups)
        for name, t in self._params.items():
            if match(self._group[name]):
                self._frozen.add(self._group[name])
                t.requires_grad = False
                t.grad = None

    def unfreeze(self, *groups):
        match = _match_groups(groups)
        for name, t in self._params.items():
            g = self._group[name]
            if match(g):
                self._frozen.discard(g)
                t.requires_grad = True

    def is_frozen(self, group):
        return group in self._frozen

    def trainable(self):
        return [(n, t) for n, t in self._params.items() if t.requires_grad]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    # ------------------------------------------------------------ bookkeeping

    def count(self, groups=None):
        return int(sum(self._params[n].size for n in self.names(groups)))

    def checksum(self, groups=None):
        h = hashlib.sha256()
        for n in self.names(groups):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self._params[n].data).tobytes())
        return h.hexdigest()

    def state_dict(self):
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state_dict(self, state, strict=True):
        missing = [n for n in self._params if n not in state]
        extra = [n for n in state if n not in self._params]
        if strict and (missing or extra):
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for n, arr in state.items():
            if n not in self._params:
                continue
            t = self._params[n]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{n}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def copy(self):
        out = ParamSet()
        for n, t in self._params.items():
            out.add(n, t.data, self._group[n])
        for g in self._frozen:
            out.freeze(g)
        return out


def _match_groups(groups):
    """Predicate matching a group name against names or dotted prefixes."""
    if isinstance(groups, str):
        groups = (groups,)
    groups = tuple(groups)

    def match(g):
        return any(g == p or g.startswith(p + ".") for p in groups)

    return match
