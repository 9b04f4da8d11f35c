"""Named parameter storage: seeded init, prefix reinit, bit-exact checkpoints.

Every parameter's initial values are drawn from an RNG keyed by
``(seed, parameter name)``, so reinitializing a module prefix with a given
seed is reproducible and independent of creation order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autodiff import Tensor


class UnknownPrefixError(KeyError):
    """No parameter name starts with the requested prefix."""


@dataclass(frozen=True)
class ParamMeta:
    shape: tuple
    kind: str          # "he_uniform" | "zeros"
    fan_in: int | None = None


def _rng_for(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(name.encode()).digest()
    return np.random.default_rng([seed & 0xFFFFFFFFFFFF, int.from_bytes(digest[:6], "big")])


def _init_data(meta: ParamMeta, rng: np.random.Generator) -> np.ndarray:
    if meta.kind == "zeros":
        return np.zeros(meta.shape)
    if meta.kind == "he_uniform":
        bound = math.sqrt(6.0 / meta.fan_in)
        return rng.uniform(-bound, bound, meta.shape)
    raise ValueError(f"unknown init kind {meta.kind!r}")


class ParameterStore:
    """Map of hierarchical names (e.g. ``backbone.conv1.weight``) to tensors."""

    def __init__(self, rng_seed: int):
        self.rng_seed = int(rng_seed)
        self.entries: dict[str, Tensor] = {}
        self.meta: dict[str, ParamMeta] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return sorted(self.entries)

    def add(self, name: str, shape: tuple, kind: str = "he_uniform",
            fan_in: int | None = None) -> Tensor:
        if name in self.entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        if kind == "he_uniform" and not fan_in:
            raise ValueError(f"{name}: he_uniform init needs fan_in")
        meta = ParamMeta(tuple(shape), kind, fan_in)
        t = Tensor(_init_data(meta, _rng_for(self.rng_seed, name)), requires_grad=True)
        self.entries[name] = t
        self.meta[name] = meta
        return t

    def prefixed(self, prefix: str) -> list[str]:
        dotted = prefix if prefix.endswith(".") else prefix + "."
        hit = [n for n in self.names() if n.startswith(dotted) or n == prefix]
        if not hit:
            raise UnknownPrefixError(prefix)
        return hit

    def reinitialize(self, prefix: str, seed: int) -> list[str]:
        """Resample all parameters under ``prefix`` from their init distribution.

        Entries outside the prefix are untouched (bytewise). Returns the names
        that were resampled.
        """
        names = self.prefixed(prefix)
        for name in names:
            fresh = _init_data(self.meta[name], _rng_for(int(seed), name))
            self.entries[name].data[...] = fresh
            self.entries[name].grad = None
        return names

    def zero_grads(self):
        for t in self.entries.values():
            t.zero_grad()

    def iter_params(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self.entries[name]

    def checksum(self, prefix: str = "") -> str:
        """sha256 over the raw bytes of all parameters under ``prefix``."""
        h = hashlib.sha256()
        names = self.prefixed(prefix) if prefix else self.names()
        for name in names:
            h.update(name.encode())
            h.update(self.entries[name].data.tobytes())
        return h.hexdigest()

    def copy(self) -> "ParameterStore":
        dup = ParameterStore(self.rng_seed)
        for name in self.names():
            dup.entries[name] = Tensor(self.entries[name].data.copy(), requires_grad=True)
            dup.meta[name] = self.meta[name]
        return dup

    # ------------------------------------------------------------- checkpoint
    def save(self, path):
        meta_json = json.dumps({
            "rng_seed": self.rng_seed,
            "params": {n: {"shape": list(m.shape), "kind": m.kind, "fan_in": m.fan_in}
                       for n, m in self.meta.items()},
        })
        arrays = {f"param/{n}": t.data for n, t in self.entries.items()}
        np.savez(path, __meta__=np.frombuffer(meta_json.encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path) -> "ParameterStore":
        with np.load(path) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            store = cls(meta["rng_seed"])
            for name, pm in meta["params"].items():
                data = z[f"param/{name}"]
                store.entries[name] = Tensor(data, requires_grad=True)
                store.meta[name] = ParamMeta(tuple(pm["shape"]), pm["kind"], pm["fan_in"])
        return store
