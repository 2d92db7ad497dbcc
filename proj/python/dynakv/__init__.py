# SPDX-License-Identifier: Apache-2.0
"""Python bindings for the dynakv C++ library.

Reports and configs are returned as plain dicts; tensors as numpy arrays.
"""

import json as _json

from . import _dynakv
from ._dynakv import (  # noqa: F401
    BOS,
    DEFAULT_TAU,
    ConfigError,
    ContractError,
    DimensionError,
    DynakvError,
    InsufficientDataError,
    InvertibilityError,
    IoError,
    NumericError,
    RankError,
    RaggedKVCache,
    combined_budget,
    compute_basis,
    config_hash,
    detokenize,
    harden,
    soft_mask,
    tokenize,
)

__all__ = [
    "BOS",
    "DEFAULT_TAU",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "DynakvError",
    "InsufficientDataError",
    "InvertibilityError",
    "IoError",
    "Model",
    "NumericError",
    "RankError",
    "RaggedKVCache",
    "analyze",
    "bench",
    "calibrate",
    "combined_budget",
    "compute_basis",
    "config_hash",
    "detokenize",
    "evaluate",
    "harden",
    "memory_report",
    "soft_mask",
    "tokenize",
    "train",
]


class Model:
    """Toy transformer with a compressed KV cache."""

    def __init__(self, impl):
        self._impl = impl

    @classmethod
    def init(cls, config, seed=0):
        return cls(_dynakv.Model.init(_json.dumps(config), seed))

    @classmethod
    def load(cls, path):
        return cls(_dynakv.Model.load(str(path)))

    def save(self, path):
        self._impl.save(str(path))

    @property
    def config(self):
        return _json.loads(self._impl.config_json)

    def forward(self, tokens, mode="full", tau=DEFAULT_TAU):
        return self._impl.forward(list(tokens), mode, tau)

    def hard_memory(self, tokens, tau=DEFAULT_TAU):
        return _json.loads(self._impl.hard_memory(list(tokens), tau))


def memory_report(cache):
    return _json.loads(cache.memory_report())


def _command(fn):
    def run(config, seed=None, out=None):
        return _json.loads(fn(str(config), seed, None if out is None else str(out)))

    run.__name__ = fn.__name__
    run.__doc__ = f"Run the {fn.__name__} subcommand from a config file and return its report."
    return run


calibrate = _command(_dynakv.calibrate)
train = _command(_dynakv.train)
evaluate = _command(_dynakv.evaluate)
analyze = _command(_dynakv.analyze)
bench = _command(_dynakv.bench)
