"""Estimator plumbing: parameter introspection and input validation helpers.

The trainable objects in this package follow the scikit-learn estimator
conventions: constructor parameters stored verbatim on the instance,
``get_params``/``set_params`` for composition with pipeline tooling, and
trailing-underscore attributes for anything learned by ``fit``.
"""

from __future__ import annotations

import inspect

import numpy as np


class ParamsMixin:
    """get_params/set_params backed by the constructor signature."""

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [
            name
            for name, p in sig.parameters.items()
            if name != "self" and p.kind not in (p.VAR_POSITIONAL, p.VAR_KEYWORD)
        ]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(
                    f"invalid parameter {name!r} for {type(self).__name__}; "
                    f"valid parameters are {sorted(valid)}"
                )
            setattr(self, name, value)
        return self


def check_array(x, name: str = "array", ndim: int | None = None,
                shape: tuple | None = None, finite: bool = True) -> np.ndarray:
    """Coerce to a float64 ndarray and validate structure.

    ``shape`` entries set to None are unconstrained. Raises ValueError on
    any violation so callers fail before entering numeric kernels.
    """
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name}: expected {ndim} dimensions, got {arr.ndim}")
    if shape is not None:
        if len(shape) != arr.ndim:
            raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
        for want, got in zip(shape, arr.shape):
            if want is not None and want != got:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
    if finite and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite entries")
    return arr


def check_in(value, options, name: str = "value"):
    if value not in options:
        raise ValueError(f"{name}: {value!r} not one of {sorted(options)}")
    return value


def check_positive(value, name: str = "value", strict: bool = True):
    ok = value > 0 if strict else value >= 0
    if not ok:
        cmp = ">" if strict else ">="
        raise ValueError(f"{name}: must be {cmp} 0, got {value}")
    return value
