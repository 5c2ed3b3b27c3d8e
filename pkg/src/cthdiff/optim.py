"""Adam with bias correction, operating in place on named numpy arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError


@dataclass
class AdamState:
    """Moment estimates. ``m`` and ``v`` map names to views into flat buffers."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    _flat: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        dtype = np.result_type(*params.values()) if params else np.float64
        total = sum(p.size for p in params.values())
        fm, fv = np.zeros(total, dtype), np.zeros(total, dtype)
        m, v, off = {}, {}, 0
        for k, p in params.items():
            m[k] = fm[off:off + p.size].reshape(p.shape)
            v[k] = fv[off:off + p.size].reshape(p.shape)
            off += p.size
        return cls(0, m, v, (fm, fv))


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              strict: bool = True) -> bool:
    """Apply one Adam update to ``params`` in place.

    Returns False (and leaves everything untouched) when a gradient is
    non-finite and ``strict`` is off; raises :class:`NonFiniteError` naming the
    parameter when ``strict`` is on.
    """
    names = list(params)
    g = np.concatenate([np.ravel(grads[k]) for k in names]) if names else np.zeros(0)
    if not np.isfinite(g).all():
        for name in names:
            if not np.all(np.isfinite(grads[name])):
                if strict:
                    raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
                return False
    if state._flat is None:
        fresh = AdamState.zeros_like(params)
        for k in names:
            fresh.m[k][...] = state.m[k]
            fresh.v[k][...] = state.v[k]
        state.m, state.v, state._flat = fresh.m, fresh.v, fresh._flat
    m, v = state._flat
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    upd = np.sqrt(v / bc2)
    upd += eps
    np.divide(m / bc1, upd, out=upd)
    upd *= lr
    off = 0
    for k in names:
        p = params[k]
        p -= upd[off:off + p.size].reshape(p.shape).astype(p.dtype, copy=False)
        off += p.size
    return True
