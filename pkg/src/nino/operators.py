from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

KINDS = ("additive", "multiplicative", "mixed")


@dataclass(frozen=True)
class OperatorSet:
    """Drift and noise operators of a linear SDE model.

    ``additive``:        dx = A x dt + S dW
    ``multiplicative``:  dx = A x dt + S1 x dW
    ``mixed``:           dx = A x dt + S1 x dW1 + S dW2

    ``S`` is an ``(n, q)`` noise factor, ``S1`` a square matrix. When
    ``basis`` is set the state lives in reduced (EOF) coordinates and grid
    fields are recovered as ``basis @ x``.
    """

    kind: str
    A: object
    S: np.ndarray | None = None
    S1: np.ndarray | None = None
    lag_tau: float = float("nan")
    basis: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        A = self.A if sp.issparse(self.A) else np.asarray(self.A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got shape {A.shape}")
        object.__setattr__(self, "A", A)
        n = A.shape[0]
        needs_S = self.kind in ("additive", "mixed")
        needs_S1 = self.kind in ("multiplicative", "mixed")
        if needs_S and self.S is None:
            raise ValueError(f"{self.kind} model needs an additive noise factor S")
        if needs_S1 and self.S1 is None:
            raise ValueError(f"{self.kind} model needs a multiplicative noise matrix S1")
        if not needs_S and self.S is not None:
            raise ValueError("multiplicative model carries no additive factor S")
        if not needs_S1 and self.S1 is not None:
            raise ValueError("additive model carries no multiplicative matrix S1")
        if self.S is not None:
            S = np.asarray(self.S, dtype=float)
            if S.ndim == 1:
                S = S.reshape(-1, 1)
            if S.shape[0] != n:
                raise ValueError(f"S has {S.shape[0]} rows, A is {n}x{n}")
            object.__setattr__(self, "S", S)
        if self.S1 is not None:
            S1 = self.S1 if sp.issparse(self.S1) else np.asarray(self.S1, dtype=float)
            if S1.shape != (n, n):
                raise ValueError(f"S1 must be {n}x{n}, got {S1.shape}")
            object.__setattr__(self, "S1", S1)
        if self.basis is not None:
            basis = np.asarray(self.basis, dtype=float)
            if basis.ndim != 2 or basis.shape[1] != n:
                raise ValueError(f"basis must have {n} columns")
            object.__setattr__(self, "basis", basis)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def dense_A(self) -> np.ndarray:
        return self.A.toarray() if sp.issparse(self.A) else self.A

    def with_kind(self, kind, **changes) -> "OperatorSet":
        return replace(self, kind=kind, **changes)

    def lift(self, x):
        """Map reduced-state vectors (last axis) back to grid values."""
        x = np.asarray(x)
        return x if self.basis is None else x @ self.basis.T

    def reduce(self, field_values):
        v = np.asarray(field_values, dtype=float)
        return v if self.basis is None else v @ self.basis
