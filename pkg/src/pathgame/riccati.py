"""Riccati ODE oracle for the linear-quadratic zero-sum game.

Dynamics dx = (A x + B1 u + B2 v) dt + S dB, running cost
x'Qx + u'R1u - v'R2v, terminal cost x'Gx; Player 1 (u) minimizes.  The
value is x'P(t)x + c(t) with

    P' + A'P + PA + Q - P (B1 R1^-1 B1' - B2 R2^-1 B2') P = 0,  P(T) = G,
    c' + tr(S S' P) = 0,                                         c(T) = 0.

The ODE is integrated backward with scipy, independently of the tree and
regression solvers it is used to check.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp


def _mat(x, shape=None):
    arr = np.atleast_2d(np.asarray(x, dtype=float))
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class LQParams:
    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    Q: np.ndarray
    R1: np.ndarray
    R2: np.ndarray
    G: np.ndarray
    S: np.ndarray
    horizon: float

    @classmethod
    def from_dict(cls, d: dict) -> "LQParams":
        A = _mat(d["A"])
        n = A.shape[0]
        B1 = _mat(d["B1"]).reshape(n, -1)
        B2 = _mat(d["B2"]).reshape(n, -1)
        S = _mat(d.get("sigma", d.get("S", np.eye(n)))).reshape(n, -1)
        return cls(A, B1, B2, _mat(d["Q"], (n, n)), _mat(d["R1"]), _mat(d["R2"]), _mat(d["G"], (n, n)), S,
                   float(d["horizon"]))

    @property
    def n(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    params: LQParams
    _sol: object

    def P(self, t: float) -> np.ndarray:
        n = self.params.n
        return self._sol.sol(t)[: n * n].reshape(n, n)

    def c(self, t: float) -> float:
        return float(self._sol.sol(t)[-1])

    def value(self, t: float, x) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return float(x @ self.P(t) @ x + self.c(t))

    def gain_u(self, t: float) -> np.ndarray:
        """u* = gain_u(t) @ x."""
        p = self.params
        return -np.linalg.solve(p.R1, p.B1.T @ self.P(t))

    def gain_v(self, t: float) -> np.ndarray:
        p = self.params
        return np.linalg.solve(p.R2, p.B2.T @ self.P(t))


def solve_riccati(params: LQParams, rtol: float = 1e-12, atol: float = 1e-14) -> RiccatiSolution:
    p = params
    n = p.n
    M = p.B1 @ np.linalg.solve(p.R1, p.B1.T) - p.B2 @ np.linalg.solve(p.R2, p.B2.T)
    SS = p.S @ p.S.T

    def rhs(t, z):
        P = z[: n * n].reshape(n, n)
        dP = -(p.A.T @ P + P @ p.A + p.Q - P @ M @ P)
        dc = -np.trace(SS @ P)
        return np.append(dP.ravel(), dc)

    z_T = np.append(p.G.ravel(), 0.0)
    sol = solve_ivp(rhs, (p.horizon, 0.0), z_T, method="DOP853", rtol=rtol, atol=atol, dense_output=True)
    if not sol.success:
        raise RuntimeError(f"Riccati integration failed: {sol.message}")
    return RiccatiSolution(p, sol)
