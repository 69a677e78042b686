"""Parameter update rules for client- and server-side steps.

``sgd`` applies the textbook step: param -= lr * (grad + l2 * param).
``adam`` keeps first/second moment estimates; the row variant updates
moments lazily so that rarely-touched embedding rows keep unbiased
corrections.  L2 is folded into the gradient before the moment update.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

OPTIMIZERS = ("sgd", "adam")


def check_optimizer(name: str) -> str:
    if name not in OPTIMIZERS:
        raise ConfigError(f"unknown optimizer {name!r}; expected one of {OPTIMIZERS}")
    return name


@dataclass
class SgdState:
    def step(self, param: np.ndarray, grad: np.ndarray, lr: float, l2: float) -> None:
        param -= lr * (grad + l2 * param)

    def step_rows(self, param: np.ndarray, rows: np.ndarray, grad_rows: np.ndarray,
                  lr: float, l2: float) -> None:
        param[rows] -= lr * (grad_rows + l2 * param[rows])


@dataclass
class AdamState:
    """Dense Adam state for one tensor."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, param: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param))

    def step(self, param: np.ndarray, grad: np.ndarray, lr: float, l2: float) -> None:
        g = grad + l2 * param
        self.t += 1
        self.m = ADAM_BETA1 * self.m + (1 - ADAM_BETA1) * g
        self.v = ADAM_BETA2 * self.v + (1 - ADAM_BETA2) * g * g
        m_hat = self.m / (1 - ADAM_BETA1 ** self.t)
        v_hat = self.v / (1 - ADAM_BETA2 ** self.t)
        param -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass
class RowAdamState:
    """Adam over a table where each step touches only some rows.

    Per-row step counters keep bias correction exact for rows that appear
    rarely; untouched rows are left alone entirely.
    """

    m: np.ndarray
    v: np.ndarray
    t: np.ndarray  # (rows,) int64 per-row step counts

    @classmethod
    def like(cls, param: np.ndarray) -> "RowAdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param),
                   t=np.zeros(param.shape[0], dtype=np.int64))

    def step_rows(self, param: np.ndarray, rows: np.ndarray, grad_rows: np.ndarray,
                  lr: float, l2: float) -> None:
        if len(rows) == 0:
            return
        g = grad_rows + l2 * param[rows]
        self.t[rows] += 1
        t = self.t[rows][:, None].astype(np.float64)
        self.m[rows] = ADAM_BETA1 * self.m[rows] + (1 - ADAM_BETA1) * g
        self.v[rows] = ADAM_BETA2 * self.v[rows] + (1 - ADAM_BETA2) * g * g
        m_hat = self.m[rows] / (1 - ADAM_BETA1 ** t)
        v_hat = self.v[rows] / (1 - ADAM_BETA2 ** t)
        param[rows] -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass
class VectorOptimizer:
    """Update rule for a single dense tensor (client e_u, server W and a)."""

    kind: str
    _adam: AdamState | None = field(default=None, repr=False)

    def step(self, param: np.ndarray, grad: np.ndarray, lr: float, l2: float) -> None:
        if self.kind == "sgd":
            SgdState().step(param, grad, lr, l2)
            return
        if self._adam is None:
            self._adam = AdamState.like(param)
        self._adam.step(param, grad, lr, l2)


@dataclass
class TableOptimizer:
    """Update rule for an embedding table touched a few rows at a time."""

    kind: str
    _adam: RowAdamState | None = field(default=None, repr=False)

    def step_rows(self, param: np.ndarray, rows: np.ndarray, grad_rows: np.ndarray,
                  lr: float, l2: float) -> None:
        if self.kind == "sgd":
            SgdState().step_rows(param, rows, grad_rows, lr, l2)
            return
        if self._adam is None:
            self._adam = RowAdamState.like(param)
        self._adam.step_rows(param, rows, grad_rows, lr, l2)
