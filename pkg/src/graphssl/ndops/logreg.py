from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from graphssl.ndops import autodiff as ad
from graphssl.ndops.optim import AdamState, adam_step


@dataclass
class LogisticRegression:
    """Multinomial logistic regression trained full-batch with Adam."""

    num_classes: int
    steps: int = 200
    lr: float = 0.1
    weight_decay: float = 1e-4
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    def fit(self, x: np.ndarray, y: np.ndarray, rows=None) -> "LogisticRegression":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        rows = np.arange(len(x)) if rows is None else np.asarray(rows)
        params = {"weight": np.zeros((x.shape[1], self.num_classes)),
                  "bias": np.zeros(self.num_classes)}
        state = AdamState()
        xc = ad.const(x[rows])
        y_rows = y[rows]
        idx = np.arange(len(rows))
        for _ in range(self.steps):
            w, b = ad.param(params["weight"]), ad.param(params["bias"])
            loss = ad.softmax_cross_entropy(ad.add_bias(ad.matmul(xc, w), b), y_rows, idx)
            loss.backward()
            adam_step(params, {"weight": w.grad, "bias": b.grad}, state, self.lr,
                      self.weight_decay, decay_keys={"weight"})
        self.weight, self.bias = params["weight"], params["bias"]
        return self

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return ad.softmax(np.asarray(x, dtype=np.float64) @ self.weight + self.bias)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=1)
