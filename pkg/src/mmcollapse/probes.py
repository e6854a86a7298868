"""Multinomial logistic-regression probes on frozen representations."""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from mmcollapse.neurocore import softmax, softmax_cross_entropy


@dataclass
class LogisticProbe:
    weight: np.ndarray  # (C, d)
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def logits(self, x):
        z = (np.asarray(x, dtype=np.float64) - self.mean) / self.scale
        return z @ self.weight.T + self.bias


def fit_logistic(x, y, num_classes, l2=1e-3, max_iter=500) -> LogisticProbe:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    z = (x - mean) / scale
    d = z.shape[1]

    def objective(theta):
        w = theta[: num_classes * d].reshape(num_classes, d)
        b = theta[num_classes * d:]
        loss, g = softmax_cross_entropy(z @ w.T + b, y)
        loss += 0.5 * l2 * np.sum(w * w)
        gw = g.T @ z + l2 * w
        return loss, np.concatenate([gw.ravel(), g.sum(axis=0)])

    theta0 = np.zeros(num_classes * (d + 1))
    res = minimize(objective, theta0, jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter})
    w = res.x[: num_classes * d].reshape(num_classes, d)
    return LogisticProbe(w, res.x[num_classes * d:], mean, scale)


def logistic_predict(probe: LogisticProbe, x):
    return np.argmax(probe.logits(x), axis=1)


def logistic_loss(probe: LogisticProbe, x, y) -> float:
    return softmax_cross_entropy(probe.logits(x), y)[0]


def logistic_proba(probe: LogisticProbe, x):
    return softmax(probe.logits(x))
