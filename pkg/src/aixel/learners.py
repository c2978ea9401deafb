"""Small numpy learners shared by the feature suite and the trainer.

Every model exposes ``fit``, ``predict`` and a JSON-safe ``params()`` /
``from_params`` pair so the model store can hash and persist it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UserError


def _standardize(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return mu, sd


@dataclass
class Ridge:
    alpha: float = 1.0
    coef: np.ndarray | None = None
    intercept: float = 0.0
    mu: np.ndarray | None = None
    sd: np.ndarray | None = None
    kind: str = field(default="ridge", init=False)

    def fit(self, X, y, sample_weight=None, init=None, lr_scale: float = 1.0) -> "Ridge":
        X, y = np.asarray(X, float), np.asarray(y, float)
        w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, float)
        self.mu, self.sd = _standardize(X)
        Z = (X - self.mu) / self.sd
        ym = float(np.average(y, weights=w))
        zm = np.average(Z, axis=0, weights=w)
        Zc = Z - zm
        A = (Zc * w[:, None]).T @ Zc + self.alpha * np.eye(Z.shape[1])
        b = (Zc * w[:, None]).T @ (y - ym)
        self.coef = np.linalg.solve(A, b)
        self.intercept = ym - float(zm @ self.coef)
        return self

    def decision(self, X):
        Z = (np.asarray(X, float) - self.mu) / self.sd
        return Z @ self.coef + self.intercept

    predict = decision

    def params(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha, "coef": self.coef.tolist(), "intercept": self.intercept,
                "mu": self.mu.tolist(), "sd": self.sd.tolist()}

    @classmethod
    def from_params(cls, p: dict) -> "Ridge":
        m = cls(p["alpha"])
        m.coef, m.intercept = np.array(p["coef"]), p["intercept"]
        m.mu, m.sd = np.array(p["mu"]), np.array(p["sd"])
        return m


@dataclass
class Logistic:
    """Binary L2 logistic regression by full-batch gradient descent on standardized inputs."""

    alpha: float = 1e-3
    lr: float = 0.5
    epochs: int = 300
    coef: np.ndarray | None = None
    intercept: float = 0.0
    mu: np.ndarray | None = None
    sd: np.ndarray | None = None
    kind: str = field(default="logistic", init=False)

    def fit(self, X, y, sample_weight=None, init: "Logistic | None" = None, lr_scale: float = 1.0) -> "Logistic":
        X, y = np.asarray(X, float), np.asarray(y, float)
        if not set(np.unique(y)) <= {0.0, 1.0}:
            raise UserError("logistic model needs a binary 0/1 target")
        w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, float)
        w = w / w.sum()
        if init is not None:
            # warm start keeps the original scaling so parameters stay comparable
            self.mu, self.sd = init.mu.copy(), init.sd.copy()
            coef, b = init.coef.copy(), init.intercept
        else:
            self.mu, self.sd = _standardize(X)
            coef, b = np.zeros(X.shape[1]), 0.0
        Z = (X - self.mu) / self.sd
        lr = self.lr * lr_scale
        for _ in range(self.epochs):
            p = 1.0 / (1.0 + np.exp(-(Z @ coef + b)))
            g = p - y
            coef = coef - lr * ((Z * (w * g)[:, None]).sum(axis=0) + self.alpha * coef)
            b = b - lr * float(np.sum(w * g))
        self.coef, self.intercept = coef, float(b)
        return self

    def decision(self, X):
        Z = (np.asarray(X, float) - self.mu) / self.sd
        return Z @ self.coef + self.intercept

    def predict(self, X):
        return 1.0 / (1.0 + np.exp(-self.decision(X)))

    def params(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha, "lr": self.lr, "epochs": self.epochs, "coef": self.coef.tolist(),
                "intercept": self.intercept, "mu": self.mu.tolist(), "sd": self.sd.tolist()}

    @classmethod
    def from_params(cls, p: dict) -> "Logistic":
        m = cls(p["alpha"], p["lr"], p["epochs"])
        m.coef, m.intercept = np.array(p["coef"]), p["intercept"]
        m.mu, m.sd = np.array(p["mu"]), np.array(p["sd"])
        return m


@dataclass
class StumpBoost:
    """Gradient-boosted depth-1 trees on the logistic loss (binary) or squared loss."""

    n_rounds: int = 50
    lr: float = 0.3
    task: str = "binary"
    stumps: list = field(default_factory=list)  # (feature, threshold, left, right)
    base: float = 0.0
    kind: str = field(default="stumps", init=False)

    def fit(self, X, y, sample_weight=None, init: "StumpBoost | None" = None, lr_scale: float = 1.0) -> "StumpBoost":
        X, y = np.asarray(X, float), np.asarray(y, float)
        w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, float)
        if init is not None:
            self.stumps, self.base = list(init.stumps), init.base
        else:
            m = float(np.average(y, weights=w))
            self.base = float(np.log(np.clip(m, 1e-6, 1 - 1e-6) / (1 - np.clip(m, 1e-6, 1 - 1e-6)))) if self.task == "binary" else m
            self.stumps = []
        f = self.decision(X)
        cand = [np.unique(np.quantile(X[:, j], np.linspace(0.05, 0.95, 16))) for j in range(X.shape[1])]
        for _ in range(self.n_rounds):
            r = y - (1 / (1 + np.exp(-f)) if self.task == "binary" else f)
            best = None
            for j, ths in enumerate(cand):
                for t in ths:
                    left = X[:, j] <= t
                    wl, wr = w[left].sum(), w[~left].sum()
                    if wl == 0 or wr == 0:
                        continue
                    ml, mr = np.sum(w[left] * r[left]) / wl, np.sum(w[~left] * r[~left]) / wr
                    gain = wl * ml * ml + wr * mr * mr
                    if best is None or gain > best[0]:
                        best = (gain, j, float(t), float(ml), float(mr))
            if best is None:
                break
            _, j, t, ml, mr = best
            step = self.lr * lr_scale
            self.stumps.append((j, t, step * ml, step * mr))
            f = f + np.where(X[:, j] <= t, step * ml, step * mr)
        return self

    def decision(self, X):
        X = np.asarray(X, float)
        f = np.full(len(X), self.base)
        for j, t, left, right in self.stumps:
            f += np.where(X[:, j] <= t, left, right)
        return f

    def predict(self, X):
        f = self.decision(X)
        return 1 / (1 + np.exp(-f)) if self.task == "binary" else f

    def params(self) -> dict:
        return {"kind": self.kind, "n_rounds": self.n_rounds, "lr": self.lr, "task": self.task,
                "stumps": [list(s) for s in self.stumps], "base": self.base}

    @classmethod
    def from_params(cls, p: dict) -> "StumpBoost":
        m = cls(p["n_rounds"], p["lr"], p["task"])
        m.stumps = [tuple(s) for s in p["stumps"]]
        m.base = p["base"]
        return m


LEARNERS = {"ridge": Ridge, "logistic": Logistic, "stumps": StumpBoost}


def from_params(p: dict):
    try:
        return LEARNERS[p["kind"]].from_params(p)
    except KeyError:
        raise UserError(f"unknown learner kind {p.get('kind')!r}") from None


def baseline_for(y) -> Ridge | Logistic:
    """Regularized linear baseline: logistic for a binary target, ridge otherwise."""
    vals = set(np.unique(np.asarray(y, float)))
    return Logistic() if vals <= {0.0, 1.0} else Ridge()
