"""Deterministic synthetic tasks with optional outlier injection."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from ..numkernel import make_rng

TASKS = ("sequence_mean_regression", "token_copy_classification")


@dataclass(frozen=True)
class SyntheticTask:
    kind: str = "sequence_mean_regression"
    batch: int = 32
    tokens: int = 8
    channels: int = 16
    out_dim: int = 4
    noise: float = 0.1
    # (period, magnitude): every `period` steps a random 25% of samples is scaled
    outlier_injection: Optional[Tuple[int, float]] = None
    outlier_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown task {self.kind!r}; expected one of {TASKS}")
        if self.batch < 1 or self.tokens < 1 or self.channels < 1:
            raise ValueError("batch, tokens and channels must be positive")
        if self.outlier_injection is not None:
            period, mag = self.outlier_injection
            if period < 1 or mag <= 0:
                raise ValueError("outlier_injection needs period >= 1 and magnitude > 0")

    @property
    def output_dim(self) -> int:
        return self.out_dim if self.kind == "sequence_mean_regression" else self.classes

    @property
    def classes(self) -> int:
        return self.out_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["outlier_injection"] = None if self.outlier_injection is None else list(self.outlier_injection)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTask":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if d.get("outlier_injection") is not None:
            d["outlier_injection"] = tuple(d["outlier_injection"])
        return cls(**d)

    def _teacher(self):
        rng = make_rng(self.seed + 7919)
        if self.kind == "sequence_mean_regression":
            return rng.normal(0, 1.0, (self.out_dim, self.channels))
        return rng.normal(0, 1.0, (self.classes, self.channels))

    def injects_at(self, step: int) -> bool:
        return self.outlier_injection is not None and step > 0 and step % self.outlier_injection[0] == 0

    def batch_at(self, step: int, eval_batch: bool = False):
        """Inputs (B, N, C) and targets for one step; targets use clean inputs."""
        rng = make_rng(np.random.SeedSequence([self.seed, step, int(eval_batch)]).generate_state(1)[0])
        teacher = self._teacher()
        b, n, c = self.batch, self.tokens, self.channels
        if self.kind == "sequence_mean_regression":
            x = rng.normal(0, 1.0, (b, n, c))
            y = x.mean(axis=1) @ teacher.T + self.noise * rng.normal(size=(b, self.out_dim))
        else:
            labels = rng.integers(0, self.classes, (b, n))
            x = teacher[labels] + self.noise * rng.normal(size=(b, n, c))
            y = labels
        if not eval_batch and self.injects_at(step):
            k = max(1, int(round(self.outlier_fraction * b)))
            rows = rng.choice(b, size=k, replace=False)
            x = x.copy()
            x[rows] *= self.outlier_injection[1]
        return x, y

    def loss(self, out, y):
        """Scalar loss and d(loss)/d(out) for model outputs of shape (B, N, D)."""
        b, n, d = out.shape
        if self.kind == "sequence_mean_regression":
            pred = out.mean(axis=1)
            r = pred - y
            loss = 0.5 * float(np.sum(r * r)) / b
            dout = np.repeat((r / b)[:, None, :], n, axis=1) / n
            return loss, dout
        logits = out.reshape(b * n, d)
        lab = np.asarray(y).reshape(-1)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -float(np.mean(logp[np.arange(lab.size), lab]))
        p = np.exp(logp)
        p[np.arange(lab.size), lab] -= 1.0
        return loss, (p / lab.size).reshape(b, n, d)

    def least_squares_floor(self) -> float:
        """Expected loss of the optimal linear readout (noise floor)."""
        if self.kind != "sequence_mean_regression":
            return 0.0
        return 0.5 * self.out_dim * self.noise ** 2
