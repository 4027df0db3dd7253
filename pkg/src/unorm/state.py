"""Configuration, per-layer training state and forward cache for norm layers."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

METHODS = ("ln", "bn", "mabn", "pnstar", "un")
OFFLINE_METHODS = ("bn", "mabn", "pnstar", "un")
STATE_VERSION = "unorm-state-v1"


@dataclass(frozen=True)
class NormMethodSpec:
    method: str = "un"
    epsilon: float = 1e-5
    alpha: float = 0.9
    window_m: int = 4
    warmup_steps: int = 4000
    filtration: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown norm method {self.method!r}; expected one of {METHODS}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if int(self.window_m) != self.window_m or self.window_m < 1:
            raise ValueError(f"window_m must be a positive integer, got {self.window_m}")
        if not self.epsilon >= 0.0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")
        if self.filtration:
            if self.method != "un":
                raise ValueError("outlier filtration is only defined for method 'un'")
            if self.window_m < 2:
                raise ValueError("filtration requires window_m >= 2")

    @property
    def offline(self) -> bool:
        return self.method in OFFLINE_METHODS

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NormMethodSpec":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass
class NormLayerState:
    """Everything an offline norm layer carries between iterations.

    Windows are newest-first lists of per-channel vectors, at most M long.
    ``sigma2_window`` holds the (possibly passivated) statistics that UN
    smooths over; ``raw_sigma2_window`` holds the observed statistics that
    the outlier test reads.
    """

    gamma: np.ndarray
    beta: np.ndarray
    run_mu: np.ndarray
    run_sigma2: np.ndarray
    psi: np.ndarray
    sigma2_ema: Optional[np.ndarray] = None
    sigma2_window: list = field(default_factory=list)
    grad_window: list = field(default_factory=list)
    raw_sigma2_window: list = field(default_factory=list)
    step: int = 0
    outlier_events: list = field(default_factory=list)

    @classmethod
    def init(cls, channels: int) -> "NormLayerState":
        if channels < 1:
            raise ValueError("channel count must be positive")
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            run_mu=np.zeros(channels),
            run_sigma2=np.ones(channels),
            psi=np.zeros(channels),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def push_window(self, window: list, value: np.ndarray, m: int) -> None:
        window.insert(0, np.array(value, dtype=np.float64))
        del window[m:]

    def copy(self) -> "NormLayerState":
        return NormLayerState.from_dict(self.to_dict())

    def to_dict(self) -> dict:
        return {
            "version": STATE_VERSION,
            "channels": self.channels,
            "gamma": self.gamma.tolist(),
            "beta": self.beta.tolist(),
            "run_mu": self.run_mu.tolist(),
            "run_sigma2": self.run_sigma2.tolist(),
            "psi": self.psi.tolist(),
            "sigma2_ema": None if self.sigma2_ema is None else self.sigma2_ema.tolist(),
            "sigma2_window": [w.tolist() for w in self.sigma2_window],
            "grad_window": [w.tolist() for w in self.grad_window],
            "raw_sigma2_window": [w.tolist() for w in self.raw_sigma2_window],
            "step": self.step,
            "outlier_events": [[int(s), int(c)] for s, c in self.outlier_events],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormLayerState":
        if d.get("version") != STATE_VERSION:
            raise ValueError(f"unsupported state version {d.get('version')!r}")
        arr = lambda v: np.asarray(v, dtype=np.float64)  # noqa: E731
        st = cls(
            gamma=arr(d["gamma"]),
            beta=arr(d["beta"]),
            run_mu=arr(d["run_mu"]),
            run_sigma2=arr(d["run_sigma2"]),
            psi=arr(d["psi"]),
            sigma2_ema=None if d.get("sigma2_ema") is None else arr(d["sigma2_ema"]),
            sigma2_window=[arr(w) for w in d.get("sigma2_window", [])],
            grad_window=[arr(w) for w in d.get("grad_window", [])],
            raw_sigma2_window=[arr(w) for w in d.get("raw_sigma2_window", [])],
            step=int(d["step"]),
            outlier_events=[(int(s), int(c)) for s, c in d.get("outlier_events", [])],
        )
        c = st.channels
        for name in ("beta", "run_mu", "run_sigma2", "psi"):
            if getattr(st, name).shape != (c,):
                raise ValueError(f"{name} does not match channel count {c}")
        return st

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "NormLayerState":
        return cls.from_dict(json.loads(text))


@dataclass
class ForwardCache:
    x: np.ndarray
    z: np.ndarray
    sigma2_hat: np.ndarray
    mu_hat: np.ndarray
    sigma2_t: np.ndarray
    step: int
    warmup: bool = False
    drop_mask: Optional[np.ndarray] = None
    per_channel_triggers: int = 0
    # filled by the backward pass
    g_sigma2: Optional[np.ndarray] = None
    psi_mu: Optional[np.ndarray] = None
    psi_sigma2: Optional[np.ndarray] = None

    @property
    def used_filtration_drop(self) -> bool:
        return self.drop_mask is not None and bool(self.drop_mask.any())
