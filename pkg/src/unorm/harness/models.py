"""Pre-norm MLP and single-head transformer stacks with hand-written backward.

Every normalization site feeds linear projections only, so any trained
offline-norm model can be fused. Activations are (B, N, C) and are folded to
(B*N, C) at every norm site.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import normcore
from ..diagnostics import StatsTrace, record_layer
from ..fuse import LinearLayer, fuse_into_linear
from ..methods import ln_backward, ln_forward
from ..numkernel import make_rng
from ..state import NormLayerState, NormMethodSpec
from .layers import (attention_backward, attention_forward, gelu_backward, gelu_forward,
                     linear_backward, linear_forward)

MODEL_VERSION = "unorm-model-v1"
KINDS = ("mlp", "mini_transformer")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "mlp"
    depth: int = 2
    channels: int = 16
    hidden_mult: int = 2
    heads: int = 1
    out_dim: int = 4
    norm: NormMethodSpec = field(default_factory=NormMethodSpec)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.depth < 0 or self.channels < 1 or self.hidden_mult < 1 or self.out_dim < 1:
            raise ValueError("depth >= 0, channels >= 1, hidden_mult >= 1, out_dim >= 1 required")
        if self.heads != 1:
            raise ValueError("only single-head attention is supported")

    @property
    def hidden(self) -> int:
        return self.channels * self.hidden_mult

    def to_dict(self) -> dict:
        return {"kind": self.kind, "depth": self.depth, "channels": self.channels,
                "hidden_mult": self.hidden_mult, "heads": self.heads, "out_dim": self.out_dim,
                "norm": self.norm.to_dict(), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["norm"] = NormMethodSpec.from_dict(d.get("norm", {}))
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


# consumers of each norm site: the linear layers its output feeds
def _norm_sites(cfg: ModelConfig) -> dict:
    sites = {}
    for i in range(cfg.depth):
        p = f"blocks.{i}"
        if cfg.kind == "mlp":
            sites[f"{p}.norm"] = [f"{p}.fc1"]
        else:
            sites[f"{p}.norm_attn"] = [f"{p}.q", f"{p}.k", f"{p}.v"]
            sites[f"{p}.norm_ffn"] = [f"{p}.fc1"]
    if cfg.depth > 0:
        sites["final_norm"] = ["head"]
    return sites


class Model:
    def __init__(self, cfg: ModelConfig, params: dict, norms: dict, fused: bool = False):
        self.cfg = cfg
        self.params = params  # "<linear>.w" / "<linear>.b"
        self.norms = norms  # site -> NormLayerState, or None once fused
        self.fused = fused
        self._tape = None

    # ---- construction -------------------------------------------------
    @property
    def spec(self) -> NormMethodSpec:
        return self.cfg.norm

    def linear_names(self) -> list:
        names = []
        for i in range(self.cfg.depth):
            p = f"blocks.{i}"
            if self.cfg.kind == "mini_transformer":
                names += [f"{p}.q", f"{p}.k", f"{p}.v", f"{p}.o"]
            names += [f"{p}.fc1", f"{p}.fc2"]
        return names + ["head"]

    def parameter_count(self) -> int:
        n = sum(v.size for v in self.params.values())
        if not self.fused:
            n += sum(2 * s.channels for s in self.norms.values())
        return n

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    # ---- forward / backward ---------------------------------------------
    def _norm(self, site, h2, train, tape):
        st = self.norms.get(site) if self.norms else None
        if st is None:
            return h2
        if self.spec.method == "ln":
            y, c = ln_forward(h2, st.gamma, st.beta, self.spec.epsilon)
            tape.append(("ln", site, c))
            return y
        if train:
            y, c = normcore.train_forward(h2, st, self.spec)
            tape.append(("norm", site, c))
            return y
        return normcore.inference_forward(h2, st, self.spec)

    def _lin(self, name, x, tape):
        tape.append(("lin", name, x))
        return linear_forward(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def forward(self, x, train: bool = False):
        """Outputs (B, N, out_dim). ``train`` selects training statistics and
        records a tape for :meth:`backward`."""
        x = np.asarray(x, dtype=np.float64)
        b, n, c = x.shape
        if c != self.cfg.channels:
            raise ValueError(f"input has {c} channels, model expects {self.cfg.channels}")
        tape: list = []
        h = x.reshape(b * n, c)
        for i in range(self.cfg.depth):
            p = f"blocks.{i}"
            if self.cfg.kind == "mini_transformer":
                u = self._norm(f"{p}.norm_attn", h, train, tape)
                q = self._lin(f"{p}.q", u, tape).reshape(b, n, c)
                k = self._lin(f"{p}.k", u, tape).reshape(b, n, c)
                v = self._lin(f"{p}.v", u, tape).reshape(b, n, c)
                o, ac = attention_forward(q, k, v)
                tape.append(("attn", p, ac))
                h = h + self._lin(f"{p}.o", o.reshape(b * n, c), tape)
                ffn_site = f"{p}.norm_ffn"
            else:
                ffn_site = f"{p}.norm"
            u = self._norm(ffn_site, h, train, tape)
            a = self._lin(f"{p}.fc1", u, tape)
            g, t = gelu_forward(a)
            tape.append(("gelu", p, (a, t)))
            h = h + self._lin(f"{p}.fc2", g, tape)
        if self.cfg.depth > 0:
            h = self._norm("final_norm", h, train, tape)
        out = self._lin("head", h, tape)
        if train:
            self._tape = (tape, (b, n, c))
        return out.reshape(b, n, -1)

    def backward(self, dout, trace: StatsTrace | None = None) -> tuple:
        """Backpropagate d(loss)/d(out). Returns (grads, dx) where grads maps
        parameter names (incl. "<site>.gamma"/"<site>.beta") to arrays."""
        if self._tape is None:
            raise RuntimeError("backward called without a training forward pass")
        tape, (b, n, c) = self._tape
        self._tape = None
        grads: dict = {}
        dh = np.asarray(dout, dtype=np.float64).reshape(b * n, -1)
        # walk the tape in reverse, mirroring forward's structure explicitly
        pos = len(tape) - 1

        def pop(kind):
            nonlocal pos
            entry = tape[pos]
            assert entry[0] == kind, (entry[0], kind)
            pos -= 1
            return entry

        def lin_back(dy):
            _, name, xin = pop("lin")
            dx, dw, db = linear_backward(dy, xin, self.params[f"{name}.w"])
            grads[f"{name}.w"] = dw
            grads[f"{name}.b"] = db
            return dx

        def norm_back(dy, site):
            st = self.norms.get(site) if self.norms else None
            if st is None:
                return dy
            kind, s, cache = tape[pos]
            assert s == site
            pop(kind)
            if kind == "ln":
                dx, gg, gb = ln_backward(dy, cache, st.gamma)
            else:
                dx, gg, gb = normcore.train_backward(dy, cache, st, self.spec)
                if trace is not None:
                    record_layer(trace, site, cache, st)
            grads[f"{site}.gamma"] = gg
            grads[f"{site}.beta"] = gb
            return dx

        dh = lin_back(dh)
        if self.cfg.depth > 0:
            dh = norm_back(dh, "final_norm")
        for i in reversed(range(self.cfg.depth)):
            p = f"blocks.{i}"
            dg = lin_back(dh)  # fc2
            _, _, (a, t) = pop("gelu")
            du = lin_back(gelu_backward(dg, a, t))  # fc1
            site = f"{p}.norm_ffn" if self.cfg.kind == "mini_transformer" else f"{p}.norm"
            dh = dh + norm_back(du, site)
            if self.cfg.kind == "mini_transformer":
                do = lin_back(dh).reshape(b, n, c)  # o
                _, _, ac = pop("attn")
                dq, dk, dv = attention_backward(do, ac)
                du = lin_back(dv.reshape(b * n, c))
                du = du + lin_back(dk.reshape(b * n, c))
                du = du + lin_back(dq.reshape(b * n, c))
                dh = dh + norm_back(du, f"{p}.norm_attn")
        assert pos == -1, "tape not fully consumed"
        return grads, dh.reshape(b, n, c)

    def apply_sgd(self, grads: dict, lr: float) -> None:
        for name, g in grads.items():
            if name in self.params:
                self.params[name] -= lr * g
            else:
                site, attr = name.rsplit(".", 1)
                st = self.norms[site]
                setattr(st, attr, getattr(st, attr) - lr * g)

    def predict(self, x):
        return self.forward(x, train=False)

    # ---- fusion -----------------------------------------------------------
    def fuse(self) -> "Model":
        """Fold every frozen norm into the linear layers it feeds."""
        if self.fused:
            return self.copy()
        if not self.spec.offline:
            raise ValueError(f"online method {self.spec.method!r} is not fusable")
        params = {k: v.copy() for k, v in self.params.items()}
        for site, consumers in _norm_sites(self.cfg).items():
            st = self.norms[site]
            mu, sigma2 = normcore.freeze_statistics(st)
            for lin in consumers:
                pair = fuse_into_linear(st.gamma, st.beta, mu, sigma2, self.spec.epsilon,
                                        LinearLayer(params[f"{lin}.w"], params[f"{lin}.b"]))
                params[f"{lin}.w"], params[f"{lin}.b"] = pair.weight_prime, pair.bias_prime
        return Model(self.cfg, params, {site: None for site in self.norms}, fused=True)

    # ---- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "config": self.cfg.to_dict(),
            "fused": self.fused,
            "params": {k: v.tolist() for k, v in self.params.items()},
            "norms": {k: ("identity" if v is None else v.to_dict()) for k, v in self.norms.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Model":
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {d.get('version')!r}")
        cfg = ModelConfig.from_dict(d["config"])
        params = {k: np.asarray(v, dtype=np.float64) for k, v in d["params"].items()}
        norms = {k: (None if v == "identity" else NormLayerState.from_dict(v))
                 for k, v in d["norms"].items()}
        model = cls(cfg, params, norms, fused=bool(d.get("fused", False)))
        expected = set(_norm_sites(cfg))
        if set(norms) != expected:
            raise ValueError(f"norm sites {sorted(norms)} do not match config {sorted(expected)}")
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Model":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_model(cfg: ModelConfig) -> Model:
    rng = make_rng(cfg.seed)
    c, hdim = cfg.channels, cfg.hidden
    # residual branches are down-scaled with depth
    res_scale = 1.0 / np.sqrt(2.0 * max(cfg.depth, 1))
    params = {}

    def lin(name, fan_out, fan_in, scale=1.0):
        params[f"{name}.w"] = rng.normal(0.0, scale / np.sqrt(fan_in), (fan_out, fan_in))
        params[f"{name}.b"] = np.zeros(fan_out)

    for i in range(cfg.depth):
        p = f"blocks.{i}"
        if cfg.kind == "mini_transformer":
            for nm in ("q", "k", "v"):
                lin(f"{p}.{nm}", c, c)
            lin(f"{p}.o", c, c, res_scale)
        lin(f"{p}.fc1", hdim, c)
        lin(f"{p}.fc2", c, hdim, res_scale)
    lin("head", cfg.out_dim, c)
    norms = {site: NormLayerState.init(c) for site in _norm_sites(cfg)}
    return Model(cfg, params, norms)
