import json

import numpy as np
import pytest

from unorm import normcore
from unorm.numkernel import make_rng
from unorm.state import STATE_VERSION, NormLayerState, NormMethodSpec


def test_spec_defaults():
    s = NormMethodSpec()
    assert (s.method, s.epsilon, s.alpha, s.window_m, s.warmup_steps, s.filtration) == \
        ("un", 1e-5, 0.9, 4, 4000, False)


@pytest.mark.parametrize("kwargs", [
    dict(method="gn"), dict(alpha=0.0), dict(alpha=1.0), dict(window_m=0),
    dict(epsilon=-1e-5), dict(warmup_steps=-1),
    dict(method="bn", filtration=True), dict(window_m=1, filtration=True),
])
def test_spec_rejects(kwargs):
    with pytest.raises(ValueError):
        NormMethodSpec(**kwargs)


def test_spec_dict_roundtrip():
    s = NormMethodSpec(method="pnstar", alpha=0.7, window_m=6, warmup_steps=10)
    assert NormMethodSpec.from_dict(json.loads(json.dumps(s.to_dict()))) == s
    assert NormMethodSpec("ln").offline is False


def test_init_values():
    st = NormLayerState.init(3)
    assert st.gamma.tolist() == [1, 1, 1] and st.beta.tolist() == [0, 0, 0]
    assert st.run_mu.tolist() == [0, 0, 0] and st.run_sigma2.tolist() == [1, 1, 1]
    assert st.psi.tolist() == [0, 0, 0] and st.sigma2_window == [] and st.step == 0
    with pytest.raises(ValueError):
        NormLayerState.init(0)


def test_windows_bounded_and_sliding():
    spec = NormMethodSpec(window_m=3, warmup_steps=0)
    st = NormLayerState.init(2)
    rng = make_rng(0)
    lengths = []
    for _ in range(6):
        y, cache = normcore.train_forward(rng.normal(size=(4, 2)), st, spec)
        normcore.train_backward(rng.normal(size=(4, 2)), cache, st, spec)
        lengths.append((len(st.sigma2_window), len(st.grad_window)))
    assert lengths == [(1, 1), (2, 2), (3, 3), (3, 3), (3, 3), (3, 3)]


def test_state_json_roundtrip():
    spec = NormMethodSpec(window_m=2, warmup_steps=1, filtration=True)
    st = NormLayerState.init(3)
    rng = make_rng(1)
    for _ in range(5):
        _, cache = normcore.train_forward(rng.normal(size=(6, 3)), st, spec)
        normcore.train_backward(rng.normal(size=(6, 3)), cache, st, spec)
    st.outlier_events.append((4, 2))
    back = NormLayerState.from_json(st.to_json())
    assert back.to_dict() == st.to_dict()
    assert json.loads(st.to_json())["version"] == STATE_VERSION


def test_state_rejects_bad_version_and_shapes():
    d = NormLayerState.init(2).to_dict()
    with pytest.raises(ValueError):
        NormLayerState.from_dict({**d, "version": "v0"})
    with pytest.raises(ValueError):
        NormLayerState.from_dict({**d, "psi": [0.0]})


def test_copy_is_deep():
    st = NormLayerState.init(2)
    st.sigma2_window.append(np.ones(2))
    c = st.copy()
    c.sigma2_window[0][0] = 5.0
    c.gamma[0] = 3.0
    assert st.sigma2_window[0][0] == 1.0 and st.gamma[0] == 1.0
