import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascnn import tensor as T
from cascnn.data import Sample
from cascnn.errors import ConfigError, DimensionError
from cascnn.gradcheck import check_gradients
from cascnn.model import (
    BaselineConfig,
    CasCnn,
    ModelConfig,
    attention_width,
    build_baseline_cnn,
    channel_attention,
    gate_branch,
    load_checkpoint,
    save_checkpoint,
    split_conv,
)
from oracles import add_loop, channel_attention_loop, conv1x1_loop, conv2d_loop, relu_scalar


def random_sample(n, x=5, y=5, seed=0):
    rng = np.random.default_rng(seed)
    return Sample(rng.uniform(size=(x, n, n)), rng.uniform(size=(y, n)), rng.uniform(size=(y, n)),
                  rng.uniform(size=(n, n)), day=x, interval=y)


def attention_net(rng, channels, hidden):
    return {
        "w1": T.Tensor(rng.normal(size=(hidden, channels)), requires_grad=True),
        "b1": T.Tensor(rng.normal(size=hidden), requires_grad=True),
        "w2": T.Tensor(rng.normal(size=(channels, hidden)), requires_grad=True),
        "b2": T.Tensor(rng.normal(size=channels), requires_grad=True),
    }


def randomize(model, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.values[...] = rng.normal(scale=scale, size=p.shape)
    return model


# -- channel attention -------------------------------------------------------------

def test_zero_attention_net_halves_the_input():
    x = np.random.default_rng(0).normal(size=(3, 4, 4))
    net = {"w1": np.zeros((1, 3)), "b1": np.zeros(1), "w2": np.zeros((3, 1)), "b2": np.zeros(3)}
    scaled, delta = channel_attention(x, net)
    np.testing.assert_array_equal(delta.values, [0.5, 0.5, 0.5])
    np.testing.assert_array_equal(scaled.values, 0.5 * x)


def test_attention_width_floors_to_one():
    assert attention_width(1, 2) == 1
    assert attention_width(16, 2) == 8
    assert attention_width(5, 2) == 2
    model = CasCnn(ModelConfig(n=3, x=1, y=2))
    assert model.params["input_ca.w1"].shape == (1, 1)


@pytest.mark.parametrize("seed", range(10))
def test_attention_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 6))
    h = attention_width(c, 2)
    x = rng.normal(size=(c, 3, 4))
    net = attention_net(rng, c, h)
    scaled, delta = channel_attention(x, net)
    want_scaled, want_delta = channel_attention_loop(x.tolist(), *(net[k].values.tolist() for k in ("w1", "b1", "w2", "b2")))
    np.testing.assert_allclose(delta.values, want_delta, rtol=1e-12)
    np.testing.assert_allclose(scaled.values, want_scaled, rtol=1e-12, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_attention_stays_inside_unit_interval(seed):
    rng = np.random.default_rng(seed)
    _, delta = channel_attention(rng.normal(size=(4, 3, 3)), attention_net(rng, 4, 2))
    assert np.all((delta.values > 0) & (delta.values < 1))


# -- split convolution -----------------------------------------------------------

def branch(rng, c_in, c_out, k, zero=False):
    w = np.zeros((c_out, c_in, k, k)) if zero else rng.normal(size=(c_out, c_in, k, k))
    b = np.zeros(c_out) if zero else rng.normal(size=c_out)
    return T.Tensor(w, requires_grad=True), T.Tensor(b, requires_grad=True)


def test_zeroed_5x5_branch_leaves_the_3x3_branch():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 5))
    b3 = branch(rng, 2, 3, 3)
    both = split_conv(x, {3: b3, 5: branch(rng, 2, 3, 5, zero=True)})
    np.testing.assert_array_equal(both.values, T.conv2d_same(x, *b3).values)


def test_single_kernel_is_a_plain_convolution():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 4, 4))
    b3 = branch(rng, 2, 1, 3)
    np.testing.assert_array_equal(split_conv(x, {3: b3}).values, T.conv2d_same(x, *b3).values)


@pytest.mark.parametrize("seed", range(5))
def test_split_matches_sum_of_branch_oracles(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 5, 5))
    b3, b5 = branch(rng, 2, 2, 3), branch(rng, 2, 2, 5)
    want = add_loop(conv2d_loop(x.tolist(), b3[0].values.tolist(), b3[1].values.tolist()),
                    conv2d_loop(x.tolist(), b5[0].values.tolist(), b5[1].values.tolist()))
    np.testing.assert_allclose(split_conv(x, {3: b3, 5: b5}).values, want, rtol=1e-12, atol=1e-12)


# -- gate --------------------------------------------------------------------------

def gate_params(rng, n, y, w=None):
    return {
        "inflow.weight": T.Tensor(rng.normal(size=(1, y))),
        "inflow.bias": T.Tensor(rng.normal(size=1)),
        "outflow.weight": T.Tensor(rng.normal(size=(1, y))),
        "outflow.bias": T.Tensor(rng.normal(size=1)),
        "w": T.Tensor(rng.normal(size=n) if w is None else np.asarray(w, dtype=float)),
    }


def gate_oracle(inflow, outflow, p, use_in=True, use_out=True):
    n = inflow.shape[1]
    a_in = conv1x1_loop(inflow.reshape(-1, n, 1).tolist(), p["inflow.weight"].values.tolist(), p["inflow.bias"].values.tolist())
    a_out = conv1x1_loop(outflow.reshape(-1, n, 1).tolist(), p["outflow.weight"].values.tolist(), p["outflow.bias"].values.tolist())
    out = []
    for i in range(n):
        v = p["w"].values[i]
        if use_in:
            v *= a_in[0][i][0]
        if use_out:
            v *= a_out[0][i][0]
        out.append(v)
    return out


def test_closed_gate():
    rng = np.random.default_rng(0)
    p = gate_params(rng, 4, 3, w=np.zeros(4))
    assert not gate_branch(rng.uniform(size=(3, 4)), rng.uniform(size=(3, 4)), p).values.any()


def test_zero_inflow_conv_closes_the_gate():
    rng = np.random.default_rng(1)
    p = gate_params(rng, 4, 3)
    p["inflow.weight"] = T.Tensor(np.zeros((1, 3)))
    p["inflow.bias"] = T.Tensor(np.zeros(1))
    assert not gate_branch(rng.uniform(size=(3, 4)), rng.normal(size=(3, 4)) * 100, p).values.any()


@pytest.mark.parametrize("use_in,use_out", [(True, True), (False, True), (True, False)])
def test_gate_matches_oracle(use_in, use_out):
    rng = np.random.default_rng(2)
    p = gate_params(rng, 5, 4)
    inflow, outflow = rng.uniform(size=(4, 5)), rng.uniform(size=(4, 5))
    got = gate_branch(inflow, outflow, p, no_inflow=not use_in, no_outflow=not use_out).values
    np.testing.assert_allclose(got, gate_oracle(inflow, outflow, p, use_in, use_out), rtol=1e-12, atol=1e-14)


def test_gate_without_either_flow_is_a_config_error():
    rng = np.random.default_rng(3)
    with pytest.raises(ConfigError):
        gate_branch(np.ones((2, 3)), np.ones((2, 3)), gate_params(rng, 3, 2), no_inflow=True, no_outflow=True)


def test_gate_station_axis_mismatch():
    rng = np.random.default_rng(4)
    with pytest.raises(DimensionError, match="inflow station axis"):
        gate_branch(np.ones((2, 4)), np.ones((2, 3)), gate_params(rng, 3, 2))


# -- full forward ------------------------------------------------------------------

def forward_oracle(model, sample):
    """Straight-line recomputation from the loop oracles and the raw parameter values."""
    c = model.config
    v = {name: p.values.tolist() for name, p in model.params.items()}
    h = sample.history.tolist()
    if not c.no_channel_attention:
        h, _ = channel_attention_loop(h, v["input_ca.w1"], v["input_ca.b1"], v["input_ca.w2"], v["input_ca.b2"])
    hidden = None
    for k in c.active_kernels:
        y = conv2d_loop(h, v[f"layer1.k{k}.weight"], v[f"layer1.k{k}.bias"])
        if not c.no_channel_attention:
            y, _ = channel_attention_loop(y, *(v[f"layer1.k{k}.ca.{p}"] for p in ("w1", "b1", "w2", "b2")))
        hidden = y if hidden is None else add_loop(hidden, y)
    hidden = [[[relu_scalar(a) for a in row] for row in ch] for ch in hidden]
    trunk = None
    for k in c.active_kernels:
        y = conv2d_loop(hidden, v[f"layer2.k{k}.weight"], v[f"layer2.k{k}.bias"])
        trunk = y if trunk is None else add_loop(trunk, y)
    trunk = trunk[0]
    if c.uses_gate:
        gate = gate_oracle(sample.inflow_win, sample.outflow_win,
                           {k: T.Tensor(np.asarray(model.params[f"gate.{k}"].values)) for k in
                            ("inflow.weight", "inflow.bias", "outflow.weight", "outflow.bias", "w")
                            if f"gate.{k}" in model.params} | _missing_gate(model),
                           not c.no_inflow, not c.no_outflow)
        trunk = [[a + gate[i] for a in row] for i, row in enumerate(trunk)]
    scale, bias = v["head.weight"][0][0], v["head.bias"][0]
    return [[scale * a + bias for a in row] for row in trunk]


def _missing_gate(model):
    # ablated flow branches have no parameters; hand the oracle unused placeholders
    filler = {}
    for name in ("inflow", "outflow"):
        if f"gate.{name}.weight" not in model.params:
            filler[f"{name}.weight"] = T.Tensor(np.zeros((1, model.config.y)))
            filler[f"{name}.bias"] = T.Tensor(np.zeros(1))
    return filler


@pytest.mark.parametrize("flags", [
    {},
    {"no_split": True},
    {"no_channel_attention": True},
    {"no_inflow": True},
    {"no_outflow": True},
    {"no_inflow": True, "no_outflow": True},
])
def test_forward_matches_composition_oracle(flags):
    model = randomize(CasCnn(ModelConfig(n=4, x=3, y=2, filters_layer1=4, **flags)), seed=5)
    sample = random_sample(4, x=3, y=2, seed=6)
    np.testing.assert_allclose(model.forward(sample).values, forward_oracle(model, sample), rtol=1e-10, atol=1e-12)


def test_closed_gate_and_identity_head_return_the_trunk():
    model = randomize(CasCnn(ModelConfig(n=4, x=2, y=2, filters_layer1=4)), seed=1)
    model.params["gate.w"].values[...] = 0.0
    model.params["head.weight"].values[...] = 1.0
    model.params["head.bias"].values[...] = 0.0
    trunk_only = CasCnn(ModelConfig(n=4, x=2, y=2, filters_layer1=4, no_inflow=True, no_outflow=True))
    trunk_only.load_state({k: v for k, v in model.state().items() if not k.startswith("gate.")})
    sample = random_sample(4, x=2, y=2)
    np.testing.assert_array_equal(model.forward(sample).values, trunk_only.forward(sample).values)


def test_all_zero_parameters_give_the_output_bias():
    model = CasCnn(ModelConfig(n=4, x=2, y=2))
    for p in model.parameters():
        p.values[...] = 0.0
    model.params["head.bias"].values[...] = 0.75
    assert np.all(model.forward(random_sample(4, x=2, y=2)).values == 0.75)


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 7), st.integers(0, 1000))
def test_output_shape(n, seed):
    model = CasCnn(ModelConfig(n=n, x=2, y=3, filters_layer1=4), np.random.default_rng(seed))
    assert model.forward(random_sample(n, x=2, y=3, seed=seed)).shape == (n, n)


def test_history_shape_mismatch():
    model = CasCnn(ModelConfig(n=4, x=2, y=2))
    with pytest.raises(DimensionError):
        model.forward(random_sample(5, x=2, y=2))


@pytest.mark.parametrize("station", range(4))
def test_inflow_perturbation_changes_one_row(station):
    model = randomize(CasCnn(ModelConfig(n=4, x=2, y=3, filters_layer1=4)), seed=7)
    sample = random_sample(4, x=2, y=3, seed=8)
    before = model.forward(sample).values
    sample.inflow_win[:, station] += 0.37
    after = model.forward(sample).values
    changed = [i for i in range(4) if not np.array_equal(before[i], after[i])]
    assert changed == [station]


# -- parameter accounting -----------------------------------------------------------

def expected_parameter_count(c):
    def attention(channels):
        h = attention_width(channels, c.reduction)
        return 2 * h * channels + h + channels

    use_ca = not c.no_channel_attention
    total = attention(c.x) if use_ca else 0
    for k in c.active_kernels:
        total += c.filters_layer1 * c.x * k * k + c.filters_layer1
        total += attention(c.filters_layer1) if use_ca else 0
        total += c.filters_layer2 * c.filters_layer1 * k * k + c.filters_layer2
        total += attention(c.filters_layer2) if use_ca and c.ca_after_layer2 else 0
    if c.uses_gate:
        total += c.n + (0 if c.no_inflow else c.y + 1) + (0 if c.no_outflow else c.y + 1)
    return total + c.filters_layer2 + 1


@pytest.mark.parametrize("flags", [
    {}, {"no_split": True}, {"no_channel_attention": True}, {"no_inflow": True}, {"no_outflow": True},
    {"ca_after_layer2": True}, {"reduction": 4}, {"no_inflow": True, "no_outflow": True},
])
def test_parameter_count(flags):
    config = ModelConfig(n=20, **flags)
    model = CasCnn(config)
    assert model.n_parameters() == expected_parameter_count(config)
    assert model.params["gate.w"].shape == (20,) if config.uses_gate else "gate.w" not in model.params


def test_fully_ablated_model_is_two_plain_convolutions_and_a_head():
    config = ModelConfig(n=6, no_split=True, no_channel_attention=True, no_inflow=True, no_outflow=True)
    model = CasCnn(config)
    assert sorted(model.params) == ["head.bias", "head.weight", "layer1.k3.bias", "layer1.k3.weight",
                                    "layer2.k3.bias", "layer2.k3.weight"]
    assert model.n_parameters() == (16 * 5 * 9 + 16) + (16 * 9 + 1) + 2


def test_default_model_size():
    # input attention 27, layer 1 (736 + 2016), its attention 2 * 280,
    # layer 2 (145 + 401), gate 32, head 2
    assert CasCnn(ModelConfig(n=20)).n_parameters() == 27 + 736 + 2016 + 560 + 145 + 401 + 32 + 2 == 3919


def test_gate_vector_starts_at_ones():
    np.testing.assert_array_equal(CasCnn(ModelConfig(n=7)).params["gate.w"].values, np.ones(7))


def test_bad_configs():
    with pytest.raises(ConfigError):
        ModelConfig(n=4, kernels=(3, 4))
    with pytest.raises(ConfigError):
        ModelConfig(n=4, reduction=0)


# -- baseline ------------------------------------------------------------------------

def test_baseline_widths():
    model = build_baseline_cnn(BaselineConfig(n=6))
    widths = [model.params[f"conv{i}.weight"].shape[0] for i in (1, 2, 3)]
    assert widths == [8, 16, 1]
    assert all(model.params[f"conv{i}.weight"].shape[-1] == 5 for i in (1, 2, 3))


def test_baseline_zero_weights():
    model = build_baseline_cnn(BaselineConfig(n=4, x=2))
    for p in model.parameters():
        p.values[...] = 0.0
    assert not model.forward(random_sample(4, x=2)).values.any()


def test_baseline_ignores_flows():
    model = build_baseline_cnn(BaselineConfig(n=4, x=2), np.random.default_rng(0))
    a = random_sample(4, x=2, seed=1)
    b = Sample(a.history, a.inflow_win * 9, a.outflow_win * -3, a.target, a.day, a.interval)
    np.testing.assert_array_equal(model.forward(a).values, model.forward(b).values)


# -- gradients ------------------------------------------------------------------------

def weighted_sum_loss(model, sample, weights):
    return lambda: T.total(T.mul(model.forward(sample), T.constant(weights)))


@pytest.mark.parametrize("flags", [{}, {"no_split": True}, {"no_channel_attention": True}, {"no_outflow": True},
                                   {"ca_after_layer2": True}])
def test_full_model_gradients(flags):
    model = randomize(CasCnn(ModelConfig(n=4, x=2, y=2, filters_layer1=4, **flags)), seed=11)
    sample = random_sample(4, x=2, y=2, seed=12)
    weights = np.random.default_rng(13).normal(size=(4, 4))
    errors = check_gradients(weighted_sum_loss(model, sample, weights), model.parameters())
    worst = max(errors.values())
    assert worst < 1e-4, {p.name: e for p, e in zip(model.parameters(), errors.values()) if e >= 1e-4}


def test_baseline_gradients():
    model = randomize(build_baseline_cnn(BaselineConfig(n=4, x=2, filters=(2, 3, 1), kernel=3)), seed=3)
    sample = random_sample(4, x=2, seed=4)
    weights = np.random.default_rng(5).normal(size=(4, 4))
    assert max(check_gradients(weighted_sum_loss(model, sample, weights), model.parameters()).values()) < 1e-4


# -- checkpoints -------------------------------------------------------------------------

@pytest.mark.parametrize("make", [
    lambda: randomize(CasCnn(ModelConfig(n=5, x=2, y=3, filters_layer1=4, no_outflow=True)), seed=2),
    lambda: randomize(build_baseline_cnn(BaselineConfig(n=5, x=2)), seed=3),
])
def test_checkpoint_round_trip(tmp_path, make):
    model = make()
    save_checkpoint(model, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert list(back.params) == list(model.params)
    for name in model.params:
        np.testing.assert_array_equal(back.params[name].values, model.params[name].values)
    sample = random_sample(5, x=2, y=3)
    np.testing.assert_array_equal(back.forward(sample).values, model.forward(sample).values)
    assert (tmp_path / "ck.bin").stat().st_size == 8 * model.n_parameters()


def test_same_seed_same_initialization():
    a = CasCnn(ModelConfig(n=5), np.random.default_rng(42))
    b = CasCnn(ModelConfig(n=5), np.random.default_rng(42))
    for name in a.params:
        assert a.params[name].values.tobytes() == b.params[name].values.tobytes()
