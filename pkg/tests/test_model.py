from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from msinet.model import (
    ConfigError,
    Model,
    ModelConfig,
    VGG16_PLAN,
    count_parameters,
    encoder_tap_channels,
    parameter_specs,
    parameter_subtotals,
    xavier_bound,
    xavier_init,
)
from msinet.tensor import Tensor
from msinet.weights import (
    MissingTensorError,
    ShapeConflictError,
    UnknownTensorError,
    WeightFormatError,
    decode_tensors,
    encode_tensors,
    load_weights,
    save_weights,
)

TINY = dict(channel_scale=Fraction(1, 8), input_size=(48, 64))


def conv_count(k, cin, cout):
    return k * k * cin * cout + cout


def vgg_count():
    total, cin = 0, 3
    for cout in VGG16_PLAN:
        total += conv_count(3, cin, cout)
        cin = cout
    return total


# --- counts ------------------------------------------------------------------------


def test_full_parameter_count():
    cfg = ModelConfig()
    assert count_parameters(cfg) == 24_934_209
    assert parameter_subtotals(cfg) == {
        "encoder": 14_714_688, "concat": 0, "aspp": 9_831_936, "decoder": 387_585}


def test_closed_form_subtotals():
    assert vgg_count() == 14_714_688
    aspp = (conv_count(1, 1280, 256) + 3 * conv_count(3, 1280, 256)
            + conv_count(1, 1280, 256) + conv_count(1, 1280, 256))
    assert aspp == 9_831_936
    dec = conv_count(3, 256, 128) + conv_count(3, 128, 64) + conv_count(3, 64, 32) + conv_count(3, 32, 1)
    assert dec == 387_585


def test_ablation_counts():
    no_aspp = ModelConfig(use_aspp=False)
    assert parameter_subtotals(no_aspp)["aspp"] == conv_count(3, 1280, 1280) + conv_count(1, 1280, 256)
    assert parameter_subtotals(no_aspp)["aspp"] == 15_074_816
    assert count_parameters(no_aspp) == 30_177_089 > count_parameters(ModelConfig())
    no_concat = ModelConfig(use_multilevel_concat=False)
    first = next(s for s in parameter_specs(no_concat) if s.name == "aspp/branch_1x1/weight")
    assert first.shape[1] == 512
    assert count_parameters(no_concat) < count_parameters(ModelConfig())


@given(st.sampled_from([Fraction(1), Fraction(1, 2), Fraction(1, 4), Fraction(1, 8)]),
       st.booleans(), st.booleans())
def test_subtotals_sum_to_total(scale, aspp, concat):
    cfg = ModelConfig(channel_scale=scale, use_aspp=aspp, use_multilevel_concat=concat)
    assert sum(parameter_subtotals(cfg).values()) == count_parameters(cfg)
    names = [s.name for s in parameter_specs(cfg)]
    assert len(names) == len(set(names))


def test_config_guards():
    with pytest.raises(ConfigError):
        ModelConfig(input_size=(50, 64))
    with pytest.raises(ConfigError):
        ModelConfig(channel_scale=Fraction(1, 3))
    with pytest.raises(ConfigError):
        ModelConfig(decoder_channels=())
    with pytest.raises(ConfigError):
        ModelConfig(channel_scale=0)


# --- shapes ------------------------------------------------------------------------


def test_tap_channels():
    assert encoder_tap_channels(ModelConfig()) == (256, 512, 512)
    assert encoder_tap_channels(ModelConfig(channel_scale=Fraction(1, 8))) == (32, 64, 64)


def test_taps_at_output_stride_8():
    m = Model(ModelConfig(channel_scale=Fraction(1, 8), input_size=(240, 320)))
    taps = m.encode(Tensor(np.zeros((1, 3, 240, 320), dtype=np.float32)))
    assert [t.shape for t in taps] == [(1, 32, 30, 40), (1, 64, 30, 40), (1, 64, 30, 40)]
    assert m.multilevel_concat(taps).shape == (1, 160, 30, 40)
    ctx = m.context(m.multilevel_concat(taps))
    assert ctx.shape == (1, 32, 30, 40)
    assert m.decode(ctx).shape == (1, 1, 240, 320)


def test_cat2000_geometry():
    m = Model(ModelConfig(channel_scale=Fraction(1, 8), input_size=(216, 384),
                          use_multilevel_concat=False))
    taps = m.encode(Tensor(np.zeros((1, 3, 216, 384), dtype=np.float32)))
    assert m.multilevel_concat(taps).shape == (1, 64, 27, 48)


def test_forward_shape_and_purity():
    m = Model(ModelConfig(**TINY))
    x = np.random.default_rng(0).uniform(size=(1, 3, 48, 64)).astype(np.float32)
    a, b = m.forward(x).data, m.forward(x).data
    assert a.shape == (1, 1, 48, 64)
    np.testing.assert_array_equal(a, b)


def test_forward_rejects_wrong_size():
    m = Model(ModelConfig(**TINY))
    with pytest.raises(ValueError, match="48x64"):
        m.forward(np.zeros((1, 3, 40, 64), dtype=np.float32))


def _footprint(cfg, size, pixel):
    m = Model(cfg)
    x = np.random.default_rng(1).uniform(size=(1, 3) + size)
    base = m.forward(x).data[0, 0]
    x[0, :, pixel[0], pixel[1]] += 1.0
    return np.abs(m.forward(x).data[0, 0] - base) > 1e-12


def test_perturbation_footprint_bounded_without_pooling_branch():
    cfg = ModelConfig(channel_scale=Fraction(1, 8), input_size=(256, 256), use_aspp=False,
                      dtype="float64")
    changed = _footprint(cfg, (256, 256), (8, 8))
    assert changed.any()
    assert not changed.all()
    assert not changed[200:, 200:].any()


def test_perturbation_footprint_global_with_aspp():
    cfg = ModelConfig(channel_scale=Fraction(1, 8), input_size=(64, 64), dtype="float64")
    assert _footprint(cfg, (64, 64), (2, 2)).all()


# --- initialisation ------------------------------------------------------------------


def test_xavier_variance_and_bounds():
    shape = (256, 256, 3, 3)
    cfg = ModelConfig()
    m = Model.__new__(Model)
    m.config = cfg
    m.specs = [s for s in parameter_specs(cfg) if s.name == "encoder/conv3_2/weight"]
    assert m.specs[0].shape == shape
    m.params = {m.specs[0].name: Tensor(np.zeros(shape, dtype=np.float64))}
    xavier_init(m, seed=3)
    w = m.params[m.specs[0].name].data
    fan = 256 * 9
    assert abs(w.var() / (2 / (fan + fan)) - 1) < 0.05
    bound = np.sqrt(6 / (fan + fan))
    assert xavier_bound(shape) == pytest.approx(bound)
    assert np.abs(w).max() <= bound


def test_xavier_seed_determinism():
    a = Model(ModelConfig(seed=5, **TINY)).state_dict()
    b = Model(ModelConfig(seed=5, **TINY)).state_dict()
    c = Model(ModelConfig(seed=6, **TINY)).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a if k.endswith("weight"))
    assert all(not a[k].any() for k in a if k.endswith("bias"))


# --- weight files --------------------------------------------------------------------


def test_weights_round_trip_bytes(tmp_path):
    m = Model(ModelConfig(**TINY))
    save_weights(m, tmp_path / "a.msiw")
    m2 = Model(ModelConfig(seed=99, **TINY))
    load_weights(m2, tmp_path / "a.msiw")
    save_weights(m2, tmp_path / "b.msiw")
    assert (tmp_path / "a.msiw").read_bytes() == (tmp_path / "b.msiw").read_bytes()
    assert (tmp_path / "a.msiw").read_bytes()[:4] == b"MSIW"


def test_encode_decode_known_layout():
    payload = encode_tensors({"x": np.array([[1.0, 2.0]], dtype=np.float32)})
    expected = (b"MSIW" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
                + (1).to_bytes(2, "little") + b"x" + bytes([2])
                + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                + np.array([1.0, 2.0], dtype="<f4").tobytes())
    assert payload == expected
    out = decode_tensors(payload)
    assert out["x"].tolist() == [[1.0, 2.0]]


def test_weight_format_errors():
    good = encode_tensors({"x": np.zeros(3, dtype=np.float32)})
    with pytest.raises(WeightFormatError):
        decode_tensors(b"NOPE" + good[4:])
    with pytest.raises(WeightFormatError):
        decode_tensors(good[:-2])
    with pytest.raises(WeightFormatError):
        decode_tensors(good + b"\0")


def test_load_guards(tmp_path):
    full = Model(ModelConfig(), init=False)
    path = tmp_path / "full.msiw"
    save_weights(full, path)
    with pytest.raises(ShapeConflictError):
        load_weights(Model(ModelConfig(**TINY)), path)

    tiny = Model(ModelConfig(**TINY))
    state = {k: v.data for k, v in tiny.params.items()}
    (tmp_path / "extra.msiw").write_bytes(encode_tensors({**state, "bogus": np.zeros(1)}))
    with pytest.raises(UnknownTensorError):
        load_weights(tiny, tmp_path / "extra.msiw")
    state.pop("decoder/output/bias")
    (tmp_path / "short.msiw").write_bytes(encode_tensors(state))
    with pytest.raises(MissingTensorError):
        load_weights(tiny, tmp_path / "short.msiw")


def test_partial_encoder_load(tmp_path):
    src = Model(ModelConfig(seed=1, **TINY))
    save_weights(src, tmp_path / "src.msiw")
    dst = Model(ModelConfig(seed=2, use_aspp=False, **TINY))
    before = dst.state_dict()
    load_weights(dst, tmp_path / "src.msiw", encoder_only=True)
    for k, v in dst.state_dict().items():
        if k.startswith("encoder/"):
            np.testing.assert_array_equal(v, src.params[k].data)
        else:
            np.testing.assert_array_equal(v, before[k])
