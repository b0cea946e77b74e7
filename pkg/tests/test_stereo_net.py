import numpy as np
import pytest

from supforge import stereo as sn
from supforge import tensor as tc
from supforge.scenegen import SceneConfig, generate
from conftest import central_difference, assert_matches_fd


def small_cfg(**kw):
    base = dict(encoder_layers=2, channels=4, downsample=2, d_max=8, seed=5)
    base.update(kw)
    return sn.StereoNetConfig(**base)


def test_init_is_bit_deterministic():
    a = sn.init(sn.StereoNetConfig(seed=3))
    b = sn.init(sn.StereoNetConfig(seed=3))
    assert a.parameter_names() == b.parameter_names()
    for name in a.parameter_names():
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()


def test_parameter_count_matches_closed_form():
    for cfg in (
        sn.StereoNetConfig(),
        sn.StereoNetConfig(cost_mode=sn.COST_CONCAT),
        sn.StereoNetConfig(conv_mode=sn.CONV_DEFORMABLE),
        sn.StereoNetConfig(conv_mode=sn.CONV_DEFORMABLE, deformable_layer_indices=(1, 3),
                           use_isa=True),
        small_cfg(cost_mode=sn.COST_CONCAT, use_isa=True),
    ):
        net = sn.init(cfg)
        actual = sum(p.data.size for p in net.params.values())
        assert actual == sn.parameter_count(cfg)


def test_deformable_net_at_init_equals_standard_net():
    rng = np.random.default_rng(0)
    left = rng.uniform(size=(3, 32, 64))
    right = rng.uniform(size=(3, 32, 64))
    std = sn.init(sn.StereoNetConfig(seed=11, conv_mode=sn.CONV_STANDARD))
    dfm = sn.init(sn.StereoNetConfig(seed=11, conv_mode=sn.CONV_DEFORMABLE))
    for i in range(4):  # offset branches start at exactly zero
        assert not dfm.params[f"enc{i}.offset_weight"].data.any()
    out_s = sn.forward(std, left, right)
    out_d = sn.forward(dfm, left, right)
    assert out_s.data.tobytes() == out_d.data.tobytes()


def test_deform_conv_zero_offsets_equals_conv2d_bitexact(rng):
    x = tc.Tensor(rng.normal(size=(2, 7, 9)))
    w = tc.Tensor(rng.normal(size=(3, 2, 3, 3)))
    b = tc.Tensor(rng.normal(size=3))
    for stride, pad in ((1, 1), (2, 1), (1, 0)):
        ref = tc.conv2d(x, w, b, stride=stride, pad=pad)
        off = tc.Tensor(np.zeros((18,) + ref.data.shape[1:]))
        out = sn.deform_conv2d(x, w, b, off, stride=stride, pad=pad)
        assert out.data.tobytes() == ref.data.tobytes()


def test_deform_conv_unit_column_offset_matches_shifted_conv(rng):
    x = rng.normal(size=(1, 8, 10))
    w = rng.normal(size=(1, 1, 3, 3))
    b = np.zeros(1)
    off = np.zeros((18, 8, 10))
    off[1::2] = 1.0  # every tap shifted one column right: reads x(., x+1)
    out = sn.deform_conv2d(tc.Tensor(x), tc.Tensor(w), tc.Tensor(b), tc.Tensor(off), pad=1)
    shifted = np.zeros_like(x)
    shifted[:, :, :-1] = x[:, :, 1:]
    ref = tc.conv2d(tc.Tensor(shifted), tc.Tensor(w), tc.Tensor(b), pad=1)
    # interior only: border cells touch the zero-fill which differs between
    # the bilinear out-of-bounds convention and the pre-shifted array
    np.testing.assert_allclose(out.data[:, 1:-1, 1:-2], ref.data[:, 1:-1, 1:-2],
                               rtol=0, atol=1e-12)


def test_deform_conv_offset_gradients_match_fd(rng):
    x0 = rng.normal(size=(1, 5, 5))
    w0 = rng.normal(size=(2, 1, 3, 3))
    b0 = rng.normal(size=2)
    off0 = rng.uniform(-0.4, 0.4, size=(18, 5, 5))

    def fwd(xa, wa, ba, oa):
        y = sn.deform_conv2d(tc.Tensor(xa), tc.Tensor(wa), tc.Tensor(ba), tc.Tensor(oa), pad=1)
        return float(y.data.sum())

    fd = central_difference(fwd, [x0, w0, b0, off0])
    xs = [tc.Tensor(a, requires_grad=True) for a in (x0, w0, b0, off0)]
    with tc.Tape():
        tc.backward(tc.tsum(sn.deform_conv2d(*xs, pad=1)))
    for t, g in zip(xs, fd):
        assert_matches_fd(t.grad, g)


def test_deform_conv_offset_channel_count_checked():
    x = tc.Tensor(np.zeros((1, 5, 5)))
    w = tc.Tensor(np.zeros((1, 1, 3, 3)))
    with pytest.raises(tc.ShapeError, match="offsets"):
        sn.deform_conv2d(x, w, tc.Tensor(np.zeros(1)), tc.Tensor(np.zeros((17, 5, 5))), pad=1)


def test_correlation_volume_against_brute_force(rng):
    fl = rng.normal(size=(4, 6, 12))
    fr = rng.normal(size=(4, 6, 12))
    vol = sn.correlation_volume(tc.Tensor(fl), tc.Tensor(fr), 5).data
    for d in range(5):
        for y in range(6):
            for x in range(12):
                want = fl[:, y, x] @ fr[:, y, x - d] / 4.0 if x - d >= 0 else 0.0
                assert vol[d, y, x] == pytest.approx(want, abs=1e-12)


def test_correlation_peaks_at_true_shift(rng):
    fl = rng.normal(size=(24, 5, 20))
    d0 = 3
    fr = np.zeros_like(fl)
    fr[:, :, :-d0] = fl[:, :, d0:]  # right features = left shifted left by d0
    vol = sn.correlation_volume(tc.Tensor(fl), tc.Tensor(fr), 6).data
    interior = vol[:, :, 6:16]  # clear of both the shift margin and zero fill
    assert (interior.argmax(axis=0) == d0).all()


def test_correlation_zero_disparity_equal_features_is_mean_square(rng):
    f = rng.normal(size=(3, 4, 7))
    vol = sn.correlation_volume(tc.Tensor(f), tc.Tensor(f), 1).data
    np.testing.assert_allclose(vol[0], (f ** 2).mean(axis=0), atol=1e-14)
    zero = sn.correlation_volume(tc.Tensor(np.zeros_like(f)), tc.Tensor(np.zeros_like(f)), 3)
    assert not zero.data.any()


def test_correlation_volume_gradients(rng):
    fl0 = rng.normal(size=(2, 4, 8))
    fr0 = rng.normal(size=(2, 4, 8))
    t0 = rng.normal(size=(3, 4, 8))

    def fwd(fa, fb):
        v = sn.correlation_volume(tc.Tensor(fa), tc.Tensor(fb), 3)
        return float((v.data * t0).sum())

    fd = central_difference(fwd, [fl0, fr0])
    fl = tc.Tensor(fl0, requires_grad=True)
    fr = tc.Tensor(fr0, requires_grad=True)
    with tc.Tape():
        tc.backward(tc.tsum(tc.mul(sn.correlation_volume(fl, fr, 3), tc.Tensor(t0))))
    assert_matches_fd(fl.grad, fd[0])
    assert_matches_fd(fr.grad, fd[1])


def test_isa_zero_offsets_is_per_slice_conv(rng):
    cost = rng.normal(size=(4, 6, 8))
    kern = rng.normal(size=(3, 3))
    off = np.zeros((18, 6, 8))
    agg = sn.isa_aggregate(tc.Tensor(cost), tc.Tensor(kern), tc.Tensor(off)).data
    for d in range(4):
        ref = tc.conv2d(tc.Tensor(cost[d][None]), tc.Tensor(kern[None, None]),
                        tc.Tensor(np.zeros(1)), pad=1).data[0]
        np.testing.assert_array_equal(agg[d], ref)


def test_isa_center_weight_is_identity(rng):
    cost = rng.normal(size=(3, 5, 7))
    kern = np.zeros((3, 3))
    kern[1, 1] = 1.0
    agg = sn.isa_aggregate(tc.Tensor(cost), tc.Tensor(kern), tc.Tensor(np.zeros((18, 5, 7))))
    np.testing.assert_array_equal(agg.data, cost)


def test_isa_gradients_match_fd(rng):
    cost0 = rng.normal(size=(2, 5, 5))
    kern0 = rng.normal(size=(3, 3))
    off0 = rng.uniform(-0.4, 0.4, size=(18, 5, 5))

    def fwd(ca, ka, oa):
        out = sn.isa_aggregate(tc.Tensor(ca), tc.Tensor(ka), tc.Tensor(oa))
        return float(out.data.sum())

    fd = central_difference(fwd, [cost0, kern0, off0])
    ts = [tc.Tensor(a, requires_grad=True) for a in (cost0, kern0, off0)]
    with tc.Tape():
        tc.backward(tc.tsum(sn.isa_aggregate(*ts)))
    for t, g in zip(ts, fd):
        assert_matches_fd(t.grad, g)


def test_constant_cost_volume_reads_out_center_disparity():
    net = sn.init(sn.StereoNetConfig(seed=0))
    for name, p in net.params.items():
        if name.startswith("enc"):
            p.data = np.zeros_like(p.data)  # zero features -> constant volume
    rng = np.random.default_rng(1)
    out = sn.forward(net, rng.uniform(size=(3, 64, 128)), rng.uniform(size=(3, 64, 128)))
    want = net.config.downsample * (net.config.d_max_feature - 1) / 2.0
    np.testing.assert_allclose(out.data, want, atol=1e-12)


def test_forward_output_shape_and_bounds():
    cfg = sn.StereoNetConfig(seed=2)
    net = sn.init(cfg)
    s = generate(SceneConfig(seed=8))
    out = sn.forward(net, s.left, s.right)
    assert out.data.shape == (64, 128)
    assert out.data.min() >= 0.0 and out.data.max() <= cfg.d_max
    assert np.isfinite(out.data).all()


def test_forward_rejects_indivisible_input():
    net = sn.init(sn.StereoNetConfig(downsample=2))
    with pytest.raises(tc.ShapeError, match="divisible"):
        sn.forward(net, np.zeros((3, 63, 128)), np.zeros((3, 63, 128)))


def test_readout_shift_invariance(rng):
    vol0 = rng.normal(size=(6, 4, 8))
    a = sn.disparity_readout(tc.Tensor(vol0), 2, 8, 16).data
    b = sn.disparity_readout(tc.Tensor(vol0 + 7.3), 2, 8, 16).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)


@pytest.mark.parametrize("cost_mode", [sn.COST_CORRELATION, sn.COST_CONCAT])
def test_forward_input_gradients_match_fd(cost_mode, rng):
    cfg = small_cfg(cost_mode=cost_mode)
    net = sn.init(cfg)
    left0 = rng.uniform(size=(3, 8, 16))
    right0 = rng.uniform(size=(3, 8, 16))
    t0 = rng.normal(size=(8, 16))

    def fwd(la, ra):
        out = sn.forward(net, la, ra)
        return float((out.data * t0).sum())

    fd = central_difference(fwd, [left0, right0])
    lt = tc.Tensor(left0, requires_grad=True)
    rt = tc.Tensor(right0, requires_grad=True)
    with tc.Tape():
        tc.backward(tc.tsum(tc.mul(sn.forward(net, lt, rt), tc.Tensor(t0))))
    assert_matches_fd(lt.grad, fd[0])
    assert_matches_fd(rt.grad, fd[1])


def test_train_zero_lr_leaves_params_unchanged():
    cfg = small_cfg()
    net = sn.init(cfg)
    before = {k: v.data.copy() for k, v in net.params.items()}
    data = [generate(SceneConfig(seed=s)) for s in range(2)]
    sn.train(net, data, epochs=1, lr=0.0, seed=0)
    for k, v in net.params.items():
        assert v.data.tobytes() == before[k].tobytes()


def test_train_records_trajectory_and_reduces_loss():
    net = sn.init(sn.StereoNetConfig(seed=1))
    data = [generate(SceneConfig(seed=s)) for s in range(6)]
    sn.train(net, data, epochs=4, lr=0.2, seed=0)
    assert len(net.loss_trajectory) == 4
    assert net.loss_trajectory[-1] < net.loss_trajectory[0]
    assert net.trained


def test_checkpoint_roundtrip_and_determinism(tmp_path):
    cfg = sn.StereoNetConfig(conv_mode=sn.CONV_DEFORMABLE, deformable_layer_indices=(0, 2),
                             cost_mode=sn.COST_CONCAT, use_isa=True, seed=6)
    net = sn.init(cfg)
    p1 = tmp_path / "net1.supf"
    p2 = tmp_path / "net2.supf"
    sn.save_net(p1, net)
    sn.save_net(p2, net)
    assert p1.read_bytes() == p2.read_bytes()
    back = sn.load_net(p1)
    assert back.config == cfg
    for name in net.parameter_names():
        assert back.params[name].data.tobytes() == net.params[name].data.tobytes()
