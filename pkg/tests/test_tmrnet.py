import numpy as np
import pytest
from scipy import ndimage

from expobracket import autodiff as ad
from expobracket import tmrnet as tm
from expobracket.errors import ConfigurationError, ShapeError, UsageError

DESK = tm.TMRNetConfig()


def _randomize(params, rng, scale=0.3):
    """Give every tensor (including the zero-initialized ones) random values."""
    for p in params.values():
        p.data = (rng.normal(size=p.shape) * scale).astype(p.data.dtype)
    return params


def _stack(rng, n=1, t=5, h=12, w=12):
    return rng.random((n, t, 8, h, w)).astype(np.float32)


def _tally(c, frames, enc, common, specific, recon, sr=False):
    """Layer-by-layer parameter count written out independently of the model code."""

    def conv(cin, cout):
        return cout * cin * 9 + cout

    def stage(cin, blocks):
        return conv(cin, c) + blocks * 2 * conv(c, c)

    total = stage(8, enc) + stage(2 * c, common)
    if specific:
        total += frames * stage(c, specific)
    total += recon * 2 * conv(c, c)
    if sr:
        total += 2 * conv(c, 4 * c)
    return total + conv(c, 4)


def test_desk_parameter_count():
    params = tm.init_params(DESK, 0)
    assert tm.count_params(params) == _tally(16, 5, 2, 2, 3, 2) == 115412


@pytest.mark.parametrize(
    "cfg",
    [
        tm.TMRNetConfig(channels=8, specific_blocks=0),
        tm.TMRNetConfig(channels=4, frames=3, common_blocks=0, specific_blocks=1),
        tm.TMRNetConfig(channels=8, sr_factor=4),
        tm.TMRNetConfig.full_scale(),
    ],
)
def test_parameter_partition(cfg):
    params = tm.init_params(cfg, 1)
    expect = _tally(
        cfg.channels, cfg.frames, cfg.enc_blocks, cfg.common_blocks, cfg.specific_blocks, cfg.recon_blocks, cfg.sr_factor == 4
    )
    assert tm.count_params(params) == expect
    assert any(k.startswith("agg.spec") for k in params) == (cfg.specific_blocks > 0)


def test_init_contract():
    a, b = tm.init_params(DESK, 5), tm.init_params(DESK, 5)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    for name, p in a.items():
        if name.endswith(".b") or name.startswith("rec.out"):
            assert not p.data.any()
        else:
            bound = np.sqrt(1.0 / np.prod(p.shape[1:]))
            assert np.abs(p.data).max() <= bound and p.data.std() > 0.3 * bound


def test_config_validation():
    with pytest.raises(ConfigurationError):
        tm.TMRNetConfig(common_blocks=0, specific_blocks=0)
    with pytest.raises(ConfigurationError):
        tm.TMRNetConfig(sr_factor=2)
    with pytest.raises(ConfigurationError):
        tm.TMRNetConfig(frames=0)


def test_encode_shapes_and_zero_input():
    params = tm.init_params(DESK, 0)
    out = tm.encode(np.zeros((2, 8, 6, 10), dtype=np.float32), params, DESK)
    assert out.shape == (2, 16, 6, 10)
    assert not out.data.any()
    with pytest.raises(ShapeError):
        tm.encode(np.zeros((1, 4, 6, 6)), params, DESK)


def test_encode_is_frame_independent():
    rng = np.random.default_rng(0)
    params = _randomize(tm.init_params(DESK, 0), rng)
    frame = rng.random((1, 8, 8, 8)).astype(np.float32)
    stack = np.stack([frame[0]] * 5)[None]
    with ad.no_grad():
        _, info = tm.run(stack, params, DESK, [5], return_info=True)
    # identical content in every slot means every estimated flow is zero
    assert all(not f.any() for f in info["flows"].values())


def _smooth_field(rng, c, h, w):
    return ndimage.gaussian_filter(rng.normal(size=(c, h, w)), (0, 2, 2))


def test_align_identity():
    rng = np.random.default_rng(1)
    f = ad.tensor(_smooth_field(rng, 4, 24, 24)[None])
    out, flow, flags = tm.align_to_reference(f, f)
    assert not flow.any() and flags == [False]
    assert np.array_equal(out.data, f.data)


def test_align_recovers_synthetic_shift():
    rng = np.random.default_rng(2)
    big = _smooth_field(rng, 4, 48, 48)
    y0, x0, h, w = 10, 10, 24, 24
    ref = big[:, y0 : y0 + h, x0 : x0 + w]
    # feat(y, x) = ref(y - 2, x + 3): the content sits at an offset of (3, -2)
    feat = big[:, y0 - 2 : y0 - 2 + h, x0 + 3 : x0 + 3 + w]
    (dx, dy), flag = tm.estimate_shift(feat, ref)
    assert abs(dx + 3) <= 0.25 and abs(dy - 2) <= 0.25 and not flag
    out, _, _ = tm.align_to_reference(ad.tensor(feat[None]), ad.tensor(ref[None]))
    inner = (slice(None), slice(4, -4), slice(4, -4))
    assert np.abs(out.data[0][inner] - ref[inner]).max() < 1e-3


def test_align_subpixel_refinement():
    rng = np.random.default_rng(3)
    big = ndimage.gaussian_filter(rng.normal(size=(2, 64, 64)), (0, 3, 3))
    ref = big[:, 16:48, 16:48]
    feat = ndimage.shift(big, (0, 0, -1.5), order=3)[:, 16:48, 16:48]
    (dx, dy), _ = tm.estimate_shift(feat, ref)
    assert abs(dx + 1.5) < 0.25 and abs(dy) < 0.25


def test_align_beyond_radius_is_flagged():
    rng = np.random.default_rng(4)
    big = _smooth_field(rng, 4, 64, 64)
    ref = big[:, 20:44, 20:44]
    feat = big[:, 20:44, 32:56]
    (dx, dy), flag = tm.estimate_shift(feat, ref)
    assert flag
    assert abs(dx) == pytest.approx(8, abs=0.5)


def test_align_constant_features_flagged():
    f = np.ones((4, 8, 8))
    assert tm.estimate_shift(f, f) == ((0.0, 0.0), True)


def test_aggregate_zero_weights_and_order():
    params = tm.init_params(DESK, 0)
    for p in params.values():
        p.data[...] = 0
    state = tm.initial_state(1, 16, 6, 6)
    feat = ad.tensor(np.random.default_rng(0).random((1, 16, 6, 6)))
    new = tm.aggregate(feat, state, 1, params, DESK)
    assert new.frame_index == 1 and not new.hidden.data.any()
    with pytest.raises(UsageError):
        tm.aggregate(feat, state, 2, params, DESK)


def _shared_aggregation_reference(conditioned, params, cfg, r):
    """Plain recurrent fusion with one shared aggregation module per step."""
    base = conditioned[:, 0, :4]
    ref = tm.encode(conditioned[:, 0], params, cfg)
    hidden = ad.tensor(np.zeros(ref.shape))
    for i in range(1, r + 1):
        feat = ref if i == 1 else tm.align_to_reference(tm.encode(conditioned[:, i - 1], params, cfg), ref)[0]
        g = ad.conv2d(ad.concat([feat, hidden]), params["agg.common.conv0.w"], params["agg.common.conv0.b"])
        for k in range(cfg.common_blocks):
            p = f"agg.common.block{k}"
            g = ad.residual_block(
                g, params[f"{p}.conv1.w"], params[f"{p}.conv1.b"], params[f"{p}.conv2.w"], params[f"{p}.conv2.b"], cfg.slope
            )
        hidden = g
    x = hidden
    for k in range(cfg.recon_blocks):
        p = f"rec.block{k}"
        x = ad.residual_block(
            x, params[f"{p}.conv1.w"], params[f"{p}.conv1.b"], params[f"{p}.conv2.w"], params[f"{p}.conv2.b"], cfg.slope
        )
    return ad.add(ad.tensor(base), ad.conv2d(x, params["rec.out.w"], params["rec.out.b"])).data


def test_no_specific_blocks_equals_shared_aggregation():
    rng = np.random.default_rng(5)
    cfg = tm.TMRNetConfig(specific_blocks=0)
    params = _randomize(tm.init_params(cfg, 0), rng, 0.2)
    stack = _stack(rng, n=2, h=16, w=16)
    with ad.no_grad():
        for r in range(1, 6):
            ours = tm.forward(stack, params, cfg, r).data
            assert np.array_equal(ours, _shared_aggregation_reference(stack, params, cfg, r))


def test_specific_parameters_are_frame_bound():
    rng = np.random.default_rng(6)
    params = _randomize(tm.init_params(DESK, 0), rng, 0.2)
    stack = _stack(rng)
    with ad.no_grad():
        _, before = tm.run(stack, params, DESK, [2], return_info=True)
        for name in [k for k in params if k.startswith("agg.spec2.")]:
            other = name.replace("spec2", "spec3")
            params[name], params[other] = params[other], params[name]
        _, after = tm.run(stack, params, DESK, [2], return_info=True, flows=before["flows"])
    assert np.array_equal(before["states"][1].hidden.data, after["states"][1].hidden.data)
    assert not np.allclose(before["states"][2].hidden.data, after["states"][2].hidden.data)


def test_prefix_replay_is_bit_exact():
    rng = np.random.default_rng(7)
    params = _randomize(tm.init_params(DESK, 0), rng, 0.2)
    stack = _stack(rng, n=2)
    with ad.no_grad():
        everything, info = tm.run(stack, params, DESK, [1, 2, 3, 4, 5], return_info=True)
        for r in range(1, 6):
            alone, info_r = tm.run(stack, params, DESK, [r], return_info=True)
            assert np.array_equal(alone[0].data, everything[r - 1].data)
            for k in range(1, r + 1):
                assert np.array_equal(info_r["states"][k].hidden.data, info["states"][k].hidden.data)


def test_identity_at_init_for_every_prefix():
    rng = np.random.default_rng(8)
    params = tm.init_params(DESK, 0)
    stack = _stack(rng)
    for r in range(1, 6):
        assert np.array_equal(tm.predict(stack, params, DESK, r), stack[:, 0, :4])


def test_forward_range_errors():
    params = tm.init_params(DESK, 0)
    stack = _stack(np.random.default_rng(0))
    for r in (0, 6):
        with pytest.raises(UsageError):
            tm.forward(stack, params, DESK, r)


def test_reconstruct_is_stateless():
    rng = np.random.default_rng(9)
    params = _randomize(tm.init_params(DESK, 0), rng, 0.2)
    stack = _stack(rng)
    with ad.no_grad():
        _, info = tm.run(stack, params, DESK, [3], return_info=True)
        a = tm.reconstruct(info["states"][3], params, stack[:, 0, :4], DESK).data
        b = tm.reconstruct(info["states"][3], params, stack[:, 0, :4], DESK).data
    assert np.array_equal(a, b)
    with pytest.raises(UsageError):
        tm.reconstruct(tm.initial_state(1, 16, 4, 4), params, np.zeros((1, 4, 4, 4)), DESK)


def test_super_resolution_path():
    cfg = tm.TMRNetConfig(channels=8, sr_factor=4)
    rng = np.random.default_rng(10)
    params = tm.init_params(cfg, 0)
    stack = _stack(rng, h=16, w=16)
    out = tm.predict(stack, params, cfg)
    assert out.shape == (1, 4, 64, 64)
    assert np.allclose(out, tm.upsample_bilinear(stack[:, 0, :4], 4))
    missing = {k: v for k, v in params.items() if not k.startswith("up.")}
    with pytest.raises(ConfigurationError):
        tm.predict(stack, missing, cfg)


def test_upsample_bilinear_constant_and_mean():
    x = np.random.default_rng(11).random((2, 3, 5))
    up = tm.upsample_bilinear(x, 4)
    assert up.shape == (2, 12, 20)
    assert np.allclose(tm.upsample_bilinear(np.full((3, 4), 0.25), 4), 0.25)
    # a linear ramp is reproduced exactly at the half-pixel-centred positions
    ramp = np.add.outer(np.arange(6.0), 2 * np.arange(7.0))
    pos_y = (np.arange(24) + 0.5) / 4 - 0.5
    pos_x = (np.arange(28) + 0.5) / 4 - 0.5
    expected = np.add.outer(pos_y, 2 * pos_x)
    inner = (slice(2, -2), slice(2, -2))
    assert np.allclose(tm.upsample_bilinear(ramp, 4)[inner], expected[inner])


def test_translation_equivariance_in_interior():
    rng = np.random.default_rng(12)
    params = _randomize(tm.init_params(DESK, 0), rng, 0.2)
    big = rng.random((1, 2, 8, 90, 90)).astype(np.float32)
    a = big[..., 0:80, 0:80]
    b = big[..., 3:83, 5:85]
    zero = {2: np.zeros((1, 2, 80, 80))}
    with ad.no_grad(), ad.precision(np.float64):
        _, ia = tm.run(a, params, DESK, [2], flows=zero, return_info=True)
        _, ib = tm.run(b, params, DESK, [2], flows=zero, return_info=True)
    ha, hb = ia["states"][2].hidden.data[0], ib["states"][2].hidden.data[0]
    m = 32  # receptive-field margin
    assert np.abs(ha[:, 3 + m : 80 - m, 5 + m : 80 - m] - hb[:, m : 77 - m, m : 75 - m]).max() < 1e-5
