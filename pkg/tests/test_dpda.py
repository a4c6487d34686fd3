from __future__ import annotations

import math

import numpy as np
import pytest

import tcatseg.diffcore as dc
import tcatseg.dpda as dpda
from tcatseg.attention import PointSet, cwa_update
from tcatseg.errors import ContractError, DimensionError
from tcatseg.gradcheck import finite_diff_check


def _points(rng: np.random.Generator, n: int, width: int) -> PointSet:
    return PointSet.from_arrays(rng.uniform(-1, 1, size=(n, 3)), rng.normal(size=(n, width)))


def _inside_hull_box(y: np.ndarray, x: np.ndarray) -> bool:
    return bool(np.all(y >= x.min(axis=0) - 1e-9) and np.all(y <= x.max(axis=0) + 1e-9))


def test_interpolate_zero_logits_gives_centroid() -> None:
    rng = np.random.default_rng(0)
    pts = _points(rng, 7, 3)
    y = dpda.interpolate_positions(dc.as_tensor(np.zeros((4, 3))), pts)
    assert np.allclose(y.data, np.tile(pts.coords().mean(axis=0), (4, 1)))


def test_interpolate_dominant_logit_picks_point() -> None:
    xyz = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]])
    feats = np.zeros((3, 2))
    feats[1, 0] = 1000.0
    y = dpda.interpolate_positions(dc.as_tensor([[1.0, 0.0]]), PointSet.from_arrays(xyz, feats))
    assert np.allclose(y.data[0], xyz[1], atol=1e-9)


def test_interpolate_two_points_closed_form() -> None:
    xyz = np.array([[0.0, 0.0, 0.0], [4.0, -4.0, 8.0]])
    feats = np.array([[0.0], [math.log(3.0)]])
    y = dpda.interpolate_positions(dc.as_tensor([[1.0]]), PointSet.from_arrays(xyz, feats))
    assert np.allclose(y.data[0], 0.25 * xyz[0] + 0.75 * xyz[1])


def test_interpolate_width_mismatch() -> None:
    pts = _points(np.random.default_rng(1), 3, 2)
    with pytest.raises(DimensionError):
        dpda.interpolate_positions(dc.as_tensor(np.zeros((2, 3))), pts)


def test_level_one_uses_global_term_only() -> None:
    rng = np.random.default_rng(2)
    params = dpda.init_dpda(rng, level=1, width=4, prev_width=None)
    assert params.laya is None
    pts = _points(rng, 30, 4)
    z = dpda.dpda_step(1, None, pts, params)
    assert z.Y.shape == (dpda.N_SUPERPOINTS, 3)

    h = params.tcp_embedding
    start = dpda.Superpoints(dpda.interpolate_positions(h, pts), h, 1)
    assert np.allclose(z.H.data, cwa_update(params.ga, start.as_pointset(), pts).data, atol=1e-12)
    assert _inside_hull_box(z.Y.data, pts.coords())

    dc.backward(z.H.sum() + z.Y.sum())
    assert params.raw_beta.grad is None


def test_step_mixes_both_terms_with_beta() -> None:
    rng = np.random.default_rng(3)
    prev_params = dpda.init_dpda(rng, 1, 3, None)
    params = dpda.init_dpda(rng, 2, 5, prev_width=3)
    params.raw_beta.data = np.array(0.7)
    prev = dpda.dpda_step(1, None, _points(rng, 20, 3), prev_params)
    pts = _points(rng, 12, 5)
    z = dpda.dpda_step(2, prev, pts, params)

    h = params.tcp_embedding
    start = dpda.Superpoints(dpda.interpolate_positions(h, pts), h, 2)
    ga = cwa_update(params.ga, start.as_pointset(), pts).data
    assert params.laya is not None and params.prev_proj is not None
    prev_h = dc.affine_apply(params.prev_proj, prev.H)
    laya = cwa_update(params.laya, start.as_pointset(), PointSet(prev.Y, prev_h)).data
    b = 1.0 / (1.0 + math.exp(-0.7))
    assert np.allclose(z.H.data, b * ga + (1 - b) * laya, atol=1e-12)
    assert np.allclose(z.Y.data, dpda.interpolate_positions(z.H, pts).data, atol=1e-12)


def test_beta_zero_with_self_as_previous() -> None:
    rng = np.random.default_rng(4)
    params = dpda.init_dpda(rng, 2, 3, prev_width=None, m=1)
    params.raw_beta.data = np.array(-40.0)
    pts = _points(rng, 10, 3)
    h = params.tcp_embedding
    same = dpda.Superpoints(dpda.interpolate_positions(h, pts), h, 1)
    z = dpda.dpda_step(2, same, pts, params)
    # one superpoint attending to itself: the subtraction vanishes
    assert np.allclose(z.H.data, 0.0, atol=1e-12)


def test_beta_stays_open_interval() -> None:
    params = dpda.init_dpda(np.random.default_rng(5), 2, 2, 2)
    for raw in (-30.0, -1.0, 0.0, 4.0, 30.0):
        params.raw_beta.data = np.array(raw)
        b = dpda.beta(params).item()
        assert 0.0 <= b <= 1.0
        if abs(raw) < 20:
            assert 0.0 < b < 1.0


def test_step_contract_errors() -> None:
    rng = np.random.default_rng(6)
    params = dpda.init_dpda(rng, 2, 3, 3)
    pts = _points(rng, 5, 3)
    with pytest.raises(ContractError):
        dpda.dpda_step(5, None, pts, params)
    with pytest.raises(ContractError):
        dpda.dpda_step(0, None, pts, params)
    with pytest.raises(ContractError):
        dpda.dpda_step(2, None, pts, params)


def test_all_levels_inside_hulls_and_deterministic() -> None:
    def run() -> list[np.ndarray]:
        rng = np.random.default_rng(7)
        widths = [4, 6, 8, 10]
        z = None
        out = []
        prev_w = None
        for level, w in enumerate(widths, start=1):
            params = dpda.init_dpda(rng, level, w, prev_w)
            pts = _points(rng, 40 // level, w)
            z = dpda.dpda_step(level, z, pts, params)
            assert _inside_hull_box(z.Y.data, pts.coords())
            out.append(z)
            prev_w = w
        ys = dpda.tcp_all_levels(out)
        assert [y.shape for y in ys] == [(dpda.N_SUPERPOINTS, 3)] * 4
        return [y.data for y in ys]

    first, second = run(), run()
    for a, b in zip(first, second, strict=True):
        assert a.tobytes() == b.tobytes()


def test_step_gradients() -> None:
    rng = np.random.default_rng(8)
    prev_params = dpda.init_dpda(rng, 1, 3, None, m=4)
    params = dpda.init_dpda(rng, 2, 4, 3, m=4)
    params.raw_beta.data = np.array(0.3)
    xyz1, xyz2 = rng.uniform(size=(9, 3)), rng.uniform(size=(6, 3))
    f1 = dc.parameter(rng.normal(size=(9, 3)))
    f2 = dc.parameter(rng.normal(size=(6, 4)))
    wh, wy = rng.normal(size=(4, 4)), rng.normal(size=(4, 3))

    def f() -> dc.Tensor:
        prev = dpda.dpda_step(1, None, PointSet(dc.as_tensor(xyz1), f1), prev_params)
        z = dpda.dpda_step(2, prev, PointSet(dc.as_tensor(xyz2), f2), params)
        return (z.H * dc.as_tensor(wh)).sum() + (z.Y * dc.as_tensor(wy)).sum()

    named = {
        **dict(dc.named_parameters(params, "l2")),
        **dict(dc.named_parameters(prev_params, "l1")),
        "f1": f1,
        "f2": f2,
    }
    report = finite_diff_check(f, named, eps=1e-5, tol=1e-4)
    assert report.passed, report.by_group()
