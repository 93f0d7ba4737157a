"""Stage-1 oracles: ROI pooling, depth-wise correlation, fusion, head,
target assignment, loss, and proposal generation."""

import math

import numpy as np
import pytest

from tritrack.geometry import Box, nms
from tritrack.ndops import Tensor, sum_all
from tritrack.trident_rpn import (
    FOCAL_ALPHA,
    FOCAL_GAMMA,
    FuseRefine,
    RpnHead,
    RpnOutput,
    TridentRpn,
    assign_rpn_targets,
    depthwise_xcorr,
    propose,
    roi_align,
    rpn_loss,
    trident_align,
)
from tritrack.verify import (
    brute_force_nms,
    dense_roi_align,
    gradcheck,
    naive_depthwise_xcorr,
    reference_roi_align,
)

SCALES = (3, 5, 9)


class TestTridentAlign:
    def test_constant_map_constant_pyramid(self):
        fm = Tensor(np.full((4, 10, 12), 2.5))
        levels = trident_align(fm, Box(16, 16, 120, 100), 16, SCALES)
        for s, lv in zip(SCALES, levels):
            assert lv.shape == (4, s, s)
            np.testing.assert_allclose(lv.data, 2.5, atol=1e-12)

    def test_single_cell_box_constant_neighborhood(self, rng):
        fm = np.full((2, 8, 8), -1.0)
        fm[:, 3:6, 3:6] = 4.0  # constant 3x3 neighborhood
        # box covering exactly cell (4,4) in feature coords -> image coords
        levels = trident_align(Tensor(fm), Box(4 * 16, 4 * 16, 5 * 16, 5 * 16), 16, (3,))
        np.testing.assert_allclose(levels[0].data, 4.0, atol=1e-12)

    def test_matches_dense_sampling_oracle(self, rng):
        # smooth fields: see smooth_random_map for why the 2e-2 comparison
        # is meaningful there and not on white noise
        from tritrack.verify import smooth_random_map

        for _ in range(20):
            fm = smooth_random_map(rng, 2, 48, 48)
            x1, y1 = rng.uniform(0.5, 30.0, 2)
            box = (x1, y1, x1 + rng.uniform(2.0, 12.0), y1 + rng.uniform(2.0, 10.0))
            got = roi_align(Tensor(fm), box, 3).data
            want = dense_roi_align(fm, box, 3)
            rel = np.abs(got - want).max() / max(np.abs(want).max(), 1e-9)
            assert rel <= 2e-2

    def test_matches_independent_reimplementation(self, rng):
        for _ in range(10):
            fm = rng.standard_normal((3, 10, 10))
            x1, y1 = rng.uniform(-1.0, 5.0, 2)
            box = (x1, y1, x1 + rng.uniform(0.5, 6.0), y1 + rng.uniform(0.5, 6.0))
            for s in SCALES:
                got = roi_align(Tensor(fm), box, s).data
                want = reference_roi_align(fm, box, s)
                assert np.abs(got - want).max() <= 1e-12

    def test_padding_invariance_outside_sampled_region(self, rng):
        fm = rng.standard_normal((2, 8, 8))
        box = Box(2 * 16, 2 * 16, 6 * 16, 6 * 16)
        base = [lv.data for lv in trident_align(Tensor(fm), box, 16, SCALES)]
        padded = np.pad(fm, ((0, 0), (0, 5), (0, 7)), constant_values=99.0)
        again = [lv.data for lv in trident_align(Tensor(padded), box, 16, SCALES)]
        for a, b in zip(base, again):
            np.testing.assert_array_equal(a, b)

    def test_grad(self, rng):
        fm = Tensor(rng.standard_normal((2, 7, 7)), requires_grad=True)
        gradcheck(lambda f: sum_all(roi_align(f, (0.7, 1.1, 5.3, 6.2), 3)), [fm], rng)


class TestDepthwiseXcorr:
    def test_identity_1x1_ones_kernel(self, rng):
        x = Tensor(rng.standard_normal((3, 6, 7)))
        z = Tensor(np.ones((3, 1, 1)))
        np.testing.assert_array_equal(depthwise_xcorr(x, z).data, x.data)

    def test_delta_kernel_identity(self, rng):
        x = Tensor(rng.standard_normal((2, 5, 5)))
        z = np.zeros((2, 3, 3))
        z[:, 1, 1] = 1.0
        np.testing.assert_allclose(depthwise_xcorr(x, Tensor(z)).data, x.data, atol=1e-15)

    def test_matches_naive_sliding_window(self, rng):
        for _ in range(5):
            x = rng.standard_normal((4, 7, 7))
            z = rng.standard_normal((4, 3, 3))
            got = depthwise_xcorr(Tensor(x), Tensor(z)).data
            want = naive_depthwise_xcorr(x, z)
            assert np.abs(got - want).max() <= 1e-12

    def test_linearity_in_search_map(self, rng):
        x1 = rng.standard_normal((3, 6, 6))
        x2 = rng.standard_normal((3, 6, 6))
        z = Tensor(rng.standard_normal((3, 3, 3)))
        a, b = 1.7, -0.4
        lhs = depthwise_xcorr(Tensor(a * x1 + b * x2), z).data
        rhs = a * depthwise_xcorr(Tensor(x1), z).data + b * depthwise_xcorr(Tensor(x2), z).data
        assert np.abs(lhs - rhs).max() <= 1e-10

    def test_channel_mismatch_raises(self, rng):
        with pytest.raises(ValueError):
            depthwise_xcorr(Tensor(rng.standard_normal((3, 5, 5))), Tensor(np.ones((2, 3, 3))))

    def test_grad_both_inputs(self, rng):
        x = Tensor(rng.standard_normal((2, 5, 5)), requires_grad=True)
        z = Tensor(rng.standard_normal((2, 3, 3)), requires_grad=True)
        gradcheck(lambda a, b: sum_all(depthwise_xcorr(a, b)), [x, z], rng)


class TestFuseRefine:
    def _block(self, rng, c=4, k=2):
        return FuseRefine(c, k, rng, reduction=2, spatial_kernel=3, nonlocal_inter=2)

    def test_output_dims(self, rng):
        for k in (1, 2, 3):
            block = FuseRefine(4, k, rng, reduction=2, spatial_kernel=3, nonlocal_inter=2)
            maps = [Tensor(rng.standard_normal((4, 5, 6))) for _ in range(k)]
            assert block.forward(maps).shape == (4, 5, 6)

    def test_saturated_gates_reduce_to_projection_plus_nonlocal(self, rng):
        block = self._block(rng)
        # saturate both sigmoid gates: zero the MLP/conv weights, huge bias
        for p in (block.channel_gate.w1, block.channel_gate.w2, block.spatial_gate.w):
            p.data[:] = 0.0
        block.channel_gate.b2.data[:] = 50.0
        block.spatial_gate.b.data[:] = 50.0
        maps = [Tensor(rng.standard_normal((4, 5, 5))) for _ in range(2)]
        got = block.forward(maps).data

        from tritrack.ndops import concat, conv2d

        cat = concat(maps, axis=0)
        proj = conv2d(cat, block.wproj, block.bproj)
        want = block.nonlocal_block.forward(proj).data
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_gradcheck_through_full_block(self, rng):
        block = FuseRefine(2, 2, rng, reduction=2, spatial_kernel=3, nonlocal_inter=2)
        maps = [
            Tensor(rng.standard_normal((2, 5, 5)), requires_grad=True) for _ in range(2)
        ]
        params = block.parameters()
        gradcheck(
            lambda *ts: sum_all(block.forward([ts[0], ts[1]])),
            maps + params,
            rng,
            max_coords=4,
        )


class TestRpnHead:
    def test_output_dims_match_input(self, rng):
        head = RpnHead(6, rng, width=4)
        out = head.forward(Tensor(rng.standard_normal((6, 7, 9))))
        assert out.cls.shape == (1, 7, 9)
        assert out.reg.shape == (4, 7, 9)
        assert np.all(out.reg.data > 0.0)

    def test_zero_weight_heads_emit_bias(self, rng):
        head = RpnHead(3, rng, width=4)
        for name, p in head.named_parameters():
            if name.endswith("_w0") or name.endswith("_w1") or "out_w" in name:
                p.data[:] = 0.0
        head.cls_out_b.data[:] = 0.37
        head.reg_out_b.data[:] = np.array([0.1, 0.2, 0.3, 0.4])
        out = head.forward(Tensor(rng.standard_normal((3, 4, 5))))
        np.testing.assert_allclose(out.cls.data, 0.37, atol=1e-15)
        for k in range(4):
            np.testing.assert_allclose(out.reg.data[k], math.exp(0.1 * (k + 1)), atol=1e-12)

    def test_gradcheck_both_branches(self, rng):
        head = RpnHead(2, rng, width=3)
        x = Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True)
        gradcheck(
            lambda xx, *ps: sum_all(head.forward(xx).cls) + sum_all(head.forward(xx).reg),
            [x] + head.parameters(),
            rng,
            max_coords=3,
        )


class TestAssignTargets:
    def test_gt_covering_whole_image_all_positive(self):
        labels, _, n = assign_rpn_targets(Box(-1, -1, 700, 420), (25, 42), 16)
        assert n == 25 * 42
        assert labels.all()

    def test_single_cell_gt(self):
        # one stride cell centered on cell (3, 4): point (72, 56)
        labels, targets, n = assign_rpn_targets(Box(64, 48, 80, 64), (25, 42), 16)
        assert n == 1
        assert labels[3, 4] == 1
        np.testing.assert_array_equal(targets[:, 3, 4], [8, 8, 8, 8])

    def test_exhaustive_scan_oracle(self, rng):
        for _ in range(20):
            x1, y1 = rng.uniform(0, 500), rng.uniform(0, 300)
            gt = Box(x1, y1, x1 + rng.uniform(5, 160), y1 + rng.uniform(5, 100))
            labels, targets, n = assign_rpn_targets(gt, (25, 42), 16)
            count = 0
            for i in range(25):
                for j in range(42):
                    px, py = (j + 0.5) * 16, (i + 0.5) * 16
                    inside = gt.x1 < px < gt.x2 and gt.y1 < py < gt.y2
                    assert bool(labels[i, j]) == inside
                    if inside:
                        count += 1
                        np.testing.assert_allclose(
                            targets[:, i, j],
                            [px - gt.x1, py - gt.y1, gt.x2 - px, gt.y2 - py],
                        )
            assert count == n


def _perfect_output(labels, targets, sharpness=60.0):
    cls = np.where(labels > 0, sharpness, -sharpness)[None]
    reg = np.where(targets > 0, targets, 1.0)
    return RpnOutput(cls=Tensor(cls), reg=Tensor(reg))


class TestRpnLoss:
    def test_perfect_predictions_approach_zero(self):
        gt = Box(100, 100, 260, 220)
        labels, targets, _ = assign_rpn_targets(gt, (25, 42), 16)
        out = _perfect_output(labels, targets)
        loss = rpn_loss(out, labels, targets, 16)
        assert 0.0 <= loss.item() < 1e-6

    def test_single_positive_closed_form(self):
        # One cell map, one positive, p = 0.5 (logit 0), regression exact:
        # focal term is -alpha * (1-p)^gamma * ln(p); the IoU term is 0.
        labels = np.ones((1, 1))
        targets = np.full((4, 1, 1), 8.0)
        out = RpnOutput(cls=Tensor(np.zeros((1, 1, 1))), reg=Tensor(targets.copy()))
        loss = rpn_loss(out, labels, targets, 16)
        want = -FOCAL_ALPHA * (1 - 0.5) ** FOCAL_GAMMA * math.log(0.5)
        assert loss.item() == pytest.approx(want, abs=1e-9)
        assert want == pytest.approx(0.04332169878499658, abs=1e-12)

    def test_loss_nonnegative_random(self, rng):
        for _ in range(10):
            labels, targets, n = assign_rpn_targets(Box(50, 50, 200, 180), (12, 20), 16)
            out = RpnOutput(
                cls=Tensor(rng.standard_normal((1, 12, 20))),
                reg=Tensor(np.exp(rng.standard_normal((4, 12, 20)))),
            )
            assert rpn_loss(out, labels, targets, 16).item() >= 0.0

    def test_zero_positive_raises(self):
        labels = np.zeros((4, 4))
        with pytest.raises(ValueError):
            rpn_loss(
                RpnOutput(cls=Tensor(np.zeros((1, 4, 4))), reg=Tensor(np.ones((4, 4, 4)))),
                labels,
                np.zeros((4, 4, 4)),
                16,
            )

    def test_grad_matches_finite_differences(self, rng):
        labels, targets, _ = assign_rpn_targets(Box(30, 30, 120, 100), (8, 10), 16)
        cls = Tensor(rng.standard_normal((1, 8, 10)), requires_grad=True)
        raw = Tensor(rng.standard_normal((4, 8, 10)) * 0.3 + 3.0, requires_grad=True)

        def build(c, r):
            from tritrack.ndops import exp

            return rpn_loss(RpnOutput(cls=c, reg=exp(r)), labels, targets, 16)

        gradcheck(build, [cls, raw], rng, max_coords=6)


class TestPropose:
    def test_identical_predictions_single_survivor(self):
        cls = np.zeros((1, 5, 8))
        # distances beyond the canvas: every cell clips to the same full-frame box
        reg = np.full((4, 5, 8), 1e4)
        out = propose(cls, reg, 16)
        assert len(out) == 1
        assert out[0].box == Box(0.0, 0.0, 666.0, 400.0)

    def test_sorted_by_descending_score(self, rng):
        cls = rng.standard_normal((1, 10, 12))
        reg = np.exp(rng.standard_normal((4, 10, 12)) + 2.5)
        props = propose(cls, reg, 16)
        scores = [p.score for p in props]
        assert scores == sorted(scores, reverse=True)
        assert len(props) <= 64
        for p in props:
            assert 0 <= p.box.x1 < p.box.x2 <= 666
            assert 0 <= p.box.y1 < p.box.y2 <= 400

    def test_matches_brute_force_decode_nms(self, rng):
        for _ in range(10):
            cls = rng.standard_normal((1, 6, 9)) * 2
            reg = np.exp(rng.standard_normal((4, 6, 9)) + 2.0)
            got = propose(cls, reg, 16, iou_threshold=0.5, top_n=10)

            # independent decode + brute-force NMS
            scored = []
            for i in range(6):
                for j in range(9):
                    px, py = (j + 0.5) * 16, (i + 0.5) * 16
                    l, t, r, b = reg[:, i, j]
                    box = Box(
                        min(max(px - l, 0), 666),
                        min(max(py - t, 0), 400),
                        min(max(px + r, 0), 666),
                        min(max(py + b, 0), 400),
                    )
                    score = 1.0 / (1.0 + math.exp(-cls[0, i, j]))
                    if box.area > 1.0:
                        scored.append((box, score))
            kept = brute_force_nms(scored, 0.5, 10)
            want = [scored[k] for k in kept]
            assert len(got) == len(want)
            for p, (box, score) in zip(got, want):
                assert p.score == pytest.approx(score, abs=1e-12)
                assert p.box.x1 == pytest.approx(box.x1, abs=1e-9)
                assert p.box.y2 == pytest.approx(box.y2, abs=1e-9)


class TestEndToEnd:
    def test_full_rpn_forward_produces_valid_proposals(self, rng):
        rpn = TridentRpn(8, SCALES, rng, head_width=8, nonlocal_inter=4)
        z = Tensor(rng.standard_normal((8, 25, 42)))
        x = Tensor(rng.standard_normal((8, 25, 42)))
        pyramid = rpn.build_pyramid(z, Box(100, 80, 300, 240), 16)
        assert [lv.shape for lv in pyramid] == [(8, 3, 3), (8, 5, 5), (8, 9, 9)]
        out = rpn.forward(pyramid, x)
        props = propose(out.cls.data, out.reg.data, 16)
        assert 0 < len(props) <= 64
        for p in props:
            assert p.box.is_valid()
            assert 0 <= p.box.x1 <= 666 and 0 <= p.box.y2 <= 400
