import numpy as np
import pytest
from mpmath import mp, mpf

from fdsos.geometry import BoxCXCYWH, cxcywh_to_xyxy_array, xyxy_to_cxcywh_array
from fdsos.labelspace import VOCABULARY, DenoisingBatch, ToothLabel
from fdsos.losses import (
    NEG,
    NOCARE,
    POS,
    LossConfig,
    build_targets,
    denoising_targets,
    focal_contrastive_loss,
    focal_terms,
    localization_loss,
    localization_terms,
    total_loss,
)
from fdsos.matching import Assignment, Outcome

from conftest import random_xyxy

H = 1e-5


def rel_err(a, b):
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def fd_grad(f, x, h=H):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def smooth_pair(rng, gap=1e-3):
    """Random (pred, gt) cxcywh pair away from the kinks of L1 and GIoU."""
    while True:
        a, b = random_xyxy(rng, 2, min_side=0.05)
        edges_x = np.array([a[0], a[2]])[:, None] - np.array([b[0], b[2]])[None]
        edges_y = np.array([a[1], a[3]])[:, None] - np.array([b[1], b[3]])[None]
        pa, pb = xyxy_to_cxcywh_array(a), xyxy_to_cxcywh_array(b)
        if np.abs(edges_x).min() > gap and np.abs(edges_y).min() > gap and np.abs(pa - pb).min() > gap:
            return pa, pb


class TestFocal:
    def test_closed_form_example(self):
        mp.dps = 40
        ref = mpf("0.25") * mpf("0.25") * mp.log(2)
        assert abs(ref - mpf("0.043321")) < mpf("1e-6")  # 0.0433217..., quoted truncated
        loss, _ = focal_contrastive_loss(np.zeros((1, 1)), np.array([[POS]]))
        assert loss == pytest.approx(float(ref), rel=1e-14)

    def test_all_nocare(self):
        loss, grad = focal_contrastive_loss(np.random.default_rng(0).normal(size=(5, 4)), np.full((5, 4), NOCARE))
        assert loss == 0.0
        assert not grad.any()

    def test_reduces_to_scaled_bce(self, rng):
        x = rng.normal(scale=3, size=(20, 4))
        t = rng.integers(0, 2, size=(20, 4))
        loss, _ = focal_terms(x, t, alpha=0.5, gamma=0.0)
        s = 1 / (1 + np.exp(-x))
        bce = -(t * np.log(s) + (1 - t) * np.log(1 - s))
        np.testing.assert_allclose(loss, 0.5 * bce, rtol=1e-12)

    def test_normalized_by_positive_count(self):
        x = np.zeros((3, 2))
        t = np.array([[POS, NEG], [POS, NEG], [NEG, NEG]])
        raw, _ = focal_terms(x, t, 0.25, 2.0)
        loss, _ = focal_contrastive_loss(x, t)
        assert loss == pytest.approx(raw.sum() / 2)
        loss0, _ = focal_contrastive_loss(x, np.full((3, 2), NEG))
        raw0, _ = focal_terms(x, np.full((3, 2), NEG), 0.25, 2.0)
        assert loss0 == pytest.approx(raw0.sum())

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(5)
        cfg = LossConfig()
        worst = 0.0
        for _ in range(1000):
            x = rng.normal(scale=2.0, size=(3, 4))
            t = rng.choice([POS, NEG, NOCARE], size=(3, 4))
            _, g = focal_contrastive_loss(x, t, cfg)
            num = fd_grad(lambda z: focal_contrastive_loss(z, t, cfg)[0], x)
            worst = max(worst, rel_err(g, num))
        assert worst <= 1e-4

    def test_errors(self):
        with pytest.raises(ValueError):
            focal_contrastive_loss(np.zeros((0, 4)), np.zeros((0, 4)))
        with pytest.raises(ValueError):
            focal_contrastive_loss(np.zeros((2, 4)), np.zeros((2, 3)))

    def test_monotone_decrease_to_zero(self):
        for target in (POS, NEG):
            x = np.zeros((1, 1))
            t = np.array([[target]])
            prev = np.inf
            for _ in range(200):
                loss, g = focal_contrastive_loss(x, t)
                assert 0.0 <= loss < prev
                prev = loss
                x = x - 5.0 * g
            assert prev < 1e-3

    @pytest.mark.parametrize("alpha,gamma", [(0.0, 2.0), (1.0, 2.0), (0.25, -1.0)])
    def test_config_validation(self, alpha, gamma):
        with pytest.raises(ValueError):
            LossConfig(alpha=alpha, gamma=gamma)


class TestLocalization:
    def test_perfect_box(self):
        b = BoxCXCYWH(0.4, 0.5, 0.2, 0.3)
        loss, grad = localization_loss(b, b)
        assert loss == 0.0
        _, g_giou = localization_loss(b, b, LossConfig(lambda_l1=0.0))
        np.testing.assert_allclose(g_giou, 0.0, atol=1e-15)
        assert not grad.any()

    def test_pure_l1_shift(self):
        cfg = LossConfig(lambda_giou=0.0)
        loss, grad = localization_loss(BoxCXCYWH(0.6, 0.5, 0.2, 0.2), BoxCXCYWH(0.5, 0.5, 0.2, 0.2), cfg)
        assert loss == pytest.approx(cfg.lambda_l1 * 0.1, abs=1e-14)
        np.testing.assert_array_equal(grad, [cfg.lambda_l1, 0, 0, 0])

    @pytest.mark.parametrize("l1,giou", [(1.0, 0.0), (0.0, 1.0), (5.0, 2.0)])
    def test_gradient_finite_differences(self, l1, giou):
        rng = np.random.default_rng(17)
        worst = 0.0
        for _ in range(1000):
            p, g = smooth_pair(rng)
            _, grad = localization_terms(p, g, l1, giou)
            num = fd_grad(lambda z: localization_terms(z, g, l1, giou)[0][0], p)
            worst = max(worst, rel_err(grad[0], num))
        assert worst <= 1e-4

    def test_disjoint_branch(self):
        # GIoU gradient on the no-overlap branch still pulls the box toward the target
        p = np.array([0.2, 0.5, 0.1, 0.1])
        g = np.array([0.8, 0.52, 0.1, 0.13])
        _, grad = localization_terms(p, g, 0.0, 1.0)
        assert grad[0, 0] < 0
        num = fd_grad(lambda z: localization_terms(z, g, 0.0, 1.0)[0][0], p)
        assert rel_err(grad[0], num) < 1e-6


def _assignment(outcomes, gt_index):
    q = len(outcomes)
    z = np.zeros((q, 1))
    return Assignment(list(outcomes), np.array(gt_index), 0.0, z, z, z)


def random_scene(rng, q=8, g=4):
    logits = rng.normal(size=(q, len(VOCABULARY)))
    boxes = xyxy_to_cxcywh_array(random_xyxy(rng, q))
    gt_boxes = xyxy_to_cxcywh_array(random_xyxy(rng, g))
    gt_labels = rng.integers(0, len(VOCABULARY), g)
    cols = rng.permutation(q)[:g]
    outcomes = [rng.choice([Outcome.NEGATIVE, Outcome.NOCARE]) for _ in range(q)]
    gt_index = np.full(q, -1)
    for j, i in enumerate(cols):
        outcomes[i] = Outcome.MATCHED
        gt_index[i] = j
    return logits, boxes, _assignment(outcomes, gt_index), gt_labels, gt_boxes


class TestTargets:
    def test_rows(self):
        a = _assignment([Outcome.MATCHED, Outcome.NEGATIVE, Outcome.NOCARE], [1, -1, -1])
        t = build_targets(a, np.array([0, ToothLabel.ANTERIOR_FD.index]))
        assert t[0].tolist() == [NEG, NEG, NEG, POS]
        assert t[1].tolist() == [NEG] * 4
        assert t[2].tolist() == [NOCARE] * 4

    def test_prompt_scoping(self):
        a = _assignment([Outcome.MATCHED, Outcome.NEGATIVE], [0, -1])
        t = build_targets(a, np.array([ToothLabel.ANTERIOR_FD.index]), prompt=(ToothLabel.ANTERIOR_NO_FD, ToothLabel.ANTERIOR_FD))
        assert t[:, :2].tolist() == [[NOCARE, NOCARE], [NOCARE, NOCARE]]
        assert t[0, 3] == POS

    def test_denoising_targets(self):
        batch = DenoisingBatch(np.array([3, 0]), np.full((2, 4), 0.3), np.array([True, False]), np.zeros(2), np.zeros(2))
        t = denoising_targets(batch)
        assert t[0].tolist() == [NEG, NEG, NEG, POS]
        assert t[1].tolist() == [NEG] * 4


class TestTotal:
    def test_all_nocare_scene(self, rng):
        logits, boxes, _, labels, gts = random_scene(rng)
        a = _assignment([Outcome.NOCARE] * 8, [-1] * 8)
        res = total_loss(logits, boxes, a, labels, gts)
        assert res.cls == 0.0 and res.box == 0.0 and res.total == 0.0
        assert not res.grad_logits.any()

    def test_perfect_boxes(self, rng):
        logits, boxes, a, labels, gts = random_scene(rng)
        m = a.gt_index >= 0
        boxes[m] = gts[a.gt_index[m]]
        assert total_loss(logits, boxes, a, labels, gts).box == 0.0

    def test_recomposition(self):
        rng = np.random.default_rng(8)
        cfg = LossConfig()
        for _ in range(50):
            logits, boxes, a, labels, gts = random_scene(rng)
            res = total_loss(logits, boxes, a, labels, gts, cfg)
            # second pass from the raw definitions
            q = len(a.outcomes)
            focal_sum, n_pos, box_sum, n_m = 0.0, 0, 0.0, 0
            s = 1 / (1 + np.exp(-logits))
            for i in range(q):
                if a.outcomes[i] is Outcome.NOCARE:
                    continue
                for t in range(logits.shape[1]):
                    pos = a.outcomes[i] is Outcome.MATCHED and labels[a.gt_index[i]] == t
                    if pos:
                        n_pos += 1
                        focal_sum += -0.25 * (1 - s[i, t]) ** 2 * np.log(s[i, t])
                    else:
                        focal_sum += -0.75 * s[i, t] ** 2 * np.log(1 - s[i, t])
                if a.outcomes[i] is Outcome.MATCHED:
                    p, g = boxes[i], gts[a.gt_index[i]]
                    pa, ga = cxcywh_to_xyxy_array(p), cxcywh_to_xyxy_array(g)
                    iw = max(0.0, min(pa[2], ga[2]) - max(pa[0], ga[0]))
                    ih = max(0.0, min(pa[3], ga[3]) - max(pa[1], ga[1]))
                    inter = iw * ih
                    union = p[2] * p[3] + g[2] * g[3] - inter
                    hull = (max(pa[2], ga[2]) - min(pa[0], ga[0])) * (max(pa[3], ga[3]) - min(pa[1], ga[1]))
                    gi = inter / union - (hull - union) / hull
                    box_sum += 5 * np.abs(p - g).sum() + 2 * (1 - gi)
                    n_m += 1
            expected = focal_sum / max(1, n_pos) + box_sum / n_m
            assert res.total == pytest.approx(expected, rel=1e-10)
            assert res.total == pytest.approx(res.cls + res.box + res.dn, rel=1e-15)

    def test_nocare_rows_are_inert(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            logits, boxes, a, labels, gts = random_scene(rng)
            base = total_loss(logits, boxes, a, labels, gts)
            nocare = a.mask(Outcome.NOCARE)
            bumped = logits.copy()
            bumped[nocare] += rng.normal(scale=10, size=bumped[nocare].shape)
            boxes2 = boxes.copy()
            boxes2[nocare] = xyxy_to_cxcywh_array(random_xyxy(rng, int(nocare.sum())))
            res = total_loss(bumped, boxes2, a, labels, gts)
            assert res.total == base.total
            assert np.array_equal(res.grad_logits, base.grad_logits)
            assert np.array_equal(res.grad_boxes, base.grad_boxes)

    def test_denoising_branch(self, rng):
        logits, boxes, a, labels, gts = random_scene(rng)
        batch = DenoisingBatch(
            labels=np.array([labels[0], (labels[1] + 1) % 4]),
            boxes=gts[:2].copy(),
            positive=np.array([True, False]),
            group_index=np.zeros(2, int),
            source_gt_index=np.array([0, 1]),
        )
        dn_logits = rng.normal(size=(2, 4))
        res = total_loss(logits, boxes, a, labels, gts, dn_logits=dn_logits, dn_boxes=gts[:2].copy(), dn_batch=batch)
        cls, _ = focal_contrastive_loss(dn_logits, denoising_targets(batch))
        assert res.dn == pytest.approx(cls)  # reconstruction is exact, box term 0
        half = total_loss(
            logits, boxes, a, labels, gts, LossConfig(dn_weight=0.5),
            dn_logits=dn_logits, dn_boxes=gts[:2].copy(), dn_batch=batch,
        )
        assert half.dn == pytest.approx(0.5 * res.dn)
        np.testing.assert_allclose(half.grad_dn_logits, 0.5 * res.grad_dn_logits)
