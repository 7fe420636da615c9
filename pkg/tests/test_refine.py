import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from helpers import as_oracle, as_pkg, random_instance, random_simplex, random_table
from taxoprior import fixtures
from taxoprior.errors import FallbackError
from taxoprior.ontology import ConstraintTable, FallbackPolicy, build_constraint_table
from taxoprior.refine import (
    RefineConfig,
    RefineReport,
    channel_sum,
    constraint_mask,
    fuse_tta,
    harden,
    inverse_transform,
    refine_image,
    refine_image_with_scores,
    resize_bilinear,
)
from taxoprior.tensorio import AugDescriptor, LabelMap, SoftPrediction

VOID = 255


def sp(a):
    return SoftPrediction(np.asarray(a, dtype=np.float32))


def lm(a):
    return LabelMap(np.asarray(a, dtype=np.uint8))


def full_table(c, n_extra=1):
    full = (1 << c) - 1
    return ConstraintTable.from_rows([full] * n_extra, full, c)


simplex_arrays = st.builds(
    lambda seed, h, w, c: random_simplex(np.random.default_rng(seed), h, w, c),
    st.integers(0, 2**32 - 1), st.integers(1, 9), st.integers(1, 9), st.integers(2, 6),
)


# -- inverse transform -------------------------------------------------------------

@given(simplex_arrays)
def test_identity_transform_is_bit_exact(x):
    out = inverse_transform(sp(x), AugDescriptor())
    assert out.scores.tobytes() == x.tobytes()


@given(simplex_arrays)
def test_flip_is_an_involution(x):
    d = AugDescriptor(hflip=True)
    once = inverse_transform(sp(x), d)
    assert np.array_equal(once.scores, x[:, ::-1])
    assert inverse_transform(once, d).scores.tobytes() == x.tobytes()


def test_down_of_up_on_2x2():
    x = np.array([[[0.6, 0.4], [0.5, 0.5]], [[0.45, 0.55], [0.55, 0.45]]], dtype=np.float32)
    up = resize_bilinear(x, 4, 4)
    up = (up / channel_sum(up)[..., None]).astype(np.float32)
    back = inverse_transform(sp(up), AugDescriptor(False, 2.0, 2, 2)).scores
    assert np.abs(back - x).max() <= 0.05
    # independent scalar bilinear gives the same numbers
    ref = oracles.inverse(up, False, 2.0, 2, 2)
    assert back.tobytes() == ref.tobytes()


def test_bilinear_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        h, w = rng.integers(1, 9, 2)
        oh, ow = rng.integers(1, 13, 2)
        x = rng.random((h, w, 3))
        ref = np.array(oracles.bilinear(oracles.to_lists(x), oh, ow))
        assert np.array_equal(resize_bilinear(x, oh, ow), ref)


def test_inverse_transform_shape_check():
    with pytest.raises(ValueError, match="should be"):
        inverse_transform(sp(np.full((3, 3, 2), 0.5)), AugDescriptor(False, 2.0, 2, 2))
    with pytest.raises(ValueError, match="base geometry"):
        inverse_transform(sp(np.full((3, 3, 2), 0.5)), AugDescriptor(False, 2.0))


@given(st.integers(0, 2**32 - 1), st.sampled_from([0.5, 0.75, 1.25, 1.5, 1.75, 2.0]), st.booleans())
def test_rescaled_output_is_on_simplex(seed, scale, flip):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(2, 12, 2)
    d = AugDescriptor(flip, scale, int(h), int(w))
    sh, sw = d.scaled_shape
    out = inverse_transform(sp(random_simplex(rng, sh, sw, 4)), d)
    assert out.shape == (h, w, 4)
    assert out.simplex_error() <= 1e-4


# -- fusion -----------------------------------------------------------------------------

def test_fuse_single_and_repeats():
    x = random_simplex(np.random.default_rng(1), 4, 5, 3)
    assert fuse_tta([sp(x)]).scores is not None
    assert fuse_tta([sp(x)]).scores.tobytes() == x.tobytes()
    assert fuse_tta([sp(x)] * 3).scores.tobytes() == x.tobytes()


def test_fuse_mean_of_vertices():
    out = fuse_tta([sp([[[1, 0]]]), sp([[[0, 1]]])])
    assert out.scores.tolist() == [[[0.5, 0.5]]]


def test_fuse_errors():
    with pytest.raises(ValueError, match="empty"):
        fuse_tta([])
    with pytest.raises(ValueError, match="shape"):
        fuse_tta([sp(np.full((1, 1, 2), 0.5)), sp(np.full((1, 2, 2), 0.5))])


@given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.randoms(use_true_random=False))
def test_fuse_is_permutation_invariant(seed, n, rnd):
    rng = np.random.default_rng(seed)
    preds = [sp(random_simplex(rng, 3, 4, 5)) for _ in range(n)]
    shuffled = list(preds)
    rnd.shuffle(shuffled)
    assert fuse_tta(preds).scores.tobytes() == fuse_tta(shuffled).scores.tobytes()
    assert fuse_tta(preds).simplex_error() <= 1e-4


# -- masking and hardening -----------------------------------------------------------------

def test_mask_hand_example():
    # channels: building, sky, road
    x = sp([[[0.7, 0.2, 0.1]]])
    table = ConstraintTable.from_rows([0b110], 0b111, 3)
    masked, rep = constraint_mask(x, lm([[0]]), table)
    np.testing.assert_allclose(masked.scores[0, 0], [0, 0.2, 0.1], atol=0)
    renorm, _ = constraint_mask(x, lm([[0]]), table, RefineConfig(renormalize_output=True))
    np.testing.assert_allclose(renorm.scores[0, 0], [0, 2 / 3, 1 / 3], atol=1e-7)
    assert harden(renorm).ids.tolist() == [[1]]
    assert rep.pixels_constrained == 1
    assert rep.pixels_changed_by_mask == 1


def test_cityscapes_road_pixel():
    rel = fixtures.ontology("cityscapes-goose")
    table = build_constraint_table(rel)
    goose = rel.source
    x = random_simplex(np.random.default_rng(5), 1, 1, len(goose))
    masked, _ = constraint_mask(sp(x), lm([[rel.extra.id_of("road")]]), table)
    keep = {goose.id_of(n) for n in ("asphalt", "marking", "cobble")}
    for c in range(len(goose)):
        assert masked.scores[0, 0, c] == (x[0, 0, c] if c in keep else 0)


def test_vacuous_row_is_identity():
    x = random_simplex(np.random.default_rng(2), 3, 3, 4)
    masked, rep = constraint_mask(sp(x), lm(np.zeros((3, 3))), full_table(4))
    assert masked.scores.tobytes() == x.tobytes()
    assert rep.pixels_constrained == 0 and rep.pixels_changed_by_mask == 0


def test_tie_breaks_low():
    assert harden(sp([[[0.5, 0.5]]])).ids.tolist() == [[0]]
    assert harden(sp([[[0.2, 0.4, 0.4]]])).ids.tolist() == [[1]]


def test_fallback_policies():
    x = sp([[[0.0, 1.0], [0.5, 0.5]]])
    table = ConstraintTable.from_rows([0b01, 0b11], 0b11, 2)
    gt = lm([[0, 1]])
    masked, rep = constraint_mask(x, gt, table, RefineConfig(fallback=FallbackPolicy.VOID))
    assert rep.pixels_fallback == 1 and rep.fallback_pixels == [(0, 0)]
    assert harden(masked, rep.fallback_mask, RefineConfig()).ids.tolist() == [[255, 0]]
    cfg = RefineConfig(fallback=FallbackPolicy.UNCONSTRAINED)
    masked, rep = constraint_mask(x, gt, table, cfg)
    assert harden(masked, rep.fallback_mask, cfg).ids.tolist() == [[1, 0]]
    with pytest.raises(FallbackError, match=r"\(0, 0\)") as ei:
        constraint_mask(x, gt, table, RefineConfig(fallback=FallbackPolicy.ERROR))
    assert (ei.value.row, ei.value.col, ei.value.gt_id) == (0, 0, 0)


def test_empty_row_is_fallback():
    x = sp(np.full((2, 2, 2), 0.5))
    table = ConstraintTable.from_rows([0], 0, 2)
    labels, rep = refine_image([(x, AugDescriptor())], lm([[0, 0], [0, 0]]), table)
    assert (labels.ids == 255).all()
    assert rep.pixels_fallback == 4


def test_mask_checks_shapes():
    with pytest.raises(ValueError, match="ground truth"):
        constraint_mask(sp(np.full((2, 2, 2), 0.5)), lm(np.zeros((2, 3))), full_table(2))
    with pytest.raises(ValueError, match="channels"):
        constraint_mask(sp(np.full((2, 2, 3), 1 / 3)), lm(np.zeros((2, 2))), full_table(2))


@given(st.integers(0, 2**32 - 1), st.booleans())
def test_mask_idempotence(seed, renorm):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 7))
    table, _ = random_table(rng, 3, c, allow_empty=False)
    gt = lm(rng.integers(0, 3, (4, 4)))
    cfg = RefineConfig(renormalize_output=renorm)
    once, rep1 = constraint_mask(sp(random_simplex(rng, 4, 4, c)), gt, table, cfg)
    twice, _ = constraint_mask(once, gt, table, cfg)
    if renorm:
        assert np.array_equal(harden(once, rep1.fallback_mask).ids, harden(twice).ids)
    else:
        assert once.scores.tobytes() == twice.scores.tobytes()


@given(st.integers(0, 2**32 - 1))
def test_argmax_dominance(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 7))
    table, allowed = random_table(rng, 3, c, allow_empty=False)
    gt = rng.integers(0, 3, (5, 5)).astype(np.uint8)
    x = random_simplex(rng, 5, 5, c)
    plain = harden(sp(x)).ids
    labels, _ = refine_image([(sp(x), AugDescriptor())], lm(gt), table)
    for (r, col), a in np.ndenumerate(plain):
        if a in allowed[gt[r, col]]:
            assert labels.ids[r, col] == a


@given(st.integers(0, 2**32 - 1), st.floats(0.125, 8.0))
def test_hardening_scale_invariance(seed, lam):
    rng = np.random.default_rng(seed)
    x = random_simplex(rng, 3, 3, 4)
    y = x.copy()
    y[1, 1] = (y[1, 1].astype(np.float64) * lam).astype(np.float32)
    assert harden(sp(x)).ids[1, 1] == harden(sp(y)).ids[1, 1]


# -- full pipeline --------------------------------------------------------------------------

def test_degenerate_pipeline_is_argmax():
    x = random_simplex(np.random.default_rng(9), 5, 6, 4)
    labels, _ = refine_image([(sp(x), AugDescriptor())], lm(np.zeros((5, 6))), full_table(4))
    assert np.array_equal(labels.ids, np.argmax(x, axis=-1))


def test_singleton_row_forces_class():
    x = random_simplex(np.random.default_rng(9), 5, 6, 4)
    table = ConstraintTable.from_rows([0b0100], 0b0100, 4)
    labels, _ = refine_image([(sp(x), AugDescriptor())], lm(np.zeros((5, 6))), table)
    assert (labels.ids == 2).all()


def test_two_aug_three_class_fixture():
    a = np.array([[[0.6, 0.3, 0.1], [0.2, 0.5, 0.3]],
                  [[0.1, 0.1, 0.8], [0.4, 0.4, 0.2]]], dtype=np.float32)
    flipped = np.array([[[0.1, 0.2, 0.7], [0.5, 0.4, 0.1]],
                        [[0.3, 0.3, 0.4], [0.2, 0.2, 0.6]]], dtype=np.float32)
    table = ConstraintTable.from_rows([0b011, 0b110], 0b111, 3)
    gt = lm([[0, 1], [1, 255]])
    preds = [(sp(a), AugDescriptor()), (sp(flipped), AugDescriptor(hflip=True))]
    labels, rep = refine_image(preds, gt, table)
    expected, n_fb = oracles.pipeline([(a, False, 1.0), (flipped, True, 1.0)], gt.ids,
                                      {0: {0, 1}, 1: {1, 2}, 255: {0, 1, 2}})
    # fused by hand: (.55 .35 .10) (.15 .35 .50) / (.15 .15 .70) (.35 .35 .30); last one is a tie
    assert labels.ids.tolist() == expected.tolist() == [[0, 2], [2, 0]]
    assert rep.pixels_fallback == n_fb == 0


def test_matches_oracle_on_random_instances():
    rng = np.random.default_rng(1234)
    for _ in range(40):
        preds, gt, table, allowed = random_instance(rng)
        labels, rep = refine_image(as_pkg(preds), lm(gt), table)
        expected, n_fb = oracles.pipeline(as_oracle(preds), gt, allowed)
        assert labels.ids.tobytes() == expected.tobytes()
        assert rep.pixels_fallback == n_fb


def test_report_accounting():
    rng = np.random.default_rng(77)
    for _ in range(20):
        preds, gt, table, _ = random_instance(rng)
        _, rep = refine_image(as_pkg(preds), lm(gt), table)
        assert rep.pixels_resolved + rep.pixels_fallback == rep.pixels_total == gt.size
        assert rep.pixels_changed_by_mask <= rep.pixels_total
        assert sum(rep.histogram.values()) == rep.pixels_total


def test_with_scores_returns_masked():
    x = sp([[[0.7, 0.2, 0.1]]])
    table = ConstraintTable.from_rows([0b110], 0b111, 3)
    labels, _, masked = refine_image_with_scores([(x, AugDescriptor())], lm([[0]]), table,
                                                 RefineConfig(renormalize_output=True))
    assert labels.ids.tolist() == [[1]]
    np.testing.assert_allclose(masked.scores[0, 0], [0, 2 / 3, 1 / 3], atol=1e-7)


def test_report_json_and_merge():
    a = RefineReport(10, 4, 1, 2, {0: 6, 255: 1, 3: 3})
    b = RefineReport(6, 1, 0, 1, {0: 6})
    m = RefineReport.merge([a, b])
    assert (m.pixels_total, m.pixels_constrained, m.pixels_fallback, m.pixels_changed_by_mask) == (16, 5, 1, 3)
    assert m.histogram == {0: 12, 255: 1, 3: 3}
    body = m.to_json()
    assert body["schema"] == 1
    assert list(body["histogram"]) == ["0", "3", "255"]
    assert body["fraction_fallback"] == 1 / 16


def test_off_simplex_fusion_rejected():
    bad = np.full((2, 2, 2), 0.4, dtype=np.float32)
    good = np.full((2, 2, 2), 0.5, dtype=np.float32)
    with pytest.raises(ValueError, match="simplex"):
        refine_image([(sp(bad), AugDescriptor()), (sp(good), AugDescriptor(hflip=True))],
                     lm(np.zeros((2, 2))), full_table(2))


def test_config_validation():
    with pytest.raises(ValueError):
        RefineConfig(simplex_tol=0)


@pytest.mark.parametrize("policy", list(FallbackPolicy))
def test_fast_path_equals_staged_path(policy):
    rng = np.random.default_rng(31)
    cfg = RefineConfig(fallback=policy)
    for _ in range(60):
        preds, gt, table, _ = random_instance(rng)
        try:
            staged = refine_image_with_scores(as_pkg(preds), lm(gt), table, cfg)
        except FallbackError as exc:
            with pytest.raises(FallbackError) as ei:
                refine_image(as_pkg(preds), lm(gt), table, cfg)
            assert (ei.value.row, ei.value.col) == (exc.row, exc.col)
            continue
        labels, rep = refine_image(as_pkg(preds), lm(gt), table, cfg)
        assert labels == staged[0]
        assert rep.to_json() == staged[1].to_json()


def test_fast_path_subset_branch():
    # teacher agrees with the constraint almost everywhere, so only a few pixels need the masked argmax
    rng = np.random.default_rng(8)
    c = 6
    table = ConstraintTable.from_rows([0b000011, 0b001100, 0b110000], 0b111111, c)
    gt = rng.integers(0, 3, (20, 20)).astype(np.uint8)
    x = random_simplex(rng, 20, 20, c)
    x[..., :] *= 0.1
    for (r, col), e in np.ndenumerate(gt):
        x[r, col, 2 * e] += 1.0
    x[3, 4] = [0, 0, 1, 0, 0, 0]
    gt[3, 4] = 0                       # nothing allowed has mass: fallback
    x /= x.sum(-1, keepdims=True)
    x = x.astype(np.float32)
    labels, rep = refine_image([(sp(x), AugDescriptor())], lm(gt), table)
    expected, n_fb = oracles.mask_and_harden(x, gt, {0: {0, 1}, 1: {2, 3}, 2: {4, 5}, 255: set(range(c))})
    assert labels.ids.tolist() == expected.tolist()
    assert rep.pixels_fallback == n_fb == 1


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 5))
def test_masking_commutes_with_fusion(seed, n):
    # masking is a per-channel 0/1 projection, so it commutes with averaging up to summation order
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 7))
    table, _ = random_table(rng, 3, c)
    gt = lm(rng.integers(0, 3, (4, 5)).astype(np.uint8))
    preds = [sp(random_simplex(rng, 4, 5, c)) for _ in range(n)]
    mask_after, _ = constraint_mask(fuse_tta(preds), gt, table)
    lookup = np.take(table.lookup, gt.ids, axis=0)
    mask_first = fuse_tta([sp((p.scores * lookup).astype(np.float32)) for p in preds])
    assert np.allclose(mask_after.scores, mask_first.scores, rtol=0, atol=1e-7)
