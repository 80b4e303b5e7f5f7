import numpy as np
import pytest

from losslab.losses import (
    ANSWER_ONLY,
    FULL_CONTEXT,
    AllClassesEmpty,
    AuxiliaryKind,
    EmptyAnswerMask,
    EmptyClassPolicy,
    EmptyInput,
    LogitBatch,
    LossConfig,
    LossInputError,
    LovaszMode,
    NoSelectedPositions,
    Reduction,
    Role,
    ce_loss,
    combined_loss,
    dice_loss,
    focal_loss,
    generalized_dice_loss,
    lovasz_grad_weights,
    lovasz_hinge,
    lovasz_loss,
    self_adjusting_dice_loss,
    self_adjusting_dice_term,
    soft_dice_term,
    softmax,
)

LN2 = 0.6931471805599453
LN4 = 1.3862943611198906


def single_position(probs, target=0):
    probs = np.asarray(probs, dtype=np.float64)[None, :]
    return LogitBatch.from_probs(probs, np.array([target]), np.array([1]))


def random_batch(seed, n=8, vocab=17):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((n, vocab))
    targets = rng.integers(0, vocab, n)
    roles = np.array([0] * (n // 2) + [1] * (n - n // 2))
    return LogitBatch(logits, targets, roles)


class TestLogitBatch:
    def test_coerces_dtype_to_float64(self):
        batch = LogitBatch(np.zeros((1, 2), dtype=np.float32), np.array([0]), np.array([1]))
        assert batch.logits.dtype == np.float64

    def test_rejects_nan_logits(self):
        with pytest.raises(LossInputError):
            LogitBatch(np.array([[np.nan, 0.0]]), np.array([0]), np.array([1]))

    def test_rejects_target_out_of_range(self):
        with pytest.raises(LossInputError):
            LogitBatch(np.zeros((1, 3)), np.array([3]), np.array([1]))

    def test_rejects_bad_role(self):
        with pytest.raises(LossInputError):
            LogitBatch(np.zeros((1, 3)), np.array([0]), np.array([7]))

    def test_rejects_all_pad(self):
        with pytest.raises(LossInputError):
            LogitBatch(np.zeros((2, 3)), np.array([0, 1]), np.array([2, 2]))

    def test_from_probs_recovers_distribution(self):
        probs = np.array([[0.1, 0.2, 0.7], [0.25, 0.25, 0.5]])
        batch = LogitBatch.from_probs(probs, np.array([2, 0]), np.array([1, 1]))
        assert np.allclose(softmax(batch.logits), probs, atol=1e-12)


class TestCrossEntropy:
    def test_certain_prediction_is_zero(self):
        probs = np.zeros(5)
        probs[3] = 1.0
        batch = single_position(probs, target=3)
        result = ce_loss(batch)
        assert result.value == pytest.approx(0.0, abs=1e-9)
        assert result.gradient[0, 3] == pytest.approx(0.0, abs=1e-9)

    def test_uniform_over_four(self):
        batch = single_position([0.25, 0.25, 0.25, 0.25], target=2)
        assert ce_loss(batch).value == pytest.approx(LN4, abs=1e-12)

    def test_half_probability(self):
        batch = single_position([0.5, 0.5], target=0)
        assert ce_loss(batch).value == pytest.approx(LN2, abs=1e-12)

    def test_gradient_is_probs_minus_onehot(self):
        batch = random_batch(0)
        result = ce_loss(batch, FULL_CONTEXT, Reduction.SUM)
        probs = softmax(batch.logits)
        expected = probs.copy()
        expected[np.arange(8), batch.targets] -= 1.0
        assert np.allclose(result.gradient, expected, atol=1e-12)

    def test_sum_is_count_times_mean(self):
        batch = random_batch(1)
        mean = ce_loss(batch, FULL_CONTEXT, Reduction.MEAN)
        total = ce_loss(batch, FULL_CONTEXT, Reduction.SUM)
        assert total.value == pytest.approx(8 * mean.value, rel=1e-12)

    def test_answer_only_selects_answer_rows(self):
        batch = random_batch(2)
        result = ce_loss(batch, ANSWER_ONLY)
        assert np.all(result.gradient[:4] == 0.0)
        assert np.any(result.gradient[4:] != 0.0)

    def test_no_selected_positions(self):
        batch = LogitBatch(np.zeros((1, 2)), np.array([0]), np.array([0]))
        with pytest.raises(NoSelectedPositions):
            ce_loss(batch, ANSWER_ONLY)

    def test_nonnegative(self):
        for seed in range(10):
            assert ce_loss(random_batch(seed)).value >= 0.0


class TestFocal:
    def test_gamma_zero_equals_ce_exactly(self):
        for seed in range(5):
            batch = random_batch(seed)
            fl = focal_loss(batch, gamma=0.0)
            ce = ce_loss(batch)
            assert fl.value == ce.value
            assert np.array_equal(fl.gradient, ce.gradient)

    def test_certain_prediction_is_zero(self):
        probs = np.zeros(4)
        probs[1] = 1.0
        batch = single_position(probs, target=1)
        assert focal_loss(batch, gamma=2.0).value == pytest.approx(0.0, abs=1e-9)

    def test_half_probability_gamma_two(self):
        batch = single_position([0.5, 0.5], target=0)
        assert focal_loss(batch, gamma=2.0).value == pytest.approx(0.25 * LN2, abs=1e-12)

    def test_downweights_easy_examples(self):
        easy = single_position([0.9, 0.1], target=0)
        assert focal_loss(easy, gamma=2.0).value < ce_loss(easy).value

    def test_rejects_negative_gamma(self):
        with pytest.raises(LossInputError):
            focal_loss(random_batch(0), gamma=-1.0)

    def test_nonnegative(self):
        for seed in range(10):
            assert focal_loss(random_batch(seed), gamma=2.0).value >= 0.0


class TestDice:
    def test_perfect_onehot_is_zero(self):
        probs = np.eye(4)[[0, 1, 2, 3]]
        batch = LogitBatch.from_probs(probs, np.arange(4), np.ones(4, dtype=np.int64))
        assert dice_loss(batch).value == pytest.approx(0.0, abs=1e-9)

    def test_single_class_worked_example(self):
        # one class column with p = [0.8, 0.2], y = [1, 0]
        value, grad = soft_dice_term(np.array([0.8, 0.2]), np.array([1.0, 0.0]))
        assert value == pytest.approx(1.0 - 1.6 / 1.68, abs=1e-12)
        assert value == pytest.approx(0.047619047619047616, abs=1e-12)

    def test_single_class_disjoint(self):
        value, _ = soft_dice_term(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
        assert value == pytest.approx(1.0, abs=1e-12)

    def test_range_zero_one(self):
        for seed in range(10):
            v = dice_loss(random_batch(seed)).value
            assert 0.0 <= v <= 1.0

    def test_matches_per_class_terms(self):
        batch = random_batch(3)
        probs = softmax(batch.logits)
        classes = np.unique(batch.targets)
        terms = []
        for c in classes:
            y = (batch.targets == c).astype(np.float64)
            value, _ = soft_dice_term(probs[:, c], y)
            terms.append(value)
        assert dice_loss(batch).value == pytest.approx(np.mean(terms), abs=1e-12)


class TestSelfAdjustingDice:
    def test_half_probability(self):
        value, _ = self_adjusting_dice_term(np.array([0.5]), np.array([1.0]))
        assert value == pytest.approx(0.6, abs=1e-12)

    def test_certain_prediction_suppressed_numerator(self):
        value, _ = self_adjusting_dice_term(np.array([1.0]), np.array([1.0]))
        assert value == pytest.approx(1.0, abs=1e-12)

    def test_empty_class_against_bruteforce(self):
        p = np.array([0.3, 0.6, 0.1])
        y = np.zeros(3)
        value, _ = self_adjusting_dice_term(p, y)
        w = (1.0 - p) * p
        assert value == pytest.approx(1.0 - 0.0 / w.sum(), abs=1e-12)

    def test_range_zero_one(self):
        for seed in range(10):
            v = self_adjusting_dice_loss(random_batch(seed)).value
            assert 0.0 <= v <= 1.0


class TestGeneralizedDice:
    def test_perfect_two_class(self):
        probs = np.eye(2)[[0, 1]]
        batch = LogitBatch.from_probs(probs, np.array([0, 1]), np.array([1, 1]))
        assert generalized_dice_loss(batch).value == pytest.approx(0.0, abs=1e-9)

    def test_worked_example(self):
        # y = [[1,0],[0,1]], p = [[0.9,0.1],[0.2,0.8]] -> both weights 1,
        # numerator 2*(0.9+0.8), denominator (0.9+0.2+1) + (0.1+0.8+1)
        probs = np.array([[0.9, 0.1], [0.2, 0.8]])
        batch = LogitBatch.from_probs(probs, np.array([0, 1]), np.array([1, 1]))
        assert generalized_dice_loss(batch).value == pytest.approx(0.15, abs=1e-9)

    def test_zero_weight_drops_empty_class(self):
        # vocab 3 but only classes 0 and 1 appear; class 2 has zero volume
        probs = np.array([[0.8, 0.15, 0.05], [0.1, 0.85, 0.05]])
        batch = LogitBatch.from_probs(probs, np.array([0, 1]), np.array([1, 1]))
        full = generalized_dice_loss(batch, empty_class_policy=EmptyClassPolicy.ZERO_WEIGHT)
        num = 2.0 * (0.8 + 0.85)
        den = (0.8 + 0.1 + 1.0) + (0.15 + 0.85 + 1.0)
        assert full.value == pytest.approx(1.0 - num / den, abs=1e-12)

    def test_epsilon_policy_differs(self):
        probs = np.array([[0.8, 0.15, 0.05], [0.1, 0.85, 0.05]])
        batch = LogitBatch.from_probs(probs, np.array([0, 1]), np.array([1, 1]))
        a = generalized_dice_loss(batch, empty_class_policy=EmptyClassPolicy.ZERO_WEIGHT)
        b = generalized_dice_loss(batch, empty_class_policy=EmptyClassPolicy.EPSILON)
        assert a.value != b.value

    def test_range_zero_one(self):
        for seed in range(10):
            v = generalized_dice_loss(random_batch(seed)).value
            assert 0.0 <= v <= 1.0


class TestLovaszWeights:
    def test_single_foreground(self):
        assert np.allclose(lovasz_grad_weights(np.array([1.0])), [1.0])

    def test_two_foreground(self):
        assert np.allclose(lovasz_grad_weights(np.array([1.0, 1.0])), [0.5, 0.5])

    def test_foreground_then_background(self):
        assert np.allclose(lovasz_grad_weights(np.array([1.0, 0.0])), [1.0, 0.0])

    def test_rejects_empty(self):
        with pytest.raises(EmptyInput):
            lovasz_grad_weights(np.array([]))

    def test_rejects_non_binary(self):
        with pytest.raises(LossInputError):
            lovasz_grad_weights(np.array([0.5, 1.0]))

    def test_nonnegative_and_sums_to_all_errors_jaccard(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            gt = rng.integers(0, 2, size=rng.integers(1, 9)).astype(np.float64)
            w = lovasz_grad_weights(gt)
            assert np.all(w >= -1e-12)
            if gt.sum() == 0:
                continue
            # all errors flagged: prediction misses the entire foreground
            expected = brute_force_jaccard_loss(np.ones_like(gt), gt)
            assert w.sum() == pytest.approx(expected, abs=1e-12)


class TestLovaszHinge:
    def test_worked_example(self):
        loss, grad = lovasz_hinge(np.array([2.0, -1.0]), np.array([1.0, 1.0]))
        assert loss == pytest.approx(1.0, abs=1e-12)

    def test_all_margins_satisfied(self):
        loss, grad = lovasz_hinge(np.array([2.0, 1.5]), np.array([1.0, 1.0]))
        assert loss == 0.0
        assert np.allclose(grad, 0.0)

    def test_gradient_descends(self):
        scores = np.array([0.5, -0.5, 0.2])
        signs = np.array([1.0, 1.0, -1.0])
        loss, grad = lovasz_hinge(scores, signs)
        stepped, _ = lovasz_hinge(scores - 0.01 * grad, signs)
        assert stepped <= loss + 1e-12


def brute_force_jaccard_loss(errors, gt):
    """Discrete Jaccard loss of the prediction implied by a 0/1 error vector."""
    gt = gt.astype(bool)
    wrong = errors.astype(bool)
    pred = gt ^ wrong
    inter = np.sum(pred & gt)
    union = np.sum(pred | gt)
    if union == 0:
        return 0.0
    return 1.0 - inter / union


def lovasz_extension_value(errors, gt):
    order = np.argsort(-errors, kind="stable")
    return float(errors[order] @ lovasz_grad_weights(gt[order]))


class TestLovaszVertexOracle:
    def test_matches_discrete_jaccard_on_hypercube(self):
        for n in range(1, 7):
            for gt_bits in range(1, 2**n):
                gt = np.array([(gt_bits >> i) & 1 for i in range(n)], dtype=np.float64)
                for err_bits in range(2**n):
                    errors = np.array(
                        [(err_bits >> i) & 1 for i in range(n)], dtype=np.float64
                    )
                    ext = lovasz_extension_value(errors, gt)
                    ref = brute_force_jaccard_loss(errors, gt)
                    assert abs(ext - ref) <= 1e-12


class TestLovaszLoss:
    def test_multiclass_nonnegative(self):
        for seed in range(10):
            assert lovasz_loss(random_batch(seed)).value >= -1e-12

    def test_binary_hinge_mode_requires_vocab_two(self):
        with pytest.raises(LossInputError):
            lovasz_loss(random_batch(0), mode=LovaszMode.BINARY_HINGE)

    def test_binary_hinge_mode_matches_direct_hinge(self):
        rng = np.random.default_rng(4)
        logits = rng.standard_normal((6, 2))
        targets = rng.integers(0, 2, 6)
        batch = LogitBatch(logits, targets, np.ones(6, dtype=np.int64))
        result = lovasz_loss(batch, mode=LovaszMode.BINARY_HINGE)
        scores = logits[:, 1] - logits[:, 0]
        signs = np.where(targets == 1, 1.0, -1.0)
        loss, _ = lovasz_hinge(scores, signs)
        assert result.value == pytest.approx(loss, abs=1e-12)


class TestCombined:
    def test_mix_one_equals_ce(self):
        batch = random_batch(0)
        combo = combined_loss(batch, LossConfig(mix=1.0, auxiliary_kind=AuxiliaryKind.FOCAL))
        ce = ce_loss(batch, FULL_CONTEXT)
        assert combo.value == ce.value
        assert np.array_equal(combo.gradient, ce.gradient)

    def test_arithmetic_of_combination(self):
        batch = random_batch(1)
        config = LossConfig(mix=0.6, gamma=2.0, auxiliary_kind=AuxiliaryKind.FOCAL)
        combo = combined_loss(batch, config)
        ce = ce_loss(batch, FULL_CONTEXT)
        aux = focal_loss(batch, gamma=2.0, roles=ANSWER_ONLY)
        assert combo.value == pytest.approx(0.6 * ce.value + 0.4 * aux.value, rel=1e-12)

    def test_instruction_gradient_is_scaled_ce(self):
        for kind in (
            AuxiliaryKind.FOCAL,
            AuxiliaryKind.DICE,
            AuxiliaryKind.GENERALIZED_DICE,
            AuxiliaryKind.SELF_ADJUSTING_DICE,
            AuxiliaryKind.LOVASZ,
        ):
            batch = random_batch(2)
            config = LossConfig(mix=0.6, gamma=2.0, auxiliary_kind=kind)
            combo = combined_loss(batch, config)
            ce = ce_loss(batch, FULL_CONTEXT)
            instruction_rows = batch.role_mask == int(Role.INSTRUCTION)
            assert np.allclose(
                combo.gradient[instruction_rows],
                0.6 * ce.gradient[instruction_rows],
                atol=1e-15,
            )

    def test_mix_zero_instruction_gradient_zero(self):
        batch = random_batch(3)
        config = LossConfig(mix=0.0, gamma=2.0, auxiliary_kind=AuxiliaryKind.FOCAL)
        combo = combined_loss(batch, config)
        instruction_rows = batch.role_mask == int(Role.INSTRUCTION)
        assert np.all(combo.gradient[instruction_rows] == 0.0)

    def test_empty_answer_mask(self):
        batch = LogitBatch(np.zeros((2, 3)), np.array([0, 1]), np.array([0, 0]))
        with pytest.raises(EmptyAnswerMask):
            combined_loss(batch, LossConfig(auxiliary_kind=AuxiliaryKind.DICE))

    def test_none_kind_allows_missing_answers(self):
        batch = LogitBatch(np.zeros((2, 3)), np.array([0, 1]), np.array([0, 0]))
        result = combined_loss(batch, LossConfig(mix=1.0, auxiliary_kind=AuxiliaryKind.NONE))
        assert result.value == pytest.approx(np.log(3), abs=1e-12)

    def test_rejects_mix_outside_unit_interval(self):
        with pytest.raises(LossInputError):
            LossConfig(mix=1.5)
        with pytest.raises(LossInputError):
            LossConfig(mix=-0.1)


class TestMaskingInvariants:
    def test_permutation_invariance_within_role(self):
        batch = random_batch(5)
        rng = np.random.default_rng(99)
        perm = np.concatenate([rng.permutation(4), 4 + rng.permutation(4)])
        shuffled = LogitBatch(
            batch.logits[perm], batch.targets[perm], batch.role_mask[perm]
        )
        for fn in (
            lambda b: ce_loss(b).value,
            lambda b: focal_loss(b, gamma=2.0).value,
            lambda b: dice_loss(b).value,
            lambda b: generalized_dice_loss(b).value,
            lambda b: self_adjusting_dice_loss(b).value,
            lambda b: lovasz_loss(b).value,
        ):
            assert fn(batch) == pytest.approx(fn(shuffled), rel=1e-12)

    def test_pad_rows_change_nothing(self):
        batch = random_batch(6)
        padded = LogitBatch(
            np.vstack([batch.logits, np.zeros((3, 17))]),
            np.concatenate([batch.targets, np.zeros(3, dtype=np.int64)]),
            np.concatenate([batch.role_mask, np.full(3, int(Role.PAD))]),
        )
        for fn in (ce_loss, dice_loss, self_adjusting_dice_loss, lovasz_loss):
            a = fn(batch)
            b = fn(padded)
            assert a.value == b.value
            assert np.array_equal(b.gradient[-3:], np.zeros((3, 17)))
            assert np.array_equal(a.gradient, b.gradient[:-3])

    def test_all_classes_empty_policy(self):
        # every class weight suppressed is impossible with real targets, so
        # drive it through the policy that suppresses present classes only
        # when vocabulary has no target mass at all
        probs = np.full((2, 3), 1.0 / 3.0)
        batch = LogitBatch.from_probs(probs, np.array([0, 1]), np.array([1, 1]))
        value = generalized_dice_loss(batch, empty_class_policy=EmptyClassPolicy.ZERO_WEIGHT)
        assert np.isfinite(value.value)
