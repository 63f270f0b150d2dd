import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from elastography.exceptions import ValidationError
from elastography.fields import ScalarField
from elastography.services.evaluation_service import (
    EvalPair,
    bland_altman,
    correlations,
    evaluate_case,
    phantom_roi_masks,
    read_report,
    roi_kind,
    roi_stats,
    summarize_cases,
    write_report,
)
from elastography.services.phantom_service import Edge, Excitation, Inclusion, PhantomSpec, render_stiffness


def _pairs(estimates, references):
    return [EvalPair(float(e), float(r)) for e, r in zip(estimates, references)]


def _inclusion_spec():
    return PhantomSpec(
        side_mm=64.0,
        spacing_mm=1.0,
        background_mu=2000.0,
        background_damping=0.1,
        excitation=Excitation(edge=Edge.LEFT, amplitude=0.5),
        inclusions=(Inclusion(center=(32.0, 32.0), radius=10.0, mu=6000.0, damping=0.1),),
    )


class RoiStatsTests(SimpleTestCase):
    def test_constant_map(self):
        mean, std = roi_stats(ScalarField(np.full((4, 4), 4.0)), np.ones((4, 4), dtype=bool))
        self.assertEqual((mean, std), (4.0, 0.0))

    def test_sample_standard_deviation(self):
        values = np.array([[2.0, 4.0, 6.0, 100.0]])
        mask = np.array([[1, 1, 1, 0]])
        mean, std = roi_stats(ScalarField(values), mask)
        self.assertAlmostEqual(mean, 4.0)
        self.assertAlmostEqual(std, 2.0)

    def test_scalar_field_mask(self):
        mask = ScalarField(np.array([[1.0, 1.0, 0.0]]))
        mean, _ = roi_stats(ScalarField(np.array([[1.0, 3.0, 50.0]])), mask)
        self.assertAlmostEqual(mean, 2.0)

    def test_empty_and_non_binary_masks(self):
        field_ = ScalarField(np.ones((3, 3)))
        with self.assertRaises(ValidationError):
            roi_stats(field_, np.zeros((3, 3), dtype=bool))
        with self.assertRaises(ValidationError):
            roi_stats(field_, np.full((3, 3), 0.5))


class CorrelationTests(SimpleTestCase):
    def test_perfect_linear_relation(self):
        corr = correlations(_pairs([2, 4, 6], [1, 2, 3]))
        self.assertAlmostEqual(corr.pearson_r, 1.0)
        self.assertAlmostEqual(corr.spearman_rho, 1.0)
        self.assertAlmostEqual(corr.slope, 2.0)
        self.assertAlmostEqual(corr.intercept, 0.0)
        self.assertAlmostEqual(corr.r_squared, 1.0)

    def test_negative_relation(self):
        corr = correlations(_pairs([-1, -2, -3], [1, 2, 3]))
        self.assertAlmostEqual(corr.pearson_r, -1.0)
        self.assertAlmostEqual(corr.spearman_rho, -1.0)

    def test_rank_correlation_by_hand(self):
        corr = correlations(_pairs([1, 3, 2], [1, 2, 3]))
        self.assertAlmostEqual(corr.spearman_rho, 0.5)

    def test_invariances(self):
        rng = np.random.default_rng(0)
        ref = rng.uniform(1, 8, size=25)
        est = ref + rng.normal(scale=0.5, size=25)
        base = correlations(_pairs(est, ref))
        affine = correlations(_pairs(3.0 * est + 2.0, ref))
        monotone = correlations(_pairs(np.exp(est), ref))
        perm = rng.permutation(25)
        shuffled = correlations(_pairs(est[perm], ref[perm]))

        self.assertAlmostEqual(affine.pearson_r, base.pearson_r, places=12)
        self.assertAlmostEqual(monotone.spearman_rho, base.spearman_rho, places=12)
        self.assertAlmostEqual(base.r_squared, base.pearson_r ** 2, places=12)
        self.assertAlmostEqual(shuffled.pearson_r, base.pearson_r, places=12)
        self.assertAlmostEqual(shuffled.slope, base.slope, places=12)

    def test_degenerate_inputs(self):
        with self.assertRaises(ValidationError):
            correlations(_pairs([1, 2], [1, 2]))
        with self.assertRaises(ValidationError):
            correlations(_pairs([1, 2, 3], [5, 5, 5]))

    def test_non_finite_pair(self):
        with self.assertRaises(ValidationError):
            EvalPair(math.nan, 1.0)


class BlandAltmanTests(SimpleTestCase):
    def test_hand_computed_limits(self):
        ba = bland_altman(_pairs([2, 4, 6], [1, 2, 3]))
        self.assertAlmostEqual(ba.bias, 2.0)
        self.assertAlmostEqual(ba.loa_low, 0.04)
        self.assertAlmostEqual(ba.loa_high, 3.96)
        self.assertEqual(ba.n, 3)

    def test_identical_methods(self):
        ba = bland_altman(_pairs([1.5, 2.5, 7.0], [1.5, 2.5, 7.0]))
        self.assertEqual((ba.bias, ba.loa_low, ba.loa_high), (0.0, 0.0, 0.0))

    def test_single_pair(self):
        with self.assertRaises(ValidationError):
            bland_altman(_pairs([1.0], [2.0]))


class EvaluateCaseTests(SimpleTestCase):
    def setUp(self):
        self.gt, _ = render_stiffness(_inclusion_spec())
        self.whole = np.ones(self.gt.shape, dtype=bool)

    def test_ground_truth_against_itself(self):
        rows = evaluate_case(self.gt, None, self.gt, self.whole, case_id="c")
        self.assertEqual([r.method_pair for r in rows], ["dime_vs_gt"])
        row = rows[0]
        self.assertAlmostEqual(row.pearson_r, 1.0)
        self.assertAlmostEqual(row.ba_bias, 0.0)
        self.assertEqual(row.n, self.gt.values.size)

    def test_known_constants(self):
        shape = (20, 20)
        dime = ScalarField(np.full(shape, 5000.0))
        mmdi = ScalarField(np.full(shape, 4000.0))
        gt = ScalarField(np.full(shape, 4000.0))
        rows = {r.method_pair: r for r in evaluate_case(dime, mmdi, gt, np.ones(shape, dtype=bool), case_id="k")}

        self.assertEqual(set(rows), {"dime_vs_gt", "mmdi_vs_gt", "dime_vs_mmdi"})
        self.assertEqual((rows["dime_vs_gt"].mean_est, rows["dime_vs_gt"].mean_ref), (5.0, 4.0))
        self.assertEqual(rows["dime_vs_gt"].std_est, 0.0)
        self.assertAlmostEqual(rows["dime_vs_gt"].ba_bias, 1.0)
        self.assertAlmostEqual(rows["dime_vs_gt"].ba_lo, 1.0)
        self.assertAlmostEqual(rows["mmdi_vs_gt"].ba_bias, 0.0)
        self.assertAlmostEqual(rows["dime_vs_mmdi"].ba_hi, 1.0)
        self.assertTrue(math.isnan(rows["dime_vs_gt"].pearson_r))

    def test_mask_outside_support(self):
        gt = np.zeros((10, 10))
        gt[:5] = 3000.0
        mask = np.zeros((10, 10), dtype=bool)
        mask[6:] = True
        with self.assertRaises(ValidationError):
            evaluate_case(None, ScalarField(np.ones((10, 10))), ScalarField(gt), mask)

    def test_dimension_mismatch(self):
        with self.assertRaises(ValidationError):
            evaluate_case(ScalarField(np.ones((10, 12))), None, ScalarField(np.ones((10, 10))), np.ones((10, 10)))
        with self.assertRaises(ValidationError):
            evaluate_case(ScalarField(np.ones((10, 10)), 2.0), None, ScalarField(np.ones((10, 10))), np.ones((10, 10)))


class PhantomRoiTests(SimpleTestCase):
    def test_masks_and_erosion(self):
        spec = _inclusion_spec()
        masks = phantom_roi_masks(spec, (65, 65), 1.0, erosion_px=2)
        self.assertEqual(list(masks), ["whole", "background", "R1"])
        self.assertFalse(masks["whole"][:2].any())
        self.assertTrue(masks["whole"][2:-2, 2:-2].all())
        self.assertTrue(masks["R1"][32, 32])
        self.assertFalse(masks["R1"][32, 41])  # inside the disc, within 2 px of its rim
        self.assertFalse((masks["R1"] & masks["background"]).any())

    def test_homogeneous_phantom_has_only_whole(self):
        spec = PhantomSpec(
            side_mm=32.0,
            spacing_mm=1.0,
            background_mu=3000.0,
            background_damping=0.1,
            excitation=Excitation(edge=Edge.TOP, amplitude=0.5),
        )
        self.assertEqual(list(phantom_roi_masks(spec, (33, 33), 1.0)), ["whole"])

    def test_roi_kind(self):
        self.assertEqual(roi_kind("R3"), "inclusion")
        self.assertEqual(roi_kind("background"), "background")
        self.assertEqual(roi_kind("whole"), "whole")


class ReportTests(SimpleTestCase):
    def _case_rows(self):
        rows = []
        for i, mu in enumerate((2000.0, 4000.0, 6000.0, 8000.0)):
            gt = ScalarField(np.full((10, 10), mu))
            mmdi = ScalarField(np.full((10, 10), mu * 1.1 + 100.0 * i))
            rows += evaluate_case(None, mmdi, gt, np.ones((10, 10), dtype=bool), case_id=f"case_{i}")
        return rows

    def test_summary_rows(self):
        rows = self._case_rows()
        summary = summarize_cases(rows)
        self.assertEqual(len(summary), 1)
        row = summary[0]
        self.assertEqual((row.case_id, row.roi_id, row.method_pair, row.n), ("ALL", "whole", "mmdi_vs_gt", 4))
        self.assertGreater(row.pearson_r, 0.99)
        self.assertAlmostEqual(row.mean_ref, 5.0)

    def test_csv_is_reproducible(self):
        rows = self._case_rows()
        rows += summarize_cases(rows)
        with tempfile.TemporaryDirectory() as tmp:
            first = Path(tmp) / "a.csv"
            second = Path(tmp) / "b.csv"
            write_report(rows, first)
            write_report(rows, second)
            self.assertEqual(first.read_bytes(), second.read_bytes())
            self.assertTrue(first.read_text().startswith("case_id,roi_id,method_pair,n,mean_est"))

            back = read_report(first)
            self.assertEqual(len(back), len(rows))
            self.assertEqual(back[-1].case_id, "ALL")
            self.assertTrue(math.isnan(back[0].pearson_r))
            self.assertAlmostEqual(back[0].mean_est, rows[0].mean_est)
