import csv
import math

import pytest

from axialseg import bench
from axialseg.bench import UnknownVariantError, closed_form, count_flops, loglog_slope, run_sweep


def loop_count(variant, H, W, d):
    """Multiply-adds read off the attention loop nests: one d-length dot per
    (query, key) pair for the logits and one more for the weighted values."""
    total = 0
    for i in range(H):
        for j in range(W):
            if variant == "full2d":
                keys = H * W
            else:
                keys = H + W  # one column pass plus one row pass
            total += 2 * keys * d
    return total


class TestCounts:
    def test_full_8x8_scalar(self):
        assert count_flops("full2d", 8, 8, 1).score == 8192 == 2 * 64**2

    def test_axial_8x8_scalar(self):
        assert count_flops("axial", 8, 8, 1).score == 2048 == 2 * 64 * 16

    def test_doubling_ratios(self):
        full = count_flops("full2d", 16, 16, 1).score / count_flops("full2d", 8, 8, 1).score
        axial = count_flops("axial", 16, 16, 1).score / count_flops("axial", 8, 8, 1).score
        assert (full, axial) == (16, 8)

    def test_boundary_two(self):
        assert count_flops("full2d", 2, 2, 3).score == count_flops("axial", 2, 2, 3).score

    @pytest.mark.parametrize("variant", bench.VARIANTS)
    @pytest.mark.parametrize("shape", [(4, 4, 2, 1), (4, 6, 4, 2), (5, 3, 6, 3), (8, 8, 8, 2)])
    def test_counter_matches_loops_and_closed_form(self, variant, shape):
        H, W, d, heads = shape
        measured = count_flops(variant, H, W, d, heads)
        assert measured.score == loop_count(variant, H, W, d)
        assert measured == closed_form(variant, H, W, d, heads)

    def test_projection_stage(self):
        # q, k, v, out: four d x d pointwise maps per layer
        assert count_flops("full2d", 4, 4, 3).projection == 4 * 16 * 9
        assert count_flops("axial", 4, 4, 3).projection == 2 * 4 * 16 * 9

    @pytest.mark.parametrize("n", range(3, 12))
    def test_axial_cheaper_beyond_boundary(self, n):
        assert count_flops("axial", n, n, 1).score < count_flops("full2d", n, n, 1).score

    def test_data_independent(self):
        assert count_flops("full2d", 6, 6, 2, seed=0) == count_flops("full2d", 6, 6, 2, seed=9)

    def test_unknown_variant(self):
        with pytest.raises(UnknownVariantError, match="full2d, axial"):
            count_flops("conv", 4, 4, 1)


class TestSlopes:
    def test_exact_growth(self):
        sizes = [8, 16, 32, 64]
        for variant, expected in (("full2d", 4), ("axial", 3)):
            flops = [closed_form(variant, n, n, 1).score for n in sizes]
            steps = {math.log2(b / a) for a, b in zip(flops, flops[1:])}
            assert steps == {expected}
            assert loglog_slope(sizes, flops) == pytest.approx(expected, abs=1e-12)


class TestSweep:
    def test_deterministic_and_csv(self, tmp_path):
        a = run_sweep([4, 8], bench.VARIANTS, trials=2, d_model=4)
        b = run_sweep([4, 8], bench.VARIANTS, trials=2, d_model=4)
        assert [r.flops for r in a] == [r.flops for r in b]
        path = tmp_path / "b.csv"
        bench.write_csv(a, path)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["variant", "H", "W", "d_model", "heads", "flops", "wall_ns_median"]
        for row in rows[1:]:
            v, H, W, d, heads, flops, ns = row
            assert int(flops) == closed_form(v, int(H), int(W), int(d), int(heads)).score
            assert int(ns) > 0

    @pytest.mark.parametrize("kw", [{"sizes": [2]}, {"trials": 0}, {"variants": ["bogus"]}])
    def test_rejects(self, kw):
        args = {"sizes": [4], "variants": ["axial"], "trials": 1, **kw}
        with pytest.raises(ValueError):
            run_sweep(**args)
