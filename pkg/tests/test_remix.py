import numpy as np
import pytest

from sevmil import synth
from sevmil.hierarchy import Hierarchy
from sevmil.remix import (RemixError, SfrParams, bench_remix, cluster, random_mix, random_select, sfr,
                          sfr_select)
from sevmil.synth import Bag, SynthSpec

H2 = Hierarchy.chain(2)
H3 = Hierarchy.chain(2, [0, 0, 1])


def bag(id_, x, label, h=H2, inst=None):
    return Bag(id_, np.asarray(x, dtype=np.float32), h.labels_for(label), inst)


def donor_only_purity(seed, top_k=6, sigma=1.0, separation=6.0):
    """Share of the selected donor instances whose planted class never occurs in the recipient.

    Class centers and the background center are all at least ``separation * sigma`` apart.
    """
    centers = synth.make_centers(4, 16, separation * sigma, seed)
    s = SynthSpec(H3, 16, (20, 40), centers[:3], sigma, 1, background_fraction=0.3,
                  background_center=centers[3], seed=seed)
    bags = synth.generate(s)
    a, b = bags[2], bags[0]
    sel = sfr_select(a, b, H3, SfrParams(top_k=top_k, seed=seed))
    chosen = a.instance_labels[sel.selected_a]
    donor_only = np.setdiff1d(a.instance_labels, b.instance_labels)
    return float(np.mean(np.isin(chosen, donor_only))) if chosen.size else 0.0


class TestSfrHandTrace:
    def test_opposed_unit_vectors(self):
        u = np.array([1.0, 0.0])
        a = bag("a", [u] * 3, 1)
        b = bag("b", [-u] * 3, 0)
        sel = sfr_select(a, b, H2, SfrParams(2, 0, 1))
        assert sel.selected_a.tolist() == [0, 1, 2]
        out = sfr(a, b, H2, SfrParams(2, 0, 1))
        assert out.n == 6
        assert out.labels == a.labels
        np.testing.assert_array_equal(out.instances[:3], b.instances)
        np.testing.assert_array_equal(out.instances[3:], a.instances)
        assert "degenerate-global-mean" in sel.flags

    def test_identical_bags_tie_break(self):
        x = np.array([[1.0, 0.2], [0.9, -0.3], [-1.0, 0.1], [0.1, 1.0]])
        a = bag("a", x, 1)
        b = bag("b", x, 0)
        L = 2
        sel = sfr_select(a, b, H2, SfrParams(L, 0, L - 1))
        sizes = np.bincount(sel.assignment.cluster_of, minlength=L)
        # every populated cluster is half donor, so the lowest indices win
        assert sel.cluster_order[: L - 1] == sorted(sel.cluster_order[: L - 1])
        expected = np.flatnonzero(np.isin(sel.assignment.cluster_of[:4], sel.cluster_order[: L - 1]))
        assert sel.selected_a.tolist() == expected.tolist()
        assert sizes.sum() == 8

    def test_bins_are_half_open(self):
        # global mean points along x; similarities 1, 0, 0, -1.  With L=2 the value 0
        # is the boundary between the two bins and lands in the upper one.
        za = np.array([[2.0, 0.0], [0.0, 1.0]])
        zb = np.array([[0.0, -1.0], [-1.0, 0.0]])
        asg, _ = cluster(za, zb, SfrParams(2, 0, 1))
        assert asg.cluster_of.tolist() == [1, 1, 1, 0]

    def test_zero_norm_instance(self):
        a = bag("a", [[0.0, 0.0], [1.0, 1.0]], 1)
        b = bag("b", [[1.0, -1.0]], 0)
        sel = sfr_select(a, b, H2, SfrParams(4, 2, 1))
        assert "zero-norm-instance" in sel.flags
        assert sel.assignment.cluster_of[0] == 3


class TestSfrProperties:
    def test_top_cluster_isolates_donor_only_classes(self):
        purities = [donor_only_purity(s, top_k=1) for s in range(20)]
        assert np.median(purities) >= 0.9

    def test_refinement_keeps_top_cluster_purity(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            za = rng.normal([4, 0], 0.5, size=(15, 2))
            zb = rng.normal([0, 4], 0.5, size=(15, 2))
            a, b = bag("a", za, 1), bag("b", zb, 0)
            p0 = sfr_select(a, b, H2, SfrParams(11, 0, 6))
            p6 = sfr_select(a, b, H2, SfrParams(11, 6, 6))

            def top_purity(sel):
                l = sel.cluster_order[0]
                members = sel.assignment.cluster_of == l
                return max(sel.assignment.from_a[members].mean(), 1 - sel.assignment.from_a[members].mean())

            assert top_purity(p6) >= top_purity(p0)

    def test_threads_give_identical_output(self):
        rng = np.random.default_rng(0)
        a = bag("a", rng.standard_normal((300, 32)), 1)
        b = bag("b", rng.standard_normal((250, 32)), 0)
        one = sfr(a, b, H2, SfrParams(), threads=1)
        four = sfr(a, b, H2, SfrParams(), threads=4)
        assert one.instances.tobytes() == four.instances.tobytes()

    def test_prototypes_are_member_means(self):
        rng = np.random.default_rng(1)
        za, zb = rng.standard_normal((20, 3)), rng.standard_normal((20, 3))
        asg, _ = cluster(za, zb, SfrParams(5, 3, 2))
        Z = np.concatenate([za, zb])
        for l in np.unique(asg.cluster_of):
            np.testing.assert_allclose(asg.prototypes[l], Z[asg.cluster_of == l].mean(0))

    def test_uniform_scaling_invariance(self):
        rng = np.random.default_rng(2)
        za, zb = rng.standard_normal((20, 3)), rng.standard_normal((20, 3))
        a, _ = cluster(za, zb, SfrParams())
        b, _ = cluster(3.5 * za, 3.5 * zb, SfrParams())
        np.testing.assert_array_equal(a.cluster_of, b.cluster_of)

    def test_literal_argmin_is_available(self):
        rng = np.random.default_rng(3)
        a = bag("a", rng.standard_normal((10, 3)), 1)
        b = bag("b", rng.standard_normal((10, 3)), 0)
        sel = sfr_select(a, b, H2, SfrParams(4, 2, 2), literal_argmin=True)
        assert set(sel.selected_a.tolist()) <= set(range(10))


class TestPreconditions:
    def test_wrong_direction(self):
        with pytest.raises(RemixError):
            sfr(bag("a", [[1.0]], 0), bag("b", [[1.0]], 1), H2, SfrParams())

    def test_same_class(self):
        with pytest.raises(RemixError):
            random_mix(bag("a", [[1.0]], 1), bag("b", [[1.0]], 1), H2, 0.5, 0)

    def test_dimension(self):
        with pytest.raises(RemixError):
            sfr(bag("a", [[1.0, 2.0]], 1), bag("b", [[1.0]], 0), H2, SfrParams())

    def test_k_below_L(self):
        with pytest.raises(RemixError):
            SfrParams(3, 1, 3).validate()


class TestRandomMix:
    a = bag("a", np.arange(20.0).reshape(10, 2), 1)
    b = bag("b", -np.ones((4, 2)), 0)

    def test_full_fraction(self):
        out = random_mix(self.a, self.b, H2, 1.0, 0)
        assert out.n == 14
        assert out.labels == self.a.labels

    def test_tiny_fraction_takes_one(self):
        assert random_select(self.a, self.b, H2, 1e-9, 0).selected_a.size == 1

    def test_deterministic(self):
        x = random_select(self.a, self.b, H2, 0.5, 42).selected_a
        y = random_select(self.a, self.b, H2, 0.5, 42).selected_a
        np.testing.assert_array_equal(x, y)
        assert len(set(x.tolist())) == 5


def test_bench_report_fields():
    rng = np.random.default_rng(0)
    corpus = [bag(str(i), rng.standard_normal((8, 4)), i % 2) for i in range(6)]
    rep = bench_remix(corpus, H2, "sfr", SfrParams(), repetitions=2)
    assert rep["pairs"] == 3
    assert rep["timing"]["mean_seconds_per_sample"] > 0
    assert (rep["L"], rep["T"], rep["k"]) == (11, 6, 6)


def test_bench_needs_pairs():
    with pytest.raises(RemixError):
        bench_remix([bag("0", [[1.0]], 0), bag("1", [[1.0]], 0)], H2, "sfr")
