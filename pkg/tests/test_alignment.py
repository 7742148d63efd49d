"""Prototypes, confidence masks and the class-wise similarity loss."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from protoalign import tensor as T
from protoalign.alignment import (
    Prototype,
    SupervisionMap,
    argmax_supervision,
    compute_prototypes,
    confidence_mask,
    cosine_rows,
    loss_dc,
    loss_sc,
    loss_sim,
)
from protoalign.tensor import Tensor

from oracles import cos_oracle, prototype_oracle, sc_oracle


def proto(c, vec, domain="s"):
    return Prototype(c, Tensor(np.asarray(vec, dtype=np.float64)), domain, 1)


def random_case(rng, size=8, depth=5, classes=4):
    emb = rng.normal(size=(depth, size, size))
    labels = rng.integers(0, classes, size=(size, size))
    valid = rng.random((size, size)) > 0.25
    return emb, SupervisionMap(labels, valid)


class TestConfidenceMask:
    def test_confident_pixel_valid(self):
        sup = confidence_mask(np.array([[[0.95]], [[0.05]]]), 0.9)
        assert sup.labels[0, 0] == 0 and sup.valid[0, 0]

    def test_unconfident_pixel_invalid(self):
        assert not confidence_mask(np.array([[[0.6]], [[0.4]]]), 0.9).valid[0, 0]

    def test_tiny_threshold_all_valid(self, rng):
        p = rng.dirichlet(np.ones(3), size=(4, 4)).transpose(2, 0, 1)
        assert confidence_mask(p, 1e-9).valid.all()

    def test_ties_go_to_lowest_class(self):
        assert confidence_mask(np.full((2, 1, 1), 0.5), 0.5).labels[0, 0] == 0

    @pytest.mark.parametrize("bad", [0.0, -0.1, 1.5])
    def test_threshold_range(self, bad):
        with pytest.raises(ValueError):
            confidence_mask(np.full((2, 1, 1), 0.5), bad)

    def test_argmax_supervision_all_valid(self, rng):
        p = rng.dirichlet(np.ones(3), size=(4, 4)).transpose(2, 0, 1)
        sup = argmax_supervision(p)
        assert sup.valid.all() and np.array_equal(sup.labels, p.argmax(axis=0))


class TestPrototypes:
    def test_two_pixel_mean(self, double):
        emb = Tensor(np.array([[[1.0, 0.0]], [[0.0, 1.0]]]))
        protos = compute_prototypes(emb, SupervisionMap(np.ones((1, 2)), np.ones((1, 2))), [1], min_pixels=1)
        np.testing.assert_array_equal(protos[0].vector.data, [0.5, 0.5])
        assert protos[0].pixel_count == 2

    def test_uniform_embedding(self, double, rng):
        u = rng.normal(size=4)
        emb = Tensor(np.broadcast_to(u[:, None, None], (4, 6, 6)).copy())
        sup = SupervisionMap(rng.integers(0, 3, size=(6, 6)), np.ones((6, 6)))
        for p in compute_prototypes(emb, sup, range(3), 1):
            np.testing.assert_allclose(p.vector.data, u, rtol=1e-12)

    def test_matches_scalar_oracle_bit_for_bit(self, double):
        rng = np.random.default_rng(99)
        for _ in range(100):
            emb, sup = random_case(rng)
            got = {p.class_id: p.vector.data for p in compute_prototypes(Tensor(emb), sup, range(4), 1)}
            want = prototype_oracle(emb, sup.labels, sup.valid, range(4), 1)
            assert got.keys() == want.keys()
            for m in want:
                assert np.array_equal(got[m], want[m])

    def test_min_pixels_omits_sparse_classes(self, double):
        labels = np.array([[1, 1, 1, 1, 2, 2]])
        protos = compute_prototypes(Tensor(np.ones((2, 1, 6))), SupervisionMap(labels, np.ones((1, 6))), [1, 2], 4)
        assert [p.class_id for p in protos] == [1]

    def test_invalid_pixels_excluded(self, double):
        emb = Tensor(np.array([[[1.0, 100.0]]]))
        sup = SupervisionMap(np.array([[0, 0]]), np.array([[True, False]]))
        assert compute_prototypes(emb, sup, [0], 1)[0].vector.data[0] == 1.0

    def test_spatial_mismatch(self):
        with pytest.raises(ValueError, match="aligned"):
            compute_prototypes(Tensor(np.ones((2, 4, 4))), SupervisionMap(np.zeros((3, 3)), np.ones((3, 3))), [0])

    def test_domain_tag_and_count(self, double, rng):
        emb, sup = random_case(rng)
        for p in compute_prototypes(Tensor(emb), sup, range(4), 1, domain="s->t"):
            assert p.domain == "s->t"
            assert p.pixel_count == len(sup.pixel_index(p.class_id))

    def test_pixel_count_positive(self):
        with pytest.raises(ValueError):
            Prototype(0, Tensor(np.zeros(2)), "s", 0)


class TestSimilarityLoss:
    def test_self_consistent_is_zero(self, double, rng):
        vecs = rng.normal(size=(3, 4))
        labels = rng.integers(0, 3, size=(5, 5))
        emb = Tensor(vecs[labels].transpose(2, 0, 1).copy())
        sup = SupervisionMap(labels, np.ones((5, 5)))
        assert loss_sc(emb, sup, compute_prototypes(emb, sup, range(3), 1)).item() == pytest.approx(0.0, abs=1e-6)

    def test_two_pixel_hand_value(self, double):
        emb = Tensor(np.array([[[1.0, 0.0]], [[0.0, 1.0]]]))
        sup = SupervisionMap(np.ones((1, 2)), np.ones((1, 2)))
        value = loss_sc(emb, sup, compute_prototypes(emb, sup, [1], 1)).item()
        assert value == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-5)
        assert value == pytest.approx(0.29289, abs=1e-5)

    def test_sc_matches_oracle(self, double):
        rng = np.random.default_rng(5)
        for _ in range(30):
            emb, sup = random_case(rng)
            protos = compute_prototypes(Tensor(emb), sup, range(4), 1)
            oracle_protos = prototype_oracle(emb, sup.labels, sup.valid, range(4), 1)
            got = loss_sc(Tensor(emb), sup, protos).item()
            assert got == pytest.approx(sc_oracle(emb, sup.labels, sup.valid, oracle_protos), abs=1e-6)

    def test_sc_empty_is_exact_zero(self, double):
        out = loss_sc(Tensor(np.ones((2, 2, 2))), SupervisionMap(np.zeros((2, 2)), np.ones((2, 2))), [])
        assert out.item() == 0.0

    def test_dc_orthogonal_pair(self, double):
        assert loss_dc([proto(0, [1, 0]), proto(1, [0, 1])]).item() == pytest.approx(1.0, abs=1e-6)

    def test_dc_antipodal(self, double):
        assert loss_dc([proto(0, [1, 2]), proto(1, [-1, -2])]).item() == pytest.approx(0.0, abs=1e-12)

    def test_dc_three_orthogonal(self, double):
        assert loss_dc([proto(i, np.eye(3)[i]) for i in range(3)]).item() == pytest.approx(1.0, abs=1e-12)

    def test_dc_fewer_than_two(self, double):
        assert loss_dc([]).item() == 0.0
        assert loss_dc([proto(0, [1, 1])]).item() == 0.0

    def test_dc_matches_pair_oracle(self, double, rng):
        vecs = rng.normal(size=(4, 6))
        pairs = [1 + cos_oracle(vecs[a], vecs[b]) for a in range(4) for b in range(a + 1, 4)]
        got = loss_dc([proto(i, v) for i, v in enumerate(vecs)]).item()
        assert got == pytest.approx(sum(pairs) / len(pairs), abs=1e-12)

    def test_zero_vector_cosine_is_zero(self, double):
        assert cosine_rows(Tensor(np.zeros((1, 3))), Tensor(np.ones(3))).item() == 0.0

    def test_sim_orthogonal_composition(self, double):
        emb = Tensor(np.array([[[1.0, 1.0, 0.0, 0.0]], [[0.0, 0.0, 1.0, 1.0]]]))
        sup = SupervisionMap(np.array([[0, 0, 1, 1]]), np.ones((1, 4)))
        protos = compute_prototypes(emb, sup, [0, 1], 1)
        assert loss_sim(emb, sup, protos).item() == pytest.approx(1.0, abs=1e-12)

    def test_sim_is_sum_bitwise(self, double, rng):
        emb, sup = random_case(rng)
        emb = Tensor(emb)
        protos = compute_prototypes(emb, sup, range(4), 1)
        total = loss_sim(emb, sup, protos).item()
        assert total == (loss_sc(emb, sup, protos) + loss_dc(protos)).item()

    def test_omitted_class_changes_only_its_terms(self, double, rng):
        emb, sup = random_case(rng, classes=3)
        emb = Tensor(emb)
        protos = compute_prototypes(emb, sup, range(3), 1)
        keep = [p for p in protos if p.class_id != 2]
        reduced = SupervisionMap(sup.labels, sup.valid & (sup.labels != 2))
        per_class = {
            p.class_id: loss_sc(emb, sup, [p]).item() for p in protos
        }
        assert loss_sc(emb, reduced, keep).item() == pytest.approx(np.mean([per_class[0], per_class[1]]), abs=1e-12)


@st.composite
def embedding_cases(draw):
    seed = draw(st.integers(0, 2**31 - 1))
    rng = np.random.default_rng(seed)
    size = draw(st.integers(2, 6))
    emb = rng.normal(size=(3, size, size))
    labels = rng.integers(0, 3, size=(size, size))
    valid = rng.random((size, size)) > 0.3
    return emb, SupervisionMap(labels, valid)


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(embedding_cases(), st.floats(0.1, 10.0))
    def test_ranges_and_scale_invariance(self, case, scale):
        emb, sup = case
        with T.precision("double"):
            base = Tensor(emb)
            protos = compute_prototypes(base, sup, range(3), 1)
            sc, dc = loss_sc(base, sup, protos).item(), loss_dc(protos).item()
            assert -1e-12 <= sc <= 2.0 + 1e-12 and -1e-12 <= dc <= 2.0 + 1e-12
            scaled = Tensor(emb * scale)
            sprotos = compute_prototypes(scaled, sup, range(3), 1)
            assert loss_sc(scaled, sup, sprotos).item() == pytest.approx(sc, abs=1e-5)
            assert loss_dc(sprotos).item() == pytest.approx(dc, abs=1e-5)

    @settings(max_examples=40, deadline=None)
    @given(embedding_cases(), st.integers(0, 2**31 - 1))
    def test_pixel_order_free(self, case, seed):
        emb, sup = case
        h, w = sup.labels.shape
        perm = np.random.default_rng(seed).permutation(h * w)
        with T.precision("double"):
            a = compute_prototypes(Tensor(emb), sup, range(3), 1)
            pe = emb.reshape(3, -1)[:, perm].reshape(3, h, w)
            psup = SupervisionMap(sup.labels.reshape(-1)[perm].reshape(h, w), sup.valid.reshape(-1)[perm].reshape(h, w))
            b = compute_prototypes(Tensor(pe), psup, range(3), 1)
        assert [p.class_id for p in a] == [p.class_id for p in b]
        for p, q in zip(a, b):
            np.testing.assert_allclose(p.vector.data, q.vector.data, rtol=1e-12, atol=1e-14)

    def test_gradients_match_finite_differences(self, double):
        rng = np.random.default_rng(21)
        for _ in range(20):
            emb = Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)
            labels = rng.integers(0, 2, size=(4, 4))
            labels.flat[:4] = [0, 1, 0, 1]
            sup = SupervisionMap(labels, np.ones((4, 4)))
            assert T.finite_difference_check(lambda: loss_sc(emb, sup, compute_prototypes(emb, sup, [0, 1], 2)), [emb]) <= 1e-4
            vecs = [Tensor(rng.normal(size=4), requires_grad=True) for _ in range(3)]
            assert T.finite_difference_check(lambda: loss_dc([Prototype(i, v, "s", 1) for i, v in enumerate(vecs)]), vecs) <= 1e-4
