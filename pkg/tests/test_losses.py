"""Loss-function tests: closed forms, brute-force oracles, gradient checks."""

import math

import numpy as np
import pytest

from cdrlab import autodiff as ad
from cdrlab import losses
from cdrlab.errors import AlignmentError, ConfigError, ContractViolation, UnknownIdError


def unit_rows(rng, m, d):
    x = rng.standard_normal((m, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def ppp_brute_force(fa, fs, tau=1.0):
    """Direct double-loop evaluation of the bidirectional pair loss."""
    m = fa.shape[0]
    first = 0.0
    for i in range(m):
        num = math.exp(float(np.dot(fa[i], fs[i])) / tau)
        den = sum(math.exp(float(np.dot(fa[i], fs[j])) / tau) for j in range(m))
        first += -math.log(num / den)
    second = 0.0
    for i in range(m):
        num = math.exp(float(np.dot(fs[i], fa[i])) / tau)
        den = sum(math.exp(float(np.dot(fs[i], fa[j])) / tau) for j in range(m))
        second += -math.log(num / den)
    return first / m + second / m


def entropy_brute_force(p):
    return -sum(x * math.log(x) for x in p if x > 0)


# ---------------------------------------------------------------------------
# ppp_loss


def test_ppp_single_pair_is_zero():
    rng = np.random.default_rng(0)
    fa, fs = unit_rows(rng, 1, 4), unit_rows(rng, 1, 4)
    assert losses.ppp_loss(fa, fs).item() == 0.0


def test_ppp_identical_rows_is_two_log_m():
    for m in (2, 3, 7):
        row = np.zeros(5)
        row[0] = 1.0
        batch = np.tile(row, (m, 1))
        val = losses.ppp_loss(batch, batch).item()
        assert abs(val - 2.0 * math.log(m)) < 1e-12


def test_ppp_matches_brute_force():
    for seed in range(10):
        rng = np.random.default_rng(500 + seed)
        fa, fs = unit_rows(rng, 3, 4), unit_rows(rng, 3, 4)
        lib = losses.ppp_loss(fa, fs).item()
        ref = ppp_brute_force(fa, fs)
        assert abs(lib - ref) < 1e-10


def test_ppp_brute_force_with_temperature():
    rng = np.random.default_rng(99)
    fa, fs = unit_rows(rng, 4, 6), unit_rows(rng, 4, 6)
    lib = losses.ppp_loss(fa, fs, tau_ppp=0.2).item()
    assert abs(lib - ppp_brute_force(fa, fs, tau=0.2)) < 1e-10


def test_ppp_swap_symmetry_and_permutation_invariance():
    rng = np.random.default_rng(42)
    fa, fs = unit_rows(rng, 5, 4), unit_rows(rng, 5, 4)
    assert abs(losses.ppp_loss(fa, fs).item() - losses.ppp_loss(fs, fa).item()) < 1e-12
    perm = rng.permutation(5)
    assert (
        abs(losses.ppp_loss(fa, fs).item() - losses.ppp_loss(fa[perm], fs[perm]).item())
        < 1e-12
    )


def test_ppp_row_count_mismatch_is_alignment_error():
    rng = np.random.default_rng(1)
    with pytest.raises(AlignmentError):
        losses.ppp_loss(unit_rows(rng, 3, 4), unit_rows(rng, 2, 4))


def test_ppp_rejects_unnormalized_features():
    rng = np.random.default_rng(2)
    with pytest.raises(ContractViolation):
        losses.ppp_loss(3.0 * unit_rows(rng, 2, 4), unit_rows(rng, 2, 4))


def test_ppp_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    fa = ad.Tensor(unit_rows(rng, 3, 4), requires_grad=True)
    fs = ad.Tensor(unit_rows(rng, 3, 4), requires_grad=True)
    err = ad.finite_diff_check(lambda: losses.ppp_loss(fa, fs), [fa, fs], step=1e-5)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# memory bank + id loss


def make_bank(rng, n, d, momentum=0.5, temperature=0.05):
    feats = unit_rows(rng, n, d)
    ids = list(range(100, 100 + n))
    return losses.MemoryBank(ids, feats, momentum=momentum, temperature=temperature)


def test_id_loss_single_feature_own_bank_is_zero():
    feat = np.array([[1.0, 0.0, 0.0]])
    bank = losses.MemoryBank([5], feat, temperature=0.05)
    assert losses.id_loss(feat, [5], bank).item() == 0.0


def test_id_loss_orthogonal_bank_closed_form():
    n, tau = 6, 0.05
    bank_feats = np.eye(n)
    bank = losses.MemoryBank(list(range(n)), bank_feats, temperature=tau)
    feats = np.eye(n)[:2]
    expected = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + (n - 1)))
    val = losses.id_loss(feats, [0, 1], bank).item()
    assert abs(val - expected) < 1e-12


def test_id_loss_unknown_id():
    rng = np.random.default_rng(3)
    bank = make_bank(rng, 4, 3)
    with pytest.raises(UnknownIdError):
        losses.id_loss(unit_rows(rng, 1, 3), [999], bank)


def test_id_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    bank = make_bank(rng, 5, 4)
    feats = ad.Tensor(unit_rows(rng, 2, 4), requires_grad=True)
    err = ad.finite_diff_check(
        lambda: losses.id_loss(feats, [100, 102], bank), [feats], step=1e-5
    )
    assert err < 1e-4


def test_bank_momentum_zero_replaces_row():
    rng = np.random.default_rng(4)
    bank = make_bank(rng, 3, 4, momentum=0.0)
    new = unit_rows(rng, 1, 4)
    bank.update([101], new)
    np.testing.assert_allclose(bank.features[1], new[0], atol=1e-15)


def test_bank_update_fixed_point():
    rng = np.random.default_rng(5)
    bank = make_bank(rng, 3, 4)
    stored = bank.features[2].copy()
    bank.update([102], stored[None, :])
    np.testing.assert_allclose(bank.features[2], stored, atol=1e-12)


def test_bank_rows_stay_unit_norm():
    rng = np.random.default_rng(6)
    bank = make_bank(rng, 8, 4, momentum=0.7)
    for step in range(5):
        bank.update(bank.instance_ids[:4], unit_rows(rng, 4, 4))
    np.testing.assert_allclose(np.linalg.norm(bank.features, axis=1), 1.0, atol=1e-9)


def test_bank_update_keeps_earlier_constants_unchanged():
    rng = np.random.default_rng(16)
    bank = make_bank(rng, 3, 4)
    const = bank.as_constant()
    before = const.values.copy()
    bank.update([100], unit_rows(rng, 1, 4))
    assert np.array_equal(const.values, before)


# ---------------------------------------------------------------------------
# cross-domain entropy


def test_entropy_identical_bank_rows_gives_log_n():
    n = 7
    row = np.zeros(3)
    row[1] = 1.0
    bank = losses.MemoryBank(list(range(n)), np.tile(row, (n, 1)), temperature=0.05)
    rng = np.random.default_rng(9)
    val = losses.cross_domain_entropy(unit_rows(rng, 3, 3), bank).item()
    assert abs(val - math.log(n)) < 1e-9


def test_entropy_collinear_row_small_temperature_goes_to_zero():
    feat = np.array([[1.0, 0.0, 0.0]])
    bank_feats = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    bank = losses.MemoryBank([0, 1, 2], bank_feats, temperature=0.001)
    assert losses.cross_domain_entropy(feat, bank).item() < 1e-6


def test_entropy_matches_brute_force():
    rng = np.random.default_rng(10)
    feats = unit_rows(rng, 2, 4)
    bank = make_bank(rng, 5, 4)
    lib = losses.cross_domain_entropy(feats, bank).item()
    sims = feats @ bank.features.T / bank.temperature
    expected = 0.0
    for i in range(2):
        exps = np.exp(sims[i] - sims[i].max())
        p = exps / exps.sum()
        expected += entropy_brute_force(p.tolist())
    expected /= 2
    assert abs(lib - expected) < 1e-10


def test_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    bank = make_bank(rng, 5, 4, temperature=0.5)
    feats = ad.Tensor(unit_rows(rng, 2, 4), requires_grad=True)
    err = ad.finite_diff_check(
        lambda: losses.cross_domain_entropy(feats, bank), [feats], step=1e-5
    )
    assert err < 1e-4


# ---------------------------------------------------------------------------
# composed objectives


def test_cds_reduces_to_in_domain_id_when_lambda_zero():
    rng = np.random.default_rng(12)
    bank_a, bank_b = make_bank(rng, 6, 4), make_bank(rng, 6, 4)
    fa, fb = unit_rows(rng, 3, 4), unit_rows(rng, 3, 4)
    ids = [100, 101, 102]
    w0 = losses.LossWeights(lambda_cdm=0.0)
    val = losses.cds_loss(fa, ids, fb, ids, bank_a, bank_b, w0).item()
    expected = losses.id_loss(fa, ids, bank_a).item() + losses.id_loss(fb, ids, bank_b).item()
    assert abs(val - expected) < 1e-12


def test_cds_matches_sum_of_parts():
    rng = np.random.default_rng(13)
    bank_a, bank_b = make_bank(rng, 6, 4), make_bank(rng, 6, 4)
    fa, fb = unit_rows(rng, 3, 4), unit_rows(rng, 3, 4)
    ids = [100, 101, 102]
    w = losses.LossWeights(lambda_cdm=0.7)
    val = losses.cds_loss(fa, ids, fb, ids, bank_a, bank_b, w).item()
    expected = (
        losses.id_loss(fa, ids, bank_a).item()
        + losses.id_loss(fb, ids, bank_b).item()
        + 0.7
        * (
            losses.cross_domain_entropy(fa, bank_b).item()
            + losses.cross_domain_entropy(fb, bank_a).item()
        )
    )
    assert abs(val - expected) < 1e-12


def test_all_loss_terms_nonnegative():
    for seed in range(10):
        rng = np.random.default_rng(600 + seed)
        bank_a, bank_b = make_bank(rng, 6, 4), make_bank(rng, 6, 4)
        fa, fb = unit_rows(rng, 3, 4), unit_rows(rng, 3, 4)
        ids = [100, 101, 102]
        w = losses.LossWeights()
        assert losses.id_loss(fa, ids, bank_a).item() >= 0
        assert losses.cross_domain_entropy(fa, bank_b).item() >= 0
        assert losses.ppp_loss(fa, fb).item() >= 0
        assert losses.cds_loss(fa, ids, fb, ids, bank_a, bank_b, w).item() >= 0
        assert (
            losses.total_loss(
                fa, ids, fb, ids, bank_a, bank_b, w, ppp_ab=(fa, fb), ppp_ba=(fb, fa)
            ).item()
            >= 0
        )
        assert losses.distill_loss(fa, fb, unit_rows(rng, 3, 5), unit_rows(rng, 3, 5)).item() >= 0


def test_total_loss_without_pairs_reduces_to_cds():
    rng = np.random.default_rng(14)
    bank_a, bank_b = make_bank(rng, 6, 4), make_bank(rng, 6, 4)
    fa, fb = unit_rows(rng, 3, 4), unit_rows(rng, 3, 4)
    ids = [100, 101, 102]
    w = losses.LossWeights()
    cds_only = losses.cds_loss(fa, ids, fb, ids, bank_a, bank_b, w).item()
    total = losses.total_loss(fa, ids, fb, ids, bank_a, bank_b, w).item()
    assert total == cds_only


def test_total_loss_single_pair_batches_add_nothing():
    rng = np.random.default_rng(15)
    bank_a, bank_b = make_bank(rng, 6, 4), make_bank(rng, 6, 4)
    fa, fb = unit_rows(rng, 1, 4), unit_rows(rng, 1, 4)
    ids_a, ids_b = [100], [101]
    w = losses.LossWeights()
    base = losses.cds_loss(fa, ids_a, fb, ids_b, bank_a, bank_b, w).item()
    total = losses.total_loss(
        fa, ids_a, fb, ids_b, bank_a, bank_b, w, ppp_ab=(fa, fb), ppp_ba=(fb, fa)
    ).item()
    assert total == base


def test_total_loss_composition_matches_parts():
    rng = np.random.default_rng(17)
    bank_a, bank_b = make_bank(rng, 8, 4), make_bank(rng, 8, 4)
    fa, fb = unit_rows(rng, 4, 4), unit_rows(rng, 4, 4)
    sa, sb = unit_rows(rng, 4, 4), unit_rows(rng, 4, 4)
    ids = [100, 101, 102, 103]
    w = losses.LossWeights(lambda_cdm=0.5, tau_ppp=0.7)
    total = losses.total_loss(
        fa, ids, fb, ids, bank_a, bank_b, w, ppp_ab=(fa, sb), ppp_ba=(fb, sa)
    ).item()
    expected = losses.cds_loss(fa, ids, fb, ids, bank_a, bank_b, w).item() + 0.5 * (
        losses.ppp_loss(fa, sb, tau_ppp=0.7).item()
        + losses.ppp_loss(fb, sa, tau_ppp=0.7).item()
    )
    assert abs(total - expected) < 1e-12


# ---------------------------------------------------------------------------
# distillation


def test_distill_zero_when_student_equals_teacher():
    rng = np.random.default_rng(18)
    fa, fb = unit_rows(rng, 4, 5), unit_rows(rng, 4, 5)
    assert abs(losses.distill_loss(fa, fb, fa, fb).item()) < 1e-12


def test_distill_uniform_teacher_closed_form():
    rng = np.random.default_rng(19)
    m, d = 4, 5
    sa, sb = unit_rows(rng, m, d), unit_rows(rng, m, d)
    row = np.zeros(d)
    row[0] = 1.0
    ta = np.tile(row, (m, 1))  # identical teacher rows -> uniform profiles
    tb = np.tile(row, (m, 1))
    lib = losses.distill_loss(sa, sb, ta, tb).item()

    def softmax(v):
        e = np.exp(v - v.max())
        return e / e.sum()

    expected = 0.0
    for queries, gallery in ((sa, sb), (sa, sa), (sb, sa), (sb, sb)):
        per_query = [
            math.log(m) - entropy_brute_force(softmax(queries[i] @ gallery.T).tolist())
            for i in range(m)
        ]
        expected += sum(per_query) / m
    assert abs(lib - expected) < 1e-10


def test_distill_shape_mismatch_is_alignment_error():
    rng = np.random.default_rng(20)
    with pytest.raises(AlignmentError):
        losses.distill_loss(
            unit_rows(rng, 3, 4), unit_rows(rng, 3, 4), unit_rows(rng, 2, 4), unit_rows(rng, 3, 4)
        )


def test_distill_gradient_matches_finite_differences():
    rng = np.random.default_rng(21)
    sa = ad.Tensor(unit_rows(rng, 3, 4), requires_grad=True)
    sb = ad.Tensor(unit_rows(rng, 3, 4), requires_grad=True)
    ta, tb = unit_rows(rng, 3, 6), unit_rows(rng, 3, 6)
    err = ad.finite_diff_check(
        lambda: losses.distill_loss(sa, sb, ta, tb), [sa, sb], step=1e-5
    )
    assert err < 1e-4


def test_no_gradient_reaches_teacher_or_bank():
    rng = np.random.default_rng(22)
    sa = ad.Tensor(unit_rows(rng, 3, 4), requires_grad=True)
    sb = ad.Tensor(unit_rows(rng, 3, 4), requires_grad=True)
    # deliberately pass requires_grad teachers; the loss must ignore that
    ta = ad.Tensor(unit_rows(rng, 3, 4), requires_grad=True)
    tb = ad.Tensor(unit_rows(rng, 3, 4), requires_grad=True)
    with ad.Graph() as g:
        loss = losses.distill_loss(sa, sb, ta, tb)
        g.backward(loss)
    assert sa.grad is not None and sb.grad is not None
    assert ta.grad is None and tb.grad is None

    bank = make_bank(rng, 5, 4)
    feats = ad.Tensor(unit_rows(rng, 2, 4), requires_grad=True)
    const = bank.as_constant()
    assert const.requires_grad is False
    with ad.Graph() as g:
        loss = losses.id_loss(feats, [100, 101], bank)
        g.backward(loss)
    assert feats.grad is not None


def test_loss_weight_validation():
    with pytest.raises(ConfigError):
        losses.LossWeights(lambda_cdm=-0.1)
    with pytest.raises(ConfigError):
        losses.LossWeights(tau_ppp=0.0)
    with pytest.raises(ConfigError):
        losses.LossWeights(bank_momentum=1.0)
