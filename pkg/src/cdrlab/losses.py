"""Training objectives.

Four families: the pseudo-positive-pair (PPP) contrastive loss over
aligned real/synthetic batches, memory-bank instance discrimination
within a domain, entropy minimization against the opposite domain's
bank, and a similarity-distillation KL loss against a fixed teacher.
Banks and teacher features are always treated as constants; no gradient
reaches them.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import (
    AlignmentError,
    ConfigError,
    ContractViolation,
    DegenerateInputError,
    UnknownIdError,
)

# Coefficient of the PPP pair in the combined objective; fixed by the recipe.
PPP_COEFFICIENT = 0.5

# Loose unit-norm gate: catches genuinely unnormalized features while
# tolerating finite-difference pokes of ~1e-5 per coordinate.
_NORM_ATOL = 1e-3


@dataclass(frozen=True)
class LossWeights:
    lambda_cdm: float = 1.0  # weight of the cross-domain entropy terms
    tau_ppp: float = 1.0  # 1.0 keeps the pair loss in bare-exponent form
    tau_bank: float = 0.05
    bank_momentum: float = 0.5

    def __post_init__(self):
        if self.lambda_cdm < 0:
            raise ConfigError(f"lambda_cdm must be >= 0, got {self.lambda_cdm}")
        if self.tau_ppp <= 0 or self.tau_bank <= 0:
            raise ConfigError("temperatures must be positive")
        if not 0 <= self.bank_momentum < 1:
            raise ConfigError(f"bank momentum must be in [0, 1), got {self.bank_momentum}")


def _check_unit_rows(t, name):
    norms = np.linalg.norm(t.values, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > _NORM_ATOL)
    if bad.size:
        raise ContractViolation(
            f"{name}: row {bad[0]} has norm {norms[bad[0]]:.6f}, expected unit rows"
        )


def _as_tensor(x):
    return x if isinstance(x, ad.Tensor) else ad.Tensor(np.asarray(x, dtype=np.float64))


class MemoryBank:
    """One running unit-norm feature row per training instance.

    Rows are momentum-mixed with fresh features after each optimizer step
    and renormalized. Losses read the bank through ``as_constant``, which
    never carries gradient. ``update`` replaces the matrix instead of
    mutating it, so constants handed out earlier keep their snapshot.
    """

    def __init__(self, instance_ids, features, momentum=0.5, temperature=0.05):
        features = np.asarray(features, dtype=np.float64)
        ids = [int(i) for i in instance_ids]
        if features.ndim != 2 or features.shape[0] != len(ids):
            raise ConfigError(
                f"bank needs one feature row per id: {features.shape} vs {len(ids)} ids"
            )
        if len(set(ids)) != len(ids):
            raise ConfigError("bank instance ids must be unique")
        if not 0 <= momentum < 1:
            raise ConfigError(f"bank momentum must be in [0, 1), got {momentum}")
        if temperature <= 0:
            raise ConfigError(f"bank temperature must be positive, got {temperature}")
        norms = np.linalg.norm(features, axis=1)
        if (norms < ad.EPS_NORM).any():
            raise DegenerateInputError("bank init features contain a zero-norm row")
        self.features = features / norms[:, None]
        self.instance_ids = np.array(ids, dtype=np.int64)
        self.momentum = float(momentum)
        self.temperature = float(temperature)
        self._row_of = {i: r for r, i in enumerate(ids)}

    def __len__(self):
        return self.features.shape[0]

    def rows_for(self, instance_ids):
        rows = np.empty(len(instance_ids), dtype=np.intp)
        for k, i in enumerate(instance_ids):
            try:
                rows[k] = self._row_of[int(i)]
            except KeyError:
                raise UnknownIdError(f"instance id {int(i)} is not in this bank") from None
        return rows

    def as_constant(self):
        return ad.Tensor(self.features)

    def update(self, instance_ids, new_features):
        """row <- normalize(momentum*row + (1-momentum)*feature)."""
        new_features = np.asarray(new_features, dtype=np.float64)
        _check_unit_rows(ad.Tensor(new_features), "bank update features")
        rows = self.rows_for(instance_ids)
        mixed = self.features.copy()
        mixed[rows] = self.momentum * mixed[rows] + (1.0 - self.momentum) * new_features
        norms = np.linalg.norm(mixed[rows], axis=1)
        if (norms < ad.EPS_NORM).any():
            raise DegenerateInputError("bank update produced a zero-norm row")
        mixed[rows] /= norms[:, None]
        self.features = mixed


def bank_update(bank, instance_ids, new_features):
    """Module-level alias for ``MemoryBank.update``."""
    bank.update(instance_ids, new_features)


# ---------------------------------------------------------------------------
# losses


def ppp_loss(feats_real, feats_syn, tau_ppp=1.0):
    """Bidirectional contrastive loss over pair-aligned batches.

    Row i of ``feats_syn`` must be the translation of row i of
    ``feats_real``. Each direction matches a row against its counterpart
    within the other batch's softmax:

        mean_i -log softmax(S/tau)[i, i] + mean_i -log softmax(S^T/tau)[i, i]

    with S the cosine similarity matrix between the two batches. With a
    single pair the softmax has one term, so the loss is exactly zero.
    """
    if tau_ppp <= 0:
        raise ConfigError(f"tau_ppp must be positive, got {tau_ppp}")
    feats_real, feats_syn = _as_tensor(feats_real), _as_tensor(feats_syn)
    if feats_real.values.ndim != 2 or feats_syn.values.ndim != 2:
        raise AlignmentError("ppp_loss expects feature matrices")
    if feats_real.shape != feats_syn.shape:
        raise AlignmentError(
            f"ppp_loss: batches misaligned, {feats_real.shape} vs {feats_syn.shape}"
        )
    _check_unit_rows(feats_real, "ppp_loss real features")
    _check_unit_rows(feats_syn, "ppp_loss synthetic features")

    sims = ad.matmul(feats_real, ad.transpose(feats_syn))
    if tau_ppp != 1.0:
        sims = ad.scale(sims, 1.0 / tau_ppp)
    fwd = ad.scale(ad.mean_all(ad.diag_part(ad.log_softmax_rows(sims))), -1.0)
    bwd = ad.scale(
        ad.mean_all(ad.diag_part(ad.log_softmax_rows(ad.transpose(sims)))), -1.0
    )
    return ad.add(fwd, bwd)


def id_loss(features, instance_ids, bank):
    """Instance discrimination against the feature's own bank row.

    The bank matrix is constant; gradient only reaches ``features``.
    """
    features = _as_tensor(features)
    rows = bank.rows_for(instance_ids)
    sims = ad.scale(
        ad.matmul(features, ad.transpose(bank.as_constant())), 1.0 / bank.temperature
    )
    own = ad.take_per_row(ad.log_softmax_rows(sims), rows)
    return ad.scale(ad.mean_all(own), -1.0)


def cross_domain_entropy(features, other_bank):
    """Mean entropy of the softmax similarity profile over the other domain's bank."""
    if len(other_bank) == 0:
        raise ContractViolation("cross_domain_entropy: bank is empty")
    features = _as_tensor(features)
    sims = ad.scale(
        ad.matmul(features, ad.transpose(other_bank.as_constant())),
        1.0 / other_bank.temperature,
    )
    return ad.mean_all(ad.entropy_rows(ad.softmax_rows(sims)))


def cds_components(feats_a, ids_a, feats_b, ids_b, bank_a, bank_b, weights):
    """The self-supervision terms, individually, for logging and composition."""
    parts = {
        "id_a": id_loss(feats_a, ids_a, bank_a),
        "id_b": id_loss(feats_b, ids_b, bank_b),
    }
    if weights.lambda_cdm > 0:
        parts["xent_a"] = cross_domain_entropy(feats_a, bank_b)
        parts["xent_b"] = cross_domain_entropy(feats_b, bank_a)
    return parts


def cds_loss(feats_a, ids_a, feats_b, ids_b, bank_a, bank_b, weights):
    """In-domain instance discrimination plus weighted cross-domain entropy."""
    parts = cds_components(feats_a, ids_a, feats_b, ids_b, bank_a, bank_b, weights)
    total = ad.add(parts["id_a"], parts["id_b"])
    if "xent_a" in parts:
        total = ad.add(
            total, ad.scale(ad.add(parts["xent_a"], parts["xent_b"]), weights.lambda_cdm)
        )
    return total


def total_loss(
    feats_a,
    ids_a,
    feats_b,
    ids_b,
    bank_a,
    bank_b,
    weights,
    ppp_ab=None,
    ppp_ba=None,
):
    """Combined objective: CDS over the augmented pools plus the PPP pair.

    ``ppp_ab`` is an aligned (real-A features, synthetic-B features) pair,
    ``ppp_ba`` the symmetric one; pass None to train without pair terms.
    """
    total = cds_loss(feats_a, ids_a, feats_b, ids_b, bank_a, bank_b, weights)
    pair_terms = []
    if ppp_ab is not None:
        pair_terms.append(ppp_loss(*ppp_ab, tau_ppp=weights.tau_ppp))
    if ppp_ba is not None:
        pair_terms.append(ppp_loss(*ppp_ba, tau_ppp=weights.tau_ppp))
    if pair_terms:
        pair_sum = pair_terms[0]
        for t in pair_terms[1:]:
            pair_sum = ad.add(pair_sum, t)
        total = ad.add(total, ad.scale(pair_sum, PPP_COEFFICIENT))
    return total


def distill_loss(student_a, student_b, teacher_a, teacher_b):
    """Match the student's batch similarity distributions to a fixed teacher.

    For every sample, build the softmax distribution of its similarities
    to the in-batch samples of each domain, under student and teacher
    features separately, and penalize KL(student || teacher). Four terms:
    A-queries against the B batch and the A batch, then the symmetric
    B-query pair. Teacher features are constants by construction.
    """
    student_a, student_b = _as_tensor(student_a), _as_tensor(student_b)
    # teachers re-wrapped as constants: gradient must never reach them
    teacher_a = ad.Tensor(np.asarray(teacher_a.values if isinstance(teacher_a, ad.Tensor) else teacher_a, dtype=np.float64))
    teacher_b = ad.Tensor(np.asarray(teacher_b.values if isinstance(teacher_b, ad.Tensor) else teacher_b, dtype=np.float64))
    if student_a.shape[0] != teacher_a.shape[0]:
        raise AlignmentError(
            f"distill_loss: A batches misaligned, {student_a.shape} vs {teacher_a.shape}"
        )
    if student_b.shape[0] != teacher_b.shape[0]:
        raise AlignmentError(
            f"distill_loss: B batches misaligned, {student_b.shape} vs {teacher_b.shape}"
        )
    for t, name in (
        (student_a, "student A"),
        (student_b, "student B"),
        (teacher_a, "teacher A"),
        (teacher_b, "teacher B"),
    ):
        _check_unit_rows(t, f"distill_loss {name} features")

    def profile(queries, gallery):
        return ad.softmax_rows(ad.matmul(queries, ad.transpose(gallery)))

    total = None
    for queries_s, gallery_s, queries_t, gallery_t in (
        (student_a, student_b, teacher_a, teacher_b),
        (student_a, student_a, teacher_a, teacher_a),
        (student_b, student_a, teacher_b, teacher_a),
        (student_b, student_b, teacher_b, teacher_b),
    ):
        term = ad.mean_all(
            ad.kl_rows(profile(queries_s, gallery_s), profile(queries_t, gallery_t))
        )
        total = term if total is None else ad.add(total, term)
    return total
