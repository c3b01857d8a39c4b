"""The four-bank model: pathway math against a frozen independent oracle,
gradient structure of every loss term, and the model container."""

import math

import numpy as np
import pytest

import naive_reference as ref
from scenevoice.autodiff import Tape, Var
from scenevoice.errors import NonFiniteLoss
from scenevoice.model import (
    BANK_ORDER,
    NORM_FLOOR,
    Batch,
    BankRole,
    LossBreakdown,
    LossWeights,
    MemoryAligner,
    MemoryBank,
    attend,
    batch_objective,
    total_loss,
)
from scenevoice.rng import make_rng

# Frozen output of an independent scalar-loop oracle (notes/oracles/
# oracle_pathway.py) for the fixed instance below at tau = 0.5 and loss
# weights (10, 2, 0.5, 0.5).
ORACLE_TAU = 0.5
ORACLE_BANKS = {
    "character_key": np.array([[2.0, 0, 0, 0], [0, 1, 1, 0], [0, 0, 0, 3]]),
    "environment_key": np.array([[1.0, 0, 1, 0], [0, 2, 0, 0], [0, 0, 1, 1]]),
    "timbre_value": np.array([[1.0, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 1]]),
    "sound_value": np.array([[1.0, 1, 0, 0], [0, 0, 1, 0], [1, 0, 1, 0]]),
}
ORACLE_V = np.array([[1.0, 2, 0, 0], [0, 1, 1, 2]])
ORACLE_A = np.array([[1.0, 0, 1, 0], [2, 1, 0, 1]])
ORACLE_LOSSES = {
    "rec": 0.83050858576960718,
    "align": 0.94613919279100134,
    "imi": 0.59895202385128754,
    "timbre_c": 0.41875117920796268,
    "env_c": 0.19657882819383857,
    "total": 11.797469565083096,
}
ORACLE_AUD_TIMBRE_W0 = [0.52521655659914457, 0.12768893411116669, 0.34709450928968871]
ORACLE_VIS_CHAR_W1 = [0.10761659242805831, 0.34147531041846302, 0.55090809715347866]
ORACLE_VIS_COMBINED0 = [0.67511439420054331, 0.71925395146126192, 0.93076248317742705, 0.1430878827632856]
ORACLE_AUD_COMBINED1 = [1.4568980706534687, 0.8221951805480604, 0.61912875581534776, 0.19440175503016344]


def _oracle_batch() -> Batch:
    return Batch(
        v=ORACLE_V.copy(),
        a=ORACLE_A.copy(),
        timbre_pairs=np.array([[0, 1]], dtype=np.intp),
        env_pairs=np.array([[0, 1]], dtype=np.intp),
    )


def test_objective_matches_frozen_oracle():
    out = batch_objective(ORACLE_BANKS, _oracle_batch(), LossWeights(), ORACLE_TAU)
    for name, expect in ORACLE_LOSSES.items():
        got = out.breakdown.components()[name]
        assert math.isclose(got, expect, rel_tol=1e-12), f"{name}: {got} vs {expect}"
    assert np.allclose(out.auditory.timbre_weights[0], ORACLE_AUD_TIMBRE_W0, rtol=1e-12, atol=0)
    assert np.allclose(out.visual.timbre_weights[1], ORACLE_VIS_CHAR_W1, rtol=1e-12, atol=0)
    assert np.allclose(out.visual.combined[0], ORACLE_VIS_COMBINED0, rtol=1e-12, atol=0)
    assert np.allclose(out.auditory.combined[1], ORACLE_AUD_COMBINED1, rtol=1e-12, atol=0)


def test_objective_matches_naive_reference_random():
    # mini version of the acceptance oracle-equivalence run
    for seed in range(25):
        rng = make_rng(seed)
        n, d, b = int(rng.integers(2, 8)), int(rng.integers(2, 8)), int(rng.integers(2, 5))
        tau = float(rng.uniform(0.1, 2.0))
        banks = {name: rng.normal(size=(n, d)) for name in BANK_ORDER}
        batch = Batch(
            v=rng.normal(size=(b, d)),
            a=rng.normal(size=(b, d)),
            timbre_pairs=np.array([[0, b - 1]], dtype=np.intp),
            env_pairs=np.array([[b - 1, 0]], dtype=np.intp),
        )
        out = batch_objective(banks, batch, LossWeights(), tau)
        expect = ref.naive_losses(
            {k: v.tolist() for k, v in banks.items()},
            batch.v.tolist(), batch.a.tolist(),
            [(0, b - 1)], [(b - 1, 0)],
            (10.0, 2.0, 0.5, 0.5), tau,
        )
        for name in ("rec", "align", "imi", "timbre_c", "env_c", "total"):
            assert math.isclose(out.breakdown.components()[name], expect[name], rel_tol=1e-12, abs_tol=1e-12)


def test_loss_identity_and_check():
    out = batch_objective(ORACLE_BANKS, _oracle_batch(), LossWeights(), ORACLE_TAU)
    out.breakdown.check_identity(LossWeights(), tol=1e-9)
    bad = LossBreakdown(rec=1.0, align=0.0, imi=0.0, timbre_c=0.0, env_c=0.0, total=2.0)
    with pytest.raises(AssertionError):
        bad.check_identity(LossWeights())


def test_total_loss_unit_example():
    node, bd = total_loss(1.0, 1.0, 1.0, 1.0, 1.0, LossWeights())
    assert bd.total == 1.0 + 10.0 + 2.0 + 0.5 + 0.5


def test_assert_finite_names_component():
    bd = LossBreakdown(rec=0.1, align=float("nan"), imi=0.0, timbre_c=0.0, env_c=0.0, total=0.1)
    with pytest.raises(NonFiniteLoss) as err:
        bd.assert_finite(step=7)
    assert err.value.component == "align"
    assert err.value.step == 7


def test_no_pairs_means_zero_consistency_terms():
    batch = Batch(
        v=ORACLE_V.copy(),
        a=ORACLE_A.copy(),
        timbre_pairs=np.zeros((0, 2), dtype=np.intp),
        env_pairs=np.zeros((0, 2), dtype=np.intp),
    )
    out = batch_objective(ORACLE_BANKS, batch, LossWeights(), ORACLE_TAU)
    assert out.breakdown.timbre_c == 0.0
    assert out.breakdown.env_c == 0.0
    assert out.terms["timbre_c"] == 0.0
    assert not isinstance(out.terms["env_c"], Var)


def test_attend_simplex_and_shapes():
    rng = make_rng(1)
    bank = MemoryBank(BankRole.CHARACTER_KEY, rng.normal(size=(5, 3)))
    w2 = attend(rng.normal(size=(4, 3)), bank, tau=0.3)
    assert w2.shape == (4, 5)
    assert np.allclose(w2.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(w2 >= 0.0)


def test_attend_single_query_matches_batch():
    rng = make_rng(2)
    slots = rng.normal(size=(6, 4))
    q = rng.normal(size=4)
    single = attend(q, slots, tau=0.5)
    batched = attend(q.reshape(1, -1), slots, tau=0.5)
    assert single.shape == (6,)
    assert np.array_equal(single, batched[0])


def test_attend_rejects_bad_temperature():
    with pytest.raises(ValueError, match="temperature"):
        attend(np.ones(3), np.ones((2, 3)), tau=0.0)
    with pytest.raises(ValueError, match="temperature"):
        attend(np.ones(3), np.ones((2, 3)), tau=-1.0)


def _term_grads(detach_teacher: bool) -> dict[str, dict[str, np.ndarray]]:
    """Gradients of every loss term at the oracle instance."""
    grads = {}
    for term in ("rec", "align", "imi", "timbre_c", "env_c"):
        tape = Tape()
        leaves = {name: tape.leaf(arr.copy()) for name, arr in ORACLE_BANKS.items()}
        out = batch_objective(leaves, _oracle_batch(), LossWeights(), ORACLE_TAU, detach_teacher)
        tape.backward(out.terms[term])
        grads[term] = {
            name: (np.zeros_like(leaf.value) if leaf.grad is None else leaf.grad)
            for name, leaf in leaves.items()
        }
    return grads


def test_gradient_structure_by_term():
    g = _term_grads(detach_teacher=True)

    def zero(term, bank):
        return not np.any(g[term][bank])

    # reconstruction never touches the key banks
    assert zero("rec", "character_key") and zero("rec", "environment_key")
    assert not zero("rec", "timbre_value") and not zero("rec", "sound_value")
    # with a detached teacher, alignment reaches only the key banks
    assert not zero("align", "character_key") and not zero("align", "environment_key")
    assert zero("align", "timbre_value") and zero("align", "sound_value")
    # imitation reaches keys (attention) and values (readout) through the student
    assert not zero("imi", "character_key") and not zero("imi", "timbre_value")
    # each consistency term touches exactly its own key/value pair
    assert not zero("timbre_c", "character_key") and not zero("timbre_c", "timbre_value")
    assert zero("timbre_c", "environment_key") and zero("timbre_c", "sound_value")
    assert not zero("env_c", "environment_key") and not zero("env_c", "sound_value")
    assert zero("env_c", "character_key") and zero("env_c", "timbre_value")


def test_coupled_teacher_reaches_value_banks():
    detached = _term_grads(detach_teacher=True)
    coupled = _term_grads(detach_teacher=False)
    assert np.any(coupled["align"]["timbre_value"])
    assert np.any(coupled["align"]["sound_value"])
    # and the student-side paths agree between the modes
    assert np.allclose(
        detached["align"]["character_key"], coupled["align"]["character_key"], atol=1e-15
    )
    assert not np.allclose(
        detached["imi"]["timbre_value"], coupled["imi"]["timbre_value"], atol=1e-12
    )


def test_detached_equals_frozen_teacher_override():
    from scenevoice.model import auditory_pathway

    teacher = auditory_pathway(
        ORACLE_BANKS["timbre_value"], ORACLE_BANKS["sound_value"], ORACLE_A, ORACLE_TAU
    )
    for term in ("align", "imi"):
        tape = Tape()
        leaves = {name: tape.leaf(arr.copy()) for name, arr in ORACLE_BANKS.items()}
        out = batch_objective(leaves, _oracle_batch(), LossWeights(), ORACLE_TAU, True)
        tape.backward(out.terms[term])
        detached = {n: l.grad for n, l in leaves.items() if l.grad is not None}

        tape2 = Tape()
        leaves2 = {name: tape2.leaf(arr.copy()) for name, arr in ORACLE_BANKS.items()}
        out2 = batch_objective(
            leaves2, _oracle_batch(), LossWeights(), ORACLE_TAU, False, teacher_override=teacher
        )
        tape2.backward(out2.terms[term])
        for name, grad in detached.items():
            assert np.array_equal(grad, leaves2[name].grad)


# --- the model container ---


def test_create_shapes_and_init_scale():
    model = MemoryAligner.create(64, 16, make_rng(3), temperature=0.07)
    assert model.slot_count == 64
    assert model.dim == 16
    assert model.temperature == 0.07
    seen = set()
    for name, bank in model.banks().items():
        assert bank.slots.shape == (64, 16)
        assert bank.slots.dtype == np.float64
        assert bank.role.value == name
        seen.add(id(bank.slots))
        # component std is 1/sqrt(dim) = 0.25; loose statistical check
        assert 0.18 < bank.slots.std() < 0.32
    assert len(seen) == 4


def test_create_rejects_bad_sizes():
    with pytest.raises(ValueError):
        MemoryAligner.create(0, 4, make_rng(0))
    with pytest.raises(ValueError):
        MemoryAligner.create(4, 0, make_rng(0))


def test_copy_is_independent(small_model):
    clone = small_model.copy()
    clone.character_key.slots[0, 0] += 100.0
    assert small_model.character_key.slots[0, 0] != clone.character_key.slots[0, 0]


def test_parameters_are_live_views(small_model):
    small_model.parameters()["character_key"][0, 0] = 123.0
    assert small_model.character_key.slots[0, 0] == 123.0


def test_enforce_norm_floor():
    model = MemoryAligner.create(3, 4, make_rng(4))
    model.timbre_value.slots[0] = 0.0
    model.timbre_value.slots[1] = np.array([1e-9, 0, 0, 0])
    direction = np.array([3.0, 4.0, 0.0, 0.0]) * 1e-8
    model.timbre_value.slots[2] = direction
    model.enforce_norm_floor()
    norms = np.linalg.norm(model.timbre_value.slots, axis=1)
    assert np.all(norms >= NORM_FLOOR * (1 - 1e-12))
    # direction of a rescaled (nonzero) slot is preserved
    rescaled = model.timbre_value.slots[2]
    assert math.isclose(rescaled[1] / rescaled[0], 4.0 / 3.0, rel_tol=1e-12)


def test_bank_validate_errors():
    bank = MemoryBank(BankRole.TIMBRE_VALUE, np.ones((2, 3)))
    bank.validate()
    with pytest.raises(ValueError, match="non-empty"):
        MemoryBank(BankRole.TIMBRE_VALUE, np.ones(3)).validate()
    with pytest.raises(ValueError, match="non-finite"):
        MemoryBank(BankRole.TIMBRE_VALUE, np.array([[np.nan, 1.0]])).validate()
    with pytest.raises(ValueError, match="norm"):
        MemoryBank(BankRole.TIMBRE_VALUE, np.array([[1.0, 0.0], [0.0, 0.0]])).validate()


def test_single_vs_batch_pathways(small_model):
    rng = make_rng(5)
    a = rng.normal(size=(3, 6))
    v = rng.normal(size=(3, 6))
    aud_b = small_model.reconstruct_auditory(a)
    vis_b = small_model.recall_from_visual(v)
    aud_1 = small_model.reconstruct_auditory(a[1])
    vis_1 = small_model.recall_from_visual(v[1])
    # row extraction vs batch: identical math, but BLAS may round gemv and
    # gemm paths differently, so compare to tight tolerance instead of bits
    assert np.allclose(aud_1.combined, aud_b.combined[1], rtol=1e-13, atol=1e-14)
    assert np.allclose(vis_1.timbre_component, vis_b.timbre_component[1], rtol=1e-13, atol=1e-14)
    assert vis_1.combined.ndim == 1


def test_bind_and_backward_full_objective(small_model, small_batch):
    tape = Tape()
    leaves = small_model.bind(tape)
    out = batch_objective(leaves, small_batch, LossWeights(), small_model.temperature)
    tape.backward(out.total)
    for name in BANK_ORDER:
        grad = leaves[name].grad
        assert grad is not None and grad.shape == (4, 6)
        assert np.all(np.isfinite(grad))
        assert np.any(grad)
