"""Decoupled four-bank memory model aligning visual and auditory embeddings.

The model holds four slot matrices.  Two key banks are addressed by the
visual embedding (one specializing to the character speaking, one to the
acoustic environment); two value banks store auditory structure (voice timbre
and environmental sound).  Attention weights are a temperature-scaled softmax
over cosine similarities between the query and each slot.

Readout is cross-bank: the auditory pathway queries the value banks with the
audio embedding itself, while the visual pathway queries the key banks and
reads the *value* banks with those weights.  Both pathways therefore emit a
timbre component, a sound component, and their sum, in audio space:

    visual:   w_char = attend(v, char_keys),  w_env = attend(v, env_keys)
              recalled = timbre_values^T w_char + sound_values^T w_env
    auditory: w_t = attend(a, timbre_values), w_s = attend(a, sound_values)
              reconstructed = timbre_values^T w_t + sound_values^T w_s

Training combines auditory reconstruction with cross-modal distillation
(weight alignment by KL, component imitation by squared error) and two
contrastive consistency terms that pin which bank carries which factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np

from .autodiff import (
    Tape,
    Var,
    add,
    cosine_matrix,
    detach,
    gather_rows,
    kl_rows,
    matmul,
    mean_all,
    reshape,
    scale,
    softmax_rows,
    sq_dist_rows,
    value_of,
)
from .errors import NonFiniteLoss

BANK_ORDER = ("character_key", "environment_key", "timbre_value", "sound_value")
NORM_FLOOR = 1e-6


class BankRole(Enum):
    CHARACTER_KEY = "character_key"
    ENVIRONMENT_KEY = "environment_key"
    TIMBRE_VALUE = "timbre_value"
    SOUND_VALUE = "sound_value"


@dataclass
class MemoryBank:
    """One (n_slots, dim) slot matrix with a fixed role."""

    role: BankRole
    slots: np.ndarray

    @property
    def n_slots(self) -> int:
        return self.slots.shape[0]

    @property
    def dim(self) -> int:
        return self.slots.shape[1]

    def validate(self) -> None:
        if self.slots.ndim != 2 or self.slots.size == 0:
            raise ValueError(f"{self.role.value}: slots must be a non-empty (N, D) matrix")
        if not np.all(np.isfinite(self.slots)):
            raise ValueError(f"{self.role.value}: slots contain non-finite entries")
        norms = np.sqrt((self.slots * self.slots).sum(axis=1))
        if norms.min() < NORM_FLOOR:
            raise ValueError(f"{self.role.value}: slot norm below {NORM_FLOOR}")


@dataclass
class LossWeights:
    """Multipliers for the four auxiliary loss terms."""

    align: float = 10.0
    imitation: float = 2.0
    timbre: float = 0.5
    environment: float = 0.5


@dataclass
class PathwayOutput:
    """Attention weights and readouts produced by one pathway.

    `combined = timbre_component + sound_component`; all fields are (B, N) or
    (B, D) arrays (or tape nodes during training).
    """

    timbre_weights: object
    sound_weights: object
    timbre_component: object
    sound_component: object
    combined: object


def init_slots(n_slots: int, dim: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Gaussian slot init with per-component std 1/sqrt(dim)."""
    slots = rng.normal(0.0, 1.0 / math.sqrt(dim), size=(n_slots, dim))
    return np.ascontiguousarray(slots.astype(dtype))


def _attend2(query, slots, tau: float):
    sims = cosine_matrix(query, slots)
    if tau != 1.0:
        sims = scale(sims, 1.0 / tau)
    return softmax_rows(sims)


def attend(query, slots, tau: float = 1.0):
    """Attention weights of `query` over bank `slots` (cosine, then softmax).

    Accepts a single (D,) query or a (B, D) batch; weights match in rank.
    """
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if isinstance(slots, MemoryBank):
        slots = slots.slots
    if np.ndim(value_of(query)) == 1:
        return reshape(_attend2(reshape(query, (1, -1)), slots, tau), (-1,))
    return _attend2(query, slots, tau)


def auditory_pathway(timbre_values, sound_values, a, tau: float) -> PathwayOutput:
    """Reconstruct a batch of auditory embeddings from the value banks."""
    w_t = _attend2(a, timbre_values, tau)
    w_s = _attend2(a, sound_values, tau)
    timbre = matmul(w_t, timbre_values)
    sound = matmul(w_s, sound_values)
    return PathwayOutput(w_t, w_s, timbre, sound, add(timbre, sound))


def visual_pathway(char_keys, env_keys, timbre_values, sound_values, v, tau: float) -> PathwayOutput:
    """Recall auditory structure for a batch of visual embeddings.

    Weights come from the key banks, readout from the value banks.
    """
    w_char = _attend2(v, char_keys, tau)
    w_env = _attend2(v, env_keys, tau)
    timbre = matmul(w_char, timbre_values)
    sound = matmul(w_env, sound_values)
    return PathwayOutput(w_char, w_env, timbre, sound, add(timbre, sound))


def gather_output(po: PathwayOutput, idx) -> PathwayOutput:
    """Row-subset of a batched PathwayOutput (used to pick pair members)."""
    return PathwayOutput(
        gather_rows(po.timbre_weights, idx),
        gather_rows(po.sound_weights, idx),
        gather_rows(po.timbre_component, idx),
        gather_rows(po.sound_component, idx),
        gather_rows(po.combined, idx),
    )


# ---------------------------------------------------------------------------
# losses (sum over components, mean over batch rows)


def reconstruction_loss(a, auditory: PathwayOutput):
    return mean_all(sq_dist_rows(a, auditory.combined))


def alignment_loss(auditory: PathwayOutput, visual: PathwayOutput, detach_teacher: bool = True):
    """KL from the auditory attention (teacher) to the visual attention."""
    w_t = detach(auditory.timbre_weights) if detach_teacher else auditory.timbre_weights
    w_s = detach(auditory.sound_weights) if detach_teacher else auditory.sound_weights
    return mean_all(add(kl_rows(w_t, visual.timbre_weights), kl_rows(w_s, visual.sound_weights)))


def imitation_loss(auditory: PathwayOutput, visual: PathwayOutput, detach_teacher: bool = True):
    """Squared error between auditory (teacher) and visual readout components."""
    t_ref = detach(auditory.timbre_component) if detach_teacher else auditory.timbre_component
    s_ref = detach(auditory.sound_component) if detach_teacher else auditory.sound_component
    return mean_all(
        add(sq_dist_rows(t_ref, visual.timbre_component), sq_dist_rows(s_ref, visual.sound_component))
    )


def timbre_consistency_loss(visual_a: PathwayOutput, visual_b: PathwayOutput):
    """Same character, different environment: timbre readouts must agree."""
    return mean_all(sq_dist_rows(visual_a.timbre_component, visual_b.timbre_component))


def environment_consistency_loss(visual_a: PathwayOutput, visual_b: PathwayOutput):
    """Different character, same environment: sound readouts must agree."""
    return mean_all(sq_dist_rows(visual_a.sound_component, visual_b.sound_component))


@dataclass
class LossBreakdown:
    """Scalar values of every loss term for one batch."""

    rec: float
    align: float
    imi: float
    timbre_c: float
    env_c: float
    total: float

    def components(self) -> dict[str, float]:
        return {
            "rec": self.rec,
            "align": self.align,
            "imi": self.imi,
            "timbre_c": self.timbre_c,
            "env_c": self.env_c,
            "total": self.total,
        }

    def assert_finite(self, step: int | None = None) -> None:
        for name, v in self.components().items():
            if not math.isfinite(v):
                raise NonFiniteLoss(name, step)

    def check_identity(self, weights: LossWeights, tol: float = 1e-9) -> None:
        expect = (
            ((self.rec + self.align * weights.align) + self.imi * weights.imitation)
            + self.timbre_c * weights.timbre
        ) + self.env_c * weights.environment
        if abs(expect - self.total) > tol:
            raise AssertionError(f"loss total {self.total} != weighted sum {expect}")


def total_loss(rec, align, imi, timbre_c, env_c, weights: LossWeights):
    """Weighted sum of the five terms; returns (node, LossBreakdown)."""
    total = add(rec, scale(align, weights.align))
    total = add(total, scale(imi, weights.imitation))
    total = add(total, scale(timbre_c, weights.timbre))
    total = add(total, scale(env_c, weights.environment))
    bd = LossBreakdown(
        rec=float(value_of(rec)),
        align=float(value_of(align)),
        imi=float(value_of(imi)),
        timbre_c=float(value_of(timbre_c)),
        env_c=float(value_of(env_c)),
        total=float(value_of(total)),
    )
    return total, bd


@dataclass
class Batch:
    """Collated training rows plus index pairs for the consistency terms.

    `v` and `a` are (M, D); `timbre_pairs` / `env_pairs` are (K, 2) row-index
    arrays into them (empty when the batch has no pair of that mode).
    """

    v: np.ndarray
    a: np.ndarray
    timbre_pairs: np.ndarray
    env_pairs: np.ndarray


@dataclass
class ObjectiveOutputs:
    total: object
    breakdown: LossBreakdown
    auditory: PathwayOutput
    visual: PathwayOutput
    # unweighted per-term nodes keyed rec/align/imi/timbre_c/env_c; a term
    # with no contributing pairs is the plain float 0.0
    terms: dict = None


def batch_objective(
    banks: Mapping[str, object],
    batch: Batch,
    weights: LossWeights,
    tau: float,
    detach_teacher: bool = True,
    teacher_override: PathwayOutput | None = None,
) -> ObjectiveOutputs:
    """All five loss terms for one batch.

    `banks` maps BANK_ORDER names to (N, D) arrays or tape nodes.  When
    `teacher_override` is given, the alignment and imitation teachers are
    taken from it instead of the live auditory pathway (the reconstruction
    target still uses the live pathway); finite-difference checks use this to
    hold the teacher fixed the same way detaching does.
    """
    auditory = auditory_pathway(banks["timbre_value"], banks["sound_value"], batch.a, tau)
    visual = visual_pathway(
        banks["character_key"], banks["environment_key"],
        banks["timbre_value"], banks["sound_value"], batch.v, tau,
    )
    teacher = teacher_override if teacher_override is not None else auditory
    rec = reconstruction_loss(batch.a, auditory)
    align = alignment_loss(teacher, visual, detach_teacher)
    imi = imitation_loss(teacher, visual, detach_teacher)
    if len(batch.timbre_pairs):
        timbre_c = timbre_consistency_loss(
            gather_output(visual, batch.timbre_pairs[:, 0]),
            gather_output(visual, batch.timbre_pairs[:, 1]),
        )
    else:
        timbre_c = 0.0
    if len(batch.env_pairs):
        env_c = environment_consistency_loss(
            gather_output(visual, batch.env_pairs[:, 0]),
            gather_output(visual, batch.env_pairs[:, 1]),
        )
    else:
        env_c = 0.0
    total, bd = total_loss(rec, align, imi, timbre_c, env_c, weights)
    terms = {"rec": rec, "align": align, "imi": imi, "timbre_c": timbre_c, "env_c": env_c}
    return ObjectiveOutputs(total, bd, auditory, visual, terms)


# ---------------------------------------------------------------------------
# the model container


@dataclass
class MemoryAligner:
    """The four memory banks plus the attention temperature."""

    character_key: MemoryBank
    environment_key: MemoryBank
    timbre_value: MemoryBank
    sound_value: MemoryBank
    temperature: float = 0.07

    @classmethod
    def create(
        cls,
        slot_count: int,
        dim: int,
        rng: np.random.Generator,
        temperature: float = 0.07,
        dtype=np.float64,
    ) -> "MemoryAligner":
        if slot_count < 1 or dim < 1:
            raise ValueError("slot_count and dim must be >= 1")
        banks = [
            MemoryBank(BankRole(name), init_slots(slot_count, dim, rng, dtype))
            for name in BANK_ORDER
        ]
        return cls(*banks, temperature=temperature)

    @property
    def slot_count(self) -> int:
        return self.character_key.n_slots

    @property
    def dim(self) -> int:
        return self.character_key.dim

    def banks(self) -> dict[str, MemoryBank]:
        return {name: getattr(self, name) for name in BANK_ORDER}

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name).slots for name in BANK_ORDER}

    def bind(self, tape: Tape) -> dict[str, Var]:
        """Register every bank as a leaf on `tape` (shared by both pathways)."""
        return {name: tape.leaf(getattr(self, name).slots) for name in BANK_ORDER}

    def copy(self) -> "MemoryAligner":
        banks = [MemoryBank(BankRole(n), getattr(self, n).slots.copy()) for n in BANK_ORDER]
        return MemoryAligner(*banks, temperature=self.temperature)

    def enforce_norm_floor(self) -> None:
        """Rescale any slot whose L2 norm fell below NORM_FLOOR."""
        for bank in self.banks().values():
            slots = bank.slots
            norms = np.sqrt((slots * slots).sum(axis=1))
            dead = norms == 0.0
            if dead.any():
                slots[dead, 0] = NORM_FLOOR
                norms = np.sqrt((slots * slots).sum(axis=1))
            low = norms < NORM_FLOOR
            if low.any():
                slots[low] *= (NORM_FLOOR / norms[low])[:, None]

    def reconstruct_auditory(self, a: np.ndarray) -> PathwayOutput:
        """Auditory reconstruction for one (D,) or a batch (B, D) of embeddings."""
        a = np.asarray(a)
        single = a.ndim == 1
        po = auditory_pathway(
            self.timbre_value.slots, self.sound_value.slots,
            a.reshape(1, -1) if single else a, self.temperature,
        )
        return _squeeze_output(po) if single else po

    def recall_from_visual(self, v: np.ndarray) -> PathwayOutput:
        """Cross-modal recall for one (D,) or a batch (B, D) of visual embeddings."""
        v = np.asarray(v)
        single = v.ndim == 1
        po = visual_pathway(
            self.character_key.slots, self.environment_key.slots,
            self.timbre_value.slots, self.sound_value.slots,
            v.reshape(1, -1) if single else v, self.temperature,
        )
        return _squeeze_output(po) if single else po


def _squeeze_output(po: PathwayOutput) -> PathwayOutput:
    return PathwayOutput(
        po.timbre_weights[0],
        po.sound_weights[0],
        po.timbre_component[0],
        po.sound_component[0],
        po.combined[0],
    )
