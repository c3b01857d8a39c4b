"""Evaluation: cross-modal retrieval recall, decoupling margins, trainable
fusion baselines, and the slot-count sweep.

Recall uses pessimistic tie handling: a gallery item tying the true item's
score counts as beating it, so degenerate constant predictors score at or
below chance instead of inflating the metric.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import matmul, matmul_nt, mean_all, scale, softmax_rows, sq_dist_rows, value_of
from .errors import NonFiniteLoss, TooFewPairs
from .model import MemoryAligner
from .rng import make_rng
from .synth import LatentWorld, SamplePair
from .train import AdamW, TrainConfig, batch_indices, collate

_EPS = 1e-12


def _unit_rows(x: np.ndarray) -> np.ndarray:
    """Row-normalize; rows with (near-)zero norm become zero rows."""
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return np.where(norms > _EPS, x / np.where(norms > _EPS, norms, 1.0), 0.0)


def _cos_rows(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Cosine between corresponding rows."""
    return (_unit_rows(x) * _unit_rows(y)).sum(axis=1)


def _predictions(source, eval_pairs: Sequence[SamplePair]) -> np.ndarray:
    if isinstance(source, np.ndarray):
        if len(source) != len(eval_pairs):
            raise ValueError("prediction matrix row count does not match eval pairs")
        return source
    v = np.stack([p.v for p in eval_pairs])
    if hasattr(source, "predict"):
        return np.asarray(source.predict(v))
    return np.asarray(source.recall_from_visual(v).combined)


def cross_modal_recall(source, eval_pairs: Sequence[SamplePair], k: int) -> float:
    """Fraction of pairs whose recalled embedding ranks its own auditory
    embedding within the top k of the whole gallery, by cosine similarity.

    `source` may be a model, a baseline, or a precomputed (n, D) prediction
    matrix aligned with `eval_pairs`.
    """
    n = len(eval_pairs)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < 2 or n < k:
        raise TooFewPairs(f"recall@{k} needs at least max(2, k) pairs, got {n}")
    pred = _predictions(source, eval_pairs)
    gallery = np.stack([p.a for p in eval_pairs])
    cos = _unit_rows(pred) @ _unit_rows(gallery).T
    own = np.diag(cos)
    # rank = how many gallery items score >= the true one (excluding itself);
    # ties therefore push the true item down.
    rank = (cos >= own[:, None]).sum(axis=1) - 1
    return float(np.mean(rank < k))


def mean_alignment_kl(model: MemoryAligner, eval_pairs: Sequence[SamplePair]) -> float:
    """Mean KL between auditory and visual attention weights over pairs."""
    from .autodiff import kl_rows

    a = np.stack([p.a for p in eval_pairs])
    v = np.stack([p.v for p in eval_pairs])
    aud = model.reconstruct_auditory(a)
    vis = model.recall_from_visual(v)
    kl = kl_rows(aud.timbre_weights, vis.timbre_weights) + kl_rows(aud.sound_weights, vis.sound_weights)
    return float(np.mean(kl))


def decoupling_margins(
    model,
    world: LatentWorld,
    n_probe: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """(timbre_margin, env_margin) from freshly probed visual pairs.

    timbre_margin: mean cosine between timbre readouts of same-character
    pairs minus the same for different-character pairs.  env_margin is the
    mirror statistic on sound readouts for same/different environments.
    """
    if n_probe < 50:
        raise ValueError(f"n_probe must be >= 50 for a stable margin, got {n_probe}")
    spec = world.spec
    c_n, e_n = spec.n_characters, spec.n_environments

    def rand_not(limit: int, avoid: int) -> int:
        return (avoid + 1 + int(rng.integers(limit - 1))) % limit

    rows: list[np.ndarray] = []

    def draw(c: int, e: int) -> int:
        rows.append(world.visual_embedding(c, e, rng))
        return len(rows) - 1

    groups: dict[str, list[tuple[int, int]]] = {"ts": [], "td": [], "es": [], "ed": []}
    for _ in range(n_probe):
        # same character, two environments
        c = int(rng.integers(c_n))
        e1 = int(rng.integers(e_n))
        groups["ts"].append((draw(c, e1), draw(c, rand_not(e_n, e1))))
        # two characters, independent environments
        c1 = int(rng.integers(c_n))
        c2 = rand_not(c_n, c1)
        groups["td"].append((draw(c1, int(rng.integers(e_n))), draw(c2, int(rng.integers(e_n)))))
        # same environment, two characters
        e = int(rng.integers(e_n))
        c1 = int(rng.integers(c_n))
        groups["es"].append((draw(c1, e), draw(rand_not(c_n, c1), e)))
        # two environments, independent characters
        e1 = int(rng.integers(e_n))
        e2 = rand_not(e_n, e1)
        groups["ed"].append((draw(int(rng.integers(c_n)), e1), draw(int(rng.integers(c_n)), e2)))

    out = model.recall_from_visual(np.stack(rows))
    timbre = np.asarray(out.timbre_component)
    sound = np.asarray(out.sound_component)

    def mean_cos(component: np.ndarray, key: str) -> float:
        left = np.asarray([i for i, _ in groups[key]])
        right = np.asarray([j for _, j in groups[key]])
        return float(np.mean(_cos_rows(component[left], component[right])))

    timbre_margin = mean_cos(timbre, "ts") - mean_cos(timbre, "td")
    env_margin = mean_cos(sound, "es") - mean_cos(sound, "ed")
    return timbre_margin, env_margin


@dataclass
class EvalReport:
    kind: str
    slot_count: int | None
    recall_at_1: float
    recall_at_5: float | None
    mean_align_kl: float | None
    timbre_margin: float | None
    env_margin: float | None
    final_loss: float | None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "slot_count": self.slot_count,
            "recall_at_1": self.recall_at_1,
            "recall_at_5": self.recall_at_5,
            "mean_align_kl": self.mean_align_kl,
            "timbre_margin": self.timbre_margin,
            "env_margin": self.env_margin,
            "final_loss": self.final_loss,
            **({"meta": self.meta} if self.meta else {}),
        }


REPORT_CSV_HEADER = "kind,slots,recall_at_1,recall_at_5,mean_align_kl,timbre_margin,env_margin,final_loss"


def write_report_csv(path: str | os.PathLike, reports: Sequence[EvalReport]) -> None:
    def cell(x) -> str:
        return "" if x is None else repr(float(x)) if isinstance(x, float) else str(x)

    with open(path, "w", encoding="utf-8") as fh:
        fh.write(REPORT_CSV_HEADER + "\n")
        for r in reports:
            fh.write(
                ",".join(
                    [
                        r.kind,
                        cell(r.slot_count),
                        cell(r.recall_at_1),
                        cell(r.recall_at_5),
                        cell(r.mean_align_kl),
                        cell(r.timbre_margin),
                        cell(r.env_margin),
                        cell(r.final_loss),
                    ]
                )
                + "\n"
            )


def evaluate_model(
    model: MemoryAligner,
    eval_pairs: Sequence[SamplePair],
    *,
    world: LatentWorld | None = None,
    n_probe: int = 128,
    probe_seed: int = 0,
    kind: str = "decoupled_memory",
    final_loss: float | None = None,
) -> EvalReport:
    """Full report for a trained model; margins need the generating world."""
    r1 = cross_modal_recall(model, eval_pairs, 1)
    r5 = cross_modal_recall(model, eval_pairs, 5) if len(eval_pairs) >= 5 else None
    tm = em = None
    if world is not None:
        tm, em = decoupling_margins(model, world, n_probe, make_rng(probe_seed))
    return EvalReport(
        kind=kind,
        slot_count=model.slot_count,
        recall_at_1=r1,
        recall_at_5=r5,
        mean_align_kl=mean_alignment_kl(model, eval_pairs),
        timbre_margin=tm,
        env_margin=em,
        final_loss=final_loss,
    )


# ---------------------------------------------------------------------------
# trainable fusion baselines (same optimizer, same budget, reconstruction
# objective only)


class ConcatFusion:
    """Single trainable linear map from visual embedding to audio space."""

    def __init__(self, proj: np.ndarray):
        self.proj = proj  # (D, D)

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator, dtype=np.float64) -> "ConcatFusion":
        return cls(np.ascontiguousarray(rng.normal(0.0, 1.0 / math.sqrt(dim), (dim, dim)).astype(dtype)))

    def parameters(self) -> dict[str, np.ndarray]:
        return {"proj": self.proj}

    def recall(self, params, v):
        return matmul(v, params["proj"])

    def predict(self, v: np.ndarray) -> np.ndarray:
        return self.recall(self.parameters(), np.asarray(v))


class AttnFusion:
    """Single-head dot-product cross-attention over one undecoupled token bank.

    The visual embedding is the query; keys and values are trainable
    projections of the shared tokens.
    """

    def __init__(self, tokens: np.ndarray, key_proj: np.ndarray, value_proj: np.ndarray):
        self.tokens = tokens  # (N, D)
        self.key_proj = key_proj  # (D, D)
        self.value_proj = value_proj  # (D, D)

    @classmethod
    def create(cls, dim: int, n_tokens: int, rng: np.random.Generator, dtype=np.float64) -> "AttnFusion":
        sd = 1.0 / math.sqrt(dim)
        make = lambda shape: np.ascontiguousarray(rng.normal(0.0, sd, shape).astype(dtype))
        return cls(make((n_tokens, dim)), make((dim, dim)), make((dim, dim)))

    def parameters(self) -> dict[str, np.ndarray]:
        return {"tokens": self.tokens, "key_proj": self.key_proj, "value_proj": self.value_proj}

    def recall(self, params, v):
        keys = matmul(params["tokens"], params["key_proj"])
        values = matmul(params["tokens"], params["value_proj"])
        dim = np.shape(value_of(v))[1]
        logits = scale(matmul_nt(v, keys), 1.0 / math.sqrt(dim))
        return matmul(softmax_rows(logits), values)

    def predict(self, v: np.ndarray) -> np.ndarray:
        return self.recall(self.parameters(), np.asarray(v))


def fit_baseline(baseline, pairs: list[SamplePair], cfg: TrainConfig) -> list[float]:
    """Train a baseline on reconstruction error with the model's exact budget
    and batch schedule; returns the per-step loss history."""
    from .autodiff import Tape

    cfg.validate()
    opt = AdamW.from_config(cfg)
    dtype = cfg.np_dtype()
    history: list[float] = []
    for step in range(cfg.steps):
        idx = batch_indices(cfg.seed, step, len(pairs), cfg.batch_size)
        batch = collate([pairs[i] for i in idx], dtype)
        tape = Tape()
        leaves = {name: tape.leaf(p) for name, p in baseline.parameters().items()}
        pred = baseline.recall(leaves, batch.v)
        loss = mean_all(sq_dist_rows(batch.a, pred))
        if not math.isfinite(loss.value):
            raise NonFiniteLoss("rec", step)
        history.append(loss.value)
        tape.backward(loss)
        opt.step(baseline.parameters(), {name: leaf.grad for name, leaf in leaves.items()})
    return history


BASELINE_KINDS = ("concat_fusion", "attn_fusion")


def make_baseline(kind: str, dim: int, slot_count: int | None, rng: np.random.Generator, dtype=np.float64):
    if kind == "concat_fusion":
        return ConcatFusion.create(dim, rng, dtype)
    if kind == "attn_fusion":
        if slot_count is None:
            raise ValueError("attn_fusion needs a slot_count")
        return AttnFusion.create(dim, slot_count, rng, dtype)
    raise ValueError(f"unknown baseline kind {kind!r}; expected one of {BASELINE_KINDS}")


def run_baseline(
    kind: str,
    pairs: list[SamplePair],
    cfg: TrainConfig,
    eval_pairs: Sequence[SamplePair],
    *,
    dim: int,
    slot_count: int | None = None,
    init_seed: int = 0,
) -> EvalReport:
    """Train and evaluate one baseline under the shared budget."""
    baseline = make_baseline(kind, dim, slot_count, make_rng(init_seed), cfg.np_dtype())
    history = fit_baseline(baseline, pairs, cfg)
    r1 = cross_modal_recall(baseline, eval_pairs, 1)
    r5 = cross_modal_recall(baseline, eval_pairs, 5) if len(eval_pairs) >= 5 else None
    return EvalReport(
        kind=kind,
        slot_count=slot_count if kind == "attn_fusion" else None,
        recall_at_1=r1,
        recall_at_5=r5,
        mean_align_kl=None,
        timbre_margin=None,
        env_margin=None,
        final_loss=history[-1] if history else None,
    )


def slot_sweep(
    slot_values: Sequence[int],
    pairs: list[SamplePair],
    cfg: TrainConfig,
    eval_pairs: Sequence[SamplePair],
    *,
    dim: int,
    world: LatentWorld | None = None,
    n_probe: int = 128,
    probe_seed: int = 0,
    init_seed: int = 0,
) -> list[EvalReport]:
    """Train one aligner per slot count under identical budgets."""
    from .train import fit

    reports = []
    for n in slot_values:
        model = MemoryAligner.create(n, dim, make_rng(init_seed), cfg.temperature, cfg.np_dtype())
        result = fit(model, pairs, cfg)
        reports.append(
            evaluate_model(
                model,
                eval_pairs,
                world=world,
                n_probe=n_probe,
                probe_seed=probe_seed,
                final_loss=result.history[-1].total if result.history else None,
            )
        )
    return reports


def run_ablation(
    world: LatentWorld,
    pairs: list[SamplePair],
    cfg: TrainConfig,
    eval_pairs: Sequence[SamplePair],
    slot_values: Sequence[int],
    *,
    n_probe: int = 128,
    probe_seed: int = 0,
    init_seed: int = 0,
) -> list[EvalReport]:
    """Sweep the aligner and AttnFusion over slot counts plus one ConcatFusion
    row, all on the same data, eval split, and step budget."""
    reports = slot_sweep(
        slot_values, pairs, cfg, eval_pairs,
        dim=world.spec.dim, world=world, n_probe=n_probe,
        probe_seed=probe_seed, init_seed=init_seed,
    )
    for n in slot_values:
        reports.append(
            run_baseline("attn_fusion", pairs, cfg, eval_pairs,
                         dim=world.spec.dim, slot_count=n, init_seed=init_seed)
        )
    reports.append(
        run_baseline("concat_fusion", pairs, cfg, eval_pairs, dim=world.spec.dim, init_seed=init_seed)
    )
    return reports
