"""Synthetic factorized world: paired visual/auditory embeddings with known ids.

A world holds per-character and per-environment prototype vectors for both
modalities.  An auditory embedding is the character's timbre prototype plus
the environment's sound prototype scaled by a per-sample SNR-derived gain,
plus Gaussian noise:

    a = timbre[c] + g * sound[e] + noise,   g = 10^(-snr_db / 20)

A visual embedding mixes the two visual prototypes through a fixed random
linear map (optionally followed by an elementwise tanh to make the mix
non-linear), plus Gaussian noise:

    v = M_v @ concat(char_vis[c], env_vis[e])   [then tanh]   + noise

Because the factors are planted, ground truth for recall and decoupling
metrics is known exactly.  All sampling is deterministic given (spec, seed):
each dataset record is drawn from its own child generator, so generation
order can never leak between records.
"""

from __future__ import annotations

import itertools
import json
import math
import os
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from .errors import InvalidProportions, PrototypeCollapse
from .rng import make_rng

MAX_PROTO_COS = 0.95
_PROTO_ATTEMPTS = 1000
_MIXER_SIGMA = 1.25  # pre-activation std ~1.8 so the tanh variant saturates
DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class WorldSpec:
    n_characters: int = 8
    n_environments: int = 8
    dim: int = 32
    visual_noise_sigma: float = 0.01
    audio_noise_sigma: float = 0.01
    snr_db_range: tuple[float, float] = (4.0, 20.0)
    linear_visual: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.n_characters < 2 or self.n_environments < 2:
            raise ValueError("need at least 2 characters and 2 environments")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.visual_noise_sigma < 0 or self.audio_noise_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        lo, hi = self.snr_db_range
        if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
            raise ValueError(f"invalid snr range {self.snr_db_range}")


class PairMode(Enum):
    STANDARD = "standard"
    SAME_CHARACTER_DIFF_ENV = "same_character_diff_env"
    DIFF_CHARACTER_SAME_ENV = "diff_character_same_env"


MODE_ORDER = (PairMode.STANDARD, PairMode.SAME_CHARACTER_DIFF_ENV, PairMode.DIFF_CHARACTER_SAME_ENV)


@dataclass(frozen=True)
class Sample:
    v: np.ndarray
    a: np.ndarray
    character_id: int
    environment_id: int


@dataclass(frozen=True)
class SamplePair:
    """One training record: a (v, a) pair, optionally with a contrast partner.

    Contrastive modes carry a second sample sharing exactly one factor with
    the primary: the character for SAME_CHARACTER_DIFF_ENV, the environment
    for DIFF_CHARACTER_SAME_ENV.
    """

    v: np.ndarray
    a: np.ndarray
    character_id: int
    environment_id: int
    mode: PairMode
    partner: Sample | None = None

    def validate(self) -> None:
        if self.mode is PairMode.STANDARD:
            if self.partner is not None:
                raise ValueError("standard pairs carry no partner")
            return
        if self.partner is None:
            raise ValueError(f"{self.mode.value} requires a partner")
        if self.mode is PairMode.SAME_CHARACTER_DIFF_ENV:
            ok = (self.partner.character_id == self.character_id
                  and self.partner.environment_id != self.environment_id)
        else:
            ok = (self.partner.character_id != self.character_id
                  and self.partner.environment_id == self.environment_id)
        if not ok:
            raise ValueError(f"partner ids inconsistent with mode {self.mode.value}")


@dataclass
class LatentWorld:
    spec: WorldSpec
    timbre_prototypes: np.ndarray  # (C, D)
    sound_prototypes: np.ndarray  # (E, D)
    char_visual_prototypes: np.ndarray  # (C, D)
    env_visual_prototypes: np.ndarray  # (E, D)
    audio_mixer: np.ndarray  # (D, 2D), kept as part of the world record
    visual_mixer: np.ndarray  # (D, 2D)

    def mix_gain(self, snr_db: float) -> float:
        return 10.0 ** (-snr_db / 20.0)

    def auditory_embedding(self, c: int, e: int, snr_db: float, rng: np.random.Generator) -> np.ndarray:
        clean = self.timbre_prototypes[c] + self.mix_gain(snr_db) * self.sound_prototypes[e]
        noise = rng.normal(0.0, 1.0, self.spec.dim)
        return clean + self.spec.audio_noise_sigma * noise

    def visual_embedding(self, c: int, e: int, rng: np.random.Generator) -> np.ndarray:
        stacked = np.concatenate([self.char_visual_prototypes[c], self.env_visual_prototypes[e]])
        mixed = self.visual_mixer @ stacked
        if not self.spec.linear_visual:
            mixed = np.tanh(mixed)
        noise = rng.normal(0.0, 1.0, self.spec.dim)
        return mixed + self.spec.visual_noise_sigma * noise

    def draw_sample(self, c: int, e: int, rng: np.random.Generator) -> Sample:
        """One (v, a) pair for fixed ids; draw order is fixed for determinism."""
        snr = rng.uniform(*self.spec.snr_db_range)
        a = self.auditory_embedding(c, e, snr, rng)
        v = self.visual_embedding(c, e, rng)
        return Sample(v=v, a=a, character_id=int(c), environment_id=int(e))


def _draw_prototype_family(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(dim), size=(n, dim))


def _max_abs_cos(rows: np.ndarray) -> float:
    norms = np.sqrt((rows * rows).sum(axis=1))
    cos = (rows @ rows.T) / np.outer(norms, norms)
    np.fill_diagonal(cos, 0.0)
    return float(np.abs(cos).max())


def build_world(spec: WorldSpec) -> LatentWorld:
    """Deterministically realize a world from its spec.

    Prototype families are redrawn together until every pairwise cosine over
    the union stays at or below MAX_PROTO_COS.
    """
    spec.validate()
    rng = make_rng(spec.seed)
    c, e, d = spec.n_characters, spec.n_environments, spec.dim
    for _ in range(_PROTO_ATTEMPTS):
        timbre = _draw_prototype_family(rng, c, d)
        sound = _draw_prototype_family(rng, e, d)
        char_vis = _draw_prototype_family(rng, c, d)
        env_vis = _draw_prototype_family(rng, e, d)
        if _max_abs_cos(np.vstack([timbre, sound, char_vis, env_vis])) <= MAX_PROTO_COS:
            break
    else:
        raise PrototypeCollapse(
            f"could not draw non-collinear prototypes in {_PROTO_ATTEMPTS} attempts (dim={d})"
        )
    audio_mixer = rng.normal(0.0, _MIXER_SIGMA, size=(d, 2 * d))
    visual_mixer = rng.normal(0.0, _MIXER_SIGMA, size=(d, 2 * d))
    return LatentWorld(
        spec=spec,
        timbre_prototypes=timbre,
        sound_prototypes=sound,
        char_visual_prototypes=char_vis,
        env_visual_prototypes=env_vis,
        audio_mixer=audio_mixer,
        visual_mixer=visual_mixer,
    )


def sample_pair(world: LatentWorld, mode: PairMode, rng: np.random.Generator) -> SamplePair:
    """Draw one record of the given mode from `rng`."""
    spec = world.spec
    c_n, e_n = spec.n_characters, spec.n_environments
    if mode is PairMode.STANDARD:
        c = int(rng.integers(c_n))
        e = int(rng.integers(e_n))
        s = world.draw_sample(c, e, rng)
        return SamplePair(s.v, s.a, s.character_id, s.environment_id, mode)
    if mode is PairMode.SAME_CHARACTER_DIFF_ENV:
        c = int(rng.integers(c_n))
        e1 = int(rng.integers(e_n))
        e2 = (e1 + 1 + int(rng.integers(e_n - 1))) % e_n
        first = world.draw_sample(c, e1, rng)
        second = world.draw_sample(c, e2, rng)
    elif mode is PairMode.DIFF_CHARACTER_SAME_ENV:
        c1 = int(rng.integers(c_n))
        c2 = (c1 + 1 + int(rng.integers(c_n - 1))) % c_n
        e = int(rng.integers(e_n))
        first = world.draw_sample(c1, e, rng)
        second = world.draw_sample(c2, e, rng)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    pair = SamplePair(first.v, first.a, first.character_id, first.environment_id, mode, second)
    pair.validate()
    return pair


def largest_remainder_counts(proportions, n: int) -> list[int]:
    """Integer counts summing to n, each within one of proportion * n."""
    ideal = [p * n for p in proportions]
    base = [int(math.floor(x)) for x in ideal]
    leftover = n - sum(base)
    order = sorted(range(len(ideal)), key=lambda i: (-(ideal[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    return base


def make_dataset(world: LatentWorld, n_samples: int, mode_mix, rng: np.random.Generator) -> list[SamplePair]:
    """Draw n_samples records with the given mode proportions.

    Every record gets its own child generator seeded from `rng`, so record i
    is the same no matter what order (or parallel schedule) produced it.
    """
    mode_mix = tuple(float(p) for p in mode_mix)
    if len(mode_mix) != len(MODE_ORDER) or any(not math.isfinite(p) or p < 0 for p in mode_mix):
        raise InvalidProportions(f"mode_mix must be 3 non-negative numbers, got {mode_mix}")
    if abs(sum(mode_mix) - 1.0) > 1e-9:
        raise InvalidProportions(f"mode_mix sums to {sum(mode_mix)}, not 1")
    if n_samples < 0:
        raise ValueError("n_samples must be non-negative")
    counts = largest_remainder_counts(mode_mix, n_samples)
    modes: list[PairMode] = []
    for mode, k in zip(MODE_ORDER, counts):
        modes.extend([mode] * k)
    rng.shuffle(modes)
    child_seeds = rng.integers(0, 2**63, size=n_samples, dtype=np.uint64)
    return [
        sample_pair(world, modes[i], make_rng(int(child_seeds[i])))
        for i in range(n_samples)
    ]


def sample_eval_pairs(
    world: LatentWorld,
    n_pairs: int,
    rng: np.random.Generator,
    distinct_classes: bool = True,
) -> list[SamplePair]:
    """Standard-mode pairs for retrieval evaluation.

    With distinct_classes, each (character, environment) combination appears
    at most once, so top-1 retrieval against the gallery is well defined.
    """
    spec = world.spec
    combos = list(itertools.product(range(spec.n_characters), range(spec.n_environments)))
    if distinct_classes:
        if n_pairs > len(combos):
            raise ValueError(
                f"cannot draw {n_pairs} distinct-class pairs from {len(combos)} combinations"
            )
        chosen = [combos[i] for i in rng.permutation(len(combos))[:n_pairs]]
    else:
        chosen = [combos[int(rng.integers(len(combos)))] for _ in range(n_pairs)]
    pairs = []
    for c, e in chosen:
        s = world.draw_sample(c, e, rng)
        pairs.append(SamplePair(s.v, s.a, s.character_id, s.environment_id, PairMode.STANDARD))
    return pairs


# ---------------------------------------------------------------------------
# on-disk format: one json record per line, floats at 17 significant digits
# (always enough to round-trip a double exactly), plus a json manifest.


def _fmt_vector(arr: np.ndarray) -> str:
    return "[" + ",".join(format(float(x), ".17g") for x in arr) + "]"


def _sample_json(v, a, character_id, environment_id) -> str:
    return (
        f'"character_id":{int(character_id)},"environment_id":{int(environment_id)},'
        f'"v":{_fmt_vector(v)},"a":{_fmt_vector(a)}'
    )


def _pair_line(pair: SamplePair) -> str:
    body = f'{{"mode":"{pair.mode.value}",{_sample_json(pair.v, pair.a, pair.character_id, pair.environment_id)}'
    if pair.partner is None:
        return body + ',"partner":null}'
    p = pair.partner
    return body + f',"partner":{{{_sample_json(p.v, p.a, p.character_id, p.environment_id)}}}}}'


def save_dataset(path: str | os.PathLike, pairs: list[SamplePair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(_pair_line(pair) + "\n")


def load_dataset(path: str | os.PathLike) -> list[SamplePair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            partner = None
            if rec["partner"] is not None:
                p = rec["partner"]
                partner = Sample(
                    v=np.asarray(p["v"], dtype=np.float64),
                    a=np.asarray(p["a"], dtype=np.float64),
                    character_id=p["character_id"],
                    environment_id=p["environment_id"],
                )
            pairs.append(
                SamplePair(
                    v=np.asarray(rec["v"], dtype=np.float64),
                    a=np.asarray(rec["a"], dtype=np.float64),
                    character_id=rec["character_id"],
                    environment_id=rec["environment_id"],
                    mode=PairMode(rec["mode"]),
                    partner=partner,
                )
            )
    return pairs


def dataset_manifest(spec: WorldSpec, n_samples: int, mode_mix, data_seed: int) -> dict:
    counts = largest_remainder_counts(tuple(mode_mix), n_samples)
    world = asdict(spec)
    world["snr_db_range"] = list(world["snr_db_range"])  # keep the dict json-plain
    return {
        "format_version": DATASET_FORMAT_VERSION,
        "world": world,
        "n_samples": n_samples,
        "mode_mix": list(mode_mix),
        "data_seed": data_seed,
        "counts": {mode.value: k for mode, k in zip(MODE_ORDER, counts)},
    }


def save_manifest(path: str | os.PathLike, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path: str | os.PathLike) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def world_from_manifest(manifest: dict) -> LatentWorld:
    fields = dict(manifest["world"])
    fields["snr_db_range"] = tuple(fields["snr_db_range"])
    return build_world(WorldSpec(**fields))


def generate_dataset(spec: WorldSpec, n_samples: int, mode_mix, data_seed: int):
    """World + records + manifest in one call (the `gen` command body)."""
    world = build_world(spec)
    pairs = make_dataset(world, n_samples, mode_mix, make_rng(data_seed))
    manifest = dataset_manifest(spec, n_samples, mode_mix, data_seed)
    return world, pairs, manifest
