"""Training loop: AdamW with decoupled weight decay, an EMA shadow of every
bank, stateless per-step batch sampling, and a portable binary checkpoint.

Batch indices for step t are drawn from a generator derived from
(seed, t), never from a long-lived stream, so resuming from a checkpoint
replays exactly the batches an uninterrupted run would have seen.
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import CorruptFile, VersionMismatch
from .model import (
    BANK_ORDER,
    BankRole,
    Batch,
    LossBreakdown,
    LossWeights,
    MemoryAligner,
    MemoryBank,
    ObjectiveOutputs,
    batch_objective,
)
from .rng import substream
from .synth import PairMode, SamplePair

CHECKPOINT_MAGIC = b"SVCP"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    steps: int = 2000
    ema_decay: float = 0.999
    detach_teacher: bool = True
    temperature: float = 0.07
    dtype: str = "f64"
    seed: int = 0
    checkpoint_every: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ValueError(f"bad lr {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("eps must be positive and weight_decay non-negative")
        if self.batch_size < 1 or self.steps < 0 or self.checkpoint_every < 0:
            raise ValueError("batch_size >= 1, steps >= 0, checkpoint_every >= 0 required")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ValueError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.dtype not in ("f64", "f32"):
            raise ValueError(f"dtype must be 'f64' or 'f32', got {self.dtype!r}")
        for name, w in vars(self.loss_weights).items():
            if w < 0 or not math.isfinite(w):
                raise ValueError(f"loss weight {name} must be finite and non-negative")

    def np_dtype(self):
        return np.float64 if self.dtype == "f64" else np.float32


class AdamW:
    """Adam moments plus decoupled weight decay (decay applied to the incoming
    parameter, not folded into the gradient)."""

    def __init__(self, lr: float, beta1: float, beta2: float, eps: float, weight_decay: float):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "AdamW":
        return cls(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)

    def ensure_state(self, params: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None]) -> None:
        self.ensure_state(params)
        t = self.step_count + 1
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            update += self.weight_decay * p
            p -= self.lr * update
        self.step_count = t


class EmaShadow:
    """Exponential moving average of parameters: s_t = d*s_{t-1} + (1-d)*p_t."""

    def __init__(self, decay: float, shadow: dict[str, np.ndarray]):
        self.decay = decay
        self.shadow = shadow

    @classmethod
    def init(cls, params: dict[str, np.ndarray], decay: float) -> "EmaShadow":
        return cls(decay, {name: p.copy() for name, p in params.items()})

    def update(self, params: dict[str, np.ndarray]) -> None:
        d = self.decay
        for name, p in params.items():
            s = self.shadow[name]
            s *= d
            s += (1.0 - d) * p

    def apply_to(self, model: MemoryAligner) -> MemoryAligner:
        """A copy of `model` carrying the shadow weights."""
        out = model.copy()
        for name in BANK_ORDER:
            bank = getattr(out, name)
            bank.slots[...] = self.shadow[name].astype(bank.slots.dtype)
        return out


def collate(pairs: list[SamplePair], dtype=np.float64) -> Batch:
    """Stack primary and partner rows; remember which rows form which pairs."""
    rows_v: list[np.ndarray] = []
    rows_a: list[np.ndarray] = []
    timbre_pairs: list[tuple[int, int]] = []
    env_pairs: list[tuple[int, int]] = []
    for pair in pairs:
        i = len(rows_v)
        rows_v.append(pair.v)
        rows_a.append(pair.a)
        if pair.partner is not None:
            j = len(rows_v)
            rows_v.append(pair.partner.v)
            rows_a.append(pair.partner.a)
            if pair.mode is PairMode.SAME_CHARACTER_DIFF_ENV:
                timbre_pairs.append((i, j))
            elif pair.mode is PairMode.DIFF_CHARACTER_SAME_ENV:
                env_pairs.append((i, j))
    return Batch(
        v=np.ascontiguousarray(np.stack(rows_v).astype(dtype)),
        a=np.ascontiguousarray(np.stack(rows_a).astype(dtype)),
        timbre_pairs=np.asarray(timbre_pairs, dtype=np.intp).reshape(-1, 2),
        env_pairs=np.asarray(env_pairs, dtype=np.intp).reshape(-1, 2),
    )


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Deterministic batch for a given step; a pure function of (seed, step)."""
    rng = substream(seed, step)
    if batch_size <= n:
        return rng.choice(n, size=batch_size, replace=False)
    return rng.integers(0, n, size=batch_size)


def train_step(
    model: MemoryAligner,
    batch: Batch,
    cfg: TrainConfig,
    opt: AdamW,
    ema: EmaShadow | None = None,
    inspect: Callable[[ObjectiveOutputs], None] | None = None,
) -> LossBreakdown:
    """One forward/backward/update pass.  Mutates model, opt, and ema."""
    from .autodiff import Tape

    tape = Tape()
    leaves = model.bind(tape)
    out = batch_objective(
        leaves, batch, cfg.loss_weights, cfg.temperature, detach_teacher=cfg.detach_teacher
    )
    out.breakdown.assert_finite(step=opt.step_count)
    out.breakdown.check_identity(cfg.loss_weights)
    if inspect is not None:
        inspect(out)
    tape.backward(out.total)
    grads = {name: leaf.grad for name, leaf in leaves.items()}
    opt.step(model.parameters(), grads)
    model.enforce_norm_floor()
    if ema is not None:
        ema.update(model.parameters())
    return out.breakdown


@dataclass
class FitResult:
    history: list[LossBreakdown]
    optimizer: AdamW
    ema: EmaShadow
    start_step: int = 0


def fit(
    model: MemoryAligner,
    pairs: list[SamplePair],
    cfg: TrainConfig,
    *,
    start_step: int = 0,
    opt: AdamW | None = None,
    ema: EmaShadow | None = None,
    step_callback: Callable[[int, LossBreakdown, ObjectiveOutputs], None] | None = None,
) -> FitResult:
    """Run steps [start_step, cfg.steps); returns history plus final state."""
    cfg.validate()
    if len(pairs) == 0 and cfg.steps > start_step:
        raise ValueError("cannot train on an empty dataset")
    if opt is None:
        opt = AdamW.from_config(cfg)
        opt.step_count = start_step
    if ema is None:
        ema = EmaShadow.init(model.parameters(), cfg.ema_decay)
    dtype = cfg.np_dtype()
    history: list[LossBreakdown] = []
    captured: list[ObjectiveOutputs] = []
    inspect = None
    if step_callback is not None:
        inspect = captured.append
    for step in range(start_step, cfg.steps):
        idx = batch_indices(cfg.seed, step, len(pairs), cfg.batch_size)
        batch = collate([pairs[i] for i in idx], dtype)
        bd = train_step(model, batch, cfg, opt, ema, inspect=inspect)
        history.append(bd)
        if step_callback is not None:
            step_callback(step, bd, captured.pop())
    return FitResult(history=history, optimizer=opt, ema=ema, start_step=start_step)


# ---------------------------------------------------------------------------
# loss history CSV

LOSS_CSV_HEADER = "step,rec,align,imi,timbre_c,env_c,total"


def write_loss_csv(path: str | os.PathLike, history: list[LossBreakdown], start_step: int = 0) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(LOSS_CSV_HEADER + "\n")
        for i, bd in enumerate(history):
            fh.write(
                f"{start_step + i},{bd.rec!r},{bd.align!r},{bd.imi!r},"
                f"{bd.timbre_c!r},{bd.env_c!r},{bd.total!r}\n"
            )


# ---------------------------------------------------------------------------
# checkpoint format (little-endian):
#   magic "SVCP" | u32 version | u32 N | u32 D
#   four banks (N*D f64 each, row-major, bank order as BANK_ORDER)
#   u64 optimizer step count | first moments x4 | second moments x4
#   EMA shadows x4 | u64 training step
#   u32 config length | config json (canonical) | u32 crc32 of all prior bytes


@dataclass
class Checkpoint:
    version: int
    slot_count: int
    dim: int
    banks: dict[str, np.ndarray]
    opt_step: int
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    step: int
    config: dict


def save_checkpoint(
    path: str | os.PathLike,
    model: MemoryAligner,
    opt: AdamW,
    ema: EmaShadow,
    config: dict,
    step: int,
) -> None:
    params = model.parameters()
    opt.ensure_state(params)
    n, d = model.slot_count, model.dim

    def block(arr: np.ndarray) -> bytes:
        return np.ascontiguousarray(arr, dtype="<f8").tobytes()

    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<III", CHECKPOINT_VERSION, n, d)
    for name in BANK_ORDER:
        buf += block(params[name])
    buf += struct.pack("<Q", opt.step_count)
    for name in BANK_ORDER:
        buf += block(opt.m[name])
    for name in BANK_ORDER:
        buf += block(opt.v[name])
    for name in BANK_ORDER:
        buf += block(ema.shadow[name])
    buf += struct.pack("<Q", step)
    cfg_bytes = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf += struct.pack("<I", len(cfg_bytes))
    buf += cfg_bytes
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 20:
        raise CorruptFile(f"{path}: truncated checkpoint")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) != stored_crc:
        raise CorruptFile(f"{path}: checksum mismatch")
    if data[:4] != CHECKPOINT_MAGIC:
        raise CorruptFile(f"{path}: bad magic {data[:4]!r}")
    version, n, d = struct.unpack_from("<III", data, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    pos = 16
    end = len(data) - 4

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > end:
            raise CorruptFile(f"{path}: truncated checkpoint body")
        chunk = data[pos : pos + nbytes]
        pos += nbytes
        return chunk

    def matrix() -> np.ndarray:
        return np.frombuffer(take(n * d * 8), dtype="<f8").reshape(n, d).copy()

    banks = {name: matrix() for name in BANK_ORDER}
    opt_step = struct.unpack("<Q", take(8))[0]
    opt_m = {name: matrix() for name in BANK_ORDER}
    opt_v = {name: matrix() for name in BANK_ORDER}
    ema = {name: matrix() for name in BANK_ORDER}
    step = struct.unpack("<Q", take(8))[0]
    cfg_len = struct.unpack("<I", take(4))[0]
    config = json.loads(take(cfg_len).decode("utf-8"))
    if pos != end:
        raise CorruptFile(f"{path}: {end - pos} unexpected trailing bytes")
    return Checkpoint(
        version=version,
        slot_count=n,
        dim=d,
        banks=banks,
        opt_step=opt_step,
        opt_m=opt_m,
        opt_v=opt_v,
        ema=ema,
        step=step,
        config=config,
    )


def restore_model(ckpt: Checkpoint) -> MemoryAligner:
    """Rebuild the model (dtype and temperature come from the config snapshot)."""
    tcfg = ckpt.config.get("train", {})
    temperature = float(tcfg.get("temperature", 0.07))
    dtype = np.float64 if tcfg.get("dtype", "f64") == "f64" else np.float32
    banks = [
        MemoryBank(BankRole(name), np.ascontiguousarray(ckpt.banks[name].astype(dtype)))
        for name in BANK_ORDER
    ]
    return MemoryAligner(*banks, temperature=temperature)


def restore_trainer(ckpt: Checkpoint, cfg: TrainConfig) -> tuple[MemoryAligner, AdamW, EmaShadow]:
    """Model plus optimizer/EMA state, ready for fit(start_step=ckpt.step)."""
    model = restore_model(ckpt)
    dtype = cfg.np_dtype()
    opt = AdamW.from_config(cfg)
    opt.step_count = ckpt.opt_step
    opt.m = {k: np.ascontiguousarray(v.astype(dtype)) for k, v in ckpt.opt_m.items()}
    opt.v = {k: np.ascontiguousarray(v.astype(dtype)) for k, v in ckpt.opt_v.items()}
    ema = EmaShadow(cfg.ema_decay, {k: np.ascontiguousarray(v.astype(dtype)) for k, v in ckpt.ema.items()})
    return model, opt, ema
