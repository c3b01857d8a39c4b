"""scenevoice: decoupled four-bank memory alignment between visual scenes and
the sounds they imply, on a tiny self-contained autodiff core.

The package is organized bottom-up:

- `kernels`: swappable cosine/softmax kernels (numpy and compiled).
- `autodiff`: a reverse-mode tape over numpy arrays.
- `model`: the four memory banks, both pathways, and every loss term.
- `synth`: the deterministic factorized synthetic world and dataset files.
- `train`: AdamW, EMA, the training loop, and portable checkpoints.
- `evaluate`: retrieval recall, decoupling margins, baselines, sweeps.
- `gradcheck`: finite-difference verification of all analytic gradients.
- `cli`: the `scenevoice` command (gen / train / eval / ablate / gradcheck).
"""

from .errors import (
    ConfigError,
    CorruptFile,
    DimensionMismatch,
    EmptyTape,
    InvalidProportions,
    NonFiniteLoss,
    PrototypeCollapse,
    SceneVoiceError,
    TooFewPairs,
    VersionMismatch,
    ZeroNormVector,
)
from .model import BANK_ORDER, LossWeights, MemoryAligner, MemoryBank, attend, batch_objective
from .synth import PairMode, SamplePair, WorldSpec, build_world, generate_dataset
from .train import TrainConfig, fit, load_checkpoint, restore_model, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "BANK_ORDER",
    "ConfigError",
    "CorruptFile",
    "DimensionMismatch",
    "EmptyTape",
    "InvalidProportions",
    "LossWeights",
    "MemoryAligner",
    "MemoryBank",
    "NonFiniteLoss",
    "PairMode",
    "PrototypeCollapse",
    "SamplePair",
    "SceneVoiceError",
    "TooFewPairs",
    "TrainConfig",
    "VersionMismatch",
    "WorldSpec",
    "ZeroNormVector",
    "attend",
    "batch_objective",
    "build_world",
    "fit",
    "generate_dataset",
    "load_checkpoint",
    "restore_model",
    "save_checkpoint",
    "__version__",
]
