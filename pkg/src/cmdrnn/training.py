"""Model assembly for the six compared variants, RMSProp and the training loop."""

from __future__ import annotations

import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import layers as L
from . import mdn
from . import tensor as T
from .config import ConfigError
from .data import WindowSet
from .tensor import Node, NonFiniteError, ShapeError

log = logging.getLogger(__name__)

VARIANTS = ("RNN", "CNN+RNN", "RNN+MDN", "CMDRNN-vanilla", "CMDRNN-LSTM", "CMDRNN-GRU")
CELLS = ("vanilla", "lstm", "gru")
CHECKPOINT_FORMAT = "cmdrnn-checkpoint/1"
EVAL_MODES = ("mle", "mixture-mean", "sample")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"epoch {epoch}, batch {batch}: {message}")
        self.epoch = epoch
        self.batch = batch


def _default_cell(variant: str) -> str:
    return variant.split("-", 1)[1].lower() if variant.startswith("CMDRNN-") else "vanilla"


@dataclass
class ModelSpec:
    variant: str = "CMDRNN-GRU"
    cell: Optional[str] = None
    filters: int = 100
    kernel_width: int = 11
    conv_stride: int = 2
    pool_window: int = 2
    pool_stride: int = 2
    hidden: int = 200
    memory: int = 5
    mixtures: int = 30
    mdn_hidden: int = 200
    rnn_activation: str = "sigmoid"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.cell is None:
            self.cell = _default_cell(self.variant)
        if self.cell != _default_cell(self.variant):
            raise ConfigError(f"variant {self.variant} uses the {_default_cell(self.variant)} cell, not {self.cell!r}")
        positive = ("filters", "kernel_width", "conv_stride", "pool_window", "pool_stride",
                    "hidden", "memory", "mixtures", "mdn_hidden")
        bad = [k for k in positive if getattr(self, k) < 1]
        if bad:
            raise ConfigError(f"model fields must be >= 1: {', '.join(bad)}")
        try:
            T.activation(self.rnn_activation)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def has_cnn(self) -> bool:
        return self.variant == "CNN+RNN" or self.variant.startswith("CMDRNN")

    @property
    def has_mdn(self) -> bool:
        return self.variant == "RNN+MDN" or self.variant.startswith("CMDRNN")

    @property
    def output_size(self) -> int:
        return mdn.PARAMS_PER_COMPONENT * self.mixtures if self.has_mdn else 2

    def feature_size(self, input_dim: int) -> int:
        """Width of the per-scan vector fed to the recurrent cell."""
        if not self.has_cnn:
            return input_dim
        n = L.conv_output_length(input_dim, self.kernel_width, self.conv_stride)
        n = L.conv_output_length(n, self.pool_window, self.pool_stride)
        return self.filters * n

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class Model:
    """A built variant: parameters plus the target standardization."""

    def __init__(self, spec: ModelSpec, input_dim: int, rng: np.random.Generator):
        self.spec = spec
        self.input_dim = input_dim
        self.conv = None
        if spec.has_cnn:
            if input_dim < spec.kernel_width:
                raise ConfigError(f"input dimension {input_dim} is smaller than the kernel width {spec.kernel_width}")
            self.conv = L.Conv1dParams.init(rng, 1, spec.filters, spec.kernel_width, spec.conv_stride)
        n_features = spec.feature_size(input_dim)
        if spec.cell == "vanilla":
            self.cell = L.RecurrentCellParams.init(rng, n_features, spec.hidden, spec.rnn_activation)
        elif spec.cell == "lstm":
            self.cell = L.LSTMParams.init(rng, n_features, spec.hidden)
        else:
            self.cell = L.GRUParams.init(rng, n_features, spec.hidden)
        self.mdn_hidden = None
        head_in = spec.hidden
        if spec.has_mdn:
            self.mdn_hidden = L.DenseParams.init(rng, spec.hidden, spec.mdn_hidden, "leaky_relu", "mdn_hidden")
            head_in = spec.mdn_hidden
        self.head = L.DenseParams.init(rng, head_in, spec.output_size, "linear", "head")
        self.target_mean = np.zeros(2)
        self.target_std = np.ones(2)
        self.scaler_fitted = False

    def parameters(self) -> dict[str, Node]:
        params: dict[str, Node] = {}
        if self.conv is not None:
            params.update({p.name: p for p in (self.conv.kernels, self.conv.bias)})
        params.update(L.cell_parameters(self.cell))
        for dense_p in (self.mdn_hidden, self.head):
            if dense_p is not None:
                params.update({p.name: p for p in (dense_p.weight, dense_p.bias)})
        return params

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.parameters().values())

    def fit_target_scaler(self, targets: np.ndarray) -> None:
        self.target_mean = targets.mean(axis=0)
        std = targets.std(axis=0)
        self.target_std = np.where(std > 0, std, 1.0)
        self.scaler_fitted = True

    def forward(self, inputs: np.ndarray) -> Node:
        """Raw network output for windows [B, L, D]: [B, 5K] with MDN, else [B, 2]."""
        inputs = np.asarray(inputs, dtype=float)
        if inputs.ndim != 3 or inputs.shape[2] != self.input_dim:
            raise ShapeError(f"expected windows [B, L, {self.input_dim}], got {inputs.shape}")
        batch, steps, dim = inputs.shape
        frames = T.constant(inputs)
        if self.conv is not None:
            h = T.reshape(frames, (batch * steps, 1, dim))
            h = L.conv1d(h, self.conv, "sigmoid")
            # the pool's relu also covers the flatten row; relu is idempotent
            h = L.maxpool1d(h, self.spec.pool_window, self.spec.pool_stride, "relu")
            h = L.flatten(h, batched=True)
            frames = T.reshape(h, (batch, steps, h.shape[1]))
        h = L.unroll(self.cell, frames)
        if self.mdn_hidden is not None:
            h = L.dense(h, self.mdn_hidden)
        return L.dense(h, self.head)

    def mixture(self, inputs: np.ndarray) -> mdn.MixtureParams:
        """Mixture over standardized targets."""
        return mdn.split_theta(self.forward(inputs))

    def standardize(self, targets: np.ndarray) -> np.ndarray:
        return (targets - self.target_mean) / self.target_std

    def predict(self, inputs: np.ndarray, mode: str = "mle", rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Point predictions [B, 2] in original coordinates."""
        if self.spec.has_mdn:
            pred = mdn.predict_mle(self.mixture(inputs), mode, rng)
        else:
            pred = self.forward(inputs).value
        return pred * self.target_std + self.target_mean

    def predictive_mixture(self, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(pi, mu, sigma) in original coordinates."""
        pi, mu, sigma = self.mixture(inputs).numpy()
        return pi, mu * self.target_std + self.target_mean, sigma * self.target_std


def build(spec: ModelSpec, input_dim: int, seed: int = 0) -> Model:
    return Model(spec, input_dim, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def mse_loss(pred, target) -> Node:
    pred, target = T.lift(pred), T.lift(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    return T.mean(T.square(pred - target))


def batch_loss(model: Model, inputs: np.ndarray, targets: np.ndarray) -> Node:
    """Mean per-sample loss on standardized targets: mixture NLL or MSE."""
    y = T.constant(model.standardize(targets))
    if model.spec.has_mdn:
        return T.mean(mdn.nll(model.mixture(inputs), y))
    return mse_loss(model.forward(inputs), y)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class RMSPropState:
    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    v: dict = field(default_factory=dict)


def rmsprop_step(params: dict[str, Node], grads: dict[str, np.ndarray], state: RMSPropState) -> None:
    """``v <- rho v + (1 - rho) g^2``; ``theta <- theta - lr g / (sqrt(v) + eps)``."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        g2 = g * g
        g2 *= 1.0 - state.rho
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = g2
        else:
            v *= state.rho
            v += g2
        step = np.sqrt(v)
        step += state.eps
        np.divide(g, step, out=step)
        step *= state.lr
        # rebind rather than mutate: arrays already handed out stay intact
        p.value = p.value - step


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    loss: Optional[str] = None  # "mse" or "mdn-nll"; inferred from the variant when unset
    learning_rate: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    clip: float = 5.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.clip <= 0:
            raise ConfigError("clip threshold must be positive")
        if self.learning_rate < 0 or not 0 <= self.rho < 1 or self.eps <= 0:
            raise ConfigError("need learning_rate >= 0, 0 <= rho < 1, eps > 0")
        if self.loss not in (None, "mse", "mdn-nll"):
            raise ConfigError(f"unknown loss {self.loss!r}")


@dataclass
class TrainResult:
    model: Model
    losses: list[float]


def train(
    model: Model,
    samples: WindowSet,
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Mini-batch RMSProp on shuffled windows; returns the per-epoch mean loss.

    The target scaler is fitted on ``samples`` unless the model already
    carries one (``model.scaler_fitted``).
    """
    if len(samples) == 0:
        raise ValueError("cannot train on an empty dataset")
    if samples.memory_length != model.spec.memory:
        raise ShapeError(f"windows have length {samples.memory_length}, model expects {model.spec.memory}")
    expected_loss = "mdn-nll" if model.spec.has_mdn else "mse"
    if cfg.loss not in (None, expected_loss):
        raise ConfigError(f"variant {model.spec.variant} trains with {expected_loss}, not {cfg.loss}")
    if not model.scaler_fitted:
        model.fit_target_scaler(samples.targets)

    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = RMSPropState(cfg.learning_rate, cfg.rho, cfg.eps)
    n = len(samples)
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            rows = order[start:start + cfg.batch_size]
            try:
                loss = batch_loss(model, samples.inputs[rows], samples.targets[rows])
                grads = T.backward(loss, params.values())
                grads, _ = clip_by_global_norm({k: grads[p] for k, p in params.items()}, cfg.clip)
                rmsprop_step(params, grads, state)
            except NonFiniteError as exc:
                raise TrainingAborted(str(exc), epoch, b) from exc
            total += float(loss.value) * len(rows)
        losses.append(total / n)
        log.debug("epoch %d loss %.6f", epoch, losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    return TrainResult(model, losses)


def predict_batched(model: Model, inputs: np.ndarray, mode: str = "mle", seed: int = 0, batch_size: int = 256) -> np.ndarray:
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    rng = np.random.default_rng(seed)
    chunks = [model.predict(inputs[i:i + batch_size], mode, rng) for i in range(0, len(inputs), batch_size)]
    return np.concatenate(chunks, axis=0)


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.sum((pred - target) ** 2, axis=-1))))


def evaluate_rmse(model: Model, samples: WindowSet, mode: str = "mle", seed: int = 0) -> float:
    """Root mean squared Euclidean error; non-MDN models ignore ``mode``."""
    if len(samples) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    if not model.spec.has_mdn:
        mode = "mle"
    return rmse(predict_batched(model, samples.inputs, mode, seed), samples.targets)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, path, extra: Optional[dict] = None) -> None:
    """npz container: a JSON header plus every parameter array under ``param/<name>``."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "spec": model.spec.to_dict(),
        "input_dim": model.input_dim,
        "extra": extra or {},
    }
    arrays = {f"param/{name}": p.value for name, p in model.parameters().items()}
    arrays["target_mean"] = model.target_mean
    arrays["target_std"] = model.target_std
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[Model, dict]:
    with np.load(Path(path), allow_pickle=False) as archive:
        meta = json.loads(archive["meta"].tobytes().decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        model = build(ModelSpec(**meta["spec"]), int(meta["input_dim"]))
        params = model.parameters()
        stored = {k[len("param/"):] for k in archive.files if k.startswith("param/")}
        if stored != set(params):
            raise ConfigError(f"{path}: parameter set does not match the stored model spec")
        for name, p in params.items():
            value = archive[f"param/{name}"]
            if value.shape != p.shape:
                raise ConfigError(f"{path}: {name} has shape {value.shape}, spec implies {p.shape}")
            p.value = np.array(value, dtype=np.float64)
        model.target_mean = np.array(archive["target_mean"])
        model.target_std = np.array(archive["target_std"])
        model.scaler_fitted = True
    return model, meta["extra"]
