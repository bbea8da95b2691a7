"""Optimisation loop: initialisation, Adam with step decay, checkpoints.

Defaults follow the training protocol the model was tuned with: Adam at
1e-3 decayed by 0.1 every 3 epochs, mini-batches of 100, L2 regularisation
1e-5, Gaussian(0, 0.1^2) initialisation everywhere except the readout GRU
weight matrices, which are (semi-)orthogonal.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict

import numpy as np

from . import model as M
from .errors import ConfigError, NumericError
from .graphs import GlobalGraph, SamplingConfig, sample_bcs
from .ingest import Example
from .model import GraphBatchView, ModelConfig, ModelParams
from .tensor import Tape, Tensor, load_tensor_archive, save_tensor_archive


@dataclass
class TrainConfig:
    lr: float = 1e-3
    decay_factor: float = 0.1
    decay_every: int = 3          # epochs between decays in "step" mode
    schedule: str = "step"        # "step" or "linear" ramp down to decay_factor * lr
    batch_size: int = 100
    l2: float = 1e-5
    epochs: int = 10
    seed: int = 0
    init_std: float = 0.1

    def validate(self) -> "TrainConfig":
        if min(self.lr, self.decay_factor, self.batch_size, self.l2, self.epochs,
               self.init_std) <= 0:
            raise ConfigError("all training values must be positive")
        if self.decay_every < 1:
            raise ConfigError("decay_every must be >= 1")
        if self.schedule not in ("step", "linear"):
            raise ConfigError(f"schedule must be step|linear, got {self.schedule!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def _orthogonal(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    """QR of a Gaussian draw with signs fixed by R's diagonal."""
    a = rng.standard_normal(shape)
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def init_params(config: ModelConfig, vocab_size: int, seed: int,
                init_std: float = 0.1) -> ModelParams:
    """Draw fresh parameters; deterministic for a given seed.

    Everything is Gaussian(0, init_std^2) except the readout GRU weight
    matrices, which are orthogonal (orthonormal columns when rectangular).
    """
    config.validate()
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in M.param_shapes(config, vocab_size):
        is_gru_matrix = name.startswith("readout.gru.") and len(shape) == 2
        if is_gru_matrix:
            data = _orthogonal(rng, shape)
        else:
            data = rng.standard_normal(shape) * init_std
        tensors[name] = Tensor(data, requires_grad=True)
    return M.params_from_tensors(config, vocab_size, tensors)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Learning rate for a 0-based epoch index."""
    if config.schedule == "linear":
        span = max(1, config.epochs - 1)
        frac = min(1.0, epoch / span)
        return config.lr * (1.0 - (1.0 - config.decay_factor) * frac)
    return config.lr * config.decay_factor ** (epoch // config.decay_every)


class Adam:
    """Bias-corrected Adam; L2 enters as weight decay added to the gradients."""

    def __init__(self, named_params, l2: float = 0.0, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.named = list(named_params)
        self.l2 = l2
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named}

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.named:
            grad = p.grad
            if not np.isfinite(grad).all():
                raise NumericError(f"non-finite gradient for tensor {name!r}")
            if self.l2:
                grad = grad + self.l2 * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_tensors(self):
        for name, _ in self.named:
            yield f"adam.m.{name}", self.m[name]
        for name, _ in self.named:
            yield f"adam.v.{name}", self.v[name]

    def load_state(self, arrays: dict, step_count: int) -> None:
        for name, _ in self.named:
            self.m[name][...] = arrays[f"adam.m.{name}"]
            self.v[name][...] = arrays[f"adam.v.{name}"]
        self.step_count = step_count


def adam_step(params: ModelParams, state: Adam, lr: float) -> None:
    """Apply one update from the gradients currently held by the parameters."""
    state.step(lr)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _bcs_seed(seed: int, epoch: int, example_index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, example_index]).generate_state(1)[0])


def train_epoch(
    examples: list[Example],
    global_graph: GlobalGraph,
    params: ModelParams,
    model_config: ModelConfig,
    train_config: TrainConfig,
    sampling: SamplingConfig,
    adam: Adam,
    epoch: int,
) -> dict:
    """One pass of shuffled mini-batches; returns mean loss and timing.

    Subgraphs are re-sampled every epoch from seeds derived from
    (run seed, epoch, example index), so runs are reproducible yet each
    epoch sees fresh neighbour draws.
    """
    start = time.perf_counter()
    rng = np.random.default_rng([train_config.seed, 7043, epoch])
    order = rng.permutation(len(examples))
    lr = lr_schedule(epoch, train_config)
    total_loss = 0.0
    for batch_id, lo in enumerate(range(0, len(order), train_config.batch_size)):
        batch_idx = order[lo:lo + train_config.batch_size]
        graphs = [
            sample_bcs(
                global_graph,
                examples[i].items,
                sampling.n_hops,
                sampling.sample_cap,
                rng_seed=_bcs_seed(train_config.seed, epoch, int(i)),
            )
            for i in batch_idx
        ]
        view = GraphBatchView.from_graphs(graphs)
        labels = np.array([examples[i].label for i in batch_idx], dtype=np.int64)
        params.zero_grads()
        with Tape() as tape:
            logits = M.forward_logits(view, params, model_config)
            batch_loss = M.loss(logits, labels)
        if not np.isfinite(batch_loss.data):
            raise NumericError(f"non-finite loss in batch {batch_id} of epoch {epoch}")
        tape.backward(batch_loss)
        adam.step(lr)
        total_loss += batch_loss.item()
    return {
        "epoch": epoch,
        "mean_loss": total_loss / max(1, len(examples)),
        "lr": lr,
        "wall_seconds": time.perf_counter() - start,
    }


def train_model(
    examples: list[Example],
    global_graph: GlobalGraph,
    vocab_size: int,
    model_config: ModelConfig,
    train_config: TrainConfig,
    sampling: SamplingConfig,
    checkpoint_dir=None,
    log=None,
) -> tuple[ModelParams, Adam, list[dict]]:
    """Full training run; optionally checkpoints after every epoch."""
    model_config.validate()
    train_config.validate()
    params = init_params(model_config, vocab_size, train_config.seed,
                         train_config.init_std)
    adam = Adam(params.named_tensors(), l2=train_config.l2)
    history = []
    for epoch in range(train_config.epochs):
        metrics = train_epoch(
            examples, global_graph, params, model_config, train_config,
            sampling, adam, epoch,
        )
        history.append(metrics)
        if log is not None:
            log(metrics)
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir, params, model_config,
                            adam=adam, epoch=epoch, train_config=train_config,
                            sampling=sampling)
    return params, adam, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(directory, params: ModelParams, model_config: ModelConfig,
                    adam: Adam | None = None, epoch: int | None = None,
                    train_config: TrainConfig | None = None,
                    sampling: SamplingConfig | None = None) -> None:
    named = [(name, t.data) for name, t in params.named_tensors()]
    extra = {
        "model_config": model_config.to_dict(),
        "vocab_size": params.vocab_size,
    }
    if train_config is not None:
        extra["train_config"] = train_config.to_dict()
    if sampling is not None:
        extra["sampling"] = asdict(sampling)
    if epoch is not None:
        extra["epoch"] = epoch
    if adam is not None:
        named.extend(adam.state_tensors())
        extra["adam_step"] = adam.step_count
    save_tensor_archive(directory, named, extra=extra)


def load_checkpoint(directory):
    """Returns (params, model_config, manifest, optimizer_arrays or None)."""
    arrays, manifest = load_tensor_archive(directory)
    config = ModelConfig.from_dict(manifest["model_config"])
    vocab_size = int(manifest["vocab_size"])
    tensors = {
        name: Tensor(arr, requires_grad=True)
        for name, arr in arrays.items()
        if not name.startswith("adam.")
    }
    params = M.params_from_tensors(config, vocab_size, tensors)
    adam_arrays = {k: v for k, v in arrays.items() if k.startswith("adam.")}
    return params, config, manifest, (adam_arrays or None)
