"""Fault-diagnosis models: MLP, GRU, TCN classifiers plus a linear autoencoder.

A classifier maps a standardized window [k, d] to class probabilities [m]
by minimizing mean loss over the training windows (cross-entropy unless a
defense swaps in its own loss). Training uses mini-batch Adam; everything is
seeded, so a config reproduces its parameters bit for bit.

Desk-scale defaults keep the whole suite fast. The full-scale preset mirrors
a 52-sensor / 29-class / window-32 industrial setup; its hidden sizes were
chosen to land near publicly reported parameter counts and are documented,
not asserted.

A trained model is immutable in practice (nothing mutates parameters outside
``train``) and safe for concurrent read-only prediction.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import WindowedDataset

ARCHS = ("MLP", "GRU", "TCN", "Autoencoder")
TCN_KERNEL_WIDTH = 3
PREDICT_CHUNK = 1024
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Training aborted (typically a non-finite loss), names epoch and batch."""


@dataclass
class ModelConfig:
    arch: str
    window: int
    sensors: int
    classes: int
    hidden: tuple[int, ...] = (64,)
    epochs: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture '{self.arch}', expected one of {ARCHS}")
        if self.window < 1 or self.sensors < 1:
            raise ValueError(f"window and sensors must be >= 1, got {self.window}, {self.sensors}")
        if self.classes < 2 and self.arch != "Autoencoder":
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden sizes must be positive, got {self.hidden}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")


def desk_config(arch: str, seed: int = 0, **overrides) -> ModelConfig:
    """Small configuration used throughout the test suite (5 classes, 8 sensors)."""
    hidden = {"MLP": (64,), "GRU": (32,), "TCN": (32, 32, 32), "Autoencoder": (64,)}[arch]
    epochs = {"MLP": 12, "GRU": 10, "TCN": 10, "Autoencoder": 40}[arch]
    lr = {"MLP": 1e-3, "GRU": 3e-3, "TCN": 3e-3, "Autoencoder": 1e-2}[arch]
    base = dict(arch=arch, window=16, sensors=8, classes=5, hidden=hidden,
                epochs=epochs, learning_rate=lr, batch_size=64, seed=seed)
    base.update(overrides)
    return ModelConfig(**base)


def full_scale_config(arch: str, seed: int = 0, **overrides) -> ModelConfig:
    """Window-32 / 52-sensor / 29-class preset; hidden sizes approximate
    published parameter counts for this kind of benchmark (MLP ~3.45M,
    GRU ~0.20M, TCN ~0.15M)."""
    hidden = {"MLP": (2038,), "GRU": (231,), "TCN": (105, 105, 105, 105, 105),
              "Autoencoder": (832,)}[arch]
    epochs = {"MLP": 20, "GRU": 5, "TCN": 10, "Autoencoder": 30}[arch]
    base = dict(arch=arch, window=32, sensors=52, classes=29, hidden=hidden,
                epochs=epochs, learning_rate=1e-3, batch_size=64, seed=seed)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class TrainReport:
    epoch_losses: list[float]
    final_accuracy: float
    wall_time_s: float = field(compare=False, default=0.0)


# ---------------------------------------------------------------------------
# parameter init


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# architectures


class _MLPNet:
    """flatten(k*d) -> linear layers with ReLU in between -> logits."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        sizes = [cfg.window * cfg.sensors, *cfg.hidden, cfg.classes]
        self.params: dict[str, Tensor] = {}
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"lin{i}_w"] = Tensor(_uniform(rng, n_in, (n_in, n_out)), requires_grad=True)
            self.params[f"lin{i}_b"] = Tensor(_uniform(rng, n_in, (n_out,)), requires_grad=True)
        self.n_layers = len(sizes) - 1

    def logits(self, x: Tensor) -> Tensor:
        b = x.data.shape[0]
        h = ad.reshape(x, (b, self.cfg.window * self.cfg.sensors))
        for i in range(self.n_layers):
            h = ad.add_bias(ad.matmul(h, self.params[f"lin{i}_w"]), self.params[f"lin{i}_b"])
            if i < self.n_layers - 1:
                h = ad.relu(h)
        return h


class _GRUNet:
    """Gated recurrent units over the window; the head reads the final state."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, hsz = cfg.sensors, cfg.hidden[0]
        self.hidden_size = hsz
        self.params = {
            "wx": Tensor(_uniform(rng, d, (d, 3 * hsz)), requires_grad=True),
            "wh": Tensor(_uniform(rng, hsz, (hsz, 3 * hsz)), requires_grad=True),
            "bx": Tensor(_uniform(rng, d, (3 * hsz,)), requires_grad=True),
            "bh": Tensor(_uniform(rng, hsz, (3 * hsz,)), requires_grad=True),
            "head_w": Tensor(_uniform(rng, hsz, (hsz, cfg.classes)), requires_grad=True),
            "head_b": Tensor(_uniform(rng, hsz, (cfg.classes,)), requires_grad=True),
        }

    def logits(self, x: Tensor) -> Tensor:
        b = x.data.shape[0]
        hsz = self.hidden_size
        h = Tensor(np.zeros((b, hsz)))
        ones = Tensor(np.ones((b, hsz)))
        for t in range(self.cfg.window):
            xt = x[:, t, :]
            gx = ad.add_bias(ad.matmul(xt, self.params["wx"]), self.params["bx"])
            gh = ad.add_bias(ad.matmul(h, self.params["wh"]), self.params["bh"])
            r = ad.sigmoid(gx[:, 0:hsz] + gh[:, 0:hsz])
            z = ad.sigmoid(gx[:, hsz:2 * hsz] + gh[:, hsz:2 * hsz])
            n = ad.tanh(gx[:, 2 * hsz:] + ad.mul(r, gh[:, 2 * hsz:]))
            h = ad.mul(ones - z, n) + ad.mul(z, h)
        return ad.add_bias(ad.matmul(h, self.params["head_w"]), self.params["head_b"])


class _TCNNet:
    """Stacked causal dilated convolutions (dilations 1, 2, 4, ...) + linear head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        chans = [cfg.sensors, *cfg.hidden]
        for i, (c_in, c_out) in enumerate(zip(chans[:-1], chans[1:])):
            fan = c_in * TCN_KERNEL_WIDTH
            self.params[f"conv{i}_k"] = Tensor(
                _uniform(rng, fan, (c_out, c_in, TCN_KERNEL_WIDTH)), requires_grad=True)
            self.params[f"conv{i}_b"] = Tensor(_uniform(rng, fan, (c_out,)), requires_grad=True)
        self.params["head_w"] = Tensor(_uniform(rng, chans[-1], (chans[-1], cfg.classes)), requires_grad=True)
        self.params["head_b"] = Tensor(_uniform(rng, chans[-1], (cfg.classes,)), requires_grad=True)
        self.n_levels = len(cfg.hidden)

    def logits(self, x: Tensor) -> Tensor:
        h = ad.transpose(x, (0, 2, 1))  # [batch, sensors, time]
        for i in range(self.n_levels):
            h = ad.conv1d_causal(h, self.params[f"conv{i}_k"], dilation=2 ** i)
            h = ad.add_bias(h, self.params[f"conv{i}_b"], axis=1)
            h = ad.relu(h)
        last = h[:, :, self.cfg.window - 1]
        return ad.add_bias(ad.matmul(last, self.params["head_w"]), self.params["head_b"])


class _AENet:
    """Linear encoder/decoder over the flattened window; bottleneck is the
    last entry of ``hidden``."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        flat = cfg.window * cfg.sensors
        sizes = [flat, *cfg.hidden, *reversed(cfg.hidden[:-1]), flat]
        self.params: dict[str, Tensor] = {}
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"lin{i}_w"] = Tensor(_uniform(rng, n_in, (n_in, n_out)), requires_grad=True)
            self.params[f"lin{i}_b"] = Tensor(_uniform(rng, n_in, (n_out,)), requires_grad=True)
        self.n_layers = len(sizes) - 1

    def reconstruct(self, x: Tensor) -> Tensor:
        b = x.data.shape[0]
        h = ad.reshape(x, (b, self.cfg.window * self.cfg.sensors))
        for i in range(self.n_layers):
            h = ad.add_bias(ad.matmul(h, self.params[f"lin{i}_w"]), self.params[f"lin{i}_b"])
        return ad.reshape(h, (b, self.cfg.window, self.cfg.sensors))


# ---------------------------------------------------------------------------
# public model wrappers


class Classifier:
    """Trained (or trainable) differentiable window classifier."""

    def __init__(self, config: ModelConfig, net, temperature: float = 1.0):
        self.config = config
        self.net = net
        self.temperature = float(temperature)

    @property
    def params(self) -> dict[str, Tensor]:
        return self.net.params

    @property
    def classes(self) -> int:
        return self.config.classes

    def logits_graph(self, x: Tensor) -> Tensor:
        return self.net.logits(x)

    def probs_graph(self, x: Tensor, temperature: float | None = None) -> Tensor:
        t = self.temperature if temperature is None else temperature
        return ad.softmax_t(self.net.logits(x), t)

    def predict_proba(self, windows: np.ndarray) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 3 or windows.shape[1:] != (self.config.window, self.config.sensors):
            raise ValueError(
                f"expected windows [n, {self.config.window}, {self.config.sensors}], got {windows.shape}")
        chunks = []
        for lo in range(0, len(windows), PREDICT_CHUNK):
            chunk = Tensor(windows[lo:lo + PREDICT_CHUNK])
            chunks.append(self.probs_graph(chunk).data)
        return np.concatenate(chunks, axis=0)

    def predict(self, window: np.ndarray) -> np.ndarray:
        window = np.asarray(window, dtype=np.float64)
        if window.shape != (self.config.window, self.config.sensors):
            raise ValueError(
                f"expected window [{self.config.window}, {self.config.sensors}], got {window.shape}")
        return self.predict_proba(window[None])[0]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(asdict(self.config), sort_keys=True).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()


class AutoencoderModel:
    """Window-to-window reconstructor used by the purification defense."""

    def __init__(self, config: ModelConfig, net: _AENet):
        self.config = config
        self.net = net

    @property
    def params(self) -> dict[str, Tensor]:
        return self.net.params

    def reconstruct_graph(self, x: Tensor) -> Tensor:
        return self.net.reconstruct(x)

    def reconstruct(self, windows: np.ndarray) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.float64)
        out = []
        for lo in range(0, len(windows), PREDICT_CHUNK):
            out.append(self.net.reconstruct(Tensor(windows[lo:lo + PREDICT_CHUNK])).data)
        return np.concatenate(out, axis=0)

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())


def build_model(config: ModelConfig):
    """Deterministically initialize a model from its config (seeded)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0x5EED]))
    if config.arch == "MLP":
        return Classifier(config, _MLPNet(config, rng))
    if config.arch == "GRU":
        return Classifier(config, _GRUNet(config, rng))
    if config.arch == "TCN":
        return Classifier(config, _TCNNet(config, rng))
    if config.arch == "Autoencoder":
        return AutoencoderModel(config, _AENet(config, rng))
    raise ValueError(f"unknown architecture '{config.arch}'")


# ---------------------------------------------------------------------------
# optimizer + training


class Adam:
    """Mini-batch adaptive first-order optimizer (the usual moment estimates)."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * (g * g)
            mhat = self.m[name] / (1 - self.b1 ** self.t)
            vhat = self.v[name] / (1 - self.b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def default_loss(model: Classifier, x: Tensor, y: np.ndarray) -> Tensor:
    return ad.reduce_mean(ad.cross_entropy(model.probs_graph(x), y))


def train(model: Classifier, data: WindowedDataset, loss_fn=None,
          targets: np.ndarray | None = None) -> TrainReport:
    """Mini-batch training loop; ``loss_fn(model, x, y) -> scalar`` is the
    extension point the defenses plug their penalties into.

    ``targets`` optionally replaces the integer labels handed to the loss
    with per-sample rows (e.g. soft label distributions); accuracy is still
    measured against the dataset labels."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if int(data.labels.max()) >= model.config.classes:
        raise ValueError(f"label {int(data.labels.max())} out of range for {model.config.classes} classes")
    if targets is not None and len(targets) != len(data):
        raise ValueError("targets misaligned with dataset")
    loss_fn = loss_fn or default_loss
    cfg = model.config
    opt = Adam(model.params, cfg.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0xBA7C4]))

    start = time.perf_counter()
    epoch_losses = []
    n = len(data)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for bstart in range(0, n, cfg.batch_size):
            idx = perm[bstart:bstart + cfg.batch_size]
            xb = Tensor(data.windows[idx])
            yb = data.labels[idx] if targets is None else targets[idx]
            for p in model.params.values():
                p.grad = None
            try:
                loss = loss_fn(model, xb, yb)
                ad.backward(loss)
            except (ValueError, RuntimeError) as exc:
                raise TrainingError(
                    f"training failed at epoch {epoch} batch {bstart // cfg.batch_size}: {exc}") from exc
            opt.step()
            total += float(loss.data) * len(idx)
        epoch_losses.append(total / n)
    final_acc = accuracy(model, data)
    return TrainReport(epoch_losses, final_acc, time.perf_counter() - start)


def accuracy(model, data: WindowedDataset) -> float:
    """Fraction of windows whose argmax prediction matches the label."""
    if len(data) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    probs = model.predict_proba(data.windows)
    return float(np.mean(np.argmax(probs, axis=1) == data.labels))


def train_autoencoder(data: WindowedDataset, noise_scale: float,
                      config: ModelConfig) -> tuple[AutoencoderModel, TrainReport]:
    """Fit the denoising autoencoder: minimize the (per-element) L1 distance
    between reconstruct(x + noise) and the clean x.

    ``final_accuracy`` on the returned report holds the training-set
    per-element L1 reconstruction error (there is no accuracy for an
    autoencoder)."""
    if noise_scale < 0:
        raise ValueError(f"noise scale must be >= 0, got {noise_scale}")
    if config.arch != "Autoencoder":
        raise ValueError(f"train_autoencoder needs an Autoencoder config, got {config.arch}")
    model = build_model(config)
    opt = Adam(model.params, config.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0xDE01]))

    start = time.perf_counter()
    n = len(data)
    epoch_losses = []
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for bstart in range(0, n, config.batch_size):
            idx = perm[bstart:bstart + config.batch_size]
            clean = data.windows[idx]
            noisy = clean + rng.normal(0.0, noise_scale, size=clean.shape) if noise_scale > 0 else clean
            for p in model.params.values():
                p.grad = None
            try:
                recon = model.reconstruct_graph(Tensor(noisy))
                loss = ad.reduce_mean(ad.abs_(recon - Tensor(clean)))
                ad.backward(loss)
            except ValueError as exc:
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {bstart // config.batch_size}: {exc}") from exc
            opt.step()
            total += float(loss.data) * len(idx)
        epoch_losses.append(total / n)
    recon = model.reconstruct(data.windows)
    l1 = float(np.mean(np.abs(recon - data.windows)))
    return model, TrainReport(epoch_losses, l1, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# checkpoints (flat JSON, bit-exact round trip via float repr)


def _params_to_json(params: dict[str, Tensor]) -> dict:
    return {name: {"shape": list(p.data.shape), "values": p.data.reshape(-1).tolist()}
            for name, p in params.items()}


def _params_from_json(blob: dict) -> dict[str, np.ndarray]:
    return {name: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in blob.items()}


def save_model(model, path) -> None:
    kind = "autoencoder" if isinstance(model, AutoencoderModel) else "classifier"
    doc = {
        "format": "fddbench-model",
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": asdict(model.config),
        "temperature": getattr(model, "temperature", 1.0),
        "params": _params_to_json(model.params),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_model(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "fddbench-model" or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} model checkpoint")
    cfg = ModelConfig(**{**doc["config"], "hidden": tuple(doc["config"]["hidden"])})
    model = build_model(cfg)
    loaded = _params_from_json(doc["params"])
    if set(loaded) != set(model.params):
        raise ValueError(f"{path}: parameter names do not match architecture")
    for name, arr in loaded.items():
        if arr.shape != model.params[name].data.shape:
            raise ValueError(f"{path}: shape mismatch for '{name}'")
        model.params[name].data[...] = arr
    if doc["kind"] == "classifier":
        model.temperature = float(doc["temperature"])
    return model
