"""Defense methods: harden a classifier while keeping its predict contract.

Five strategies plus their combination:

- adversarial training: add attacked copies of every batch to the loss,
  regenerated against the current parameters;
- input purification: a denoising autoencoder in front of the classifier,
  with the classifier retrained on reconstructed data;
- quantization: snap inputs to a uniform per-sensor grid (2^n levels) and
  retrain on the quantized view;
- gradient regularization: penalize output movement along the normalized
  input-gradient direction;
- distillation: teacher and student trained at a high softmax temperature,
  student served at temperature 1, which collapses its input gradients;
- combination: adversarial samples quantized before training, with the
  quantizer kept at inference time.

Every protected model couples its input-transform chain to the trained
classifier; the chain fingerprint asserts that inference applies exactly
what training saw. With the relevant coefficient at zero, adversarial
training and regularization reduce bit-exactly to plain training.
"""

from __future__ import annotations

import hashlib
import json
import re
import warnings
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import attacks as atk
from . import models as md
from .autodiff import Tensor
from .data import WindowedDataset

DEFENSE_KINDS = ("AdvTraining", "Autoencoder", "Quantization",
                 "Regularization", "Distillation", "Combination")
_EPS_RANGE_RE = re.compile(r"^range\(\s*([0-9.eE+-]+)\s*,\s*([0-9.eE+-]+)\s*\)$")


@dataclass
class ComboSpec:
    adv: atk.AttackSpec
    quant_bits: int = 5

    def to_json(self) -> dict:
        return {"adv": self.adv.to_json(), "quant_bits": self.quant_bits}

    @classmethod
    def from_json(cls, blob: dict) -> "ComboSpec":
        return cls(atk.AttackSpec.from_json(blob["adv"]), int(blob["quant_bits"]))


@dataclass
class DefenseSpec:
    kind: str
    adv_attack: atk.AttackSpec | None = None
    adv_lambda: float = 1.0
    adv_eps_mode: str = "fixed"  # "fixed" or "range(lo,hi)"
    ae_noise: float = 0.1
    quant_bits: int = 5
    reg_h: float = 0.001
    reg_lambda: float = 1.0
    distill_T: float = 100.0
    combo: ComboSpec | None = None

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense kind '{self.kind}', expected one of {DEFENSE_KINDS}")
        if not 1 <= self.quant_bits <= 16:
            raise ValueError(f"quant_bits must be in [1, 16], got {self.quant_bits}")
        if not self.distill_T > 0:
            raise ValueError(f"distill_T must be positive, got {self.distill_T}")
        if self.adv_lambda < 0 or self.reg_lambda < 0:
            raise ValueError("defense coefficients must be >= 0")
        if self.ae_noise < 0:
            raise ValueError(f"ae_noise must be >= 0, got {self.ae_noise}")
        if not self.reg_h > 0:
            raise ValueError(f"reg_h must be positive, got {self.reg_h}")
        self.eps_range()  # validate the mode string eagerly

    def eps_range(self) -> tuple[float, float] | None:
        """None for fixed mode, (lo, hi) for range mode."""
        if self.adv_eps_mode == "fixed":
            return None
        m = _EPS_RANGE_RE.match(self.adv_eps_mode)
        if not m:
            raise ValueError(
                f"adv_eps_mode must be 'fixed' or 'range(lo,hi)', got '{self.adv_eps_mode}'")
        lo, hi = float(m.group(1)), float(m.group(2))
        if not 0 <= lo < hi:
            raise ValueError(f"bad epsilon range ({lo}, {hi})")
        return lo, hi

    def to_json(self) -> dict:
        blob = asdict(self)
        blob["adv_attack"] = self.adv_attack.to_json() if self.adv_attack else None
        blob["combo"] = self.combo.to_json() if self.combo else None
        return blob

    @classmethod
    def from_json(cls, blob: dict) -> "DefenseSpec":
        data = dict(blob)
        if data.get("adv_attack"):
            data["adv_attack"] = atk.AttackSpec.from_json(data["adv_attack"])
        if data.get("combo"):
            data["combo"] = ComboSpec.from_json(data["combo"])
        return cls(**data)


# ---------------------------------------------------------------------------
# quantizer


@dataclass
class QuantizerGrid:
    """Uniform per-feature grid with 2^bits bin centers over [lo, hi]."""

    lo: np.ndarray
    hi: np.ndarray
    bits: int

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if not 1 <= self.bits <= 16:
            raise ValueError(f"bits must be in [1, 16], got {self.bits}")
        if np.any(self.hi < self.lo):
            raise ValueError("grid hi < lo")

    @property
    def levels(self) -> int:
        return 2 ** self.bits

    def centers(self, feature: int) -> np.ndarray:
        width = (self.hi[feature] - self.lo[feature]) / self.levels
        if width == 0.0:
            return np.array([self.lo[feature]])
        return self.lo[feature] + (np.arange(self.levels) + 0.5) * width


def fit_quantizer(data: WindowedDataset, bits: int) -> QuantizerGrid:
    """Per-sensor lo/hi from the training windows (over samples and time)."""
    lo = data.windows.min(axis=(0, 1))
    hi = data.windows.max(axis=(0, 1))
    degenerate = hi <= lo
    if degenerate.any():
        warnings.warn(f"constant sensor(s) {np.flatnonzero(degenerate).tolist()}: single-level grid")
    return QuantizerGrid(lo, hi, bits)


def apply_quantizer(grid: QuantizerGrid, x: np.ndarray) -> np.ndarray:
    """Snap to nearest bin center; values outside [lo, hi] clamp to edge centers."""
    x = np.asarray(x, dtype=np.float64)
    levels = grid.levels
    width = (grid.hi - grid.lo) / levels
    degenerate = width == 0.0
    safe_width = np.where(degenerate, 1.0, width)
    idx = np.floor((x - grid.lo) / safe_width)
    idx = np.clip(idx, 0, levels - 1)
    out = grid.lo + (idx + 0.5) * safe_width
    return np.where(degenerate, grid.lo, out)


# ---------------------------------------------------------------------------
# transform chain


class QuantizeTransform:
    name = "quantize"

    def __init__(self, grid: QuantizerGrid):
        self.grid = grid

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        return apply_quantizer(self.grid, x)

    def apply_graph(self, x: Tensor) -> Tensor:
        # non-differentiable snap: attacks see it as identity (straight through)
        return ad.straight_through(x, self.apply_np, "quantize")

    def describe(self) -> dict:
        return {"type": "quantize", "bits": self.grid.bits,
                "lo": self.grid.lo.tolist(), "hi": self.grid.hi.tolist()}


class AutoencoderTransform:
    name = "autoencoder"

    def __init__(self, model: md.AutoencoderModel):
        self.model = model

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        return self.model.reconstruct(x)

    def apply_graph(self, x: Tensor) -> Tensor:
        return self.model.reconstruct_graph(x)

    def describe(self) -> dict:
        return {"type": "autoencoder",
                "config": asdict(self.model.config),
                "params": {k: v.data.reshape(-1).tolist() for k, v in sorted(self.model.params.items())}}


def chain_fingerprint(transforms) -> str:
    h = hashlib.sha256()
    for t in transforms:
        h.update(json.dumps(t.describe(), sort_keys=True).encode())
    return h.hexdigest()


class ProtectedClassifier:
    """A classifier behind its input-transform chain; same predict contract."""

    def __init__(self, inner: md.Classifier, transforms=(), spec: DefenseSpec | None = None):
        self.inner = inner
        self.transforms = list(transforms)
        self.spec = spec
        self.chain_hash = chain_fingerprint(self.transforms)

    @property
    def config(self) -> md.ModelConfig:
        return self.inner.config

    @property
    def classes(self) -> int:
        return self.inner.classes

    @property
    def temperature(self) -> float:
        return self.inner.temperature

    def verify_chain(self) -> bool:
        return chain_fingerprint(self.transforms) == self.chain_hash

    def _chain_graph(self, x: Tensor) -> Tensor:
        for t in self.transforms:
            x = t.apply_graph(x)
        return x

    def _chain_np(self, x: np.ndarray) -> np.ndarray:
        for t in self.transforms:
            x = t.apply_np(x)
        return x

    def logits_graph(self, x: Tensor) -> Tensor:
        return self.inner.logits_graph(self._chain_graph(x))

    def probs_graph(self, x: Tensor, temperature: float | None = None) -> Tensor:
        return self.inner.probs_graph(self._chain_graph(x), temperature)

    def predict_proba(self, windows: np.ndarray) -> np.ndarray:
        return self.inner.predict_proba(self._chain_np(np.asarray(windows, dtype=np.float64)))

    def predict(self, window: np.ndarray) -> np.ndarray:
        return self.predict_proba(np.asarray(window)[None])[0]

    def param_count(self) -> int:
        return self.inner.param_count()

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.inner.fingerprint().encode())
        h.update(self.chain_hash.encode())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# defense constructors


def _attack_current(model, x: np.ndarray, y: np.ndarray, spec: atk.AttackSpec,
                    eps, rng: np.random.Generator) -> np.ndarray:
    """One batch of adversarial samples against the current parameters."""
    if spec.kind == "FGSM":
        return atk._fgsm_batch(model, x, y, eps)
    if spec.kind == "PGD":
        alpha = spec.pgd_alpha if spec.pgd_alpha is not None else np.asarray(eps) / 4.0
        return atk._pgd_batch(model, x, y, eps, spec.pgd_steps, alpha)
    if spec.kind == "Noise":
        return atk._noise_batch(x, eps, rng)
    raise ValueError(f"attack kind '{spec.kind}' is not supported inside training loops")


def defend_adv_training(config: md.ModelConfig, data: WindowedDataset,
                        spec: DefenseSpec) -> ProtectedClassifier:
    """Train on equal parts clean and attacked data:
    loss = ce(clean) + lambda * ce(attacked), samples regenerated per batch."""
    if spec.adv_attack is None:
        raise ValueError("AdvTraining needs spec.adv_attack")
    model = md.build_model(config)
    eps_span = spec.eps_range()
    lam = float(spec.adv_lambda)
    noise_rng = np.random.default_rng(np.random.SeedSequence([int(spec.adv_attack.seed), 0xAD5]))
    eps_rng = np.random.default_rng(np.random.SeedSequence([int(spec.adv_attack.seed), 0xE75]))

    def loss_fn(m, x: Tensor, y):
        clean = md.default_loss(m, x, y)
        if lam == 0.0:
            return clean  # exact reduction to plain training
        if eps_span is None:
            eps = spec.adv_attack.epsilon
        else:
            eps = eps_rng.uniform(eps_span[0], eps_span[1], size=len(y))
        x_adv = _attack_current(m, np.asarray(x.data), y, spec.adv_attack, eps, noise_rng)
        return clean + ad.scale(md.default_loss(m, Tensor(x_adv), y), lam)

    md.train(model, data, loss_fn)
    return ProtectedClassifier(model, [], spec)


def defend_autoencoder(config: md.ModelConfig, data: WindowedDataset, spec: DefenseSpec,
                       train_on_reconstructions: bool = True,
                       ae_config: md.ModelConfig | None = None) -> ProtectedClassifier:
    """Denoising autoencoder in front of the classifier. By default the
    classifier is retrained on the autoencoder's outputs (the stronger
    variant); pass train_on_reconstructions=False to keep original data."""
    if ae_config is None:
        flat = config.window * config.sensors
        ae_config = md.ModelConfig("Autoencoder", config.window, config.sensors,
                                   config.classes, hidden=(max(flat // 2, 1),),
                                   epochs=40, learning_rate=1e-2,
                                   batch_size=config.batch_size, seed=config.seed)
    ae, report = md.train_autoencoder(data, spec.ae_noise, ae_config)
    if report.final_accuracy > 0.5:  # per-element L1 on standardized data
        warnings.warn(f"autoencoder reconstruction error {report.final_accuracy:.3f} is high")
    transform = AutoencoderTransform(ae)

    model = md.build_model(config)
    if train_on_reconstructions:
        recon = transform.apply_np(data.windows)
        train_view = WindowedDataset(recon, data.labels, data.run_ids, data.k, data.standardizer)
    else:
        train_view = data
    md.train(model, train_view)
    return ProtectedClassifier(model, [transform], spec)


def defend_quantization(config: md.ModelConfig, data: WindowedDataset,
                        spec: DefenseSpec) -> ProtectedClassifier:
    """Snap inputs to the fitted grid and retrain on the quantized view."""
    grid = fit_quantizer(data, spec.quant_bits)
    transform = QuantizeTransform(grid)
    quantized = WindowedDataset(transform.apply_np(data.windows), data.labels,
                                data.run_ids, data.k, data.standardizer)
    model = md.build_model(config)
    md.train(model, quantized)
    return ProtectedClassifier(model, [transform], spec)


def defend_regularization(config: md.ModelConfig, data: WindowedDataset,
                          spec: DefenseSpec) -> ProtectedClassifier:
    """Penalize output movement along the normalized input-gradient direction:
    loss = ce + lambda * ||f(x + h g/|g|) - f(x)||^2 / (h^2 n), n = batch size.

    The probe point is recomputed from the current gradients every batch and
    treated as constant data (no second-order terms)."""
    model = md.build_model(config)
    h = float(spec.reg_h)
    lam = float(spec.reg_lambda)

    def loss_fn(m, x: Tensor, y):
        probs = m.probs_graph(x)
        clean = ad.reduce_mean(ad.cross_entropy(probs, y))
        if lam == 0.0:
            return clean  # exact reduction to plain training
        g = atk._input_gradients(m, np.asarray(x.data), y)
        norms = np.sqrt((g * g).reshape(len(y), -1).sum(axis=1))
        safe = np.where(norms < 1e-12, 1.0, norms)  # zero-gradient samples skip the probe
        direction = g / safe[:, None, None]
        z = Tensor(np.asarray(x.data) + h * direction)
        diff = m.probs_graph(z) - probs
        penalty = ad.scale(ad.reduce_sum(ad.mul(diff, diff)), 1.0 / (h * h * len(y)))
        return clean + ad.scale(penalty, lam)

    md.train(model, data, loss_fn)
    return ProtectedClassifier(model, [], spec)


def defend_distillation(config: md.ModelConfig, data: WindowedDataset,
                        spec: DefenseSpec) -> ProtectedClassifier:
    """Temperature distillation: teacher trained at temperature T on hard
    labels, student (same architecture) trained at T on the teacher's
    softened outputs, then served at temperature 1.

    Fitting through a hot softmax scales the learned scores by roughly T, so
    the served model's softmax saturates and gradient-based attacks see a
    flat landscape. As T drops to 0 the soft labels collapse to the
    teacher's argmax; as T grows they approach uniform.

    The hot softmax also scales loss gradients by 1/T, which would stall the
    score growth the defense relies on, so both trainings run at a
    temperature-boosted learning rate and twice the epochs. The boost is
    capped per architecture: recurrent and convolutional stacks go unstable
    well before the flat-gradient regime that plain MLPs tolerate."""
    t = float(spec.distill_T)
    lr_cap = {"MLP": 0.2, "GRU": 0.03, "TCN": 0.03}.get(config.arch, 0.05)
    hot_lr = min(config.learning_rate * 2.0 * t, lr_cap)
    hot_config = md.ModelConfig(**{**asdict(config),
                                   "learning_rate": hot_lr,
                                   "epochs": config.epochs * 2})

    def hot_loss(m, x, y):
        return ad.reduce_mean(ad.cross_entropy(m.probs_graph(x, temperature=t), y))

    teacher = md.build_model(hot_config)
    md.train(teacher, data, hot_loss)

    soft = np.concatenate([
        ad.softmax_t(teacher.logits_graph(Tensor(data.windows[lo:lo + md.PREDICT_CHUNK])), t).data
        for lo in range(0, len(data), md.PREDICT_CHUNK)])

    student = md.build_model(hot_config)
    md.train(student, data, hot_loss, targets=soft)
    student.temperature = 1.0  # serve cold
    return ProtectedClassifier(student, [], spec)


def defend_combination(config: md.ModelConfig, data: WindowedDataset,
                       spec: DefenseSpec) -> ProtectedClassifier:
    """Adversarial training and quantization joined: every batch is attacked
    first, then quantized; training mixes clean-quantized and
    attacked-quantized data; inference keeps only the quantizer."""
    if spec.combo is None:
        raise ValueError("Combination needs spec.combo")
    grid = fit_quantizer(data, spec.combo.quant_bits)
    transform = QuantizeTransform(grid)
    model = md.build_model(config)
    lam = float(spec.adv_lambda)
    combo_attack = spec.combo.adv
    noise_rng = np.random.default_rng(np.random.SeedSequence([int(combo_attack.seed), 0xC0B0]))

    def loss_fn(m, x: Tensor, y):
        x_np = np.asarray(x.data)
        protected_view = ProtectedClassifier(m, [transform])
        clean = md.default_loss(m, Tensor(transform.apply_np(x_np)), y)
        if lam == 0.0:
            return clean
        x_adv = _attack_current(protected_view, x_np, y, combo_attack,
                                combo_attack.epsilon, noise_rng)
        adv = md.default_loss(m, Tensor(transform.apply_np(x_adv)), y)
        return clean + ad.scale(adv, lam)

    md.train(model, data, loss_fn)
    return ProtectedClassifier(model, [transform], spec)


def defend(config: md.ModelConfig, data: WindowedDataset,
           spec: DefenseSpec | None) -> ProtectedClassifier:
    """Dispatch a defense spec (None trains an unprotected baseline)."""
    if spec is None:
        model = md.build_model(config)
        md.train(model, data)
        return ProtectedClassifier(model, [], None)
    return {
        "AdvTraining": defend_adv_training,
        "Autoencoder": defend_autoencoder,
        "Quantization": defend_quantization,
        "Regularization": defend_regularization,
        "Distillation": defend_distillation,
        "Combination": defend_combination,
    }[spec.kind](config, data, spec)


# ---------------------------------------------------------------------------
# protected checkpoints (chain embedded, inference self-contained)


def save_protected(model: ProtectedClassifier, path) -> None:
    chain = []
    for t in model.transforms:
        if isinstance(t, QuantizeTransform):
            chain.append(t.describe())
        elif isinstance(t, AutoencoderTransform):
            chain.append({"type": "autoencoder",
                          "config": asdict(t.model.config),
                          "params": md._params_to_json(t.model.params)})
        else:
            raise ValueError(f"cannot serialize transform {t!r}")
    doc = {
        "format": "fddbench-protected",
        "version": md.CHECKPOINT_VERSION,
        "spec": model.spec.to_json() if model.spec else None,
        "chain": chain,
        "chain_hash": model.chain_hash,
        "inner": {
            "config": asdict(model.inner.config),
            "temperature": model.inner.temperature,
            "params": md._params_to_json(model.inner.params),
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_protected(path) -> ProtectedClassifier:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "fddbench-protected" or doc.get("version") != md.CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{md.CHECKPOINT_VERSION} protected checkpoint")
    inner_doc = doc["inner"]
    cfg = md.ModelConfig(**{**inner_doc["config"], "hidden": tuple(inner_doc["config"]["hidden"])})
    inner = md.build_model(cfg)
    for name, arr in md._params_from_json(inner_doc["params"]).items():
        inner.params[name].data[...] = arr
    inner.temperature = float(inner_doc["temperature"])

    transforms = []
    for entry in doc["chain"]:
        if entry["type"] == "quantize":
            transforms.append(QuantizeTransform(
                QuantizerGrid(np.array(entry["lo"]), np.array(entry["hi"]), int(entry["bits"]))))
        elif entry["type"] == "autoencoder":
            ae_cfg = md.ModelConfig(**{**entry["config"], "hidden": tuple(entry["config"]["hidden"])})
            ae = md.build_model(ae_cfg)
            for name, arr in md._params_from_json(entry["params"]).items():
                ae.params[name].data[...] = arr
            transforms.append(AutoencoderTransform(ae))
        else:
            raise ValueError(f"{path}: unknown transform type {entry['type']}")
    spec = DefenseSpec.from_json(doc["spec"]) if doc.get("spec") else None
    out = ProtectedClassifier(inner, transforms, spec)
    if out.chain_hash != doc["chain_hash"]:
        raise ValueError(f"{path}: transform chain fingerprint mismatch")
    return out
