"""Evasion attacks: bounded input perturbations that flip model predictions.

Every attack maps (model, window, label, strength) to a perturbed window
under the worst-coordinate constraint max|x' - x| <= epsilon. White-box
attacks differentiate the model with respect to its input; black-box attacks
(random sign noise, surrogate-transfer FGSM) only ever call ``predict_proba``
and run against a predict-only oracle by construction.

All attacks are pure functions of (model, input, spec): a fixed spec seed
reproduces the batch bit for bit, and strength zero returns the input
unchanged. Batches evaluate sample-parallel over a shared immutable model.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import WindowedDataset
from . import models as md

log = logging.getLogger(__name__)

ATTACK_KINDS = ("Noise", "FGSM", "FGSMDistill", "PGD", "DeepFool", "CW")
BOUND_SLACK = 1e-9  # float tolerance on the max-abs perturbation audit
GRAD_FLOOR = 1e-12  # below this, a gradient norm counts as a flat landscape
BATCH_CHUNK = 512


class AttackError(RuntimeError):
    """Attack failed (non-finite loss or gradient), with sample context."""


@dataclass
class AttackSpec:
    kind: str
    epsilon: float
    pgd_steps: int = 10
    pgd_alpha: float | None = None  # None: epsilon / 4
    deepfool_max_iters: int = 50
    cw_iters: int = 100
    cw_lr: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind '{self.kind}', expected one of {ATTACK_KINDS}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        for name in ("pgd_steps", "deepfool_max_iters", "cw_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.pgd_alpha is not None and self.pgd_alpha <= 0:
            raise ValueError(f"pgd_alpha must be positive, got {self.pgd_alpha}")
        if self.cw_lr <= 0:
            raise ValueError(f"cw_lr must be positive, got {self.cw_lr}")

    def with_epsilon(self, epsilon: float) -> "AttackSpec":
        return AttackSpec(**{**asdict(self), "epsilon": epsilon})

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, blob: dict) -> "AttackSpec":
        return cls(**blob)


class PredictOracle:
    """Predict-only view of a model: the black-box attack surface.

    Deliberately exposes no gradients, no parameters, no graph builders, so
    code written against it cannot cheat its threat model.
    """

    def __init__(self, model):
        self._source = model  # kept only so surrogate caching can key on it
        self._predict_proba = model.predict_proba
        self.classes = model.classes

    def predict_proba(self, windows: np.ndarray) -> np.ndarray:
        return self._predict_proba(windows)


# ---------------------------------------------------------------------------
# gradient helpers (white-box surface)


def _input_gradients(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of summed cross-entropy w.r.t. each input window."""
    xt = Tensor(x, requires_grad=True)
    try:
        probs = model.probs_graph(xt)
        loss = ad.reduce_sum(ad.cross_entropy(probs, y))
        ad.backward(loss)
    except ValueError as exc:
        raise AttackError(f"gradient computation failed: {exc}") from exc
    if xt.grad is None:
        return np.zeros_like(x)
    if not np.all(np.isfinite(xt.grad)):
        raise AttackError("non-finite input gradient")
    return xt.grad


def _clip_to_ball(x: np.ndarray, origin: np.ndarray, eps: np.ndarray | float) -> np.ndarray:
    return np.clip(x, origin - eps, origin + eps)


def _as_eps_column(eps, n: int) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(eps, dtype=np.float64), (n,))
    return arr.reshape(n, 1, 1)


# ---------------------------------------------------------------------------
# batch attack cores


def _noise_batch(x: np.ndarray, eps, rng: np.random.Generator) -> np.ndarray:
    signs = rng.integers(0, 2, size=x.shape) * 2.0 - 1.0
    return x + _as_eps_column(eps, len(x)) * signs


def _fgsm_batch(model, x: np.ndarray, y: np.ndarray, eps) -> np.ndarray:
    grad = _input_gradients(model, x, y)
    return x + _as_eps_column(eps, len(x)) * np.sign(grad)  # sign(0) == 0


def _pgd_batch(model, x: np.ndarray, y: np.ndarray, eps, steps: int, alpha) -> np.ndarray:
    eps_col = _as_eps_column(eps, len(x))
    alpha_col = _as_eps_column(alpha, len(x))
    cur = x.copy()
    for _ in range(steps):
        grad = _input_gradients(model, cur, y)
        cur = cur + alpha_col * np.sign(grad)
        cur = _clip_to_ball(cur, x, eps_col)
    return cur


def _deepfool_batch(model, x: np.ndarray, y: np.ndarray, eps: float, max_iters: int) -> np.ndarray:
    """Iterate toward the nearest scoring class: step along the gradient of
    D = score_nearest_wrong - score_true, scaled by |D| / ||grad D||_1, with
    the cumulative perturbation re-clipped to the strength ball each
    iteration.

    The gap is taken on the class scores (pre-softmax): on probabilities the
    gap vanishes as the boundary nears and the L1-scaled step can never cross
    it, which would make the whole iteration inert."""
    cur = x.copy()
    active = np.arange(len(x))
    for _ in range(max_iters):
        if len(active) == 0:
            break
        probs_np = model.predict_proba(cur[active])
        preds = probs_np.argmax(axis=1)
        still = preds == y[active]  # stop as soon as a sample is misclassified
        active = active[still]
        if len(active) == 0:
            break
        sub = cur[active]
        ya = y[active]

        xt = Tensor(sub, requires_grad=True)
        try:
            scores = model.logits_graph(xt)
        except ValueError as exc:
            raise AttackError(f"forward failed: {exc}") from exc
        pv = scores.data
        diff = np.abs(pv - pv[np.arange(len(ya)), ya][:, None])
        diff[np.arange(len(ya)), ya] = np.inf
        nearest = diff.argmin(axis=1)  # ties: lowest class index via argmin

        gap = ad.take_per_row(scores, nearest) - ad.take_per_row(scores, ya)
        ad.backward(ad.reduce_sum(gap))
        grad = xt.grad if xt.grad is not None else np.zeros_like(sub)
        if not np.all(np.isfinite(grad)):
            raise AttackError("non-finite gradient in boundary search")

        l1 = np.abs(grad).reshape(len(ya), -1).sum(axis=1)
        flat = l1 < GRAD_FLOOR  # flat landscape: leave those samples as they are
        scale = np.where(flat, 0.0, np.abs(gap.data) / np.maximum(l1, GRAD_FLOOR))
        stepped = sub + scale[:, None, None] * grad
        cur[active] = _clip_to_ball(stepped, x[active], eps)
        active = active[~flat]
    return cur


def _cw_batch(model, x: np.ndarray, y: np.ndarray, eps: float, iters: int, lr: float) -> np.ndarray:
    """Descend on Chebyshev(perturbation) + ReLU(logit margin), projecting the
    perturbation into the strength ball after every step."""
    n = len(x)
    rows = np.arange(n)
    eta = np.zeros_like(x)
    for _ in range(iters):
        xt = Tensor(x + eta, requires_grad=True)
        try:
            logits = model.logits_graph(xt)
        except ValueError as exc:
            raise AttackError(f"forward failed: {exc}") from exc
        zv = logits.data
        masked = zv.copy()
        masked[rows, y] = -np.inf
        runner_up = masked.argmax(axis=1)
        margin = ad.take_per_row(logits, y) - ad.take_per_row(logits, runner_up)
        ad.backward(ad.reduce_sum(ad.relu(margin)))
        g_margin = xt.grad if xt.grad is not None else np.zeros_like(x)
        if not np.all(np.isfinite(g_margin)):
            raise AttackError("non-finite gradient in margin descent")

        # subgradient of the Chebyshev distance: sign at the largest coordinate
        flat_eta = np.abs(eta).reshape(n, -1)
        peak = flat_eta.argmax(axis=1)
        g_dist = np.zeros_like(eta).reshape(n, -1)
        g_dist[rows, peak] = np.sign(eta.reshape(n, -1)[rows, peak])
        g_dist = g_dist.reshape(eta.shape)

        eta = eta - lr * (g_dist + g_margin)
        eta = np.clip(eta, -eps, eps)
    return x + eta


# ---------------------------------------------------------------------------
# surrogate distillation (black-box transfer)


_SURROGATE_CACHE: dict[tuple[int, int], tuple[object, object, md.Classifier]] = {}


def clear_surrogate_cache() -> None:
    _SURROGATE_CACHE.clear()


def fit_surrogate(oracle: PredictOracle, train_data: WindowedDataset,
                  spec: AttackSpec) -> md.Classifier:
    """Train an MLP to imitate the oracle's argmax labels on the given data.

    Cached per (attacked model, data) pair so an epsilon sweep fits it once.
    """
    source = getattr(oracle, "_source", oracle)
    key = (id(source), id(train_data))
    hit = _SURROGATE_CACHE.get(key)
    if hit is not None and hit[0] is source and hit[1] is train_data:
        return hit[2]

    labels = oracle.predict_proba(train_data.windows).argmax(axis=1)
    imitation = WindowedDataset(train_data.windows, labels,
                                train_data.run_ids, train_data.k, train_data.standardizer)
    cfg = md.ModelConfig("MLP", window=train_data.k, sensors=train_data.sensors,
                         classes=oracle.classes, hidden=(64,), epochs=12,
                         learning_rate=1e-3, batch_size=64, seed=int(spec.seed))
    surrogate = md.build_model(cfg)
    md.train(surrogate, imitation)

    agreement = float(np.mean(
        surrogate.predict_proba(train_data.windows).argmax(axis=1) == labels))
    if agreement < 1.0 / oracle.classes + 0.05:
        log.warning("surrogate failed to imitate the oracle (agreement %.3f)", agreement)

    _SURROGATE_CACHE[key] = (source, train_data, surrogate)
    return surrogate


# ---------------------------------------------------------------------------
# public single-window operations (spec surface)


def attack_noise(x: np.ndarray, spec: AttackSpec) -> np.ndarray:
    """Shift every element by exactly +-epsilon with fair coin signs."""
    x = np.asarray(x, dtype=np.float64)
    if spec.epsilon == 0.0:
        return x.copy()
    rng = np.random.default_rng(spec.seed)
    return _noise_batch(x[None], spec.epsilon, rng)[0]


def attack_fgsm(model, x: np.ndarray, y: int, spec: AttackSpec) -> np.ndarray:
    """Single step of size epsilon along the sign of the input gradient."""
    x = np.asarray(x, dtype=np.float64)
    if spec.epsilon == 0.0:
        return x.copy()
    return _fgsm_batch(model, x[None], np.array([y]), spec.epsilon)[0]


def attack_pgd(model, x: np.ndarray, y: int, spec: AttackSpec) -> np.ndarray:
    """Iterated FGSM with per-step size alpha, projected into the ball."""
    x = np.asarray(x, dtype=np.float64)
    if spec.epsilon == 0.0:
        return x.copy()
    alpha = spec.pgd_alpha if spec.pgd_alpha is not None else spec.epsilon / 4.0
    return _pgd_batch(model, x[None], np.array([y]), spec.epsilon, spec.pgd_steps, alpha)[0]


def attack_deepfool(model, x: np.ndarray, y: int, spec: AttackSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if spec.epsilon == 0.0:
        return x.copy()
    return _deepfool_batch(model, x[None], np.array([y]), spec.epsilon, spec.deepfool_max_iters)[0]


def attack_cw(model, x: np.ndarray, y: int, spec: AttackSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if spec.epsilon == 0.0:
        return x.copy()
    return _cw_batch(model, x[None], np.array([y]), spec.epsilon, spec.cw_iters, spec.cw_lr)[0]


def attack_fgsm_distill(oracle, train_data: WindowedDataset, x: np.ndarray, y: int,
                        spec: AttackSpec, surrogate: md.Classifier | None = None) -> np.ndarray:
    """FGSM against a surrogate trained on the oracle's predictions only."""
    x = np.asarray(x, dtype=np.float64)
    if spec.epsilon == 0.0:
        return x.copy()
    oracle = oracle if isinstance(oracle, PredictOracle) else PredictOracle(oracle)
    surrogate = surrogate or fit_surrogate(oracle, train_data, spec)
    return _fgsm_batch(surrogate, x[None], np.array([y]), spec.epsilon)[0]


# ---------------------------------------------------------------------------
# batched attack + artifact


@dataclass
class AdversarialBatch:
    originals: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray
    epsilon: float
    spec: AttackSpec
    bound_ok: np.ndarray  # per-sample max-abs audit
    model_fingerprint: str | None = None

    def __post_init__(self):
        if self.originals.shape != self.perturbed.shape:
            raise ValueError("originals/perturbed shapes disagree")

    def __len__(self) -> int:
        return len(self.originals)

    def max_abs_shift(self) -> np.ndarray:
        if len(self.originals) == 0:
            return np.zeros(0)
        return np.abs(self.perturbed - self.originals).reshape(len(self.originals), -1).max(axis=1)


def check_bound(originals: np.ndarray, perturbed: np.ndarray, epsilon: float) -> np.ndarray:
    shift = np.abs(perturbed - originals).reshape(len(originals), -1)
    if shift.size == 0:
        return np.ones(len(originals), dtype=bool)
    return shift.max(axis=1) <= epsilon + BOUND_SLACK


def attack_batch(model, data: WindowedDataset, spec: AttackSpec,
                 train_data: WindowedDataset | None = None,
                 surrogate_cache: bool = True) -> AdversarialBatch:
    """Apply one attack to every window of ``data``, order-preserving.

    Black-box kinds run against a predict-only oracle. Per-sample strength
    audits land in ``bound_ok``; errors carry the failing chunk's offset.
    """
    x = data.windows
    y = data.labels
    n = len(data)
    out = np.empty_like(x)

    surrogate = None
    if spec.kind == "FGSMDistill" and spec.epsilon > 0.0:
        if train_data is None:
            raise ValueError("FGSMDistill requires train_data to fit its surrogate")
        oracle = PredictOracle(model)
        if not surrogate_cache:
            clear_surrogate_cache()
        surrogate = fit_surrogate(oracle, train_data, spec)

    rng = np.random.default_rng(spec.seed)
    for lo in range(0, n, BATCH_CHUNK):
        hi = min(lo + BATCH_CHUNK, n)
        xb, yb = x[lo:hi], y[lo:hi]
        try:
            if spec.epsilon == 0.0:
                out[lo:hi] = xb
            elif spec.kind == "Noise":
                out[lo:hi] = _noise_batch(xb, spec.epsilon, rng)
            elif spec.kind == "FGSM":
                out[lo:hi] = _fgsm_batch(model, xb, yb, spec.epsilon)
            elif spec.kind == "FGSMDistill":
                out[lo:hi] = _fgsm_batch(surrogate, xb, yb, spec.epsilon)
            elif spec.kind == "PGD":
                alpha = spec.pgd_alpha if spec.pgd_alpha is not None else spec.epsilon / 4.0
                out[lo:hi] = _pgd_batch(model, xb, yb, spec.epsilon, spec.pgd_steps, alpha)
            elif spec.kind == "DeepFool":
                out[lo:hi] = _deepfool_batch(model, xb, yb, spec.epsilon, spec.deepfool_max_iters)
            elif spec.kind == "CW":
                out[lo:hi] = _cw_batch(model, xb, yb, spec.epsilon, spec.cw_iters, spec.cw_lr)
            else:  # pragma: no cover - kinds validated at construction
                raise AttackError(f"unhandled kind {spec.kind}")
        except AttackError as exc:
            raise AttackError(f"{spec.kind} failed on samples [{lo}:{hi}]: {exc}") from exc

    fingerprint = model.fingerprint() if hasattr(model, "fingerprint") else None
    return AdversarialBatch(x.copy(), out, y.copy(), spec.epsilon, spec,
                            check_bound(x, out, spec.epsilon), fingerprint)


# ---------------------------------------------------------------------------
# artifact files (audited by the verify command)


def save_batch(batch: AdversarialBatch, path, model_path: str | None = None) -> None:
    meta = {
        "version": 1,
        "spec": batch.spec.to_json(),
        "epsilon": batch.epsilon,
        "model_fingerprint": batch.model_fingerprint,
        "model_path": model_path,
    }
    np.savez(path,
             meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
             originals=batch.originals, perturbed=batch.perturbed,
             labels=batch.labels, bound_ok=batch.bound_ok)


def load_batch(path) -> tuple[AdversarialBatch, dict]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != 1:
            raise ValueError(f"{path}: unsupported adversarial batch version")
        spec = AttackSpec.from_json(meta["spec"])
        batch = AdversarialBatch(z["originals"], z["perturbed"], z["labels"],
                                 float(meta["epsilon"]), spec, z["bound_ok"],
                                 meta.get("model_fingerprint"))
    return batch, meta
