"""ADMM quantization-aware training with straight-through activation quantization.

Weights are pulled toward their row-wise quantized projections through the
augmented term ``(rho / 2) * ||W - Z + U||**2``; ``Z`` and ``U`` are refreshed
once per ``admm_period`` epochs:

    Z <- proj(W + U)        (row-wise, per-row least-squares scale refit)
    U <- W - Z + U

Activations entering every dense/conv layer are rounded onto an unsigned grid in
the forward pass and passed straight through (inside the clip range) backward.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .assignment import assign, fit_row_alphas, project_rows
from .core import NetworkIR, gemm_to_weight, reshape_to_gemm
from .data import Dataset
from .errors import DivergenceError, IncompatibleShapeError, ValidationError
from .qmodel import MSP_RATIO, ActQuant, QuantizedLayer, QuantizedModel, SchemeConfig, SchemeRatio
from .quantizers import AlphaPolicy

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "task_loss", "penalty", "feasibility_gap", "train_acc", "test_acc")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 32
    lr: float = 0.05
    schedule: str = "cosine"
    momentum: float = 0.9
    l2: float = 1e-4
    rho: float = 1e-3
    rho_growth: float = 1.08
    rho_max: float = 5.0
    admm_period: int = 1
    seed: int = 0
    act_bits: int = 4
    act_percentile: float = 99.9
    ratio: SchemeRatio = MSP_RATIO
    schemes: SchemeConfig = field(default_factory=SchemeConfig)
    refit_alpha: AlphaPolicy = field(default_factory=lambda: AlphaPolicy("least_squares"))
    reassign_each_update: bool = False
    uniform_tag: str | None = None  # one scheme for every row instead of ratio-based assignment

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.admm_period < 1:
            raise ValidationError("epochs, batch_size and admm_period must be positive")
        if not self.lr > 0 or self.l2 < 0 or self.rho < 0 or self.rho_growth < 1:
            raise ValidationError("lr must be positive; l2 and rho non-negative; rho_growth >= 1")
        if self.schedule not in ("step", "cosine"):
            raise ValidationError(f"unknown lr schedule {self.schedule!r}")

    def lr_at(self, epoch):
        if self.schedule == "cosine":
            return 0.5 * self.lr * (1 + math.cos(math.pi * epoch / self.epochs))
        return self.lr * (0.1 ** (int(epoch >= self.epochs // 2) + int(epoch >= 3 * self.epochs // 4)))


def ste_forward(a, act: ActQuant, layer):
    """Quantized activations and the straight-through gradient mask (1 inside [0, a_max])."""
    a = np.asarray(a, dtype=np.float64)
    mask = ((a >= 0.0) & (a <= act.a_max[layer])).astype(np.float64)
    return act.quantize(layer, a), mask


def ste_activation(a, bits=4, a_max=1.0):
    """Standalone STE quantizer: returns (forward value, d(out)/d(a))."""
    act = ActQuant(bits, {0: float(a_max)})
    return ste_forward(a, act, 0)


@dataclass
class AdmmState:
    """Per quantized layer: projected copy ``Z``, dual ``U`` (GEMM shape), row tags and scales."""

    Z: dict
    U: dict
    tags: dict
    alpha: dict
    rho: float
    period: int = 1


def project_layer(W, tags, alpha, config):
    codes = project_rows(W, tags, alpha, config)
    return QuantizedLayer(tags, alpha, codes, None, config).dequantized(), codes


def admm_update(W, Z, U, tags, config: SchemeConfig, alpha=None, refit: AlphaPolicy | None = None):
    """One ADMM step for a GEMM matrix: ``Z = proj(W + U)``, ``U = W - Z + U``.

    With ``refit`` the per-row scales are refit on ``W + U`` first; otherwise
    ``alpha`` is used as is. Returns (Z, U, alpha).
    """
    W = np.asarray(W, dtype=np.float64)
    V = W + U
    if refit is not None:
        alpha = fit_row_alphas(V, tags, replace(config, alpha=refit))
    Z_new, _ = project_layer(V, tags, alpha, config)
    return Z_new, W - Z_new + U, alpha


def augmented_loss(task_loss, W, Z, U, rho):
    """``task_loss + rho/2 * ||W - Z + U||^2`` and its gradient w.r.t. ``W``."""
    D = np.asarray(W) - Z + U
    return task_loss + 0.5 * rho * float(np.sum(D * D)), rho * D


def feasibility_gap(W, tags, alpha, config):
    P, _ = project_layer(W, tags, alpha, config)
    return float(np.max(np.abs(W - P)))


def calibrate_activations(net: NetworkIR, x, bits=4, percentile=99.9) -> ActQuant:
    """Per quantized layer ``a_max``: the given percentile of that layer's input on
    ``x``, with earlier layers already quantized."""
    a_max = {}
    h = np.asarray(x, dtype=np.float64)
    for i, layer in enumerate(net.layers):
        if layer.quantizable:
            v = float(np.percentile(h, percentile))
            a_max[i] = v if v > 0 and math.isfinite(v) else 1.0
            h = ActQuant(bits, {i: a_max[i]}).quantize(i, h)
        h, _ = nn.forward(NetworkIR((layer,)), h, keep=False)
    return ActQuant(bits, a_max)


def accuracy(net, data: Dataset | None, act: ActQuant | None = None):
    if data is None or len(data) == 0:
        return float("nan")
    fn = None if act is None else (lambda i, h: (act.quantize(i, h), None))
    pred = np.argmax(nn.predict(net, data.samples, fn), axis=1)
    return float(np.mean(pred == data.labels))


@dataclass
class TrainResult:
    model: QuantizedModel | None
    net: NetworkIR
    log: list
    act: ActQuant | None
    state: AdmmState | None = None

    def final(self):
        return self.log[-1] if self.log else {}


def _check(net, data):
    if len(data) == 0:
        raise ValidationError("empty training set")
    try:
        net.shapes(data.sample_shape)
    except IncompatibleShapeError as exc:
        raise IncompatibleShapeError(f"network does not accept samples of shape {data.sample_shape}: {exc}")


def _sgd(net: NetworkIR, data: Dataset, cfg: TrainConfig, act, admm: AdmmState | None, test=None):
    _check(net, data)
    rng = np.random.default_rng(cfg.seed)
    qidx = net.quantizable_indices()
    W = {i: net.layers[i].weight.copy() for i in qidx}
    b = {i: None if net.layers[i].bias is None else net.layers[i].bias.copy() for i in qidx}
    vW = {i: np.zeros_like(W[i]) for i in qidx}
    vb = {i: None if b[i] is None else np.zeros_like(b[i]) for i in qidx}
    n = len(data)
    rows = []
    act_fn = None if act is None else (lambda i, h: ste_forward(h, act, i))

    def current():
        return net.with_weights(W).with_biases({i: v for i, v in b.items() if v is not None})

    for epoch in range(cfg.epochs):
        if admm is not None and epoch % admm.period == 0:
            if epoch:
                admm.rho = min(admm.rho * cfg.rho_growth ** admm.period, max(cfg.rho_max, cfg.rho))
            for i in qidx:
                Wg = W[i].reshape(W[i].shape[0], -1)
                if cfg.reassign_each_update:
                    admm.tags[i] = _tags(Wg, cfg)
                Z, U, admm.alpha[i] = admm_update(
                    Wg, admm.Z[i], admm.U[i], admm.tags[i], cfg.schemes, refit=cfg.refit_alpha
                )
                admm.Z[i], admm.U[i] = Z, U
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        tot_loss = tot_pen = 0.0
        correct = 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            cur = current()
            logits, caches = nn.forward(cur, data.samples[idx], act_fn)
            loss, dlogits = nn.softmax_xent(logits, data.labels[idx])
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            correct += int(np.sum(np.argmax(logits, axis=1) == data.labels[idx]))
            grads = nn.backward(cur, caches, dlogits)
            pen = 0.0
            for i in qidx:
                gW, gb = grads[i]
                gW = gW + cfg.l2 * W[i]
                if admm is not None and admm.rho > 0:
                    Wg = W[i].reshape(W[i].shape[0], -1)
                    p, g_aug = augmented_loss(0.0, Wg, admm.Z[i], admm.U[i], admm.rho)
                    pen += p
                    gW = gW + g_aug.reshape(W[i].shape)
                vW[i] = cfg.momentum * vW[i] + gW
                W[i] = W[i] - lr * vW[i]
                if gb is not None:
                    vb[i] = cfg.momentum * vb[i] + gb
                    b[i] = b[i] - lr * vb[i]
            tot_loss += loss * len(idx)
            tot_pen += pen * len(idx)
        cur = current()
        gap = float("nan")
        if admm is not None:
            gap = max(
                feasibility_gap(reshape_to_gemm(cur.layers[i]), admm.tags[i], admm.alpha[i], cfg.schemes)
                for i in qidx
            )
        rows.append({
            "epoch": epoch,
            "task_loss": tot_loss / n,
            "penalty": tot_pen / n,
            "feasibility_gap": gap,
            "train_acc": correct / n,
            "test_acc": accuracy(cur, test, act),
        })
        if not math.isfinite(tot_loss):
            raise DivergenceError(f"non-finite loss at epoch {epoch}")
        log.debug("epoch %d loss %.4f gap %.3g", epoch, tot_loss / n, gap)
    return current(), rows


def train_float(net: NetworkIR, data: Dataset, cfg: TrainConfig, test=None, act: ActQuant | None = None):
    """Plain SGD (no ADMM). Pass ``act`` to train with quantized activations."""
    trained, rows = _sgd(net, data, cfg, act, None, test)
    return TrainResult(None, trained, rows, act)


def _first_batch(data, cfg):
    rng = np.random.default_rng(cfg.seed)
    return data.samples[rng.permutation(len(data))[: cfg.batch_size]]


def _tags(Wg, cfg: TrainConfig):
    if cfg.uniform_tag is not None:
        return np.full(Wg.shape[0], cfg.uniform_tag, dtype="<U1")
    return assign(Wg, cfg.ratio).tags


def init_admm(net: NetworkIR, cfg: TrainConfig) -> AdmmState:
    """Assign schemes from the (pre-trained) weights and set ``Z = W``, ``U = 0``."""
    Z, U, tags, alpha = {}, {}, {}, {}
    for i in net.quantizable_indices():
        Wg = reshape_to_gemm(net.layers[i])
        tags[i] = _tags(Wg, cfg)
        Z[i] = Wg.copy()
        U[i] = np.zeros_like(Wg)
        alpha[i] = fit_row_alphas(Wg, tags[i], replace(cfg.schemes, alpha=cfg.refit_alpha))
    return AdmmState(Z, U, tags, alpha, cfg.rho, cfg.admm_period)


def train(net: NetworkIR, data: Dataset, cfg: TrainConfig, test: Dataset | None = None) -> TrainResult:
    """ADMM weight quantization + STE activation quantization, then hard projection.

    ``net`` should carry pre-trained float weights; scheme assignment is made from
    them once (unless ``cfg.reassign_each_update``).
    """
    _check(net, data)
    act = calibrate_activations(net, _first_batch(data, cfg), cfg.act_bits, cfg.act_percentile)
    state = init_admm(net, cfg)
    trained, rows = _sgd(net, data, cfg, act, state, test)
    qlayers = {}
    for i in trained.quantizable_indices():
        Wg = reshape_to_gemm(trained.layers[i])
        codes = project_rows(Wg, state.tags[i], state.alpha[i], cfg.schemes)
        qlayers[i] = QuantizedLayer(state.tags[i], state.alpha[i], codes, None, cfg.schemes)
    model = QuantizedModel.from_layers(trained, qlayers, cfg.schemes, cfg.ratio, act, finalized=True)
    return TrainResult(model, trained, rows, act, state)


def hard_project(net: NetworkIR, state: AdmmState, config: SchemeConfig):
    weights = {}
    for i, tags in state.tags.items():
        P, _ = project_layer(reshape_to_gemm(net.layers[i]), tags, state.alpha[i], config)
        weights[i] = gemm_to_weight(net.layers[i], P)
    return net.with_weights(weights)
