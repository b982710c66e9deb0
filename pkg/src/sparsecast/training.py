"""Training loop, evaluation and the index-reuse benchmark."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .attention import OpCounters, n_sample, n_top
from .checkpoint import Checkpoint
from .data import DataError, Normalizer, SeriesFrame, SplitResult, window_arrays
from .losses import LossConfig, deep_supervised_loss, loss_fn, metrics
from .memory import AttentionIndexMemory
from .models import ForwardContext, InformerLite, MLinear, ModelConfig, build_model
from .report import RunReport

__all__ = [
    "TrainConfig",
    "TrainingDivergedError",
    "Adam",
    "EarlyStopping",
    "lr_at",
    "train",
    "predict",
    "evaluate",
    "repeat_last",
    "bench_reuse",
    "expected_counters",
]

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    lr_decay: float = 0.5
    batch_size: int = 32
    patience: int = 3
    max_epochs: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: str = "auto"  # m_loss for mlinear, mse for informer_lite
    sigma: float = 1.0
    deep_supervision: bool = True
    grad_clip: float = 0.0  # global-norm clip, 0 disables
    stride: int = 1
    freq: str = "h"

    def __post_init__(self) -> None:
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")

    def loss_config(self, model: str) -> LossConfig:
        kind = self.loss if self.loss != "auto" else ("m_loss" if model == "mlinear" else "mse")
        return LossConfig(kind=kind, sigma=self.sigma, deep_supervision=self.deep_supervision)


class TrainingDivergedError(RuntimeError):
    pass


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr0 * cfg.lr_decay**epoch


class Adam:
    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class EarlyStopping:
    """Stop once validation loss fails to improve for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Register an epoch; returns True when training should stop."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def _batches(n: int, size: int, order: np.ndarray | None = None) -> Iterator[np.ndarray]:
    idx = np.arange(n) if order is None else order
    for s in range(0, n, size):
        yield idx[s:s + size]


def _clip(params, max_norm: float) -> None:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm:
        for g in grads:
            g *= max_norm / total


def predict(
    model,
    x: np.ndarray,
    batch_size: int = 32,
    mode: str = "predict",
    memory: AttentionIndexMemory | None = None,
    counters: OpCounters | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Forecasts ``(N, S, n)`` for windows ``x``; MLinear returns its mixed head only."""
    counters = counters if counters is not None else OpCounters()
    out = []
    with ad.no_grad():
        for b in _batches(len(x), batch_size):
            if isinstance(model, InformerLite):
                ctx = ForwardContext(mode=mode, memory=memory, counters=counters, rng=rng, record=False)
                out.append(model(x[b], ctx).data)
            else:
                out.append(model.predict(x[b]).data)
    if not out:
        return np.empty((0, model.cfg.S, model.cfg.n_channels))
    return np.concatenate(out)


def repeat_last(x: np.ndarray, horizon: int) -> np.ndarray:
    return np.repeat(x[:, -1:, :], horizon, axis=1)


def _split_windows(splits: SplitResult, cfg: ModelConfig, tcfg: TrainConfig, norm: Normalizer):
    out = {}
    for name, frame in zip(("train", "val", "test"), splits):
        x, y = window_arrays(frame, cfg.L, cfg.S, tcfg.stride, norm)
        if len(x) == 0:
            raise DataError(
                f"{name} split has {frame.T} rows, fewer than L+S={cfg.L + cfg.S}; no windows"
            )
        out[name] = (x, y)
    return out


def train(
    model_cfg: ModelConfig, cfg: TrainConfig, splits: SplitResult
) -> tuple[Checkpoint, RunReport]:
    """Fit one model; returns the best-validation checkpoint and a report."""
    t_start = time.perf_counter()
    if model_cfg.n_channels != splits.train.n:
        raise DataError(f"model expects {model_cfg.n_channels} channels, data has {splits.train.n}")
    norm = Normalizer.fit(splits.train)
    windows = _split_windows(splits, model_cfg, cfg, norm)
    x_tr, y_tr = windows["train"]

    shuffle_seq, sample_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    sample_rng = np.random.default_rng(sample_seq)

    model = build_model(model_cfg)
    params = model.parameters()
    opt = Adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    loss_cfg = cfg.loss_config(model_cfg.model)
    forecast_loss = loss_fn(loss_cfg)
    is_informer = isinstance(model, InformerLite)
    memory = (
        AttentionIndexMemory(model_cfg.aggregation_mode, model_cfg.warmup_epochs)
        if is_informer and model_cfg.attention == "prophet" else None
    )
    counters = {"train": OpCounters(), "val": OpCounters(), "test": OpCounters()}
    stopper = EarlyStopping(cfg.patience)
    best_state = model.state_dict()
    epochs: list[dict] = []
    step = 0
    stopped = False

    for epoch in range(cfg.max_epochs):
        lr = lr_at(cfg, epoch)
        losses = []
        for b in _batches(len(x_tr), cfg.batch_size, shuffle_rng.permutation(len(x_tr))):
            with ad.tape():
                if is_informer:
                    ctx = ForwardContext(
                        mode="train", memory=memory, counters=counters["train"],
                        rng=sample_rng, epoch=epoch, iteration=step,
                    )
                    loss = forecast_loss(model(x_tr[b], ctx), y_tr[b])
                else:
                    loss, _ = deep_supervised_loss(*model(x_tr[b]), y_tr[b], loss_cfg)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(f"non-finite loss {value} at epoch {epoch}, step {step}")
                ad.backward(loss)
            if cfg.grad_clip > 0:
                _clip(params, cfg.grad_clip)
            opt.step(lr)
            model.zero_grad()
            losses.append(value)
            step += 1

        x_va, y_va = windows["val"]
        pred = predict(model, x_va, cfg.batch_size, mode="recompute",
                       counters=counters["val"], rng=sample_rng)
        val_loss = forecast_loss(pred, y_va).item()
        train_loss = float(np.mean(losses))
        epochs.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_loss": val_loss})
        log.info("epoch %d lr=%.3g train=%.6f val=%.6f", epoch, lr, train_loss, val_loss)
        improved_before = stopper.best_epoch
        stop = stopper.update(epoch, val_loss)
        if stopper.best_epoch != improved_before:
            best_state = model.state_dict()
        if stop:
            stopped = epoch < cfg.max_epochs - 1
            break
    model.load_state_dict(best_state)
    t_train = time.perf_counter()

    if memory is not None:
        memory.freeze()
    stability = memory.stability_report() if memory is not None else []

    x_te, y_te = windows["test"]
    mode = "predict" if memory is not None else "recompute"
    pred = predict(model, x_te, cfg.batch_size, mode=mode, memory=memory,
                   counters=counters["test"], rng=sample_rng)
    test = metrics(pred, y_te)
    raw = metrics(norm.denormalize(pred), norm.denormalize(y_te))
    test.update({"mse_raw": raw["mse"], "mae_raw": raw["mae"], "n_windows": int(len(x_te))})
    baseline = metrics(repeat_last(x_te, model_cfg.S), y_te)
    t_end = time.perf_counter()

    data_info = {
        "split_sizes": list(splits.sizes),
        "proportional_split": splits.proportional,
        "channels": list(splits.train.channel_names),
        "freq": cfg.freq,
    }
    ckpt = Checkpoint(
        model_config=model_cfg,
        weights=model.state_dict(),
        normalizer=norm,
        memory=memory,
        train_config=asdict(cfg),
        data=data_info,
    )
    report = RunReport(
        model=model_cfg.model,
        config={**{f"model.{k}": v for k, v in model_cfg.to_dict().items()},
                **{f"train.{k}": v for k, v in asdict(cfg).items()},
                "train.loss_kind": loss_cfg.kind},
        epochs=epochs,
        best_epoch=stopper.best_epoch,
        stopped_early=stopped,
        test=test,
        baseline=baseline,
        counters={k: c.as_dict() for k, c in counters.items()},
        stability=stability,
        data=data_info,
        timings={"train_seconds": t_train - t_start, "test_seconds": t_end - t_train},
    )
    return ckpt, report


def evaluate(ckpt: Checkpoint, frame: SeriesFrame, batch_size: int = 32, stride: int = 1) -> dict:
    """MSE/MAE on normalized targets (``mse``/``mae``) and raw scale (``*_raw``)."""
    cfg = ckpt.model_config
    model = ckpt.build()
    x, y = window_arrays(frame, cfg.L, cfg.S, stride, ckpt.normalizer)
    if len(x) == 0:
        raise DataError(f"split has {frame.T} rows, fewer than L+S={cfg.L + cfg.S}")
    mode = "predict" if ckpt.memory is not None else "recompute"
    rng = np.random.default_rng(cfg.seed)
    pred = predict(model, x, batch_size, mode=mode, memory=ckpt.memory, rng=rng)
    out = metrics(pred, y)
    raw = metrics(ckpt.normalizer.denormalize(pred), ckpt.normalizer.denormalize(y))
    out.update({"mse_raw": raw["mse"], "mae_raw": raw["mae"], "n_windows": int(len(x))})
    return out


def expected_counters(
    cfg: ModelConfig, n_windows: int, memory: AttentionIndexMemory | None = None
) -> dict[str, int]:
    """Closed-form attention multiply counts for ``n_windows`` InformerLite forecasts.

    With ``memory`` the reuse-mode counts are returned (no measurement,
    u taken from the stored index sets); otherwise the recompute-mode ones.
    """
    dh = cfg.d_model // cfg.n_heads
    L_enc, L_dec = cfg.L, cfg.decoder_label_len + cfg.S
    measure = score = total = 0
    for layer, length in ((0, L_enc), (1, L_enc), (2, L_dec)):
        for h in range(cfg.n_heads):
            if cfg.attention == "full":
                u = length
            elif memory is not None:
                u = len(memory.aggregate(layer, h))
            else:
                u = n_top(length, cfg.u_factor)
                m = length * n_sample(length, cfg.sample_factor) * dh
                measure += m
                total += m
            score += u * length * dh
            total += u * length * 2 * dh
    # dense cross-attention: decoder queries against encoder keys
    cross = cfg.n_heads * L_dec * L_enc * dh
    score += cross
    total += 2 * cross
    return {
        "measurement_dot_products": n_windows * measure,
        "attention_dot_products": n_windows * score,
        "multiplies_total": n_windows * total,
    }


def bench_reuse(ckpt: Checkpoint, frame: SeriesFrame, batch_size: int = 32,
                max_windows: int | None = None) -> dict:
    """Run the same forecasts with measured and with reused Top-u indices."""
    cfg = ckpt.model_config
    if cfg.model != "informer_lite" or ckpt.memory is None:
        raise ValueError("bench needs an informer_lite checkpoint with a frozen index memory")
    model = ckpt.build()
    x, _ = window_arrays(frame, cfg.L, cfg.S, 1, ckpt.normalizer)
    if max_windows is not None:
        x = x[:max_windows]
    if len(x) == 0:
        raise DataError(f"split has {frame.T} rows, fewer than L+S={cfg.L + cfg.S}")

    runs = {}
    for name, mode in (("recompute", "recompute"), ("reuse", "predict")):
        counters = OpCounters()
        t0 = time.perf_counter()
        pred = predict(model, x, batch_size, mode=mode, memory=ckpt.memory,
                       counters=counters, rng=np.random.default_rng(cfg.seed))
        runs[name] = (pred, counters, time.perf_counter() - t0)

    n = len(x)
    result = {
        "n_windows": n,
        "sites": {
            f"{layer}.{h}": {
                "L_Q": cfg.L if layer < 2 else cfg.decoder_label_len + cfg.S,
                "u_recompute": n_top(cfg.L if layer < 2 else cfg.decoder_label_len + cfg.S, cfg.u_factor),
                "u_reuse": len(ckpt.memory.aggregate(layer, h)),
            }
            for layer in range(3) for h in range(cfg.n_heads)
        },
        "recompute": runs["recompute"][1].as_dict(),
        "reuse": runs["reuse"][1].as_dict(),
        "expected": {
            "recompute": expected_counters(cfg, n),
            "reuse": expected_counters(cfg, n, ckpt.memory),
        },
        "max_abs_diff": float(np.max(np.abs(runs["recompute"][0] - runs["reuse"][0]))),
        "timings": {"recompute_seconds": runs["recompute"][2], "reuse_seconds": runs["reuse"][2]},
    }
    rec, reu = result["recompute"]["multiplies_total"], result["reuse"]["multiplies_total"]
    result["multiply_reduction"] = 1.0 - reu / rec
    return result
