"""Training losses and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

__all__ = ["LossConfig", "m_loss", "huber", "mae", "mse", "loss_fn", "deep_supervised_loss", "metrics"]

LOSS_KINDS = ("m_loss", "huber", "mae", "mse")


@dataclass
class LossConfig:
    kind: str = "m_loss"
    sigma: float = 1.0
    deep_supervision: bool = True
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)  # ci, cd, mix

    def __post_init__(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


def _error(pred, target) -> Tensor:
    pred, target = ad.as_tensor(pred), ad.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return ad.sub(pred, target)


def m_loss(pred, target, sigma: float = 1.0) -> Tensor:
    """Mean of 0.5 e^2 + |e| inside the sigma band, (sigma + 1)|e| - 0.5 sigma^2 outside."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    e = _error(pred, target)
    a = ad.abs_(e)
    inner = ad.add(ad.scale(ad.square(e), 0.5), a)
    outer = ad.add(ad.scale(a, sigma + 1.0), -0.5 * sigma * sigma)
    return ad.mean(ad.where(a.data <= sigma, inner, outer))


def huber(pred, target, sigma: float = 1.0) -> Tensor:
    e = _error(pred, target)
    a = ad.abs_(e)
    inner = ad.scale(ad.square(e), 0.5)
    outer = ad.add(ad.scale(a, sigma), -0.5 * sigma * sigma)
    return ad.mean(ad.where(a.data <= sigma, inner, outer))


def mae(pred, target) -> Tensor:
    return ad.mean(ad.abs_(_error(pred, target)))


def mse(pred, target) -> Tensor:
    return ad.mean(ad.square(_error(pred, target)))


def loss_fn(cfg: LossConfig):
    if cfg.kind == "m_loss":
        return lambda p, t: m_loss(p, t, cfg.sigma)
    if cfg.kind == "huber":
        return lambda p, t: huber(p, t, cfg.sigma)
    return mae if cfg.kind == "mae" else mse


def deep_supervised_loss(x_ci, x_cd, x_mix, target, cfg: LossConfig) -> tuple[Tensor, dict[str, Tensor]]:
    """Sum of per-head losses; only the mixed head when deep supervision is off.

    Returns the total and the component terms keyed ``ci``, ``cd``, ``mix``.
    """
    fn = loss_fn(cfg)
    l_mix = fn(x_mix, target)
    if not cfg.deep_supervision:
        return l_mix, {"mix": l_mix}
    w_ci, w_cd, w_mix = cfg.weights
    parts = {"ci": fn(x_ci, target), "cd": fn(x_cd, target), "mix": l_mix}
    total = ad.add(
        ad.add(ad.scale(parts["cd"], w_cd), ad.scale(parts["ci"], w_ci)),
        ad.scale(parts["mix"], w_mix),
    )
    return total, parts


def metrics(pred, target) -> dict[str, float]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"prediction shape {p.shape} != target shape {t.shape}")
    e = p - t
    return {"mse": float(np.mean(e * e)), "mae": float(np.mean(np.abs(e)))}
