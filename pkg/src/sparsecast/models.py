"""The two forecaster families: InformerLite and MLinear.

Inputs are ``(..., L, n)`` arrays or tensors (optional batch axis first).
Both models return horizons shaped ``(..., S, n)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig, OpCounters, efficient_attention, full_attention, prob_sparse_attention
from .autodiff import DimensionError, Tensor
from .memory import AttentionIndexMemory

__all__ = [
    "ModelConfig",
    "ForwardContext",
    "Module",
    "Linear",
    "InformerLite",
    "MLinear",
    "build_model",
    "make_decoder_input",
    "positional_encoding",
]

MODEL_KINDS = ("informer_lite", "mlinear")
MAPPING_KINDS = ("sequence_mix", "feature_mix")
MODES = ("train", "recompute", "predict")


@dataclass
class ModelConfig:
    model: str = "mlinear"
    L: int = 96
    S: int = 24
    n_channels: int = 1
    # InformerLite
    d_model: int = 16
    n_heads: int = 2
    label_len: int = 0  # 0 means L // 2
    u_factor: float = 5.0
    sample_factor: float = 5.0
    attention: str = "prophet"  # "full" builds the dense twin
    aggregation_mode: str = "frequency"
    warmup_epochs: int = 1
    # MLinear
    P: int = 8
    mapping_kind: str = "sequence_mix"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.mapping_kind not in MAPPING_KINDS:
            raise ValueError(f"mapping_kind must be one of {MAPPING_KINDS}, got {self.mapping_kind!r}")
        if self.attention not in ("prophet", "full"):
            raise ValueError(f"attention must be 'prophet' or 'full', got {self.attention!r}")
        for name in ("L", "S", "n_channels", "d_model", "n_heads", "P"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0 <= self.label_len <= self.L:
            raise ValueError(f"label_len must lie in [0, L], got {self.label_len}")

    @property
    def decoder_label_len(self) -> int:
        return self.label_len or self.L // 2

    @property
    def d_k(self) -> int:
        return max(1, self.S // self.P)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardContext:
    """Per-pass state threaded through the attention sites.

    ``mode``: ``train`` measures and records indices, ``recompute``
    measures without recording, ``predict`` reuses frozen memory.
    """

    mode: str = "train"
    memory: AttentionIndexMemory | None = None
    counters: OpCounters = field(default_factory=OpCounters)
    rng: np.random.Generator | None = None
    epoch: int = 0
    iteration: int = 0
    record: bool = True
    used_indices: dict[tuple[int, int], list[int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.rng is None:
            self.rng = np.random.default_rng(0)


class Module:
    """Minimal parameter container: attributes holding tensors or sub-modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: stored shape {arr.shape} != parameter shape {p.shape}")
            p.data[...] = arr


def _init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _init(rng, d_in, (d_in, d_out))
        self.bias = _init(rng, d_in, (d_out,)) if bias else None

    def __call__(self, x) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else ad.add(y, self.bias)


def positional_encoding(length: int, d: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def make_decoder_input(enc_in, label_len: int, horizon: int) -> Tensor:
    """Last ``label_len`` known steps followed by ``horizon`` zero placeholders."""
    enc_in = ad.as_tensor(enc_in)
    L = enc_in.shape[-2]
    known = ad.gather_rows(enc_in, np.arange(L - label_len, L))
    zeros = np.zeros(enc_in.shape[:-2] + (horizon, enc_in.shape[-1]))
    return ad.concat([known, zeros], axis=-2)


# ---------------------------------------------------------------- InformerLite


class _Heads(Module):
    """Per-head query/key/value projections plus the output projection."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        dh = d_model // n_heads
        self.q = [Linear(d_model, dh, rng) for _ in range(n_heads)]
        self.k = [Linear(d_model, dh, rng) for _ in range(n_heads)]
        self.v = [Linear(d_model, dh, rng) for _ in range(n_heads)]
        self.out = Linear(d_model, d_model, rng)


class ProphetSelfAttention(Module):
    """Multi-head self-attention whose heads are Top-u sparse sites."""

    def __init__(self, cfg: ModelConfig, layer_id: int, causal: bool, rng: np.random.Generator):
        self.layer_id = layer_id
        self.causal = causal
        self.dense = cfg.attention == "full"
        self.att_cfg = AttentionConfig(
            d=cfg.d_model // cfg.n_heads,
            u_factor=cfg.u_factor,
            sample_factor=cfg.sample_factor,
            causal=causal,
            seed=cfg.seed,
        )
        self.proj = _Heads(cfg.d_model, cfg.n_heads, rng)

    def _reuse(self, ctx: ForwardContext, head: int) -> list[int]:
        mem = ctx.memory
        if mem is None or not mem.frozen:
            raise RuntimeError("predict mode requires a frozen AttentionIndexMemory")
        key = (self.layer_id, head)
        if key not in mem:
            raise KeyError(f"memory has no entry for attention site (layer={key[0]}, head={key[1]})")
        return mem.aggregate(*key)

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        outs = []
        for h in range(len(self.proj.q)):
            q, k, v = self.proj.q[h](x), self.proj.k[h](x), self.proj.v[h](x)
            if self.dense:
                outs.append(full_attention(q, k, v, causal=self.causal, counters=ctx.counters))
                continue
            reuse = self._reuse(ctx, h) if ctx.mode == "predict" else None
            out, idx = prob_sparse_attention(
                q, k, v, self.att_cfg, reuse_indices=reuse, counters=ctx.counters, rng=ctx.rng
            )
            ctx.used_indices[(self.layer_id, h)] = idx
            if ctx.mode == "train" and ctx.record and ctx.memory is not None:
                ctx.memory.record(self.layer_id, h, ctx.epoch, ctx.iteration, idx, length=q.shape[-2])
            outs.append(out)
        return self.proj.out(ad.concat(outs, axis=-1))


class CrossAttention(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.proj = _Heads(cfg.d_model, cfg.n_heads, rng)

    def __call__(self, x: Tensor, memory: Tensor, ctx: ForwardContext) -> Tensor:
        outs = [
            full_attention(self.proj.q[h](x), self.proj.k[h](memory), self.proj.v[h](memory),
                           counters=ctx.counters)
            for h in range(len(self.proj.q))
        ]
        return self.proj.out(ad.concat(outs, axis=-1))


class FeedForward(Module):
    def __init__(self, d_model: int, rng: np.random.Generator):
        self.up = Linear(d_model, 4 * d_model, rng)
        self.down = Linear(4 * d_model, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ad.gelu(self.up(x)))


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, layer_id: int, rng: np.random.Generator):
        self.attn = ProphetSelfAttention(cfg, layer_id, causal=False, rng=rng)
        self.ff = FeedForward(cfg.d_model, rng)

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        x = ad.add(x, self.attn(x, ctx))
        return ad.add(x, self.ff(x))


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, layer_id: int, rng: np.random.Generator):
        self.self_attn = ProphetSelfAttention(cfg, layer_id, causal=True, rng=rng)
        self.cross = CrossAttention(cfg, rng)
        self.ff = FeedForward(cfg.d_model, rng)

    def __call__(self, y: Tensor, enc: Tensor, ctx: ForwardContext) -> Tensor:
        y = ad.add(y, self.self_attn(y, ctx))
        y = ad.add(y, self.cross(y, enc, ctx))
        return ad.add(y, self.ff(y))


class InformerLite(Module):
    """Two sparse-attention encoder layers and one decoder layer.

    Attention sites are numbered 0 and 1 (encoder) and 2 (decoder
    self-attention); cross-attention is dense and not a memory site.
    """

    n_sites = 3

    def __init__(self, cfg: ModelConfig):
        if cfg.model != "informer_lite":
            raise ValueError("InformerLite needs cfg.model == 'informer_lite'")
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        self.cfg = cfg
        self.input_projection = Linear(cfg.n_channels, cfg.d_model, rng)
        self.encoder_layers = [EncoderLayer(cfg, i, rng) for i in range(2)]
        self.decoder_layer = DecoderLayer(cfg, 2, rng)
        self.output_projection = Linear(cfg.d_model, cfg.n_channels, rng)

    def _embed(self, x: Tensor) -> Tensor:
        pe = positional_encoding(x.shape[-2], self.cfg.d_model)
        return ad.add(self.input_projection(x), pe)

    def forward(self, enc_in, ctx: ForwardContext, dec_in=None) -> Tensor:
        cfg = self.cfg
        enc_in = ad.as_tensor(enc_in)
        if enc_in.shape[-2:] != (cfg.L, cfg.n_channels):
            raise DimensionError(f"encoder input {enc_in.shape} does not end with ({cfg.L}, {cfg.n_channels})")
        if dec_in is None:
            dec_in = make_decoder_input(enc_in, cfg.decoder_label_len, cfg.S)
        dec_in = ad.as_tensor(dec_in)
        x = self._embed(enc_in)
        for layer in self.encoder_layers:
            x = layer(x, ctx)
        y = self.decoder_layer(self._embed(dec_in), x, ctx)
        out = self.output_projection(y)
        n = out.shape[-2]
        return ad.gather_rows(out, np.arange(n - cfg.S, n))

    __call__ = forward


# ----------------------------------------------------------------------- MLinear


class MLinear(Module):
    """CI and CD linear heads mixed through attention-modulated concatenation.

    ``forward`` returns ``(x_ci, x_cd, x_mix)``; only ``x_mix`` is the
    forecast, the other two exist for deep supervision.
    """

    def __init__(self, cfg: ModelConfig):
        if cfg.model != "mlinear":
            raise ValueError("MLinear needs cfg.model == 'mlinear'")
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
        L, S, n, dk = cfg.L, cfg.S, cfg.n_channels, cfg.d_k
        self.cfg = cfg
        self.ci_weights = _init(rng, L, (n, L, S))
        self.cd_weight = _init(rng, L, (L, S))
        if cfg.mapping_kind == "sequence_mix":
            self.rho_q = _init(rng, 2 * S, (dk, 2 * S))
            self.rho_k = _init(rng, 2 * S, (dk, 2 * S))
            self.rho_v = _init(rng, 2 * S, (2, 2 * S))
        else:
            self.rho_q = _init(rng, n, (n, dk))
            self.rho_k = _init(rng, n, (n, dk))
            self.rho_v = _init(rng, n, (n, 2))
        self.mix_weight = _init(rng, 2 * S, (2 * S, S))
        self.counters = OpCounters()

    def _check(self, X: Tensor) -> None:
        if X.ndim < 2 or X.shape[-2] != self.cfg.L:
            raise DimensionError(f"input {X.shape} must end with ({self.cfg.L}, n)")
        if X.shape[-1] != self.cfg.n_channels:
            raise DimensionError(f"input has {X.shape[-1]} channels, model expects {self.cfg.n_channels}")

    def ci_forward(self, X) -> Tensor:
        X = ad.as_tensor(X)
        self._check(X)
        lead = X.shape[:-2]
        n, L, S = self.cfg.n_channels, self.cfg.L, self.cfg.S
        cols = ad.reshape(ad.transpose(X), lead + (n, 1, L))
        out = ad.matmul(cols, self.ci_weights)  # (..., n, 1, S)
        return ad.transpose(ad.reshape(out, lead + (n, S)))

    def cd_forward(self, X) -> Tensor:
        X = ad.as_tensor(X)
        self._check(X)
        return ad.matmul(ad.transpose(self.cd_weight), X)

    def _gate(self, Z: Tensor) -> Tensor:
        S = self.cfg.S
        if self.cfg.mapping_kind == "sequence_mix":
            q = ad.matmul(self.rho_q, Z)
            k = ad.matmul(self.rho_k, Z)
            v = ad.matmul(self.rho_v, Z)
            context = efficient_attention(q, k, v, self.counters)  # (..., 2, n)
            return ad.gather_rows(context, np.repeat([0, 1], S))
        q = ad.transpose(ad.matmul(Z, self.rho_q))
        k = ad.transpose(ad.matmul(Z, self.rho_k))
        v = ad.transpose(ad.matmul(Z, self.rho_v))
        context = efficient_attention(q, k, v, self.counters)  # (..., 2, 2S)
        head = np.zeros((2 * S, 2))
        head[:S, 0] = 1.0
        head[S:, 1] = 1.0
        return ad.sum_(ad.mul(ad.transpose(context), head), axis=-1, keepdims=True)

    def mix_forward(self, x_ci, x_cd) -> Tensor:
        x_ci, x_cd = ad.as_tensor(x_ci), ad.as_tensor(x_cd)
        if x_ci.shape != x_cd.shape:
            raise DimensionError(f"CI head {x_ci.shape} and CD head {x_cd.shape} differ")
        if x_ci.shape[-2] != self.cfg.S:
            raise DimensionError(f"heads must have {self.cfg.S} rows, got {x_ci.shape}")
        Z = ad.concat([x_ci, x_cd], axis=-2)
        modulated = ad.add(Z, ad.mul(Z, self._gate(Z)))
        return ad.matmul(ad.transpose(self.mix_weight), modulated)

    def forward(self, X) -> tuple[Tensor, Tensor, Tensor]:
        x_ci = self.ci_forward(X)
        x_cd = self.cd_forward(X)
        return x_ci, x_cd, self.mix_forward(x_ci, x_cd)

    __call__ = forward

    def predict(self, X) -> Tensor:
        return self.forward(X)[2]


def build_model(cfg: ModelConfig) -> InformerLite | MLinear:
    return InformerLite(cfg) if cfg.model == "informer_lite" else MLinear(cfg)
