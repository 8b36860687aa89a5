"""Encoder stacks (multi-scale and vanilla), sentence/pair features, task heads."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .attention import (
    ScaleSpec,
    full_attention,
    merge_heads,
    multi_scale_attention,
    parse_scales,
    project_heads,
    resolve_scale,
)
from .autograd import Tensor
from .planner import LayerPlan, plan_scales
from .serialize import load_tensors, save_tensors

CHECKPOINT_FORMAT = "mstransformer-checkpoint/1"


@dataclass
class ModelConfig:
    """Architecture description.

    ``kind`` is ``"ms"`` (multi-scale, no FFN) or ``"vanilla"``. Inputs are
    either token ids (``vocab_size > 0``) or real vectors of ``input_dim``.
    ``task`` selects the head: ``classify`` (two-layer MLP), ``regress``
    (linear) or ``pair`` (MLP over pair features of two sentences).
    """

    kind: str = "ms"
    n_layers: int = 2
    n_heads: int = 10
    d_model: int = 40
    head_dim: int = 8
    alpha: float = 0.0
    scales: str = "3,N/16,N/8,N/4,N/2"
    use_cls: bool = True
    use_positional: bool = False
    max_len: int = 512
    dropout: float = 0.0
    vocab_size: int = 0
    input_dim: int = 0
    ffn: bool = True
    ffn_mult: int = 4
    attn_activation: str = "none"
    task: str = "classify"
    n_classes: int = 2
    mlp_hidden: int = 64
    out_dim: int = 1
    ln_eps: float = 1e-5
    dtype: str = "float64"

    def __post_init__(self):
        if self.kind not in ("ms", "vanilla"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.n_layers < 1 or self.n_heads < 1 or self.d_model < 1 or self.head_dim < 1:
            raise ValueError("layers, heads and dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if (self.vocab_size > 0) == (self.input_dim > 0):
            raise ValueError("set exactly one of vocab_size (tokens) or input_dim (vectors)")
        if self.task not in ("classify", "regress", "pair"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.attn_activation not in ("none", "relu"):
            raise ValueError("attn_activation must be 'none' or 'relu'")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")
        self.candidates()  # validates scale syntax

    def candidates(self) -> list[ScaleSpec]:
        return parse_scales(self.scales)

    def plans(self) -> list[LayerPlan]:
        return plan_scales(self.alpha, self.n_layers, self.n_heads, self.candidates())

    @property
    def rep_dim(self) -> int:
        return 2 * self.d_model if self.use_cls else self.d_model

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class MSLayerParams:
    """One multi-scale layer: stacked projections per active scale group."""

    groups: list[tuple[ScaleSpec, Tensor, Tensor, Tensor]]
    wo: Tensor
    ln_gain: Tensor
    ln_bias: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, (_, wq, wk, wv) in enumerate(self.groups):
            out[f"{prefix}.g{i}.wq"] = wq
            out[f"{prefix}.g{i}.wk"] = wk
            out[f"{prefix}.g{i}.wv"] = wv
        out[f"{prefix}.wo"] = self.wo
        out[f"{prefix}.ln.gain"] = self.ln_gain
        out[f"{prefix}.ln.bias"] = self.ln_bias
        return out


@dataclass
class VanillaLayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ffn: Optional[tuple[Tensor, Tensor, Tensor, Tensor]] = None
    ln2_gain: Optional[Tensor] = None
    ln2_bias: Optional[Tensor] = None

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {
            f"{prefix}.wq": self.wq,
            f"{prefix}.wk": self.wk,
            f"{prefix}.wv": self.wv,
            f"{prefix}.wo": self.wo,
            f"{prefix}.ln1.gain": self.ln1_gain,
            f"{prefix}.ln1.bias": self.ln1_bias,
        }
        if self.ffn is not None:
            for key, t in zip(("w1", "b1", "w2", "b2"), self.ffn):
                out[f"{prefix}.ffn.{key}"] = t
            out[f"{prefix}.ln2.gain"] = self.ln2_gain
            out[f"{prefix}.ln2.bias"] = self.ln2_bias
        return out


@dataclass
class LayerContext:
    """Per-forward switches threaded through the layers."""

    training: bool = False
    rng: Optional[np.random.Generator] = None
    dropout: float = 0.0
    retain: bool = False
    maps: list = field(default_factory=list)


# -- layers --------------------------------------------------------------------

def ms_transformer_layer(h: Tensor, plan: LayerPlan, params: MSLayerParams,
                         ctx: Optional[LayerContext] = None, eps: float = 1e-5) -> Tensor:
    """``layer_norm(H + ReLU(MSMSA(H)))``; there is no feed-forward sublayer."""
    ctx = ctx or LayerContext()
    if plan.total_heads * params.groups[0][1].shape[-1] != params.wo.shape[0]:
        raise ag.ShapeError("layer plan head count does not match the output projection")
    if h.shape[-1] != params.wo.shape[1]:
        raise ag.ShapeError(f"layer expects width {params.wo.shape[1]}, got input {h.shape}")
    n = h.shape[-2]
    widths = [resolve_scale(spec, n) for spec, wq, _, _ in params.groups for _ in range(wq.shape[0])]
    if len(params.groups) == 1:
        _, wq, wk, wv = params.groups[0]
    else:
        wq, wk, wv = (ag.concat([g[i] for g in params.groups], axis=0) for i in (1, 2, 3))
    merged, maps = multi_scale_attention(h, wq, wk, wv, widths, ctx.retain)
    if ctx.retain:
        ctx.maps.append(maps)
    y = ag.matmul(merged, params.wo)
    y = ag.dropout(ag.relu(y), ctx.dropout, ctx.training, ctx.rng)
    return ag.layer_norm(ag.add(h, y), params.ln_gain, params.ln_bias, eps)


def vanilla_transformer_layer(h: Tensor, params: VanillaLayerParams,
                              ctx: Optional[LayerContext] = None, eps: float = 1e-5,
                              attn_activation: str = "none") -> Tensor:
    """``Z = norm(H + MSA(H))``; ``H' = norm(Z + FFN(Z))`` when an FFN is present."""
    ctx = ctx or LayerContext()
    if h.shape[-1] != params.wq.shape[1]:
        raise ag.ShapeError(f"layer expects width {params.wq.shape[1]}, got input {h.shape}")
    q, k, v = (project_heads(h, w) for w in (params.wq, params.wk, params.wv))
    out, attn = full_attention(q, k, v, ctx.retain)
    if ctx.retain:
        ctx.maps.append(attn)
    y = ag.matmul(merge_heads(out), params.wo)
    if attn_activation == "relu":
        y = ag.relu(y)
    y = ag.dropout(y, ctx.dropout, ctx.training, ctx.rng)
    z = ag.layer_norm(ag.add(h, y), params.ln1_gain, params.ln1_bias, eps)
    if params.ffn is None:
        return z
    w1, b1, w2, b2 = params.ffn
    f = ag.add(ag.matmul(ag.relu(ag.add(ag.matmul(z, w1), b1)), w2), b2)
    f = ag.dropout(f, ctx.dropout, ctx.training, ctx.rng)
    return ag.layer_norm(ag.add(z, f), params.ln2_gain, params.ln2_bias, eps)


# -- representations -----------------------------------------------------------

def sentence_representation(h_top: Tensor, use_cls: bool) -> Tensor:
    """CLS row joined with a max-pool over all rows (CLS included), or max-pool alone."""
    if h_top.shape[-2] < 1:
        raise ag.ShapeError("empty encoder output")
    pooled = ag.max_over_positions(h_top)
    if not use_cls:
        return pooled
    return ag.concat_last(ag.select_row(h_top, 0), pooled)


def pair_features(r1: Tensor, r2: Tensor) -> Tensor:
    """``[r1, r2, |r1 - r2|, r1 - r2]`` with an elementwise absolute difference."""
    if r1.shape != r2.shape:
        raise ag.ShapeError(f"pair_features: {r1.shape} vs {r2.shape}")
    diff = ag.sub(r1, r2)
    return ag.concat_last(r1, r2, ag.absolute(diff), diff)


# -- the model -----------------------------------------------------------------

def _uniform(rng, bound, shape, dtype):
    return ag.parameter(rng.uniform(-bound, bound, shape), dtype=dtype)


class Model:
    """Parameters plus the forward pass for one :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        c, dt = config, config.np_dtype
        d, dh, nh = c.d_model, c.head_dim, c.n_heads
        proj = 1.0 / math.sqrt(d)
        self.plans = c.plans() if c.kind == "ms" else []

        if c.vocab_size > 0:
            self.embed = _uniform(rng, 0.1, (c.vocab_size, d), dt)
        else:
            self.embed = _uniform(rng, 1.0 / math.sqrt(c.input_dim), (c.input_dim, d), dt)
        self.embed_bias = None if c.vocab_size > 0 else ag.parameter(np.zeros(d), dtype=dt)
        self.cls = _uniform(rng, 0.1, (d,), dt) if c.use_cls else None
        self.pos = _uniform(rng, 0.1, (c.max_len, d), dt) if c.use_positional else None

        self.layers: list = []
        for li in range(c.n_layers):
            if c.kind == "ms":
                groups = []
                for spec, count in self.plans[li].active():
                    groups.append(
                        (spec,) + tuple(_uniform(rng, proj, (count, d, dh), dt) for _ in range(3))
                    )
                self.layers.append(
                    MSLayerParams(
                        groups,
                        _uniform(rng, 1.0 / math.sqrt(nh * dh), (nh * dh, d), dt),
                        ag.parameter(np.ones(d), dtype=dt),
                        ag.parameter(np.zeros(d), dtype=dt),
                    )
                )
            else:
                ffn = ln2g = ln2b = None
                if c.ffn:
                    hid = c.ffn_mult * d
                    ffn = (
                        _uniform(rng, proj, (d, hid), dt),
                        ag.parameter(np.zeros(hid), dtype=dt),
                        _uniform(rng, 1.0 / math.sqrt(hid), (hid, d), dt),
                        ag.parameter(np.zeros(d), dtype=dt),
                    )
                    ln2g, ln2b = ag.parameter(np.ones(d), dtype=dt), ag.parameter(np.zeros(d), dtype=dt)
                self.layers.append(
                    VanillaLayerParams(
                        *(_uniform(rng, proj, (nh, d, dh), dt) for _ in range(3)),
                        _uniform(rng, 1.0 / math.sqrt(nh * dh), (nh * dh, d), dt),
                        ag.parameter(np.ones(d), dtype=dt),
                        ag.parameter(np.zeros(d), dtype=dt),
                        ffn,
                        ln2g,
                        ln2b,
                    )
                )

        rep = c.rep_dim * (4 if c.task == "pair" else 1)
        self.head: dict[str, Tensor] = {}
        if c.task == "regress":
            self.head["out.w"] = _uniform(rng, 1.0 / math.sqrt(rep), (rep, c.out_dim), dt)
            self.head["out.b"] = ag.parameter(np.zeros(c.out_dim), dtype=dt)
        else:
            self.head["mlp.w1"] = _uniform(rng, 1.0 / math.sqrt(rep), (rep, c.mlp_hidden), dt)
            self.head["mlp.b1"] = ag.parameter(np.zeros(c.mlp_hidden), dtype=dt)
            self.head["mlp.w2"] = _uniform(
                rng, 1.0 / math.sqrt(c.mlp_hidden), (c.mlp_hidden, c.n_classes), dt
            )
            self.head["mlp.b2"] = ag.parameter(np.zeros(c.n_classes), dtype=dt)
        self.dropout_rng = np.random.default_rng([seed, 1])

    # -- parameters --
    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embed": self.embed}
        if self.embed_bias is not None:
            out["embed.bias"] = self.embed_bias
        if self.cls is not None:
            out["cls"] = self.cls
        if self.pos is not None:
            out["pos"] = self.pos
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"layer{i + 1}"))
        out.update(self.head)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- forward --
    def embed_inputs(self, inputs) -> Tensor:
        c = self.config
        if c.vocab_size > 0:
            ids = np.asarray(inputs)
            if ids.ndim == 1:
                ids = ids[None, :]
            if ids.shape[-1] == 0:
                raise ValueError("cannot encode an empty sequence")
            if ids.min() < 0 or ids.max() >= c.vocab_size:
                raise ValueError(f"token id outside vocabulary of size {c.vocab_size}")
            x = ag.gather_rows(self.embed, ids)
        else:
            arr = np.asarray(inputs.data if isinstance(inputs, Tensor) else inputs,
                             dtype=c.np_dtype)
            if arr.ndim == 2:
                arr = arr[None]
            if arr.shape[-2] == 0:
                raise ValueError("cannot encode an empty sequence")
            if arr.shape[-1] != c.input_dim:
                raise ag.ShapeError(f"expected input vectors of width {c.input_dim}, got {arr.shape}")
            x = ag.add(ag.matmul(Tensor(arr), self.embed), self.embed_bias)
        if self.cls is not None:
            b = x.shape[0]
            cls_rows = ag.add(Tensor(np.zeros((b, 1, c.d_model), dtype=c.np_dtype)), self.cls)
            x = ag.concat([cls_rows, x], axis=-2)
        if self.pos is not None:
            n = x.shape[-2]
            if n > c.max_len:
                raise ValueError(f"sequence of {n} positions exceeds max_len {c.max_len}")
            x = ag.add(x, ag.slice_rows(self.pos, 0, n))
        return x

    def encode(self, inputs, training: bool = False, retain: bool = False):
        """Top-layer states ``(B, N [+1], D)`` and per-layer attention maps."""
        c = self.config
        ctx = LayerContext(training, self.dropout_rng, c.dropout, retain)
        h = ag.dropout(self.embed_inputs(inputs), c.dropout, training, self.dropout_rng)
        for li, layer in enumerate(self.layers):
            if c.kind == "ms":
                h = ms_transformer_layer(h, self.plans[li], layer, ctx, c.ln_eps)
            else:
                h = vanilla_transformer_layer(h, layer, ctx, c.ln_eps, c.attn_activation)
        return h, ctx.maps

    def represent(self, inputs, training: bool = False) -> Tensor:
        h, _ = self.encode(inputs, training)
        return sentence_representation(h, self.config.use_cls)

    def apply_head(self, rep: Tensor, training: bool = False) -> Tensor:
        c = self.config
        if c.task == "regress":
            return ag.add(ag.matmul(rep, self.head["out.w"]), self.head["out.b"])
        hid = ag.relu(ag.add(ag.matmul(rep, self.head["mlp.w1"]), self.head["mlp.b1"]))
        hid = ag.dropout(hid, c.dropout, training, self.dropout_rng)
        return ag.add(ag.matmul(hid, self.head["mlp.w2"]), self.head["mlp.b2"])

    def forward(self, inputs, training: bool = False) -> Tensor:
        if self.config.task == "pair":
            a, b = inputs
            rep = pair_features(self.represent(a, training), self.represent(b, training))
        else:
            rep = self.represent(inputs, training)
        return self.apply_head(rep, training)

    __call__ = forward

    # -- persistence --
    def save(self, directory) -> None:
        path = Path(directory)
        path.mkdir(parents=True, exist_ok=True)
        params = self.named_parameters()
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "seed": self.seed,
            "config": asdict(self.config),
            "parameters": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        save_tensors(path / "params.bin", {k: v.data for k, v in params.items()})

    @classmethod
    def load(cls, directory) -> "Model":
        path = Path(directory)
        manifest = json.loads((path / "manifest.json").read_text())
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
        model = cls(ModelConfig(**manifest["config"]), seed=manifest.get("seed", 0))
        tensors = load_tensors(path / "params.bin")
        params = model.named_parameters()
        listed = {p["name"]: tuple(p["shape"]) for p in manifest["parameters"]}
        if set(listed) != set(params) or set(tensors) != set(params):
            missing = set(params) ^ (set(listed) | set(tensors))
            raise ValueError(f"{path}: checkpoint does not match its config ({sorted(missing)})")
        for name, t in params.items():
            arr = tensors[name]
            if arr.shape != t.shape or listed[name] != t.shape:
                raise ValueError(f"{path}: shape mismatch for {name}: {arr.shape} vs {t.shape}")
            t.data = arr.astype(t.dtype, copy=False)
        return model


def hier_config(**overrides) -> ModelConfig:
    return ModelConfig(**{"scales": "3", "n_layers": 2, **overrides})


def flex_config(**overrides) -> ModelConfig:
    return ModelConfig(**{"scales": "3,N/16,N/8,N/4,N/2", "alpha": 0.0, **overrides})


def stack_scales(specs: Sequence[ScaleSpec]) -> str:
    return ",".join(str(s) for s in specs)
