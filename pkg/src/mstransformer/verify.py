"""Registered finite-difference checks run by ``mstransformer gradcheck``."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import autograd as ag
from .attention import (
    HeadParams,
    ScaleSpec,
    msa_standard,
    msmsa,
    multi_scale_attention,
    sasa_head,
)
from .autograd import Tensor
from .gradcheck import grad_check
from .model import (
    LayerContext,
    Model,
    ModelConfig,
    MSLayerParams,
    VanillaLayerParams,
    ms_transformer_layer,
    pair_features,
    sentence_representation,
    vanilla_transformer_layer,
)
from .planner import LayerPlan

TOLERANCE = 1e-4
SCOPES = ("ops", "attention", "layers", "model")


@dataclass
class CheckResult:
    name: str
    scope: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error <= TOLERANCE


_REGISTRY: list[tuple[str, str, Callable[[np.random.Generator], float]]] = []


def check(scope: str, name: str):
    def register(fn):
        _REGISTRY.append((scope, name, fn))
        return fn
    return register


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _scalar(out: Tensor, w: np.ndarray) -> Tensor:
    return ag.sum_all(ag.mul(out, Tensor(w)))


def _unary(op, shape=(3, 5)):
    def run(rng):
        x = _leaf(rng, *shape)
        x.data += np.arange(x.data.size).reshape(shape) * 0.05  # away from kinks and ties
        w = rng.standard_normal(op(x).shape)
        return grad_check(lambda: _scalar(op(x), w), [x])
    return run


for _name, _op in {
    "relu": ag.relu,
    "absolute": ag.absolute,
    "square": ag.square,
    "tanh": ag.tanh,
    "softmax_rows": ag.softmax_rows,
    "log_softmax_rows": ag.log_softmax_rows,
    "max_over_positions": ag.max_over_positions,
    "slice_rows": lambda x: ag.slice_rows(x, 1, 3),
    "take": lambda x: ag.take(x, -1, 1, 4),
    "select_row": lambda x: ag.select_row(x, 1),
    "transpose_last": ag.transpose_last,
    "reshape": lambda x: ag.reshape(x, (5, 3)),
    "concat_last": lambda x: ag.concat_last(x, ag.tanh(x)),
    "concat_rows": lambda x: ag.concat([x, ag.square(x)], axis=-2),
    "stack": lambda x: ag.stack([x, ag.relu(x)]),
    "mean_all": lambda x: ag.mul(ag.mean_all(x), Tensor(np.ones((1,)))),
    "dropout": lambda x: ag.dropout(x, 0.4, True, np.random.default_rng(3)),
}.items():
    check("ops", _name)(_unary(_op))


@check("ops", "softmax_rows_masked")
def _(rng):
    mask = rng.random((4, 6)) > 0.4
    mask[:, 2] = True
    x = _leaf(rng, 4, 6)
    w = rng.standard_normal((4, 6))
    return grad_check(lambda: _scalar(ag.softmax_rows(x, mask=mask), w), [x])


@check("ops", "matmul")
def _(rng):
    a, b = _leaf(rng, 5, 4), _leaf(rng, 4, 3)
    w = rng.standard_normal((5, 3))
    return grad_check(lambda: _scalar(ag.matmul(a, b), w), [a, b])


@check("ops", "matmul_batched")
def _(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 5)
    w = rng.standard_normal((2, 3, 5))
    return grad_check(lambda: _scalar(ag.matmul(a, b), w), [a, b])


@check("ops", "add_sub_mul_broadcast")
def _(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4)
    w = rng.standard_normal((2, 3, 4))
    return max(grad_check(lambda: _scalar(op(a, b), w), [a, b]) for op in (ag.add, ag.sub, ag.mul))


@check("ops", "layer_norm")
def _(rng):
    x, g, b = _leaf(rng, 4, 6), _leaf(rng, 6), _leaf(rng, 6)
    w = rng.standard_normal((4, 6))
    return grad_check(lambda: _scalar(ag.layer_norm(x, g, b), w), [x, g, b])


@check("ops", "gather_rows")
def _(rng):
    table = _leaf(rng, 6, 3)
    idx = np.array([[0, 2, 2, 5], [1, 1, 4, 0]])
    w = rng.standard_normal((2, 4, 3))
    return grad_check(lambda: _scalar(ag.gather_rows(table, idx), w), [table])


@check("ops", "mse_loss")
def _(rng):
    x = _leaf(rng, 4, 3)
    t = rng.standard_normal((4, 3))
    return grad_check(lambda: ag.mse_loss(x, t), [x])


@check("ops", "cross_entropy")
def _(rng):
    x = _leaf(rng, 5, 4)
    return grad_check(lambda: ag.cross_entropy(x, np.array([0, 3, 1, 1, 2])), [x])


@check("ops", "softmax_matmul_chain")
def _(rng):
    a, b = _leaf(rng, 4, 5), _leaf(rng, 5, 6)
    w = rng.standard_normal((4, 6))
    return grad_check(lambda: _scalar(ag.softmax_rows(ag.matmul(a, b)), w), [a, b])


# -- attention -----------------------------------------------------------------

def _head(rng, d, dh):
    return HeadParams(_leaf(rng, d, dh, scale=0.5), _leaf(rng, d, dh, scale=0.5),
                      _leaf(rng, d, dh, scale=0.5))


def _head_leaves(heads):
    return [t for hp in heads for t in (hp.wq, hp.wk, hp.wv)]


@check("attention", "sasa_head")
def _(rng):
    h, hp = _leaf(rng, 7, 6), _head(rng, 6, 4)
    w = rng.standard_normal((7, 4))
    return grad_check(lambda: _scalar(sasa_head(h, hp, 3), w), [h, hp.wq, hp.wk, hp.wv])


@check("attention", "msmsa_two_heads")
def _(rng):
    h = _leaf(rng, 6, 8)
    heads = [_head(rng, 8, 4), _head(rng, 8, 4)]
    wo = _leaf(rng, 8, 8, scale=0.5)
    spec = [ScaleSpec.fixed(3), ScaleSpec.ratio(2)]
    w = rng.standard_normal((6, 8))
    f = lambda: _scalar(msmsa(h, list(zip(heads, spec)), wo), w)
    return grad_check(f, [h, wo] + _head_leaves(heads))


@check("attention", "msa_standard")
def _(rng):
    h = _leaf(rng, 5, 6)
    heads = [_head(rng, 6, 3), _head(rng, 6, 3)]
    wo = _leaf(rng, 6, 6, scale=0.5)
    w = rng.standard_normal((5, 6))
    return grad_check(lambda: _scalar(msa_standard(h, heads, wo), w), [h, wo] + _head_leaves(heads))


def _multi_scale(method):
    def run(rng):
        h = _leaf(rng, 2, 9, 6)
        wq, wk, wv = (_leaf(rng, 3, 6, 4, scale=0.5) for _ in range(3))
        widths = [1, 3, 5]
        w = rng.standard_normal((2, 9, 12))
        f = lambda: _scalar(multi_scale_attention(h, wq, wk, wv, widths, method=method)[0], w)
        return grad_check(f, [h, wq, wk, wv])
    return run


check("attention", "multi_scale_band_kernel")(_multi_scale("band"))
check("attention", "multi_scale_dense_kernel")(_multi_scale("dense"))


# -- layers --------------------------------------------------------------------

def ms_layer_fixture(rng, d=12, dh=4, allocation=((ScaleSpec.fixed(1), 1), (ScaleSpec.fixed(3), 1),
                                                   (ScaleSpec.ratio(2), 1))):
    groups = [(spec, _leaf(rng, c, d, dh, scale=0.5), _leaf(rng, c, d, dh, scale=0.5),
               _leaf(rng, c, d, dh, scale=0.5)) for spec, c in allocation]
    heads = sum(c for _, c in allocation)
    params = MSLayerParams(groups, _leaf(rng, heads * dh, d, scale=0.5),
                           Tensor(1.0 + 0.1 * rng.standard_normal(d), requires_grad=True),
                           Tensor(0.1 * rng.standard_normal(d), requires_grad=True))
    return LayerPlan(1, list(allocation)), params


def _ms_layer_leaves(params):
    return [t for g in params.groups for t in g[1:]] + [params.wo, params.ln_gain, params.ln_bias]


@check("layers", "ms_transformer_layer")
def _(rng):
    h = _leaf(rng, 7, 12)
    plan, params = ms_layer_fixture(rng)
    w = rng.standard_normal((7, 12))
    return grad_check(lambda: _scalar(ms_transformer_layer(h, plan, params), w),
                      [h] + _ms_layer_leaves(params))


@check("layers", "ms_transformer_layer_dropout")
def _(rng):
    h = _leaf(rng, 2, 7, 12)
    plan, params = ms_layer_fixture(rng)
    w = rng.standard_normal((2, 7, 12))

    def f():
        ctx = LayerContext(training=True, rng=np.random.default_rng(5), dropout=0.3)
        return _scalar(ms_transformer_layer(h, plan, params, ctx), w)

    return grad_check(f, [h] + _ms_layer_leaves(params))


@check("layers", "vanilla_transformer_layer")
def _(rng):
    d, dh, nh = 8, 4, 2
    h = _leaf(rng, 6, d)
    params = VanillaLayerParams(
        _leaf(rng, nh, d, dh, scale=0.5), _leaf(rng, nh, d, dh, scale=0.5),
        _leaf(rng, nh, d, dh, scale=0.5), _leaf(rng, nh * dh, d, scale=0.5),
        _leaf(rng, d), _leaf(rng, d),
        (_leaf(rng, d, 4 * d, scale=0.3), _leaf(rng, 4 * d), _leaf(rng, 4 * d, d, scale=0.3), _leaf(rng, d)),
        _leaf(rng, d), _leaf(rng, d),
    )
    leaves = [params.wq, params.wk, params.wv, params.wo, params.ln1_gain, params.ln1_bias,
              *params.ffn, params.ln2_gain, params.ln2_bias]
    w = rng.standard_normal((6, d))
    return grad_check(lambda: _scalar(vanilla_transformer_layer(h, params), w), [h] + leaves)


@check("layers", "sentence_and_pair_features")
def _(rng):
    a, b = _leaf(rng, 5, 4), _leaf(rng, 5, 4)
    w = rng.standard_normal(32)

    def f():
        ra = sentence_representation(a, True)
        rb = sentence_representation(b, True)
        return _scalar(pair_features(ra, rb), w)

    return grad_check(f, [a, b])


# -- whole models --------------------------------------------------------------

def _model_check(config: ModelConfig, inputs, target):
    def run(rng):
        model = Model(config, seed=int(rng.integers(1 << 31)))
        for p in model.parameters():  # non-zero biases and gains reach every code path
            p.data += 0.05 * rng.standard_normal(p.shape)

        def f():
            out = model.forward(inputs)
            if config.task == "regress":
                return ag.mse_loss(out, target)
            return ag.cross_entropy(out, target)

        return grad_check(f, model.parameters())
    return run


_TOKENS = np.array([[1, 4, 2, 7, 3, 0], [5, 5, 6, 1, 2, 3]])
check("model", "ms_classifier_end_to_end")(_model_check(
    ModelConfig(kind="ms", n_layers=2, n_heads=3, d_model=8, head_dim=3, alpha=0.5,
                scales="1,3,N/2", vocab_size=8, n_classes=3, mlp_hidden=6),
    _TOKENS, np.array([0, 2])))
check("model", "vanilla_classifier_end_to_end")(_model_check(
    ModelConfig(kind="vanilla", n_layers=1, n_heads=2, d_model=6, head_dim=3, vocab_size=8,
                use_positional=True, max_len=8, n_classes=2, mlp_hidden=5, ffn_mult=2),
    _TOKENS, np.array([1, 0])))
check("model", "ms_pair_end_to_end")(_model_check(
    ModelConfig(kind="ms", n_layers=1, n_heads=2, d_model=6, head_dim=3, scales="3,N/2",
                vocab_size=8, task="pair", n_classes=3, mlp_hidden=5),
    (_TOKENS[:, :4], _TOKENS[:, 2:]), np.array([2, 1])))
check("model", "ms_regression_end_to_end")(_model_check(
    ModelConfig(kind="ms", n_layers=2, n_heads=2, d_model=6, head_dim=3, scales="3,N/4",
                input_dim=3, task="regress", out_dim=3),
    np.random.default_rng(0).random((2, 7, 3)), np.random.default_rng(1).random((2, 3))))


def registered(scope: str = "all") -> list[tuple[str, str, Callable]]:
    if scope != "all" and scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; choose from all, {', '.join(SCOPES)}")
    return [r for r in _REGISTRY if scope == "all" or r[0] == scope]


def run_suite(scope: str = "all", seed: int = 0) -> Iterator[CheckResult]:
    for i, (sc, name, fn) in enumerate(registered(scope)):
        t0 = time.perf_counter()
        err = float(fn(np.random.default_rng([seed, i])))
        yield CheckResult(name, sc, err, time.perf_counter() - t0)
