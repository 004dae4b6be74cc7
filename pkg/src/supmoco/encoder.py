"""MLP backbone + projection head, and the query/key encoder pair.

The backbone ``g`` is a stack of ``affine -> relu`` hidden layers followed by
a final linear layer to ``backbone_out``. The projection head ``h`` is
``affine -> relu -> affine``. Training embeddings are
``normalize(h(g(x)))``; evaluation embeddings drop the head and are
``normalize(g(x))``.

Weights are drawn uniform in ``[-sqrt(6/fan_in), sqrt(6/fan_in)]``; biases
start at zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import DimensionError, Tensor, affine, l2_normalize, no_record, relu


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 32
    backbone_hidden: tuple[int, ...] = (128,)
    backbone_out: int = 64
    proj_hidden: int = 512
    proj_out: int = 128

    def __post_init__(self):
        dims = (self.input_dim, *self.backbone_hidden, self.backbone_out, self.proj_hidden, self.proj_out)
        if any(int(d) <= 0 for d in dims):
            raise ValueError(f"encoder dimensions must be positive, got {dims}")
        object.__setattr__(self, "backbone_hidden", tuple(int(d) for d in self.backbone_hidden))

    @property
    def embedding_dim(self) -> int:
        return self.proj_out


@dataclass
class EncoderParams:
    """Backbone layers ``[(W, b), ...]`` and head layers ``[(W1, b1), (W2, b2)]``."""

    backbone: list[tuple[Tensor, Tensor]]
    head: list[tuple[Tensor, Tensor]]

    def tensors(self) -> list[Tensor]:
        return [t for layer in (*self.backbone, *self.head) for t in layer]

    def backbone_tensors(self) -> list[Tensor]:
        return [t for layer in self.backbone for t in layer]

    def named(self) -> list[tuple[str, Tensor]]:
        out = []
        for part, layers in (("backbone", self.backbone), ("head", self.head)):
            for i, (W, b) in enumerate(layers):
                out.append((f"{part}.{i}.W", W))
                out.append((f"{part}.{i}.b", b))
        return out

    def clone(self, requires_grad: bool | None = None) -> "EncoderParams":
        def cp(t: Tensor) -> Tensor:
            return Tensor(t.values.copy(), t.requires_grad if requires_grad is None else requires_grad)

        return EncoderParams(
            [(cp(W), cp(b)) for W, b in self.backbone],
            [(cp(W), cp(b)) for W, b in self.head],
        )


@dataclass
class EncoderPair:
    query: EncoderParams
    key: EncoderParams
    momentum: float = 0.999
    config: EncoderConfig = field(default_factory=EncoderConfig)


def _layer(fan_out: int, fan_in: int, rng: np.random.Generator, requires_grad: bool):
    bound = np.sqrt(6.0 / fan_in)
    W = Tensor(rng.uniform(-bound, bound, size=(fan_out, fan_in)), requires_grad)
    b = Tensor(np.zeros(fan_out), requires_grad)
    return W, b


def init_params(config: EncoderConfig, rng: np.random.Generator, requires_grad: bool = True) -> EncoderParams:
    widths = [config.input_dim, *config.backbone_hidden, config.backbone_out]
    backbone = [_layer(o, i, rng, requires_grad) for i, o in zip(widths[:-1], widths[1:])]
    head = [
        _layer(config.proj_hidden, config.backbone_out, rng, requires_grad),
        _layer(config.proj_out, config.proj_hidden, rng, requires_grad),
    ]
    return EncoderParams(backbone, head)


def init_pair(config: EncoderConfig, rng: np.random.Generator, momentum: float = 0.999) -> EncoderPair:
    """Random query encoder plus a bit-identical key copy (which never tracks grads)."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
    query = init_params(config, rng, requires_grad=True)
    return EncoderPair(query, query.clone(requires_grad=False), float(momentum), config)


def backbone_forward(params: EncoderParams, x: Tensor) -> Tensor:
    h = x
    last = len(params.backbone) - 1
    for i, (W, b) in enumerate(params.backbone):
        h = affine(W, b, h)
        if i < last:
            h = relu(h)
    return h


def _embed(params: EncoderParams, x: Tensor, include_head: bool) -> Tensor:
    h = backbone_forward(params, x)
    if include_head:
        (W1, b1), (W2, b2) = params.head
        h = affine(W2, b2, relu(affine(W1, b1, h)))
    return l2_normalize(h)


def embed(params: EncoderParams, x, include_head: bool = True, track_grad: bool = True) -> Tensor:
    """Unit-norm embedding of one input vector or each row of an input matrix.

    ``track_grad=False`` computes the same values without touching the
    active tape.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    expected = params.backbone[0][0].shape[1]
    if x.shape[-1] != expected:
        raise DimensionError(f"embed: input dim {x.shape[-1]} != {expected}")
    if track_grad:
        return _embed(params, x, include_head)
    with no_record():
        return _embed(params, x, include_head)


def momentum_update(pair: EncoderPair) -> None:
    """``key <- m * key + (1 - m) * query`` for every parameter, in place."""
    m = pair.momentum
    for tk, tq in zip(pair.key.tensors(), pair.query.tensors(), strict=True):
        tk.values = m * tk.values + (1.0 - m) * tq.values
