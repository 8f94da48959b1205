"""Final embeddings, visit-probability head and the joint objective with exact gradients.

The objective for one step is::

    L_sim + L_pred + lambda2 * sum of squared trainable entries

``L_sim`` is the quintuplet loss (or a single-level triplet loss for the
ablation variants, or zero), ``L_pred`` is the binary cross-entropy of the
predicted visit probabilities over the included user/attraction pairs.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .attention import (
    POOLING_MODES,
    AttentionParams,
    StackLayout,
    init_attention,
    pool_entities,
    pool_entities_backward,
)
from .encoder import EncoderParams, Layer, _act, _act_grad, _forward, encode, encode_backward, init_encoder
from .metric import (
    LevelOrder,
    MarginSet,
    check_margins,
    quintuplet_loss_batch,
    quintuplet_loss_batch_backward,
    triplet_loss_batch,
    triplet_loss_batch_backward,
)
from .wmf import LatentFactors

VARIANTS = ("MEAL", "no-visual-similarity", "U", "L", "U/L", "U&L")
HEADS = ("linear", "mlp")
PROB_EPS = 1e-12


@dataclass
class TrainingConfig:
    variant: str = "MEAL"
    pooling: str = "attention"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 0  # users per step; 0 = all users
    epochs: int = 50
    seed: int = 0
    neg_ratio: float = 0.0  # sampled negatives per positive in L_pred; 0 = all pairs
    d: int = 64
    hidden: tuple[int, ...] = (128,)
    activation: str = "tanh"
    omega: int = 10
    u_pho: int = 30
    l_pho: int = 50
    lambda2: float = 0.0003
    margins: MarginSet = field(default_factory=MarginSet)
    level_order: tuple[str, str, str, str] = LevelOrder().ranks
    triplet_margin: float = 0.2
    max_triplet_positives: int = 8
    head: str = "linear"
    head_hidden: int = 32
    finetune_latents: bool = False
    user_noise_photos: bool = False
    select_best: bool = False

    def __post_init__(self):
        if isinstance(self.margins, dict):
            self.margins = MarginSet(**self.margins)
        elif isinstance(self.margins, (list, tuple)):
            self.margins = MarginSet.from_sequence(self.margins)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.level_order = tuple(self.level_order)
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"unknown pooling {self.pooling!r}; expected one of {POOLING_MODES}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        for name in ("epochs", "batch_size"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("d", "omega", "u_pho", "l_pho", "head_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.lambda2 < 0 or self.neg_ratio < 0:
            raise ValueError("lambda2 and neg_ratio must be nonnegative")
        if not self.triplet_margin > 0:
            raise ValueError("triplet_margin must be positive")
        check_margins(self.margins)
        LevelOrder(self.level_order)

    @property
    def order(self) -> LevelOrder:
        return LevelOrder(self.level_order)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        out["level_order"] = list(self.level_order)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**known)


@dataclass
class ModelParams:
    encoder: EncoderParams
    user_attention: AttentionParams | None
    attraction_attention: AttentionParams | None
    factors: LatentFactors
    head: list[Layer]
    margins: MarginSet = field(default_factory=MarginSet)
    order: LevelOrder = field(default_factory=LevelOrder)
    lambda2: float = 0.0003

    @property
    def d(self) -> int:
        return self.encoder.d

    @property
    def f(self) -> int:
        return self.factors.f

    def arrays(self, finetune_latents: bool = True) -> dict[str, np.ndarray]:
        """Named references to every learnable array (mutating them mutates the model)."""
        out = dict(self.encoder.arrays())
        for name, att in (("user_attention", self.user_attention), ("attraction_attention", self.attraction_attention)):
            if att is not None:
                out[f"{name}.w"] = att.w
                out[f"{name}.V"] = att.V
        for k, layer in enumerate(self.head):
            out[f"head.{k}.weight"] = layer.weight
            out[f"head.{k}.bias"] = layer.bias
        if finetune_latents:
            out["latent.HU"] = self.factors.HU
            out["latent.HL"] = self.factors.HL
        return out


def init_head(width: int, kind: str = "linear", hidden: int = 32, rng=None) -> list[Layer]:
    rng = np.random.default_rng(rng)
    sizes = [width, 1] if kind == "linear" else [width, hidden, 1]
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        act = "identity" if k == len(sizes) - 2 else "tanh"
        layers.append(Layer(rng.uniform(-bound, bound, (fan_out, fan_in)), np.zeros(fan_out), act))
    return layers


def init_model(d_in: int, factors: LatentFactors, config: TrainingConfig) -> ModelParams:
    # One stream per component, so variants that drop attention still share
    # the encoder and head initialisation of the full model.
    def stream(k):
        return np.random.default_rng([config.seed, k])

    enc = init_encoder(d_in, config.d, config.hidden, config.activation, stream(0))
    ua = la = None
    if config.pooling == "attention":
        ua = init_attention(config.d, config.omega, stream(1))
        la = init_attention(config.d, config.omega, stream(2))
    head = init_head(2 * (config.d + factors.f), config.head, config.head_hidden, stream(3))
    latents = LatentFactors(factors.HU.copy(), factors.HL.copy(), list(factors.trace))
    return ModelParams(enc, ua, la, latents, head, config.margins, config.order, config.lambda2)


# -- elementary operations ----------------------------------------------------

def final_embedding(visual, latent) -> np.ndarray:
    """Visual representation followed by the latent factor."""
    return np.concatenate([np.asarray(visual, dtype=np.float64), np.asarray(latent, dtype=np.float64)], axis=-1)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def _head_forward_flat(head: Sequence[Layer], X: np.ndarray):
    pres, acts = [], [X]
    h = X
    for layer in head:
        z = h @ layer.weight.T + layer.bias
        h = _act(layer.activation, z)
        pres.append(z)
        acts.append(h)
    return pres, acts


def predict_logit(user_emb, attraction_emb, head: Sequence[Layer]):
    x = np.concatenate([np.asarray(user_emb, dtype=np.float64), np.asarray(attraction_emb, dtype=np.float64)], axis=-1)
    if x.shape[-1] != head[0].weight.shape[1]:
        raise ValueError(f"embedding pair of length {x.shape[-1]} does not fit head input {head[0].weight.shape[1]}")
    _, acts = _head_forward_flat(head, np.atleast_2d(x))
    out = acts[-1][:, 0]
    return out if x.ndim > 1 else float(out[0])


def predict(user_emb, attraction_emb, head: Sequence[Layer]):
    """Visit probability sigmoid(head(user || attraction))."""
    z = predict_logit(user_emb, attraction_emb, head)
    return sigmoid(z) if np.ndim(z) else float(sigmoid(z))


def pair_logits(U: np.ndarray, L: np.ndarray, head: Sequence[Layer]):
    """(n_users, n_attractions) logits for every pair plus a backward cache."""
    first = head[0]
    D = U.shape[1]
    if first.weight.shape[1] != D + L.shape[1]:
        raise ValueError("embedding widths do not fit the prediction head")
    A = U @ first.weight[:, :D].T
    B = L @ first.weight[:, D:].T
    pre0 = A[:, None, :] + B[None, :, :] + first.bias
    nu, nl, h0 = pre0.shape
    pre0 = pre0.reshape(nu * nl, h0)
    acts = [None, _act(first.activation, pre0)]
    pres = [pre0]
    h = acts[1]
    for layer in head[1:]:
        z = h @ layer.weight.T + layer.bias
        h = _act(layer.activation, z)
        pres.append(z)
        acts.append(h)
    return h.reshape(nu, nl), (pres, acts, nu, nl)


def pair_logits_backward(G: np.ndarray, U: np.ndarray, L: np.ndarray, head: Sequence[Layer], cache):
    """Gradients (dU, dL, [(dW, db) per head layer]) of ``sum(G * logits)``."""
    pres, acts, nu, nl = cache
    g = G.reshape(nu * nl, 1)
    grads = [None] * len(head)
    for k in range(len(head) - 1, 0, -1):
        layer = head[k]
        g = g * _act_grad(layer.activation, pres[k], acts[k + 1])
        grads[k] = (g.T @ acts[k], g.sum(axis=0))
        g = g @ layer.weight
    first = head[0]
    g = g * _act_grad(first.activation, pres[0], acts[1])
    g3 = g.reshape(nu, nl, -1)
    gA = g3.sum(axis=1)  # (nu, h0)
    gB = g3.sum(axis=0)  # (nl, h0)
    D = U.shape[1]
    dW = np.concatenate([gA.T @ U, gB.T @ L], axis=1)
    grads[0] = (dW, g.sum(axis=0))
    dU = gA @ first.weight[:, :D]
    dL = gB @ first.weight[:, D:]
    return dU, dL, grads


def prediction_loss(R, R_hat, mask=None) -> float:
    """Binary cross-entropy summed over included pairs, probabilities clamped to [eps, 1-eps]."""
    R = np.asarray(R, dtype=np.float64)
    P = np.clip(np.asarray(R_hat, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    if R.shape != P.shape:
        raise ValueError(f"shape mismatch: {R.shape} vs {P.shape}")
    terms = -(R * np.log(P) + (1.0 - R) * np.log(1.0 - P))
    if mask is not None:
        terms = terms * np.asarray(mask, dtype=np.float64)
    return float(terms.sum())


def bce_from_logits(R: np.ndarray, Z: np.ndarray, mask: np.ndarray) -> float:
    # softplus(z) - R z: the cross-entropy written on logits, stable for large |z|
    sp = np.logaddexp(0.0, Z)
    return float((mask * (sp - R * Z)).sum())


# -- joint objective ------------------------------------------------------------

@dataclass
class Graph:
    """Fixed data a step is evaluated on."""

    X: np.ndarray  # (n_photos, d_in) encoder inputs
    user_layout: StackLayout
    attraction_layout: StackLayout
    R: np.ndarray  # (n_users, n_attractions) binary targets
    mask: np.ndarray  # (n_users, n_attractions) 1 where the pair enters L_pred


@dataclass
class LossParts:
    l_sim: float
    l_pred: float
    reg: float

    @property
    def total(self) -> float:
        return self.l_sim + self.l_pred + self.reg


def embeddings(params: ModelParams, graph: Graph, pooling: str, F: np.ndarray | None = None):
    """Final user and attraction embeddings plus intermediate caches."""
    if F is None:
        F = encode(graph.X, params.encoder)
    VU, cu = pool_entities(F, graph.user_layout, pooling, params.user_attention)
    VL, cl = pool_entities(F, graph.attraction_layout, pooling, params.attraction_attention)
    U = final_embedding(VU, params.factors.HU)
    L = final_embedding(VL, params.factors.HL)
    return U, L, (F, VU, VL, cu, cl)


def similarity_loss(F, variant: str, mined, params: ModelParams, triplet_margin: float) -> float:
    if variant == "no-visual-similarity" or mined is None:
        return 0.0
    if variant == "MEAL":
        return quintuplet_loss_batch(F, mined, params.margins, params.order)
    return triplet_loss_batch(F, mined, triplet_margin)


def similarity_grad(F, variant: str, mined, params: ModelParams, triplet_margin: float):
    if variant == "no-visual-similarity" or mined is None:
        return np.zeros_like(F)
    if variant == "MEAL":
        return quintuplet_loss_batch_backward(F, mined, params.margins, params.order)
    return triplet_loss_batch_backward(F, mined, triplet_margin)


def total_loss(
    params: ModelParams,
    graph: Graph,
    config: TrainingConfig,
    mined: np.ndarray | None = None,
    with_grad: bool = True,
):
    """Loss parts and (optionally) gradients for every trainable array.

    ``mined`` is an index array of quintuplets (MEAL) or triplets (U, L, U/L,
    U&L) into ``graph.X``'s rows; it is ignored for the no-visual-similarity
    variant. Returns ``(LossParts, grads)`` with ``grads`` keyed like
    :meth:`ModelParams.arrays`.
    """
    if config.variant not in VARIANTS:
        raise ValueError(f"unknown variant {config.variant!r}")
    F = _forward(graph.X, params.encoder)[1][-1]
    U, L, (_, VU, VL, cu, cl) = embeddings(params, graph, config.pooling, F)
    Z, hcache = pair_logits(U, L, params.head)
    l_pred = bce_from_logits(graph.R, Z, graph.mask)
    l_sim = similarity_loss(F, config.variant, mined, params, config.triplet_margin)
    theta = params.arrays(config.finetune_latents)
    reg = params.lambda2 * float(sum((a * a).sum() for a in theta.values()))
    parts = LossParts(l_sim, l_pred, reg)
    if not with_grad:
        return parts, None

    grads: dict[str, np.ndarray] = {}
    G = graph.mask * (sigmoid(Z) - graph.R)
    dU, dL, hgrads = pair_logits_backward(G, U, L, params.head, hcache)
    for k, (dW, db) in enumerate(hgrads):
        grads[f"head.{k}.weight"] = dW
        grads[f"head.{k}.bias"] = db
    d = params.d
    dF = similarity_grad(F, config.variant, mined, params, config.triplet_margin)
    duF, duw, duV = pool_entities_backward(dU[:, :d], F, graph.user_layout, config.pooling, cu, params.user_attention)
    dlF, dlw, dlV = pool_entities_backward(dL[:, :d], F, graph.attraction_layout, config.pooling, cl, params.attraction_attention)
    dF = dF + duF + dlF
    if params.user_attention is not None:
        grads["user_attention.w"] = duw
        grads["user_attention.V"] = duV
        grads["attraction_attention.w"] = dlw
        grads["attraction_attention.V"] = dlV
    if config.finetune_latents:
        grads["latent.HU"] = dU[:, d:]
        grads["latent.HL"] = dL[:, d:]
    egrads, _ = encode_backward(graph.X, params.encoder, dF)
    for k, (dW, db) in enumerate(egrads):
        grads[f"encoder.{k}.weight"] = dW
        grads[f"encoder.{k}.bias"] = db
    for name, a in theta.items():
        grads[name] = grads[name] + 2.0 * params.lambda2 * a
    return parts, grads

