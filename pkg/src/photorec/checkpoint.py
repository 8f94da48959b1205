"""JSON model checkpoints and latent-factor documents.

Floats are written with Python's shortest round-trip repr, so every float64
survives a save/load cycle bit for bit.
"""
from __future__ import annotations

import json
import math
from typing import Any

import numpy as np

from .attention import AttentionParams
from .data import DatasetSplit, atomic_write_text
from .encoder import EncoderParams, Layer
from .metric import LevelOrder, MarginSet
from .mining import ClusterConfig
from .model import ModelParams, TrainingConfig
from .training import EpochRecord, TrainedModel
from .wmf import LatentFactors, WmfConfig

FORMAT = "photorec-model"
FACTORS_FORMAT = "photorec-factors"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}


def _unarray(doc: Any, name: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in doc["shape"])
        data = np.array(doc["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed array {name!r}: {exc}") from None
    if data.size != math.prod(shape):
        raise CheckpointError(f"array {name!r} holds {data.size} values, shape {shape} needs {math.prod(shape)}")
    return data.reshape(shape)


def _dumps(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"


def _loads(path, expected_format: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a complete JSON document ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != expected_format:
        raise CheckpointError(f"{path}: not a {expected_format} document")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"{path}: version {doc.get('version')!r}, this build reads version {VERSION}")
    return doc


def factors_document(factors: LatentFactors, users, attractions, config: WmfConfig) -> dict:
    return {
        "format": FACTORS_FORMAT,
        "version": VERSION,
        "config": {"f": config.f, "gamma": config.gamma, "lambda1": config.lambda1,
                   "sweeps": config.sweeps, "seed": config.seed},
        "users": list(users),
        "attractions": [int(a) for a in attractions],
        "HU": _array(factors.HU),
        "HL": _array(factors.HL),
        "trace": [float(t) for t in factors.trace],
    }


def save_factors(factors: LatentFactors, users, attractions, config: WmfConfig, path) -> None:
    atomic_write_text(path, _dumps(factors_document(factors, users, attractions, config)))


def load_factors(path) -> tuple[LatentFactors, list[str], list[int], WmfConfig]:
    doc = _loads(path, FACTORS_FORMAT)
    f = LatentFactors(_unarray(doc["HU"], "HU"), _unarray(doc["HL"], "HL"), list(doc["trace"]))
    return f, list(doc["users"]), list(doc["attractions"]), WmfConfig(**doc["config"])


def _layers(layers: list[Layer], prefix: str) -> dict:
    out = {}
    for k, layer in enumerate(layers):
        out[f"{prefix}.{k}.weight"] = _array(layer.weight)
        out[f"{prefix}.{k}.bias"] = _array(layer.bias)
    return out


def _unlayers(arrays: dict, prefix: str, activations: list[str]) -> list[Layer]:
    layers = []
    for k, act in enumerate(activations):
        try:
            w = _unarray(arrays[f"{prefix}.{k}.weight"], f"{prefix}.{k}.weight")
            b = _unarray(arrays[f"{prefix}.{k}.bias"], f"{prefix}.{k}.bias")
        except KeyError as exc:
            raise CheckpointError(f"missing parameter array {exc}") from None
        if layers and w.shape[1] != layers[-1].weight.shape[0]:
            raise CheckpointError(f"{prefix} layer {k} input {w.shape[1]} != previous output {layers[-1].weight.shape[0]}")
        layers.append(Layer(w, b, act))
    return layers


def checkpoint_document(model: TrainedModel) -> dict:
    p = model.params
    arrays = {}
    arrays.update(_layers(p.encoder.layers, "encoder"))
    arrays.update(_layers(p.head, "head"))
    for name, att in (("user_attention", p.user_attention), ("attraction_attention", p.attraction_attention)):
        if att is not None:
            arrays[f"{name}.w"] = _array(att.w)
            arrays[f"{name}.V"] = _array(att.V)
    arrays["latent.HU"] = _array(p.factors.HU)
    arrays["latent.HL"] = _array(p.factors.HL)
    arrays["embedding.user"] = _array(model.user_emb)
    arrays["embedding.attraction"] = _array(model.attraction_emb)
    return {
        "format": FORMAT,
        "version": VERSION,
        "config": {
            "training": model.config.to_dict(),
            "wmf": {"f": model.wmf_config.f, "gamma": model.wmf_config.gamma, "lambda1": model.wmf_config.lambda1,
                    "sweeps": model.wmf_config.sweeps, "seed": model.wmf_config.seed},
            "cluster": {"eps_meters": model.cluster_config.eps_meters, "min_users": model.cluster_config.min_users},
            "t_thr": model.t_thr,
        },
        "dims": {"d_in": p.encoder.d_in, "d": p.d, "f": p.f},
        "activations": {"encoder": [l.activation for l in p.encoder.layers], "head": [l.activation for l in p.head]},
        "arrays": arrays,
        "lambda2": p.lambda2,
        "margins": list(p.margins.as_array()),
        "level_order": list(p.order.ranks),
        "users": list(model.users),
        "attractions": [int(a) for a in model.attractions],
        "attraction_city": list(model.attraction_city),
        "train_visited": {u: list(c) for u, c in model.train_visited.items()},
        "held_out": [[s.user_id, s.validation_city, s.test_city, sorted(s.train_cities)]
                     for _, s in sorted(model.held_out.items())],
        "wmf_trace": [float(t) for t in p.factors.trace],
        "trace": [[r.epoch, r.l_quin, r.l_pred, r.reg, r.total, r.val_map5, r.n_mined] for r in model.trace],
    }


def save_checkpoint(model: TrainedModel, path) -> None:
    doc = checkpoint_document(model)
    # NaN (no validation split) is not valid JSON; store it as null.
    doc["trace"] = [[None if isinstance(v, float) and math.isnan(v) else v for v in row] for row in doc["trace"]]
    atomic_write_text(path, _dumps(doc))


def load_checkpoint(path, expect_d: int | None = None, expect_d_in: int | None = None) -> TrainedModel:
    """Read a checkpoint; ``expect_*`` guard against pairing it with the wrong data."""
    doc = _loads(path, FORMAT)
    try:
        dims = doc["dims"]
        arrays = doc["arrays"]
        acts = doc["activations"]
        cfg = doc["config"]
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing field {exc}") from None
    if expect_d is not None and dims["d"] != expect_d:
        raise CheckpointError(f"{path}: checkpoint has d={dims['d']}, expected d={expect_d}")
    if expect_d_in is not None and dims["d_in"] != expect_d_in:
        raise CheckpointError(f"{path}: checkpoint has d_in={dims['d_in']}, features have d={expect_d_in}")
    encoder = EncoderParams(_unlayers(arrays, "encoder", acts["encoder"]))
    head = _unlayers(arrays, "head", acts["head"])
    if encoder.d_in != dims["d_in"] or encoder.d != dims["d"]:
        raise CheckpointError(f"{path}: encoder shape {encoder.d_in}->{encoder.d} contradicts dims {dims}")
    atts = []
    for name in ("user_attention", "attraction_attention"):
        if f"{name}.w" in arrays:
            att = AttentionParams(_unarray(arrays[f"{name}.w"], f"{name}.w"), _unarray(arrays[f"{name}.V"], f"{name}.V"))
            if att.d != dims["d"]:
                raise CheckpointError(f"{path}: {name} expects d={att.d}, checkpoint d={dims['d']}")
            atts.append(att)
        else:
            atts.append(None)
    factors = LatentFactors(_unarray(arrays["latent.HU"], "latent.HU"), _unarray(arrays["latent.HL"], "latent.HL"),
                            list(doc.get("wmf_trace", [])))
    if factors.f != dims["f"]:
        raise CheckpointError(f"{path}: latent width {factors.f} != f={dims['f']}")
    width = 2 * (dims["d"] + dims["f"])
    if head[0].weight.shape[1] != width:
        raise CheckpointError(f"{path}: head input {head[0].weight.shape[1]} != 2(d+f)={width}")
    params = ModelParams(encoder, atts[0], atts[1], factors, head, MarginSet.from_sequence(doc["margins"]),
                         LevelOrder(tuple(doc["level_order"])), float(doc["lambda2"]))
    U = _unarray(arrays["embedding.user"], "embedding.user")
    L = _unarray(arrays["embedding.attraction"], "embedding.attraction")
    users = list(doc["users"])
    attractions = [int(a) for a in doc["attractions"]]
    if U.shape != (len(users), dims["d"] + dims["f"]) or L.shape != (len(attractions), dims["d"] + dims["f"]):
        raise CheckpointError(f"{path}: embedding tables do not match the user/attraction index")
    held = {}
    for user, val, test, train in doc["held_out"]:
        held[user] = DatasetSplit(user, frozenset(train), val, test)
    trace = [EpochRecord(int(r[0]), r[1], r[2], r[3], r[4], math.nan if r[5] is None else r[5], int(r[6]))
             for r in doc["trace"]]
    return TrainedModel(
        params=params,
        config=TrainingConfig.from_dict(cfg["training"]),
        wmf_config=WmfConfig(**cfg["wmf"]),
        cluster_config=ClusterConfig(**cfg["cluster"]),
        users=users,
        attractions=attractions,
        attraction_city=list(doc["attraction_city"]),
        train_visited={u: list(c) for u, c in doc["train_visited"].items()},
        held_out=held,
        user_emb=U,
        attraction_emb=L,
        trace=trace,
        t_thr=int(cfg["t_thr"]),
    )
