"""Checkpoint files: named float64 tensors plus a JSON meta header.

Format ``shiftlab-tensors-v1`` (documented in README):

* line 1: the ASCII magic ``shiftlab-tensors-v1``
* line 2: one JSON object ``{"meta": {...}, "tensors": [{name, shape,
  offset}, ...]}`` with tensors listed in sorted-name order; offsets are byte
  positions into the payload
* remainder: the concatenated raw little-endian float64 tensor payloads

Writes are deterministic for identical contents, and load/save round-trips
are bit-exact (raw float64, no re-encoding).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .models import ClassificationHead, EncoderConfig, EncoderState, Model
from .tensor import Tensor

__all__ = [
    "save_tensors",
    "load_tensors",
    "save_encoder",
    "load_encoder",
    "save_model",
    "load_model",
]

_MAGIC = b"shiftlab-tensors-v1\n"


def save_tensors(path, named: dict[str, Tensor], meta: dict | None = None) -> None:
    entries = []
    payloads = []
    offset = 0
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name].data, dtype="<f8")
        # ascontiguousarray promotes 0-d to 1-d; keep the caller's shape
        entries.append({"name": name, "shape": list(named[name].data.shape), "offset": offset})
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(header.encode("utf-8"))
        f.write(b"\n")
        for blob in payloads:
            f.write(blob)


def load_tensors(path) -> tuple[dict[str, Tensor], dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(_MAGIC):
        raise ValueError(f"{path} is not a shiftlab-tensors-v1 file")
    header_end = blob.index(b"\n", len(_MAGIC))
    header = json.loads(blob[len(_MAGIC) : header_end].decode("utf-8"))
    base = header_end + 1
    named: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=base + entry["offset"]).reshape(shape)
        named[entry["name"]] = Tensor(arr.copy(), requires_grad=True)
    return named, header["meta"]


def save_encoder(path, state: EncoderState) -> None:
    meta = {
        "kind": "encoder",
        "config": {
            "image_size": state.config.image_size,
            "in_channels": state.config.in_channels,
            "stage_channels": list(state.config.stage_channels),
            "blocks_per_stage": state.config.blocks_per_stage,
            "groups": state.config.groups,
            "embed_dim": state.config.embed_dim,
        },
        "provenance": state.provenance,
        "parent_hash": state.parent_hash,
        "history": list(state.history),
    }
    save_tensors(path, state.params, meta)


def load_encoder(path) -> EncoderState:
    params, meta = load_tensors(path)
    if meta.get("kind") != "encoder":
        raise ValueError(f"{path} does not hold an encoder checkpoint")
    c = meta["config"]
    config = EncoderConfig(
        image_size=c["image_size"],
        in_channels=c["in_channels"],
        stage_channels=tuple(c["stage_channels"]),
        blocks_per_stage=c["blocks_per_stage"],
        groups=c["groups"],
        embed_dim=c["embed_dim"],
    )
    return EncoderState(
        config=config,
        params=params,
        provenance=meta["provenance"],
        parent_hash=meta.get("parent_hash"),
        history=tuple(meta.get("history", [meta["provenance"]])),
    )


def save_model(path, model: Model) -> None:
    named = {f"encoder.{k}": v for k, v in model.encoder.params.items()}
    named.update({f"head.{k}": v for k, v in model.head.params.items()})
    meta = {
        "kind": "model",
        "encoder": {
            "config": {
                "image_size": model.encoder.config.image_size,
                "in_channels": model.encoder.config.in_channels,
                "stage_channels": list(model.encoder.config.stage_channels),
                "blocks_per_stage": model.encoder.config.blocks_per_stage,
                "groups": model.encoder.config.groups,
                "embed_dim": model.encoder.config.embed_dim,
            },
            "provenance": model.encoder.provenance,
            "parent_hash": model.encoder.parent_hash,
            "history": list(model.encoder.history),
        },
        "head": {
            "embed_dim": model.head.embed_dim,
            "n_classes": model.head.n_classes,
            "attention": model.head.attention,
        },
    }
    save_tensors(path, named, meta)


def load_model(path) -> Model:
    named, meta = load_tensors(path)
    if meta.get("kind") != "model":
        raise ValueError(f"{path} does not hold a model checkpoint")
    enc_meta = meta["encoder"]
    c = enc_meta["config"]
    config = EncoderConfig(
        image_size=c["image_size"],
        in_channels=c["in_channels"],
        stage_channels=tuple(c["stage_channels"]),
        blocks_per_stage=c["blocks_per_stage"],
        groups=c["groups"],
        embed_dim=c["embed_dim"],
    )
    encoder = EncoderState(
        config=config,
        params={k[len("encoder.") :]: v for k, v in named.items() if k.startswith("encoder.")},
        provenance=enc_meta["provenance"],
        parent_hash=enc_meta.get("parent_hash"),
        history=tuple(enc_meta.get("history", [enc_meta["provenance"]])),
    )
    h = meta["head"]
    head = ClassificationHead(
        embed_dim=h["embed_dim"],
        n_classes=h["n_classes"],
        attention=h["attention"],
        params={k[len("head.") :]: v for k, v in named.items() if k.startswith("head.")},
    )
    return Model(encoder=encoder, head=head)
