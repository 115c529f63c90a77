"""DECU1 binary container for backbones and ensembles.

Layout (all little-endian)::

    b"DECU1"
    d, h, e_c, C, T                 5 x int32
    W1 b1 W2 b2 W3 b3               float64 blocks, C order
    -- ensemble files only --
    b"TABL", M                      int32
    M tables of C x e_c             float64
    b"MNFT", n                      uint32 byte length
    manifest                        UTF-8 JSON, sorted keys

A backbone-only file stops after the parameter blocks.
"""

import json
import struct
from dataclasses import asdict

import numpy as np

from decu.diffusion import PARAM_NAMES, ClassEmbeddingTable, DenoiserBackbone
from decu.ensemble import EnsembleModel, ModelConfig

MAGIC = b"DECU1"
TABLES_TAG = b"TABL"
MANIFEST_TAG = b"MNFT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _f8(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def backbone_bytes(backbone, n_classes, T):
    head = MAGIC + struct.pack("<5i", backbone.d, backbone.hidden, backbone.embed_dim,
                               int(n_classes), int(T))
    return head + b"".join(_f8(backbone.params[k]) for k in PARAM_NAMES)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def manifest_for(model, extra=None):
    out = {
        "format_version": FORMAT_VERSION,
        "model_config": asdict(model.config),
        "image_shape": list(model.image_shape),
        "component_seeds": [int(s) for s in model.component_seeds],
        "subset_hashes": list(model.subset_digests),
        "backbone_sha256": model.backbone.digest(),
    }
    out.update(extra or {})
    return out


def ensemble_bytes(model, extra_manifest=None):
    parts = [backbone_bytes(model.backbone, model.n_classes, model.config.T),
             TABLES_TAG, struct.pack("<i", model.M)]
    parts += [_f8(t.weights) for t in model.tables]
    blob = canonical_json(manifest_for(model, extra_manifest)).encode("utf-8")
    parts += [MANIFEST_TAG, struct.pack("<I", len(blob)), blob]
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def floats(self, shape):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)

    @property
    def done(self):
        return self.pos == len(self.data)


def _read_backbone(r):
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a DECU1 file")
    d, h, e, c, T = struct.unpack("<5i", r.take(20))
    if min(d, h, e, c, T) < 1:
        raise CheckpointError("invalid dimensions in header")
    shapes = DenoiserBackbone(d, h, e).param_shapes()
    params = {k: r.floats(shapes[k]) for k in PARAM_NAMES}
    return DenoiserBackbone(d, h, e, params), c, T


def parse_backbone(data):
    """``(backbone, n_classes, T)`` from backbone bytes (trailing sections ignored)."""
    return _read_backbone(_Reader(bytes(data)))


def parse_ensemble(data):
    """``(EnsembleModel, manifest)`` from ensemble bytes."""
    r = _Reader(bytes(data))
    backbone, c, T = _read_backbone(r)
    if r.done or r.take(4) != TABLES_TAG:
        raise CheckpointError("file holds a backbone only, not an ensemble")
    (m,) = struct.unpack("<i", r.take(4))
    if m < 1:
        raise CheckpointError("ensemble needs at least one table")
    tables = [ClassEmbeddingTable(r.floats((c, backbone.embed_dim))) for _ in range(m)]
    if r.take(4) != MANIFEST_TAG:
        raise CheckpointError("missing manifest section")
    (n,) = struct.unpack("<I", r.take(4))
    try:
        manifest = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc
    if not r.done:
        raise CheckpointError("trailing bytes after manifest")
    try:
        config = ModelConfig(**manifest["model_config"])
        model = EnsembleModel(backbone, tables, config, tuple(manifest["component_seeds"]),
                              tuple(manifest["image_shape"]),
                              tuple(manifest.get("subset_hashes", ())))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"manifest does not describe this model: {exc}") from exc
    if config.T != T or model.backbone.digest() != manifest.get("backbone_sha256"):
        raise CheckpointError("manifest and parameter blocks disagree")
    return model, manifest


def save_backbone(path, backbone, n_classes, T):
    with open(path, "wb") as fh:
        fh.write(backbone_bytes(backbone, n_classes, T))


def load_backbone(path):
    with open(path, "rb") as fh:
        return parse_backbone(fh.read())


def save_ensemble(path, model, extra_manifest=None):
    with open(path, "wb") as fh:
        fh.write(ensemble_bytes(model, extra_manifest))


def load_ensemble(path):
    with open(path, "rb") as fh:
        return parse_ensemble(fh.read())
