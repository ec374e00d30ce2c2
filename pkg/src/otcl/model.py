"""Feature extractor and per-class prototype logit head.

The extractor is a plain ReLU MLP (input -> 400 -> 400 -> feat_dim) over the
shared autodiff tensors. Class logits are pure inner products against one
trainable prototype row per class seen so far — no bias, no normalization.
"""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor

HIDDEN_WIDTH = 400
DEFAULT_FEAT_DIM = 128
PROTO_INIT_STD = 0.1  # prototypes start as N(0, 0.01 I) draws

CHECKPOINT_VERSION = 1


class FeatureExtractor:
    """Two-hidden-layer ReLU MLP; owns its parameters in a ParamSet."""

    def __init__(
        self,
        input_dim: int,
        feat_dim: int = DEFAULT_FEAT_DIM,
        seed: int = 0,
        hidden: int = HIDDEN_WIDTH,
    ):
        if input_dim < 1 or feat_dim < 1 or hidden < 1:
            raise ValueError("dimensions must be positive")
        self.input_dim = input_dim
        self.feat_dim = feat_dim
        self.hidden = hidden
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        dims = [input_dim, hidden, hidden, feat_dim]
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            # Kaiming-style scaling keeps ReLU activations from dying or blowing up
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            self.params.add(f"w{i}", w)
            self.params.add(f"b{i}", np.zeros((1, fan_out)))

    def forward(self, x: Tensor) -> Tensor:
        """Differentiable batch forward pass: (n, input_dim) -> (n, feat_dim)."""
        if x.shape[-1] != self.input_dim:
            raise ValueError(
                f"input dim {x.shape[-1]} != expected {self.input_dim}"
            )
        h = ad.relu(ad.add(ad.matmul(x, self.params["w0"]), self.params["b0"]))
        h = ad.relu(ad.add(ad.matmul(h, self.params["w1"]), self.params["b1"]))
        return ad.add(ad.matmul(h, self.params["w2"]), self.params["b2"])

    def features_np(self, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
        """Inference-only forward pass on raw arrays (no graph, chunked)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"input dim {x.shape[-1]} != expected {self.input_dim}")
        p = self.params
        outs = []
        for i in range(0, x.shape[0], chunk):
            h = np.maximum(x[i : i + chunk] @ p["w0"].data + p["b0"].data, 0.0)
            h = np.maximum(h @ p["w1"].data + p["b1"].data, 0.0)
            outs.append(h @ p["w2"].data + p["b2"].data)
        return np.concatenate(outs, axis=0) if outs else np.zeros((0, self.feat_dim))


def extract_features(fe: FeatureExtractor, x) -> Tensor:
    return fe.forward(x if isinstance(x, Tensor) else Tensor(x))


class ClassPrototypes:
    """One trainable direction per class; logits are plain dot products.

    Rows live in their own ParamSet so the losses can treat prototype
    gradients differently from extractor gradients.
    """

    def __init__(self, feat_dim: int):
        self.feat_dim = feat_dim
        self.params = ParamSet()
        self.class_ids: list[int] = []

    def init_new_classes(self, new_ids, seed: int) -> None:
        """Add N(0, 0.01 I) rows for unseen classes; existing rows untouched."""
        new_ids = list(new_ids)
        dupes = set(new_ids) & set(self.class_ids)
        if dupes:
            raise ValueError(f"classes already initialized: {sorted(dupes)}")
        if len(set(new_ids)) != len(new_ids):
            raise ValueError("duplicate ids in request")
        rng = np.random.default_rng(seed)
        for c in sorted(new_ids):
            row = rng.standard_normal(self.feat_dim) * PROTO_INIT_STD
            self.params.add(f"proto_{c}", row.reshape(1, -1))
            self.class_ids.append(c)
        self.class_ids.sort()

    def known(self) -> list[int]:
        return list(self.class_ids)

    def require(self, class_ids) -> None:
        missing = sorted(set(class_ids) - set(self.class_ids))
        if missing:
            raise KeyError(f"no prototype for classes {missing}")

    def stack(self, class_ids=None) -> Tensor:
        """Prototype matrix (len(ids), feat_dim) as a differentiable stack."""
        ids = self.class_ids if class_ids is None else sorted(class_ids)
        self.require(ids)
        if not ids:
            raise ValueError("no classes initialized")
        return ad.concat_rows(*(self.params[f"proto_{c}"] for c in ids))

    def row(self, class_id: int) -> Tensor:
        self.require([class_id])
        return self.params[f"proto_{class_id}"]


def class_logits(z: Tensor, protos: ClassPrototypes, class_ids=None) -> Tensor:
    """Logit matrix (n, len(ids)), column order = ascending class id."""
    w = protos.stack(class_ids)
    return ad.matmul(z, ad.transpose(w))


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path, named_params: dict[str, ParamSet], meta: dict | None = None):
    """Dump every ParamSet to one npz plus a JSON header; bitwise float64."""
    arrays = {}
    manifest = {"version": CHECKPOINT_VERSION, "groups": {}, "meta": meta or {}}
    for group, ps in named_params.items():
        manifest["groups"][group] = ps.names()
        for name, t in ps.items():
            arrays[f"{group}::{name}"] = t.data
    arrays["__manifest__"] = np.frombuffer(
        json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8
    )
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    """Read back {group: {param: array}} and the stored metadata."""
    with np.load(path) as z:
        manifest = json.loads(bytes(z["__manifest__"]).decode())
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
        groups: dict[str, dict[str, np.ndarray]] = {}
        for group, names in manifest["groups"].items():
            groups[group] = {name: z[f"{group}::{name}"].copy() for name in names}
    return groups, manifest["meta"]


def restore_params(ps: ParamSet, stored: dict[str, np.ndarray]) -> None:
    """Overwrite a ParamSet's values in place from a checkpoint group."""
    if set(stored) != set(ps.names()):
        raise ValueError("parameter names do not match checkpoint")
    for name, arr in stored.items():
        if arr.shape != ps[name].data.shape:
            raise ValueError(f"shape mismatch for {name}")
        ps[name].data[...] = arr
