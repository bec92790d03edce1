"""GCN backbone split into a shared extractor and two adapters.

Parameters live in one flat dict of numpy arrays. The extractor entries
(``z*``) are the same array objects whichever objective reads them, so a
single optimizer step on the joint loss moves both heads' view of the
extractor.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from graphssl import ndops as ad
from graphssl.rng import SeedStream

GRAPH_CONV = "gc"
# inputs sparser than this go through the sparse first-layer kernel
SPARSE_INPUT_DENSITY = 0.1
LINEAR = "linear"

# preset name -> (extractor layers, task adapter)
PRESETS = {
    "2GC": ((GRAPH_CONV,), GRAPH_CONV),
    "2GC+1Linear": ((GRAPH_CONV, GRAPH_CONV), LINEAR),
    "3GC": ((GRAPH_CONV, GRAPH_CONV), GRAPH_CONV),
    "1GC+1Linear": ((GRAPH_CONV,), LINEAR),
}
DEFAULT_PRESET = "2GC"


@dataclass(frozen=True)
class ArchConfig:
    extractor_layers: tuple = (GRAPH_CONV,)
    task_adapter: str = GRAPH_CONV
    ssl_adapter: str = LINEAR
    hidden_dim: int = 128
    dropout: float = 0.5
    name: str = DEFAULT_PRESET

    def __post_init__(self):
        for kind in (*self.extractor_layers, self.task_adapter):
            if kind not in (GRAPH_CONV, LINEAR):
                raise ValueError(f"unknown layer kind {kind!r}")
        if self.ssl_adapter != LINEAR:
            raise ValueError("the SSL adapter is always linear")
        if not self.extractor_layers:
            raise ValueError("extractor needs at least one layer")

    @classmethod
    def preset(cls, name: str, hidden_dim: int = 128, dropout: float = 0.5) -> "ArchConfig":
        try:
            layers, adapter = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown architecture preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(layers, adapter, LINEAR, hidden_dim, dropout, name)


@dataclass
class ModelParams:
    """Flat parameter store with extractor / task / SSL groups."""

    arrays: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict:
        return {k: v for k, v in self.arrays.items() if k.startswith(prefix)}

    @property
    def theta_z(self) -> dict:
        return self.group("z")

    @property
    def theta_y(self) -> dict:
        return self.group("y.")

    @property
    def theta_s(self) -> dict:
        return self.group("s.")

    def weight_names(self) -> set:
        return {k for k in self.arrays if k.endswith(".weight")}

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})


class GCN:
    """Extractor + task adapter + optional linear SSL adapter."""

    def __init__(self, arch: ArchConfig, in_dim: int, num_classes: int, ssl_dim: int | None,
                 seeds: SeedStream):
        self.arch = arch
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.ssl_dim = ssl_dim
        p = {}
        dim = in_dim
        for i, _ in enumerate(arch.extractor_layers):
            p[f"z{i}.weight"] = ad.glorot_init(dim, arch.hidden_dim, seeds.rng(f"init/z{i}"))
            p[f"z{i}.bias"] = np.zeros(arch.hidden_dim)
            dim = arch.hidden_dim
        p["y.weight"] = ad.glorot_init(dim, num_classes, seeds.rng("init/y"))
        p["y.bias"] = np.zeros(num_classes)
        if ssl_dim:
            p["s.weight"] = ad.glorot_init(dim, ssl_dim, seeds.rng("init/ssl"))
            p["s.bias"] = np.zeros(ssl_dim)
        self.params = ModelParams(p)
        self._sparse_cache = (None, None)

    @property
    def embed_dim(self) -> int:
        return self.arch.hidden_dim

    def bind(self) -> dict:
        """Wrap every parameter array in a fresh differentiable leaf."""
        return {k: ad.param(v) for k, v in self.params.arrays.items()}

    def _sparse_input(self, x):
        if sp.issparse(x):
            return x.tocsr()
        src, cached = self._sparse_cache
        if src is x:
            return cached
        x = np.asarray(x, dtype=float)
        out = None
        if x.ndim == 2 and x.size and np.count_nonzero(x) <= SPARSE_INPUT_DENSITY * x.size:
            out = sp.csr_matrix(x)
        self._sparse_cache = (x, out)
        return out

    def _layer(self, kind, adj, h, w, b, train, rng, sparse_x=None):
        if sparse_x is not None:
            h = ad.sparse_dropout_matmul(sparse_x, w, self.arch.dropout, train, rng)
        else:
            h = ad.dropout(h, self.arch.dropout, train, rng)
            h = ad.matmul(h, w)
        if kind == GRAPH_CONV:
            h = ad.spmm(adj, h)
        return ad.add_bias(h, b)

    def forward_extract(self, adj: sp.spmatrix, x, bound: dict, train: bool,
                        rng: np.random.Generator | None = None) -> ad.DiffValue:
        sparse_x = self._sparse_input(x)
        h = None if sparse_x is not None else ad.const(x)
        width = x.shape[1]
        if width != self.in_dim:
            raise ad.ShapeError(f"extractor expects {self.in_dim} input features, got {width}")
        for i, kind in enumerate(self.arch.extractor_layers):
            h = ad.relu(self._layer(kind, adj, h, bound[f"z{i}.weight"], bound[f"z{i}.bias"],
                                    train, rng, sparse_x if i == 0 else None))
        return h

    def forward_classify(self, adj, z: ad.DiffValue, bound: dict, train: bool,
                         rng: np.random.Generator | None = None) -> ad.DiffValue:
        return self._layer(self.arch.task_adapter, adj, z, bound["y.weight"], bound["y.bias"],
                           train, rng)

    def forward_ssl(self, h: ad.DiffValue, bound: dict, output_dim: int | None = None) -> ad.DiffValue:
        """Linear SSL adapter applied to node embeddings or pair features."""
        if "s.weight" not in bound:
            raise ad.ShapeError("model has no SSL adapter")
        if output_dim is not None and output_dim != bound["s.weight"].shape[1]:
            raise ad.ShapeError(f"SSL adapter outputs {bound['s.weight'].shape[1]} dims, "
                                f"pretext target needs {output_dim}")
        return ad.add_bias(ad.matmul(h, bound["s.weight"]), bound["s.bias"])

    def forward_pairs(self, z: ad.DiffValue, pairs: np.ndarray, bound: dict,
                      output_dim: int | None = None) -> ad.DiffValue:
        """SSL adapter on ``|z_i - z_j|`` for each row ``(i, j)`` of ``pairs``."""
        d = ad.abs_elem(ad.sub_elem(ad.take_rows(z, pairs[:, 0]), ad.take_rows(z, pairs[:, 1])))
        return self.forward_ssl(d, bound, output_dim)

    def predict(self, adj, x) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode logits and embeddings (no parameter mutation)."""
        bound = self.bind()
        z = self.forward_extract(adj, x, bound, train=False)
        return self.forward_classify(adj, z, bound, train=False).value, z.value


# --------------------------------------------------------------------------
# checkpoint: u64 header length | JSON header | little-endian float64 payload

_MAGIC = b"GSSL"


def save_checkpoint(params: dict, arch: str) -> bytes:
    names = sorted(params)
    header = {"arch": arch, "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names]}
    hbytes = json.dumps(header).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<Q", len(hbytes)))
    buf.write(hbytes)
    for n in names:
        buf.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())
    return buf.getvalue()


def load_checkpoint(blob: bytes) -> tuple[str, dict]:
    if blob[:4] != _MAGIC:
        raise ValueError("not a parameter checkpoint")
    (hlen,) = struct.unpack("<Q", blob[4:12])
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    off = 12 + hlen
    out = {}
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        count = int(np.prod(shape)) if shape else 1
        out[t["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    if off != len(blob):
        raise ValueError("checkpoint payload length does not match header")
    return header["arch"], out
