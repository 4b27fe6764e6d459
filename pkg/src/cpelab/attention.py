"""Multi-head cross-attention layers and their output-perturbation coefficients."""

from dataclasses import dataclass, field
import math
import os

import numpy as np

from .errors import InvalidInputError
from .numkit import RngStream, as_matrix, dump_json, read_tensors, softmax_columns, spectral_norm, write_tensors

KINDS = ("key", "value")


@dataclass(frozen=True)
class ProjectionRef:
    """Address of a key or value projection in a layer stack.

    ``head`` is None for the whole-layer projection (all heads stacked).
    """

    layer: int
    kind: str
    head: int = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"projection kind must be 'key' or 'value', got {self.kind!r}")
        if self.layer < 0:
            raise InvalidInputError("layer index must be nonnegative")

    def __str__(self):
        s = f"L{self.layer}.{self.kind}"
        return s if self.head is None else f"{s}.h{self.head}"

    @classmethod
    def parse(cls, text):
        parts = text.split(".")
        try:
            layer = int(parts[0].lstrip("L"))
            head = int(parts[2].lstrip("h")) if len(parts) > 2 else None
            return cls(layer, parts[1], head)
        except (IndexError, ValueError) as exc:
            raise InvalidInputError(f"bad projection reference {text!r}") from exc


@dataclass(frozen=True)
class CALayer:
    """One H-head cross-attention layer.

    Per head: ``wq[h]`` is (d2/H, d1), ``wk[h]`` and ``wv[h]`` are (d2/H, d),
    ``wo[h]`` is (d1, d2/H). ``m`` is the token count used in the 1/sqrt(m)
    scaling.
    """

    wq: tuple
    wk: tuple
    wv: tuple
    wo: tuple
    m: int

    def __post_init__(self):
        h = len(self.wq)
        if h == 0 or not (len(self.wk) == len(self.wv) == len(self.wo) == h):
            raise InvalidInputError("every projection needs one matrix per head")
        for name in ("wq", "wk", "wv", "wo"):
            object.__setattr__(self, name, tuple(as_matrix(w, name) for w in getattr(self, name)))
        dh, d1 = self.wq[0].shape
        d = self.wk[0].shape[1]
        for i in range(h):
            if (
                self.wq[i].shape != (dh, d1)
                or self.wk[i].shape != (dh, d)
                or self.wv[i].shape != (dh, d)
                or self.wo[i].shape != (d1, dh)
            ):
                raise InvalidInputError(f"head {i} has inconsistent projection shapes")
        if self.m < 1:
            raise InvalidInputError("m must be at least 1")

    @property
    def heads(self):
        return len(self.wq)

    @property
    def d(self):
        return self.wk[0].shape[1]

    @property
    def d1(self):
        return self.wq[0].shape[1]

    @property
    def d2(self):
        return self.wq[0].shape[0] * self.heads

    @property
    def key(self):
        """Whole-layer key projection (d2 x d), heads stacked in order."""
        return np.vstack(self.wk)

    @property
    def value(self):
        return np.vstack(self.wv)

    def projection(self, kind, head=None):
        ws = self.wk if kind == "key" else self.wv
        if kind not in KINDS:
            raise InvalidInputError(f"unknown projection kind {kind!r}")
        return np.vstack(ws) if head is None else ws[head]

    def perturbed(self, dk=None, dv=None):
        """Copy with per-head key/value deltas added (lists of matrices or None)."""
        wk = self.wk if dk is None else tuple(w + dw for w, dw in zip(self.wk, dk))
        wv = self.wv if dv is None else tuple(w + dw for w, dw in zip(self.wv, dv))
        return CALayer(self.wq, wk, wv, self.wo, self.m)

    @classmethod
    def random(cls, rng, d, d1, d2, heads, m, scale=1.0, gains=None):
        """Gaussian weights with std ``scale / sqrt(fan_in)``.

        ``gains`` optionally multiplies each of "wq", "wk", "wv", "wo" further.
        """
        if d2 % heads:
            raise InvalidInputError(f"d2={d2} is not divisible by H={heads}")
        dh = d2 // heads
        gains = gains or {}

        def g(rows, cols, kind):
            return (scale * gains.get(kind, 1.0)) * rng.normal((rows, cols)) / math.sqrt(cols)

        wq = tuple(g(dh, d1, "wq") for _ in range(heads))
        wk = tuple(g(dh, d, "wk") for _ in range(heads))
        wv = tuple(g(dh, d, "wv") for _ in range(heads))
        wo = tuple(g(d1, dh, "wo") for _ in range(heads))
        return cls(wq, wk, wv, wo, m)


def ca_forward(layer, z, e):
    """Cross-attention output for query ``z`` (length d1) over embedding ``e`` (d x m)."""
    e = as_matrix(e, "E")
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if e.shape != (layer.d, layer.m) or z.shape != (layer.d1,):
        raise InvalidInputError(
            f"expected E of shape {(layer.d, layer.m)} and z of length {layer.d1}, "
            f"got {e.shape} and {z.shape}"
        )
    out = np.zeros(layer.d1)
    scale = 1.0 / math.sqrt(layer.m)
    for wq, wk, wv, wo in zip(layer.wq, layer.wk, layer.wv, layer.wo):
        logits = ((wk @ e).T @ (wq @ z)) * scale
        attn = softmax_columns(logits[:, None])[:, 0]
        out += wo @ (wv @ (e @ attn))
    return out


def projection_forward(w, e):
    w = np.asarray(w, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if w.ndim != 2 or e.ndim != 2 or w.shape[1] != e.shape[0]:
        raise InvalidInputError(f"cannot multiply {w.shape} by {e.shape}")
    return w @ e


def projection_refs(layers):
    """Whole-layer key and value projections of a stack, in canonical order."""
    return [ProjectionRef(l, kind) for l in range(len(layers)) for kind in KINDS]


@dataclass(frozen=True)
class BoundCoefficients:
    """Per-layer weights on key and value residual norms.

    ``c1[l]``/``c2[l]`` are maxima over heads of the per-head values kept in
    ``c1_heads``/``c2_heads``.
    """

    m1: float
    m2: float
    c1: tuple
    c2: tuple
    c1_heads: tuple = field(default=(), compare=False)
    c2_heads: tuple = field(default=(), compare=False)

    def for_projection(self, ref):
        return self.c1[ref.layer] if ref.kind == "key" else self.c2[ref.layer]

    def to_dict(self):
        return {
            "m1": self.m1,
            "m2": self.m2,
            "c1": list(self.c1),
            "c2": list(self.c2),
            "c1_heads": [list(x) for x in self.c1_heads],
            "c2_heads": [list(x) for x in self.c2_heads],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            float(d["m1"]),
            float(d["m2"]),
            tuple(d["c1"]),
            tuple(d["c2"]),
            tuple(tuple(x) for x in d.get("c1_heads", ())),
            tuple(tuple(x) for x in d.get("c2_heads", ())),
        )


def softmax_lipschitz(m):
    """Lipschitz constant used for a length-m softmax: sqrt(m - 1) / m."""
    return math.sqrt(m - 1) / m


def head_coefficients(layer, m1, m2, norm=spectral_norm):
    """Per-head (c1, c2) lists for one layer given the data bounds m1, m2."""
    m = layer.m
    factor = m1 * m2 * softmax_lipschitz(m) / math.sqrt(m)
    c1, c2 = [], []
    for wq, wv, wo in zip(layer.wq, layer.wv, layer.wo):
        c1.append(factor * norm(wo @ wv) * norm(wq))
        c2.append(norm(wo))
    return c1, c2


def compute_bound_coefficients(layers, dataset, queries):
    """Coefficients for every layer of a stack.

    ``m1`` is the largest spectral norm over ``dataset`` embeddings and ``m2``
    the largest absolute entry over ``queries``.
    """
    dataset = list(dataset)
    queries = list(queries)
    if not dataset or not queries:
        raise InvalidInputError("dataset and queries must be nonempty")
    if not layers:
        raise InvalidInputError("layer stack is empty")
    m1 = max(spectral_norm(e) for e in dataset)
    m2 = max(float(np.max(np.abs(q))) for q in queries)
    c1_heads, c2_heads = [], []
    for layer in layers:
        c1, c2 = head_coefficients(layer, m1, m2)
        c1_heads.append(tuple(c1))
        c2_heads.append(tuple(c2))
    return BoundCoefficients(
        m1,
        m2,
        tuple(max(c) for c in c1_heads),
        tuple(max(c) for c in c2_heads),
        tuple(c1_heads),
        tuple(c2_heads),
    )


# -- default stacks -----------------------------------------------------------

# Key/value gain keeps the erase target within reach of a rank-1 residual at
# d=32; the small output gain keeps lambda * C2 comparable to the erase gradient.
DEFAULT_STACK = {
    "layers": 2,
    "d1": 16,
    "d2": 16,
    "heads": 2,
    "query_gain": 1.0,
    "key_value_gain": 0.1,
    "output_gain": 2e-5,
    "queries": 64,
    "seed": 0,
}

_STREAM_STACK = 99


def make_stack(cfg, d, m):
    """Random layer stack plus query set; returns (layers, queries).

    Queries are uniform in [-1, 1]^d1, so M2 is just below 1.
    """
    cfg = {**DEFAULT_STACK, **cfg}
    if cfg["layers"] < 1 or cfg["queries"] < 1:
        raise InvalidInputError("need at least one layer and one query")
    rng = RngStream(cfg["seed"], _STREAM_STACK)
    kv = cfg["key_value_gain"]
    gains = {"wq": cfg["query_gain"], "wk": kv, "wv": kv, "wo": cfg["output_gain"]}
    layers = [
        CALayer.random(rng, d, cfg["d1"], cfg["d2"], cfg["heads"], m, gains=gains) for _ in range(cfg["layers"])
    ]
    queries = [rng.uniform(-1.0, 1.0, cfg["d1"]) for _ in range(cfg["queries"])]
    return layers, queries


# -- layer stack files --------------------------------------------------------


def save_layers(layers, directory, name="layers", extra=None):
    """Write ``<name>.json`` (descriptor + manifest) and ``<name>.bin``."""
    if not layers:
        raise InvalidInputError("cannot save an empty layer stack")
    first = layers[0]
    tensors = {}
    for l, layer in enumerate(layers):
        for kind in ("wq", "wk", "wv", "wo"):
            for h, w in enumerate(getattr(layer, kind)):
                tensors[f"L{l}.{kind}.h{h}"] = w
    for key, arr in (extra or {}).items():
        tensors[key] = arr
    os.makedirs(directory, exist_ok=True)
    entries = write_tensors(os.path.join(directory, f"{name}.bin"), tensors)
    desc = {
        "H": first.heads,
        "d": first.d,
        "d1": first.d1,
        "d2": first.d2,
        "m": first.m,
        "layers": len(layers),
        "blob": f"{name}.bin",
        "tensors": entries,
    }
    dump_json(desc, os.path.join(directory, f"{name}.json"))
    return desc


def load_layers(directory, name="layers"):
    """Inverse of ``save_layers``; returns (layers, extra tensors)."""
    import json

    with open(os.path.join(directory, f"{name}.json")) as fh:
        desc = json.load(fh)
    tensors = read_tensors(os.path.join(directory, desc["blob"]), desc["tensors"])
    layers = []
    for l in range(desc["layers"]):
        parts = {
            kind: tuple(tensors.pop(f"L{l}.{kind}.h{h}") for h in range(desc["H"]))
            for kind in ("wq", "wk", "wv", "wo")
        }
        layers.append(CALayer(parts["wq"], parts["wk"], parts["wv"], parts["wo"], desc["m"]))
    return layers, tensors
