"""Residual attention gates: a shared token gate plus a low-rank residual per projection."""

from dataclasses import dataclass
import hashlib
import json
import math
import os
import shutil

import numpy as np

from . import kernels
from .attention import ProjectionRef, projection_forward, projection_refs
from .errors import InvalidInputError
from .numkit import as_matrix, dump_json, read_tensors, write_tensors


@dataclass
class GateParams:
    u1: np.ndarray  # s1 x d
    u2: np.ndarray  # s1 x d
    v: np.ndarray  # d

    @property
    def s1(self):
        return self.u1.shape[0]


@dataclass
class LowRankDelta:
    u3: np.ndarray  # s2 x d
    u4: np.ndarray  # s2 x d_out
    target: ProjectionRef

    @property
    def s2(self):
        return self.u3.shape[0]

    def delta_weight(self):
        """The d_out x d weight change ``u4.T @ u3``."""
        return self.u4.T @ self.u3


@dataclass
class ResAG:
    """One concept's gate and its per-projection low-rank deltas."""

    concept_id: str
    gate: GateParams
    deltas: dict  # ProjectionRef -> LowRankDelta

    @property
    def s1(self):
        return self.gate.s1

    @property
    def s2(self):
        return next(iter(self.deltas.values())).s2

    @property
    def d(self):
        return self.gate.u1.shape[1]

    def delta(self, proj):
        try:
            return self.deltas[proj]
        except KeyError:
            raise InvalidInputError(f"{self.concept_id!r} has no delta for projection {proj}") from None

    def params(self):
        """Flat name -> array view of every trainable tensor, in a fixed order."""
        out = {"gate.u1": self.gate.u1, "gate.u2": self.gate.u2, "gate.v": self.gate.v}
        for ref, dl in self.deltas.items():
            out[f"{ref}.u3"] = dl.u3
            out[f"{ref}.u4"] = dl.u4
        return out

    def with_params(self, params):
        """New ResAG with tensors taken from ``params`` (same keys as ``params()``)."""
        gate = GateParams(
            np.array(params["gate.u1"], dtype=np.float64),
            np.array(params["gate.u2"], dtype=np.float64),
            np.array(params["gate.v"], dtype=np.float64).reshape(-1),
        )
        deltas = {
            ref: LowRankDelta(
                np.array(params[f"{ref}.u3"], dtype=np.float64),
                np.array(params[f"{ref}.u4"], dtype=np.float64),
                ref,
            )
            for ref in self.deltas
        }
        return ResAG(self.concept_id, gate, deltas)

    def copy(self):
        return self.with_params(self.params())

    def digest(self):
        h = hashlib.sha256()
        for name, arr in self.params().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def init_resag(concept_id, layers, s1, s2, rng):
    """Zero-residual start: u1, u2, u3 ~ N(0, 1/d), u4 = 0, v = 0."""
    if s1 < 1 or s2 < 1:
        raise InvalidInputError("ranks s1 and s2 must be at least 1")
    d = layers[0].d
    std = 1.0 / math.sqrt(d)
    gate = GateParams(std * rng.normal((s1, d)), std * rng.normal((s1, d)), np.zeros(d))
    deltas = {}
    for ref in projection_refs(layers):
        d_out = layers[ref.layer].projection(ref.kind).shape[0]
        deltas[ref] = LowRankDelta(std * rng.normal((s2, d)), np.zeros((s2, d_out)), ref)
    return ResAG(concept_id, gate, deltas)


def gate_forward(gate, e):
    """Token attention ``A`` (m x m, columns sum to 1) and per-token gate ``g`` in (0, 1)."""
    e = as_matrix(e, "E")
    if e.shape[0] != gate.u1.shape[1]:
        raise InvalidInputError(f"embedding has d={e.shape[0]}, gate expects d={gate.u1.shape[1]}")
    m = e.shape[1]
    logits = ((gate.u1 @ e).T @ (gate.u2 @ e)) * (1.0 / math.sqrt(m))
    a = kernels.softmax_columns(logits)
    g = kernels.logistic((gate.v @ (e @ a))[None, :])[0]
    return a, g


def _residual(delta, e, a, g):
    return (delta.u4.T @ (delta.u3 @ (e @ a))) * g[None, :]


def resag_forward(r, proj, e):
    """Residual added to projection ``proj``'s output for embedding ``e``."""
    delta = r.delta(proj)
    a, g = gate_forward(r.gate, e)
    return _residual(delta, e, a, g)


def augmented_projection(w, r, proj, e):
    return projection_forward(w, e) + resag_forward(r, proj, e)


def merged_forward(rs, proj, e):
    """Per token, add only the residual of the concept whose gate is highest.

    Ties go to the earliest concept in ``rs``.
    """
    if not rs:
        raise InvalidInputError("merged_forward needs at least one ResAG")
    residuals, gates = [], []
    for r in rs:
        a, g = gate_forward(r.gate, e)
        residuals.append(_residual(r.delta(proj), e, a, g))
        gates.append(g)
    winner = np.argmax(np.stack(gates), axis=0)
    out = np.empty_like(residuals[0])
    for i, c in enumerate(winner):
        out[:, i] = residuals[c][:, i]
    return out


# -- tape versions ------------------------------------------------------------


def tape_nodes(tape, r, trainable=True):
    """Put every tensor of ``r`` on ``tape`` (as parameters or constants)."""
    put = tape.param if trainable else (lambda _name, value: tape.const(value))
    return {name: put(name, value) for name, value in r.params().items()}


def tape_gate(tape, nodes, e):
    """Tape counterpart of ``gate_forward``; returns (E @ A, A, g) nodes, g is 1 x m."""
    m = e.shape[1]
    logits = tape.scale(tape.matmul(tape.transpose(nodes["gate.u1"] @ e), nodes["gate.u2"] @ e), 1.0 / math.sqrt(m))
    a = tape.softmax_columns(logits)
    ea = tape.matmul(e, a)
    g = tape.logistic(nodes["gate.v"] @ ea)
    return ea, a, g


def tape_residual(tape, nodes, proj, ea, g):
    u3 = nodes[f"{proj}.u3"]
    u4 = nodes[f"{proj}.u4"]
    return tape.diag_scale(tape.transpose(u4) @ (u3 @ ea), g)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(r, directory, stack_id=None):
    """Write ``<concept>.json`` and ``<concept>.bin``; returns the JSON path."""
    os.makedirs(directory, exist_ok=True)
    blob = f"{r.concept_id}.bin"
    entries = write_tensors(os.path.join(directory, blob), r.params())
    manifest = {
        "concept_id": r.concept_id,
        "s1": r.s1,
        "s2": r.s2,
        "d": r.d,
        "projections": [str(ref) for ref in r.deltas],
        "stack_id": stack_id,
        "blob": blob,
        "tensors": entries,
    }
    path = os.path.join(directory, f"{r.concept_id}.json")
    dump_json(manifest, path)
    return path


def load_checkpoint(path):
    with open(path) as fh:
        manifest = json.load(fh)
    tensors = read_tensors(os.path.join(os.path.dirname(path), manifest["blob"]), manifest["tensors"])
    refs = [ProjectionRef.parse(p) for p in manifest["projections"]]
    gate = GateParams(tensors["gate.u1"], tensors["gate.u2"], tensors["gate.v"].reshape(-1))
    deltas = {ref: LowRankDelta(tensors[f"{ref}.u3"], tensors[f"{ref}.u4"], ref) for ref in refs}
    r = ResAG(manifest["concept_id"], gate, deltas)
    if r.s1 != manifest["s1"] or r.s2 != manifest["s2"]:
        raise InvalidInputError(f"checkpoint {path} disagrees with its declared ranks")
    return r, manifest


def write_merge_set(paths, directory):
    """Copy checkpoints into ``directory`` and index them; all must share one stack."""
    if not paths:
        raise InvalidInputError("merge set needs at least one checkpoint")
    os.makedirs(directory, exist_ok=True)
    concepts, files, stack_ids, proj_lists = [], [], set(), set()
    for path in paths:
        r, manifest = load_checkpoint(path)
        if r.concept_id in concepts:
            raise InvalidInputError(f"concept {r.concept_id!r} appears twice")
        stack_ids.add(manifest.get("stack_id"))
        proj_lists.add(tuple(manifest["projections"]))
        src_dir = os.path.dirname(path)
        for name in (os.path.basename(path), manifest["blob"]):
            dst = os.path.join(directory, name)
            if os.path.abspath(os.path.join(src_dir, name)) != os.path.abspath(dst):
                shutil.copyfile(os.path.join(src_dir, name), dst)
        concepts.append(r.concept_id)
        files.append(os.path.basename(path))
    if len(stack_ids) > 1 or len(proj_lists) > 1:
        raise InvalidInputError("checkpoints are attached to different layer stacks")
    index = {"concepts": concepts, "checkpoints": files, "stack_id": stack_ids.pop()}
    dump_json(index, os.path.join(directory, "index.json"))
    return index


def load_merge_set(directory):
    with open(os.path.join(directory, "index.json")) as fh:
        index = json.load(fh)
    return [load_checkpoint(os.path.join(directory, f))[0] for f in index["checkpoints"]]
