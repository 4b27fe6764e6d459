"""Synthetic concept banks: Gaussian-mixture embeddings that share prompt templates.

Every concept is a mixture with one mode per template. A template is a
``d x m`` matrix of context tokens with one slot reserved for the concept; a
concept's mode mean is the template with the concept's token vector written
into that slot and a ``carry`` fraction of it added to every later token.
Paired target/surrogate draws share the mode choice and the noise, so
their difference is confined to the concept token and what it carries.
"""

from dataclasses import dataclass, field
import json
import os

import numpy as np

from .errors import GenerationError, InvalidInputError
from .numkit import GmmSpec, RngStream, dump_json, read_tensors, write_tensors

# stream ids for the independent pieces of a bank
_STREAM_TEMPLATES = 1
_STREAM_CONCEPTS = 2
_STREAM_SAMPLES = 3


@dataclass
class ConceptBank:
    """Target/surrogate specs with paired sample sets, an anchor pool and held-out concepts.

    ``e_tar`` and ``e_sur`` are arrays of shape (n, d, m) drawn in pairs.
    The trainer never reads ``remaining``.
    """

    target_id: str
    target: GmmSpec
    surrogate_id: str
    surrogate: GmmSpec
    e_tar: np.ndarray
    e_sur: np.ndarray
    pool_ids: list
    pool: list
    remaining_ids: list
    remaining: list
    descriptor: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.e_tar) == 0 or self.e_tar.shape != self.e_sur.shape:
            raise InvalidInputError("target and surrogate sample sets must be nonempty and paired")

    @property
    def d(self):
        return self.target.d

    @property
    def m(self):
        return self.target.m


def flat_cosine(a, b):
    a = np.ravel(a)
    b = np.ravel(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def sample_pairs(target, surrogate, rng, n):
    """``n`` paired draws sharing mode choice and noise; returns (e_tar, e_sur, modes)."""
    if target.weights.shape != surrogate.weights.shape or not np.array_equal(target.weights, surrogate.weights):
        raise InvalidInputError("paired sampling needs identical mode weights")
    u = rng.uniform(size=n)
    cdf = np.cumsum(target.weights)
    cdf[-1] = 1.0
    modes = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
    noise = rng.normal((n, target.d, target.m))
    e_tar = target.means[modes] + target.sigmas[modes][:, None, None] * noise
    e_sur = surrogate.means[modes] + surrogate.sigmas[modes][:, None, None] * noise
    return e_tar, e_sur, modes


DEFAULT_BANK = {
    "d": 32,
    "m": 8,
    "templates": 2,
    "token_scale": 4.0,
    "template_scale": 0.4,
    "sigma": 0.2,
    "carry": 0.6,
    "targets": 1,
    "pool_size": 20,
    "remaining": 10,
    "samples": 64,
    "min_separation": 0.25,
    "max_retries": 2000,
    "seed": 0,
}


class _Concepts:
    def __init__(self, templates, slots, weights, sigma, carry=0.0):
        self.templates = templates
        self.carry = carry
        self.slots = slots
        self.weights = weights
        self.sigma = sigma

    def spec(self, vector):
        means = self.templates.copy()
        for r, p in enumerate(self.slots):
            means[r, :, p] = vector
            means[r, :, p + 1 :] += self.carry * vector[:, None]
        return GmmSpec(self.weights, means, np.full(len(self.slots), self.sigma))


def build_concepts(cfg):
    """Draw templates and concept vectors; returns (maker, {id: vector}).

    Concept vectors are accepted one by one only if the flattened mixture
    mean stays below ``1 - min_separation`` cosine with every accepted one.
    """
    d, m, R = cfg["d"], cfg["m"], cfg["templates"]
    if R < 1 or R > m:
        raise InvalidInputError(f"templates must be in [1, m], got {R}")
    seed = cfg["seed"]
    trng = RngStream(seed, _STREAM_TEMPLATES)
    templates = cfg["template_scale"] * trng.normal((R, d, m))
    slots = [int(p) for p in trng.gen.permutation(m)[:R]]
    for r, p in enumerate(slots):
        templates[r, :, p] = 0.0
    maker = _Concepts(templates, slots, np.full(R, 1.0 / R), cfg["sigma"], cfg["carry"])

    ids = [f"target{i}" for i in range(cfg["targets"])] + ["surrogate"]
    ids += [f"anchor{i:02d}" for i in range(cfg["pool_size"])]
    ids += [f"remaining{i:02d}" for i in range(cfg["remaining"])]
    ceiling = 1.0 - cfg["min_separation"]
    crng = RngStream(seed, _STREAM_CONCEPTS)
    accepted, means = {}, []
    for cid in ids:
        for _ in range(cfg["max_retries"]):
            vec = cfg["token_scale"] * crng.normal(d)
            mean = maker.spec(vec).mean()
            if all(flat_cosine(mean, other) < ceiling for other in means):
                accepted[cid] = vec
                means.append(mean)
                break
        else:
            raise GenerationError(
                f"could not place concept {cid!r} below cosine {ceiling:.3g} after {cfg['max_retries']} draws"
            )
    return maker, accepted


def generate_banks(cfg):
    """One ConceptBank per target; all share templates, surrogate, pool and remaining."""
    cfg = {**DEFAULT_BANK, **cfg}
    maker, vectors = build_concepts(cfg)
    surrogate = maker.spec(vectors["surrogate"])
    pool_ids = sorted(k for k in vectors if k.startswith("anchor"))
    rem_ids = sorted(k for k in vectors if k.startswith("remaining"))
    pool = [maker.spec(vectors[k]) for k in pool_ids]
    remaining = [maker.spec(vectors[k]) for k in rem_ids]
    banks = []
    for t in range(cfg["targets"]):
        tid = f"target{t}"
        target = maker.spec(vectors[tid])
        srng = RngStream(cfg["seed"], _STREAM_SAMPLES + 16 * t)
        e_tar, e_sur, _ = sample_pairs(target, surrogate, srng, cfg["samples"])
        banks.append(
            ConceptBank(tid, target, "surrogate", surrogate, e_tar, e_sur, pool_ids, pool, rem_ids, remaining, dict(cfg))
        )
    return banks


def save_bank(bank, directory):
    """Write ``<target>.bank.json`` (descriptor) and ``<target>.bank.bin`` (mode means)."""
    os.makedirs(directory, exist_ok=True)
    tensors = {}
    specs = [(bank.target_id, bank.target), (bank.surrogate_id, bank.surrogate)]
    specs += list(zip(bank.pool_ids, bank.pool)) + list(zip(bank.remaining_ids, bank.remaining))
    concepts = []
    for cid, spec in specs:
        for r in range(spec.n_modes):
            tensors[f"{cid}.mean{r}"] = spec.means[r]
        concepts.append({"id": cid, "weights": spec.weights.tolist(), "sigmas": spec.sigmas.tolist()})
    blob = f"{bank.target_id}.bank.bin"
    entries = write_tensors(os.path.join(directory, blob), tensors)
    desc = {
        "config": bank.descriptor,
        "d": bank.d,
        "m": bank.m,
        "target": bank.target_id,
        "surrogate": bank.surrogate_id,
        "pool": list(bank.pool_ids),
        "remaining": list(bank.remaining_ids),
        "samples": int(len(bank.e_tar)),
        "concepts": concepts,
        "blob": blob,
        "tensors": entries,
    }
    path = os.path.join(directory, f"{bank.target_id}.bank.json")
    dump_json(desc, path)
    return path


def load_bank(path):
    """Read a bank file; the paired sample sets are regenerated from the seed."""
    with open(path) as fh:
        desc = json.load(fh)
    tensors = read_tensors(os.path.join(os.path.dirname(path), desc["blob"]), desc["tensors"])
    specs = {}
    for c in desc["concepts"]:
        means = np.stack([tensors[f"{c['id']}.mean{r}"] for r in range(len(c["weights"]))])
        specs[c["id"]] = GmmSpec(np.array(c["weights"]), means, np.array(c["sigmas"]))
    cfg = desc["config"]
    t = int(desc["target"].removeprefix("target")) if desc["target"].startswith("target") else 0
    srng = RngStream(cfg["seed"], _STREAM_SAMPLES + 16 * t)
    target, surrogate = specs[desc["target"]], specs[desc["surrogate"]]
    e_tar, e_sur, _ = sample_pairs(target, surrogate, srng, desc["samples"])
    return ConceptBank(
        desc["target"],
        target,
        desc["surrogate"],
        surrogate,
        e_tar,
        e_sur,
        desc["pool"],
        [specs[k] for k in desc["pool"]],
        desc["remaining"],
        [specs[k] for k in desc["remaining"]],
        cfg,
    )
