"""Command-line entry point: gen-bank, train, merge, verify-theory, eval.

Every command reads a strict JSON config (unknown keys are errors), writes
its artifacts under ``--out`` and finishes with ``<command>.report.json``
carrying the resolved config and its hash.

Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 verification failure.
Errors are printed to stderr as one JSON object.
"""

import argparse
from concurrent.futures import ThreadPoolExecutor
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .attention import DEFAULT_STACK, load_layers, make_stack, save_layers
from .bank import DEFAULT_BANK, generate_banks, load_bank, save_bank
from .errors import ConfigError, GenerationError, InvalidInputError, NumericFailure
from .evaluate import fresh_attack_loss, selectivity_report
from .numkit import dump_json
from .resag import load_checkpoint, write_merge_set
from .theory import BoundDims, run_all
from .trainer import PRESETS, TrainConfig, train_concept, write_reports

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4
THREADS_ENV = "CPELAB_THREADS"


# -- config handling ------------------------------------------------------------


def _check_keys(cfg, allowed, where):
    if not isinstance(cfg, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def _typed(cfg, key, kind, default, where):
    value = cfg.get(key, default)
    ok = isinstance(value, kind) and not (kind is not bool and isinstance(value, bool))
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value, ok = float(value), True
    if not ok:
        raise ConfigError(f"{where}.{key}: expected {kind.__name__}, got {value!r}")
    return value


def _merge_section(section, defaults, where):
    section = section or {}
    _check_keys(section, defaults, where)
    out = {}
    for key, default in defaults.items():
        kind = float if isinstance(default, float) else type(default)
        out[key] = _typed(section, key, kind, default, where)
    return out


def _require_path(path, where):
    if not isinstance(path, str) or not os.path.exists(path):
        raise ConfigError(f"{where}: path {path!r} does not exist")
    return path


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write_report(out, command, cfg, body):
    os.makedirs(out, exist_ok=True)
    report = {"command": command, "version": __version__, "config": cfg, "config_hash": config_hash(cfg), **body}
    dump_json(report, os.path.join(out, f"{command}.report.json"))
    return report


def _threads():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    return n


# -- gen-bank -------------------------------------------------------------------


def resolve_gen_bank(raw, seed=None):
    _check_keys(raw, {"bank", "stack", "seed"}, "config")
    top_seed = _typed(raw, "seed", int, 0, "config") if seed is None else seed
    bank = _merge_section(raw.get("bank"), {**DEFAULT_BANK, "seed": top_seed}, "bank")
    stack = _merge_section(raw.get("stack"), {**DEFAULT_STACK, "seed": top_seed}, "stack")
    if seed is not None:
        bank["seed"] = stack["seed"] = seed
    for key in ("d", "m", "templates", "targets", "pool_size", "remaining", "samples", "max_retries"):
        if bank[key] < 1:
            raise ConfigError(f"bank.{key} must be >= 1")
    if not 0.0 < bank["min_separation"] < 2.0:
        raise ConfigError("bank.min_separation must lie in (0, 2)")
    if bank["templates"] > bank["m"]:
        raise ConfigError("bank.templates cannot exceed bank.m")
    if stack["d2"] % stack["heads"]:
        raise ConfigError("stack.d2 must be divisible by stack.heads")
    return {"seed": top_seed, "bank": bank, "stack": stack}


def cmd_gen_bank(cfg, out):
    banks = generate_banks(cfg["bank"])
    layers, queries = make_stack(cfg["stack"], cfg["bank"]["d"], cfg["bank"]["m"])
    os.makedirs(out, exist_ok=True)
    files = [os.path.basename(save_bank(b, out)) for b in banks]
    save_layers(layers, out, extra={"queries": np.stack(queries)})
    return {
        "banks": files,
        "targets": [b.target_id for b in banks],
        "stack_id": _file_digest(os.path.join(out, "layers.bin"))[:16],
    }


# -- train --------------------------------------------------------------------


def _load_stack(bank_dir):
    layers, extra = load_layers(bank_dir)
    if "queries" not in extra:
        raise ConfigError(f"{bank_dir}: layer file has no query set")
    return layers, list(extra["queries"]), _file_digest(os.path.join(bank_dir, "layers.bin"))[:16]


def _bank_path(bank_dir, concept):
    return _require_path(os.path.join(bank_dir, f"{concept}.bank.json"), f"concept {concept!r}")


def resolve_train(raw, seed=None):
    _check_keys(raw, {"bank_dir", "concepts", "preset", "train", "seed"}, "config")
    bank_dir = _require_path(raw.get("bank_dir"), "bank_dir")
    _require_path(os.path.join(bank_dir, "layers.json"), "bank_dir layer stack")
    concepts = raw.get("concepts")
    if concepts is None:
        concepts = sorted(f[: -len(".bank.json")] for f in os.listdir(bank_dir) if f.endswith(".bank.json"))
    if not isinstance(concepts, list) or not concepts or not all(isinstance(c, str) for c in concepts):
        raise ConfigError("concepts must be a nonempty list of concept ids")
    if len(set(concepts)) != len(concepts):
        raise ConfigError("concepts must be distinct")
    for c in concepts:
        _bank_path(bank_dir, c)
    preset = raw.get("preset", "celebrity")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    top_seed = _typed(raw, "seed", int, 0, "config") if seed is None else seed
    overrides = raw.get("train") or {}
    _check_keys(overrides, TrainConfig.__dataclass_fields__, "train")
    if "seed" in overrides:
        raise ConfigError("train.seed: set the run seed at the top level or with --seed")
    train = {**PRESETS[preset], **overrides, "seed": top_seed}
    try:
        train = TrainConfig.from_dict(train).to_dict()
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from None
    return {"bank_dir": bank_dir, "concepts": concepts, "preset": preset, "seed": top_seed, "train": train}


def concept_seed(seed, index):
    """Independent per-concept seed derived from the run seed and the concept's position."""
    return int(np.random.SeedSequence(seed, spawn_key=(index,)).generate_state(1, dtype=np.uint32)[0])


def _train_one(cfg, index, concept, layers, queries, stack_id, out):
    train = TrainConfig.from_dict({**cfg["train"], "seed": concept_seed(cfg["seed"], index)})
    bank = load_bank(_bank_path(cfg["bank_dir"], concept))
    directory = os.path.join(out, concept)
    r, reports = train_concept(train, bank, layers, queries=queries, checkpoint_dir=directory, stack_id=stack_id)
    write_reports(reports, directory, {"concept": concept, "seed": train.seed, "config_hash": config_hash(cfg)})
    final = os.path.join(directory, f"stage{train.stages}", f"{concept}.json")
    return {"concept": concept, "seed": train.seed, "checkpoint": os.path.relpath(final, out), "digest": r.digest()}


def cmd_train(cfg, out):
    layers, queries, stack_id = _load_stack(cfg["bank_dir"])
    os.makedirs(out, exist_ok=True)
    jobs = list(enumerate(cfg["concepts"]))
    with ThreadPoolExecutor(max_workers=min(_threads(), len(jobs))) as pool:
        futures = [pool.submit(_train_one, cfg, i, c, layers, queries, stack_id, out) for i, c in jobs]
        results = [f.result() for f in futures]
    return {"stack_id": stack_id, "runs": results}


# -- merge --------------------------------------------------------------------


def resolve_merge(raw, seed=None):
    _check_keys(raw, {"checkpoints", "seed"}, "config")
    paths = raw.get("checkpoints")
    if not isinstance(paths, list) or not paths:
        raise ConfigError("checkpoints must be a nonempty list of paths")
    for p in paths:
        _require_path(p, "checkpoints")
    return {"checkpoints": paths, "seed": _typed(raw, "seed", int, 0, "config") if seed is None else seed}


def cmd_merge(cfg, out):
    return {"index": write_merge_set(cfg["checkpoints"], out)}


# -- verify-theory --------------------------------------------------------------


_THEORY_DEFAULTS = {"bound_trials": 10_000, "instances": 20, "samples": 200_000, "tolerance": 0.01, "seed": 0}
_DIMS_DEFAULTS = {"d": 16, "d1": 8, "d2": 8, "heads": 2, "m": 8, "m1": 1.0, "m2": 1.0}


def resolve_verify_theory(raw, seed=None):
    raw = dict(raw)
    dims = _merge_section(raw.pop("dims", None), _DIMS_DEFAULTS, "dims")
    cfg = _merge_section(raw, _THEORY_DEFAULTS, "config")
    if seed is not None:
        cfg["seed"] = seed
    if min(cfg["bound_trials"], cfg["instances"], cfg["samples"]) < 1:
        raise ConfigError("bound_trials, instances and samples must be >= 1")
    if cfg["tolerance"] <= 0:
        raise ConfigError("tolerance must be positive")
    try:
        BoundDims(**dims)
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from None
    cfg["dims"] = dims
    return cfg


def cmd_verify_theory(cfg, out):
    reports = run_all(cfg["seed"], cfg["bound_trials"], cfg["instances"], cfg["samples"], BoundDims(**cfg["dims"]))
    body = {name: rep.to_dict() for name, rep in reports.items()}
    failed = [
        name
        for name, rep in reports.items()
        if rep.violations > 0 or (name != "theorem1" and rep.max_rel_error > cfg["tolerance"])
    ]
    body["failed"] = failed
    os.makedirs(out, exist_ok=True)
    dump_json(body, os.path.join(out, "theory.json"))
    return body


# -- eval -----------------------------------------------------------------------


_ATTACK_DEFAULTS = {"t3": 150, "n_adv": 16, "lr_adv": 0.01, "adv_init_std": 1e-3, "seed": 0}


def resolve_eval(raw, seed=None):
    raw = dict(raw)
    attack = _merge_section(raw.pop("attack", None), _ATTACK_DEFAULTS, "attack")
    _check_keys(raw, {"bank_dir", "checkpoints", "samples", "eta", "anchors", "robustness", "seed"}, "config")
    bank_dir = _require_path(raw.get("bank_dir"), "bank_dir")
    paths = raw.get("checkpoints")
    if isinstance(paths, str):
        paths = [paths]
    if not isinstance(paths, list) or not paths:
        raise ConfigError("checkpoints must be a path or a nonempty list of paths")
    for p in paths:
        _require_path(p, "checkpoints")
    cfg = {
        "bank_dir": bank_dir,
        "checkpoints": paths,
        "samples": _typed(raw, "samples", int, 200, "config"),
        "eta": _typed(raw, "eta", float, PRESETS["celebrity"]["eta"], "config"),
        "anchors": _typed(raw, "anchors", int, 5, "config"),
        "robustness": _typed(raw, "robustness", bool, False, "config"),
        "seed": _typed(raw, "seed", int, 0, "config") if seed is None else seed,
        "attack": attack,
    }
    if cfg["samples"] < 1 or cfg["anchors"] < 1 or cfg["eta"] < 0:
        raise ConfigError("samples and anchors must be >= 1, eta >= 0")
    if attack["t3"] < 1 or attack["n_adv"] < 1 or attack["lr_adv"] < 0:
        raise ConfigError("attack needs t3 >= 1, n_adv >= 1, lr_adv >= 0")
    return cfg


def cmd_eval(cfg, out):
    layers, _, _ = _load_stack(cfg["bank_dir"])
    results = []
    for path in cfg["checkpoints"]:
        try:
            r, _ = load_checkpoint(path)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot read checkpoint {path!r}: {exc}") from None
        bank = load_bank(_bank_path(cfg["bank_dir"], r.concept_id))
        rep = selectivity_report(r, bank, layers, cfg["samples"], cfg["eta"], cfg["anchors"], cfg["seed"])
        rep["checkpoint"] = path
        if cfg["robustness"]:
            a = cfg["attack"]
            rep["attack_loss"] = fresh_attack_loss(
                r, bank, layers, a["t3"], a["n_adv"], a["lr_adv"], a["adv_init_std"], a["seed"]
            )
        for key, value in rep.items():
            if isinstance(value, float) and not np.isfinite(value):
                raise NumericFailure(f"non-finite {key} for {path}")
        results.append(rep)
    return {"reports": results}


COMMANDS = {
    "gen-bank": (resolve_gen_bank, cmd_gen_bank),
    "train": (resolve_train, cmd_train),
    "merge": (resolve_merge, cmd_merge),
    "verify-theory": (resolve_verify_theory, cmd_verify_theory),
    "eval": (resolve_eval, cmd_eval),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="cpelab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cpelab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")
    return parser


def _fail(kind, message, code, **extra):
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")
    return code


def _read_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from None


def main(argv=None):
    args = build_parser().parse_args(argv)
    resolve, run = COMMANDS[args.command]
    if args.seed is not None and not 0 <= args.seed < 2**64:
        return _fail("config", "--seed must be an unsigned 64-bit integer", EXIT_CONFIG)
    try:
        cfg = resolve(_read_config(args.config), args.seed)
        body = run(cfg, args.out)
        report = _write_report(args.out, args.command, cfg, body)
    except (ConfigError, InvalidInputError, GenerationError) as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except NumericFailure as exc:
        return _fail("numeric", str(exc), EXIT_NUMERIC, stage=exc.stage, iteration=exc.iteration)
    if report.get("failed"):
        return _fail("verification", f"failed checks: {report['failed']}", EXIT_VERIFY)
    print(json.dumps({"command": args.command, "out": args.out, "config_hash": report["config_hash"]}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
