"""JSON run configuration: schema validation, overrides, round-tripping.

A config document mirrors :class:`engine.RunConfig`; unknown keys are
rejected with the offending path in the message. ``summary.json`` files
written by the CLI wrap the resolved document under a top-level "config"
key and are accepted anywhere a config is, so a finished run can be
reproduced from its own summary.
"""
from __future__ import annotations

import json

from .engine import PartitionSpec, ProblemSpec, RunConfig
from .errors import ConfigError
from .optimizers import AlgorithmKind, HyperParams
from .topology import TopologySpec

_HYPER_KEYS = {
    "eta": "eta",
    "lambda": "lambda_",
    "beta": "beta",
    "K": "K",
    "T": "T",
    "rho": "rho",
    "momentum": "momentum",
    "batch_size": "batch_size",
    "lr_decay": "lr_decay",
}
_TOPOLOGY_KEYS = ("kind", "m", "seed", "p", "k", "p_rewire", "n_neighbors")
_PROBLEM_KEYS = (
    "kind", "noise_sigma", "d", "curvature_min", "curvature_max",
    "center_spread", "homogeneous", "classes", "features", "train_n",
    "test_n", "separation", "hidden", "csv_path", "csv_test_path",
)
_PARTITION_KEYS = ("kind", "alpha", "classes_per_client")
_TOP_KEYS = (
    "algorithm", "m", "seed", "eval_every", "verification_mode", "init",
    "init_scale", "hyper", "topology", "problem", "partition",
)


def _reject_unknown(doc: dict, allowed, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} under {path or 'top level'}")


def config_from_dict(doc: dict) -> RunConfig:
    if isinstance(doc, dict) and set(doc) >= {"config"} and "algorithm" not in doc:
        doc = doc["config"]  # accept a summary.json wrapper
    _reject_unknown(doc, _TOP_KEYS, "")

    m = int(doc.get("m", 100))
    seed = int(doc.get("seed", 1))

    hyper_doc = dict(doc.get("hyper", {}))
    _reject_unknown(hyper_doc, _HYPER_KEYS, "hyper")
    hyper = HyperParams(**{_HYPER_KEYS[k]: v for k, v in hyper_doc.items()})

    topo_doc = dict(doc.get("topology", {}))
    _reject_unknown(topo_doc, _TOPOLOGY_KEYS, "topology")
    topo_doc.setdefault("kind", "random_dynamic")
    topo_doc.setdefault("m", m)
    topo_doc.setdefault("seed", seed)
    topology = TopologySpec(**topo_doc)

    problem_doc = dict(doc.get("problem", {}))
    _reject_unknown(problem_doc, _PROBLEM_KEYS, "problem")
    problem = ProblemSpec(**problem_doc)

    part_doc = dict(doc.get("partition", {}))
    _reject_unknown(part_doc, _PARTITION_KEYS, "partition")
    partition = PartitionSpec(**part_doc)

    try:
        return RunConfig(
            algorithm=str(doc.get("algorithm", "dfedcata")),
            m=m,
            seed=seed,
            hyper=hyper,
            topology=topology,
            problem=problem,
            partition=partition,
            eval_every=int(doc.get("eval_every", 1)),
            verification_mode=bool(doc.get("verification_mode", False)),
            init=str(doc.get("init", "zeros")),
            init_scale=float(doc.get("init_scale", 0.1)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def config_to_dict(cfg: RunConfig) -> dict:
    """Fully resolved, JSON-safe document that reproduces ``cfg``."""
    hyper = {k: getattr(cfg.hyper, attr) for k, attr in _HYPER_KEYS.items()}
    return {
        "algorithm": AlgorithmKind(cfg.algorithm).value,
        "m": cfg.m,
        "seed": cfg.seed,
        "eval_every": cfg.eval_every,
        "verification_mode": cfg.verification_mode,
        "init": cfg.init,
        "init_scale": cfg.init_scale,
        "hyper": hyper,
        "topology": {k: getattr(cfg.topology, k) for k in _TOPOLOGY_KEYS},
        "problem": {k: getattr(cfg.problem, k) for k in _PROBLEM_KEYS},
        "partition": {k: getattr(cfg.partition, k) for k in _PARTITION_KEYS},
    }


def load_config(path, overrides=()) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(doc, dict) and "config" in doc and "algorithm" not in doc:
        doc = doc["config"]
    for item in overrides:
        doc = apply_override(doc, item)
    return config_from_dict(doc)


def apply_override(doc: dict, item: str) -> dict:
    """Apply one ``dotted.path=json_value`` override to a config document."""
    if "=" not in item:
        raise ConfigError(f"override must look like key.path=value, got {item!r}")
    dotted, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings allowed, e.g. topology.kind=ring
    parts = dotted.strip().split(".")
    node = doc
    for part in parts[:-1]:
        nxt = node.setdefault(part, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot descend into {part!r} in override {item!r}")
        node = nxt
    node[parts[-1]] = value
    return doc
