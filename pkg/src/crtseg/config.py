"""JSON run configuration: published schema, exhaustive validation, resolution.

Unknown keys anywhere in the document are hard errors (silent hyperparameter
typos are the main operational hazard), and all violations are reported in
one pass, not first-error-only.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .cross_reference import AttentionConfig
from .data import SyntheticSpec, TransformRanges
from .encoder import EncoderConfig
from .episodes import SuperpixelConfig
from .errors import ConfigError
from .prototypes import ALPConfig
from .training import TrainConfig

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_PAIR = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}
_INT_PAIR = {"type": "array", "items": _INT, "minItems": 2, "maxItems": 2}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": _INT,
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["synthetic", "manifest"]},
                "n_slices": {"type": "integer", "minimum": 1},
                "height": {"type": "integer", "minimum": 8},
                "width": {"type": "integer", "minimum": 8},
                "shapes_per_slice": _INT_PAIR,
                "radius_range": _PAIR,
                "noise_sigma": _NUM,
                "background_smoothness": _NUM,
                "blur_sigma": _NUM,
                "dataset_seed": {"type": ["integer", "null"]},
                "root": {"type": ["string", "null"]},
                "manifest": {"type": ["string", "null"]},
            },
        },
        "superpixels": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k": {"type": "number", "exclusiveMinimum": 0},
                "min_size": {"type": "integer", "minimum": 1},
                "sigma": {"type": "number", "minimum": 0},
                "min_area": {"type": "integer", "minimum": 1},
                "max_area_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
        },
        "transforms": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rotation_deg": _NUM,
                "scale": _PAIR,
                "shear_deg": _NUM,
                "translate_px": _NUM,
                "gamma": _PAIR,
            },
        },
        "encoder": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "architecture": {"type": "string"},
                "feature_dim": {"type": "integer", "minimum": 8},
                "stride": {"enum": [4, 8]},
                "init_seed": {"type": ["integer", "null"]},
            },
        },
        "attention": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dim": {"type": "integer", "minimum": 8},
                "heads": {"type": "integer", "minimum": 1},
                "init_seed": {"type": ["integer", "null"]},
                "tie_directions": {"type": "boolean"},
            },
        },
        "alp": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "window": _INT_PAIR,
                "fg_threshold": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "alpha": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "iterations": {"type": "integer", "minimum": 1},
                "lr0": {"type": "number", "exclusiveMinimum": 0},
                "decay": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "decay_every": {"type": "integer", "minimum": 1},
                "batch_size": {"enum": [1]},
                "lambda": {"type": "number", "minimum": 0},
                "log_every": {"type": "integer", "minimum": 1},
                "use_support_mask": {"type": "boolean"},
                "use_cross_reference": {"type": "boolean"},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "episodes": {"type": ["integer", "null"], "minimum": 1},
                "classes": {"type": ["array", "null"], "items": _INT},
                "exclude": {"type": "array", "items": _INT},
                "dataset_seed": {"type": ["integer", "null"]},
                "n_slices": {"type": ["integer", "null"], "minimum": 1},
                "root": {"type": ["string", "null"]},
                "manifest": {"type": ["string", "null"]},
            },
        },
    },
}


def _unknown_keys(document, schema, path=""):
    """Recursive unknown-key walk with full paths, independent of jsonschema."""
    found = []
    if not isinstance(document, dict) or schema.get("type") != "object":
        return found
    props = schema.get("properties", {})
    for key, value in document.items():
        here = f"{path}.{key}" if path else key
        if key not in props:
            found.append(here)
        else:
            found.extend(_unknown_keys(value, props[key], here))
    return found


def validate_config(document: dict) -> list[str]:
    """Return every schema violation (empty list when valid)."""
    violations = [f"unknown config key: {k}" for k in _unknown_keys(document, CONFIG_SCHEMA)]
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    for err in sorted(validator.iter_errors(document), key=lambda e: list(e.absolute_path)):
        if "Additional properties" in err.message:
            continue  # unknown keys already reported with full paths
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        violations.append(f"{where}: {err.message}")
    return violations


@dataclass
class EvalSettings:
    episodes: int | None = 50
    classes: list[int] | None = None
    exclude: list[int] = field(default_factory=list)
    dataset_seed: int | None = None
    n_slices: int | None = None
    root: str | None = None
    manifest: str | None = None


@dataclass
class DataSettings:
    kind: str = "synthetic"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    dataset_seed: int | None = None
    root: str | None = None
    manifest: str | None = None


@dataclass
class RunSettings:
    """Everything a command needs, resolved from one JSON document."""

    seed: int
    data: DataSettings
    train: TrainConfig
    eval: EvalSettings
    resolved: dict  # canonical document (defaults applied), hashed for manifests

    @property
    def config_hash(self) -> str:
        return hash_config(self.resolved)


def hash_config(document: dict) -> str:
    canon = json.dumps(document, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _tup(x, default):
    if x is None:
        return default
    return tuple(x)


def resolve_config(document: dict, seed_override: int | None = None) -> RunSettings:
    """Validate and expand a config document into typed settings.

    Raises ConfigError carrying the exhaustive violation list. Derived
    defaults: dataset seeds and weight-init seeds fan out from the top
    seed so one integer pins the whole run.
    """
    violations = validate_config(document)
    if violations:
        raise ConfigError(violations)

    seed = int(document.get("seed", 0)) if seed_override is None else int(seed_override)
    d = document.get("data", {})
    synthetic = SyntheticSpec(
        n_slices=d.get("n_slices", 32),
        height=d.get("height", 256),
        width=d.get("width", 256),
        shapes_per_slice=_tup(d.get("shapes_per_slice"), (1, 3)),
        radius_range=_tup(d.get("radius_range"), (0.10, 0.22)),
        noise_sigma=d.get("noise_sigma", 0.03),
        background_smoothness=d.get("background_smoothness", 12.0),
        blur_sigma=d.get("blur_sigma", 0.6),
    )
    data = DataSettings(
        kind=d.get("kind", "synthetic"),
        synthetic=synthetic,
        dataset_seed=d.get("dataset_seed"),
        root=d.get("root"),
        manifest=d.get("manifest"),
    )

    s = document.get("superpixels", {})
    spx = SuperpixelConfig(
        k=s.get("k", 0.003),
        min_size=s.get("min_size", 48),
        sigma=s.get("sigma", 0.8),
        min_area=s.get("min_area", 100),
        max_area_fraction=s.get("max_area_fraction", 0.5),
    )
    t = document.get("transforms", {})
    transforms = TransformRanges(
        rotation_deg=t.get("rotation_deg", 15.0),
        scale=_tup(t.get("scale"), (0.9, 1.1)),
        shear_deg=t.get("shear_deg", 5.0),
        translate_px=t.get("translate_px", 10.0),
        gamma=_tup(t.get("gamma"), (0.5, 2.0)),
    )
    e = document.get("encoder", {})
    encoder = EncoderConfig(
        architecture=e.get("architecture", "conv4"),
        feature_dim=e.get("feature_dim", 64),
        stride=e.get("stride", 8),
        init_seed=e.get("init_seed") if e.get("init_seed") is not None else seed + 1,
    )
    a = document.get("attention", {})
    attention = AttentionConfig(
        dim=a.get("dim", 64),
        heads=a.get("heads", 1),
        init_seed=a.get("init_seed") if a.get("init_seed") is not None else seed + 2,
        tie_directions=a.get("tie_directions", False),
    )
    p = document.get("alp", {})
    alp = ALPConfig(
        window=_tup(p.get("window"), (4, 4)),
        fg_threshold=p.get("fg_threshold", 0.95),
        alpha=p.get("alpha", 20.0),
    )
    tr = document.get("train", {})
    train = TrainConfig(
        iterations=tr.get("iterations", 2000),
        lr0=tr.get("lr0", 1e-3),
        decay=tr.get("decay", 0.98),
        decay_every=tr.get("decay_every", 1000),
        batch_size=tr.get("batch_size", 1),
        seed=seed,
        lam=tr.get("lambda", 1.0),
        log_every=tr.get("log_every", 50),
        use_support_mask=tr.get("use_support_mask", True),
        use_cross_reference=tr.get("use_cross_reference", True),
        encoder=encoder,
        attention=attention,
        alp=alp,
        superpixels=spx,
        transforms=transforms,
    )
    ev = document.get("eval", {})
    eval_settings = EvalSettings(
        episodes=ev.get("episodes", 50),
        classes=ev.get("classes"),
        exclude=ev.get("exclude", []),
        dataset_seed=ev.get("dataset_seed"),
        n_slices=ev.get("n_slices"),
        root=ev.get("root"),
        manifest=ev.get("manifest"),
    )

    from .training import config_snapshot

    resolved = {
        "seed": seed,
        "data": {
            "kind": data.kind,
            "dataset_seed": data.dataset_seed,
            "root": data.root,
            "manifest": data.manifest,
            "synthetic": config_snapshot(synthetic),
        },
        "train": config_snapshot(train),
        "eval": {
            "episodes": eval_settings.episodes,
            "classes": eval_settings.classes,
            "exclude": eval_settings.exclude,
            "dataset_seed": eval_settings.dataset_seed,
            "n_slices": eval_settings.n_slices,
            "root": eval_settings.root,
            "manifest": eval_settings.manifest,
        },
    }
    return RunSettings(seed=seed, data=data, train=train, eval=eval_settings, resolved=resolved)


def load_config_file(path, seed_override: int | None = None) -> RunSettings:
    text = Path(path).read_text()
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"]) from exc
    if not isinstance(document, dict):
        raise ConfigError(["config root must be a JSON object"])
    return resolve_config(document, seed_override=seed_override)
