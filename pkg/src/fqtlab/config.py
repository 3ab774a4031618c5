"""Run configuration: every default lives in ``SCHEMA``.

Files are INI (``[section]`` then ``key = value``) or JSON with the same
nesting.  Unknown sections or keys and unparsable values raise
:class:`ConfigError` naming the offending field.
"""

from __future__ import annotations

import configparser
import json
from pathlib import Path


class ConfigError(ValueError):
    pass


def _bits(text):
    if text is None or str(text).strip().lower() in ("none", "off", "fp", ""):
        return None
    b = int(text)
    if not 2 <= b <= 8:
        raise ValueError("bit width must be in [2, 8] or 'none'")
    return b


def _ints(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).replace(" ", "").split(",") if v]


def _choice(*options):
    def parse(text):
        v = str(text).strip().lower()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v

    return parse


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _str(text):
    return str(text)


# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "seed": (int, 0),
    },
    "data": {
        "source": (_choice("blobs", "idx"), "blobs"),
        "seed": (int, 0),  # dataset seed, independent of run.seed
        "classes": (int, 4),
        "dims": (int, 16),
        "per_class": (int, 150),
        "spread": (float, 0.6),
        "images": (_str, ""),
        "labels": (_str, ""),
        "limit": (int, 0),  # 0 reads the whole file
        "val_fraction": (float, 0.25),
    },
    "net": {
        "hidden": (_ints, [32]),
    },
    "scheme": {
        "forward_bits": (_bits, 8),
        "grad_weight_bits": (_bits, 8),
        "grad_act_bits": (_bits, 8),
        "variant": (_choice("ptq", "psq", "bhq"), "ptq"),
        "rounding": (_choice("stochastic", "nearest"), "stochastic"),
    },
    "train": {
        "mode": (_choice("exact", "qat", "fqt"), "fqt"),
        "lr": (float, 0.05),
        "schedule": (_choice("constant", "cosine"), "cosine"),
        "momentum": (float, 0.9),
        "epochs": (int, 20),
        "batch_size": (int, 32),
        "warmup_epochs": (int, 0),
        "weight_decay": (float, 0.0),
        "label_smoothing": (float, 0.0),
        "diverge_loss": (float, 1e4),
        "wall_time": (_bool, False),
    },
    "mc": {
        "trials": (int, 10_000),
        "batch": (int, 8),
        "dims": (_ints, [8, 16, 16, 4]),
    },
    "sweep": {
        "bits": (_ints, [4, 5, 6, 7, 8]),
        "variant": (_choice("ptq", "psq", "bhq"), "ptq"),
    },
    "sparse": {
        "n_rows": (_ints, [16, 64, 256]),
        "lambda1": (float, 1.0),
        "lambda2": (float, 1e-4),
        "d": (int, 64),
        "bits": (int, 8),
    },
}


def defaults() -> dict:
    return {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}


def _read_raw(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    if path.suffix.lower() == ".json" or text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
        if not isinstance(raw, dict) or not all(isinstance(v, dict) for v in raw.values()):
            raise ConfigError(f"{path}: top level must map section names to objects")
        return raw
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    return {sec: dict(cp.items(sec)) for sec in cp.sections()}


def merge(cfg: dict, raw: dict) -> dict:
    """Parse ``raw`` (section -> key -> text or value) over ``cfg``."""
    out = {sec: dict(v) for sec, v in cfg.items()}
    for sec, keys in raw.items():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, value in keys.items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown field {sec}.{key}")
            parser = SCHEMA[sec][key][0]
            try:
                out[sec][key] = parser(value)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"field {sec}.{key}: cannot parse {value!r}: {e}") from None
    return out


def validate(cfg: dict) -> dict:
    def need(ok, field, msg):
        if not ok:
            raise ConfigError(f"field {field}: {msg}")

    d, t, mc = cfg["data"], cfg["train"], cfg["mc"]
    need(0 <= cfg["run"]["seed"] < 2**64, "run.seed", "must fit in an unsigned 64-bit integer")
    for key in ("classes", "dims", "per_class"):
        need(d[key] > 0, f"data.{key}", "must be positive")
    need(d["spread"] >= 0, "data.spread", "must be non-negative")
    need(d["limit"] >= 0, "data.limit", "must be non-negative")
    need(0 < d["val_fraction"] < 1, "data.val_fraction", "must be in (0, 1)")
    if d["source"] == "idx":
        need(bool(d["images"]) and bool(d["labels"]), "data.images", "idx source needs images and labels paths")
    need(all(h > 0 for h in cfg["net"]["hidden"]), "net.hidden", "widths must be positive")
    need(t["lr"] > 0, "train.lr", "must be positive")
    need(0 <= t["momentum"] < 1, "train.momentum", "must be in [0, 1)")
    need(t["epochs"] > 0, "train.epochs", "must be positive")
    need(t["batch_size"] > 0, "train.batch_size", "must be positive")
    need(0 <= t["warmup_epochs"] <= t["epochs"], "train.warmup_epochs", "must be in [0, epochs]")
    need(t["weight_decay"] >= 0, "train.weight_decay", "must be non-negative")
    need(0 <= t["label_smoothing"] < 1, "train.label_smoothing", "must be in [0, 1)")
    need(t["diverge_loss"] > 0, "train.diverge_loss", "must be positive")
    need(mc["trials"] >= 200, "mc.trials", "must be at least 200 (two trials per batch-means block)")
    need(mc["batch"] > 0, "mc.batch", "must be positive")
    need(len(mc["dims"]) >= 2 and all(v > 0 for v in mc["dims"]), "mc.dims", "need at least two positive widths")
    need(all(2 <= b <= 8 for b in cfg["sweep"]["bits"]), "sweep.bits", "each must be in [2, 8]")
    sp = cfg["sparse"]
    need(all(n >= 2 for n in sp["n_rows"]), "sparse.n_rows", "each must be at least 2")
    need(sp["lambda1"] > 0, "sparse.lambda1", "must be positive")
    need(sp["lambda2"] >= 0, "sparse.lambda2", "must be non-negative")
    need(sp["d"] >= 2, "sparse.d", "must be at least 2")
    need(2 <= sp["bits"] <= 8, "sparse.bits", "must be in [2, 8]")
    return cfg


def load(path=None, overrides: dict | None = None) -> dict:
    cfg = defaults()
    if path is not None:
        cfg = merge(cfg, _read_raw(path))
    if overrides:
        cfg = merge(cfg, overrides)
    return validate(cfg)
