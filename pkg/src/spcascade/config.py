"""Flat ``key = value`` configuration files for cascades.

Lines starting with ``#`` are comments. Global keys set defaults for every level;
``level<i>.<key>`` (1-based) overrides one filtering level and ``final.<key>`` the
final predictor. Keys:

    levels            comma-separated orders of the filtering levels (sequence mode)
    grid_levels       number of levels (grid mode)
    final_order       order of the final predictor, 0 for none
    alpha_candidates  comma-separated alphas in [0, 1)
    epsilon           dev filtering-loss tolerance per level
    lam, eta, epochs, averaging, margin_mode, margin, dimension
                      training settings (eta is a number or "pegasos")
    refine            per-level state hierarchy: groups of fine states separated by
                      "|", states inside a group by ","; group g refines state g
    seed              master seed
"""
from __future__ import annotations

from pathlib import Path

from spcascade.ensemble import GridLevelConfig
from spcascade.lattice import StateHierarchy
from spcascade.training import CascadeConfig, LevelConfig, TrainConfig

TRAIN_KEYS = ("lam", "eta", "epochs", "averaging", "margin_mode", "margin", "dimension")
LEVEL_KEYS = TRAIN_KEYS + ("alpha_candidates", "epsilon", "refine", "order")
GLOBAL_KEYS = ("levels", "grid_levels", "final_order", "seed") + LEVEL_KEYS

DEFAULTS = {
    "levels": "1,2",
    "grid_levels": "1",
    "final_order": "3",
    "alpha_candidates": "0,0.2,0.4,0.6,0.8",
    "epsilon": "0.01",
    "lam": "0.0001",
    "eta": "1.0",
    "epochs": "5",
    "averaging": "true",
    "margin_mode": "length",
    "margin": "1.0",
    "dimension": "262144",
    "seed": "0",
}
FINAL_DEFAULTS = {"lam": "0", "eta": "1.0"}


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = key.strip(), value.strip()
        _check_key(key, n)
        out[key] = value
    return out


def _check_key(key: str, n=None):
    where = f"line {n}: " if n else ""
    if "." in key:
        scope, _, name = key.partition(".")
        ok_scope = scope == "final" or (scope.startswith("level") and scope[5:].isdigit() and int(scope[5:]) >= 1)
        if not ok_scope or name not in LEVEL_KEYS:
            raise ConfigError(f"{where}unknown key {key!r}")
    elif key not in GLOBAL_KEYS:
        raise ConfigError(f"{where}unknown key {key!r}")


def read_config(path) -> dict[str, str]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def apply_overrides(cfg: dict, items) -> dict:
    """Apply ``key=value`` strings (command-line overrides) on top of ``cfg``."""
    cfg = dict(cfg)
    for item in items or ():
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"override {item!r} is not key=value")
        _check_key(key.strip())
        cfg[key.strip()] = value.strip()
    return cfg


def _floats(v: str) -> tuple:
    return tuple(float(x) for x in v.split(",") if x.strip())


def _bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def parse_hierarchy(v: str) -> StateHierarchy | None:
    if not v or v.lower() == "none":
        return None
    return StateHierarchy([[int(x) for x in g.split(",")] for g in v.split("|")])


def _lookup(cfg: dict, scope: str, key: str, extra: dict | None = None) -> str:
    if f"{scope}.{key}" in cfg:
        return cfg[f"{scope}.{key}"]
    if extra and key in extra:
        return extra[key]
    return cfg.get(key, DEFAULTS.get(key, ""))


def _train(cfg: dict, scope: str, seed: int, extra=None) -> TrainConfig:
    get = lambda k: _lookup(cfg, scope, k, extra)  # noqa: E731
    eta = get("eta")
    return TrainConfig(lam=float(get("lam")), eta=eta if eta == "pegasos" else float(eta),
                       epochs=int(get("epochs")), seed=seed, averaging=_bool(get("averaging")),
                       margin_mode=get("margin_mode"), margin=float(get("margin")),
                       dimension=int(get("dimension")))


def cascade_config(cfg: dict, seed: int | None = None) -> CascadeConfig:
    """Build a sequence :class:`CascadeConfig`; ``seed`` overrides the file's seed."""
    try:
        seed = int(cfg.get("seed", DEFAULTS["seed"])) if seed is None else seed
        orders = [int(x) for x in cfg.get("levels", DEFAULTS["levels"]).split(",") if x.strip()]
        levels = []
        for i, o in enumerate(orders, start=1):
            sc = f"level{i}"
            levels.append(LevelConfig(
                order=int(_lookup(cfg, sc, "order") or o),
                alpha_candidates=_floats(_lookup(cfg, sc, "alpha_candidates")),
                epsilon=float(_lookup(cfg, sc, "epsilon")),
                train=_train(cfg, sc, seed),
                refine=parse_hierarchy(_lookup(cfg, sc, "refine"))))
        final_order = int(_lookup(cfg, "final", "order") or cfg.get("final_order", DEFAULTS["final_order"]))
        final = None
        if final_order > 0:
            final = LevelConfig(order=final_order, train=_train(cfg, "final", seed, FINAL_DEFAULTS),
                                refine=parse_hierarchy(_lookup(cfg, "final", "refine")))
        return CascadeConfig(tuple(levels), final, seed)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e


def grid_level_configs(cfg: dict, seed: int | None = None) -> tuple[list[GridLevelConfig], int]:
    try:
        seed = int(cfg.get("seed", DEFAULTS["seed"])) if seed is None else seed
        out = []
        grid_defaults = {"lam": "0.0001", "eta": "0.1", "epochs": "8", "dimension": "4096"}
        for i in range(1, int(cfg.get("grid_levels", DEFAULTS["grid_levels"])) + 1):
            sc = f"level{i}"
            extra = {k: v for k, v in grid_defaults.items() if k not in cfg}
            out.append(GridLevelConfig(alpha_candidates=_floats(_lookup(cfg, sc, "alpha_candidates")),
                                       epsilon=float(_lookup(cfg, sc, "epsilon")),
                                       train=_train(cfg, sc, seed, extra),
                                       refine=parse_hierarchy(_lookup(cfg, sc, "refine"))))
        return out, seed
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e
