"""Flat ``key = value`` run configuration and sweep grids.

Keys are namespaced by prefix: ``data.*`` (DatasetSpec), ``aug.*`` (AugSpec,
``aug.preset`` selects a named base), ``train.*`` (TrainConfig), ``eval.*``
(EvalSettings) and ``run.*`` (seed, deterministic, out).  Sweep grids use the
same syntax plus ``sweep.<key> = v1, v2, ...`` axes and ``sweep.cap``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from repspace import synthetic
from repspace.contrastive import TrainConfig
from repspace.embio import parse_kv
from repspace.evaluation import EvalSettings

MASK64 = (1 << 64) - 1


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


@dataclass(frozen=True)
class RunConfig:
    data: synthetic.DatasetSpec = field(default_factory=synthetic.DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    seed: int = 0
    deterministic: bool = True
    out: str = "out"

    def errors(self) -> list[str]:
        errs = [f"data.{e}" for e in self.data.errors()]
        errs += [f"train.{e}" for e in self.train.errors(self.data.n_classes * self.data.n_per_class)]
        errs += [f"eval.{e}" for e in self.eval.errors()]
        if self.eval.samples_per_class > self.data.val_per_class:
            errs.append("eval.samples_per_class exceeds data.val_per_class")
        if self.eval.k_max > self.data.n_classes * self.data.n_per_class:
            errs.append("eval.k_max exceeds the training set size")
        if self.seed < 0:
            errs.append("run.seed must be >= 0")
        return errs

    def validate(self) -> RunConfig:
        errs = self.errors()
        if errs:
            raise ConfigError(errs)
        return self


# --- value codecs ---------------------------------------------------------------

def _render_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def _parse_value(text: str, like):
    if isinstance(like, bool):
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return tuple(int(x) for x in text.split(",") if x.strip())
    return text


_SECTIONS = {"data": synthetic.DatasetSpec, "train": TrainConfig, "eval": EvalSettings}
_AUG_FIELDS = [f.name for f in fields(synthetic.AugSpec)]
_RUN_FIELDS = ("seed", "deterministic", "out")


def render(config: RunConfig) -> str:
    lines = ["# repspace run configuration"]
    for section in ("data", "train", "eval"):
        obj = getattr(config, section)
        for f in fields(obj):
            if section == "train" and f.name == "aug":
                continue
            lines.append(f"{section}.{f.name} = {_render_value(getattr(obj, f.name))}")
    for name in _AUG_FIELDS:
        lines.append(f"aug.{name} = {_render_value(getattr(config.train.aug, name))}")
    for name in _RUN_FIELDS:
        lines.append(f"run.{name} = {_render_value(getattr(config, name))}")
    return "\n".join(lines) + "\n"


def from_mapping(kv: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """Apply ``kv`` over ``base`` (defaults when omitted); collects every bad key before raising."""
    base = base or RunConfig()
    errors: list[str] = []
    updates: dict[str, dict] = {"data": {}, "train": {}, "eval": {}, "run": {}}
    aug = base.train.aug
    if "aug.preset" in kv:
        try:
            aug = synthetic.aug_preset(kv["aug.preset"])
        except ValueError as exc:
            errors.append(f"aug.preset: {exc}")
    aug_updates = {}
    for key, text in kv.items():
        section, _, name = key.partition(".")
        if key == "aug.preset":
            continue
        try:
            if section in _SECTIONS:
                obj = getattr(base, section)
                names = {f.name for f in fields(obj)} - {"aug"}
                if name not in names:
                    raise KeyError(key)
                updates[section][name] = _parse_value(text, getattr(obj, name))
            elif section == "aug":
                if name not in _AUG_FIELDS:
                    raise KeyError(key)
                aug_updates[name] = float(text)
            elif section == "run":
                if name not in _RUN_FIELDS:
                    raise KeyError(key)
                updates["run"][name] = _parse_value(text, getattr(base, name))
            else:
                raise KeyError(key)
        except KeyError:
            errors.append(f"{key}: unknown key")
        except ValueError as exc:
            errors.append(f"{key}: {exc}")
    aug = replace(aug, **aug_updates)
    config = RunConfig(
        data=replace(base.data, **updates["data"]),
        train=replace(base.train, aug=aug, **updates["train"]),
        eval=replace(base.eval, **updates["eval"]),
        **{**{n: getattr(base, n) for n in _RUN_FIELDS}, **updates["run"]},
    )
    if errors:
        # report field violations alongside the parse errors
        raise ConfigError(errors + config.errors())
    return config


def parse(text: str, base: RunConfig | None = None) -> RunConfig:
    try:
        kv = parse_kv(text)
    except ValueError as exc:
        raise ConfigError([str(exc)]) from exc
    return from_mapping(kv, base)


def load(path) -> RunConfig:
    return parse(Path(path).read_text(encoding="utf-8"))


def save(config: RunConfig, path) -> None:
    Path(path).write_text(render(config), encoding="utf-8")


# --- seeds ------------------------------------------------------------------

def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h


def point_seed(root_seed: int, point_key: str) -> int:
    """Seed of one grid point: ``splitmix64(root ^ splitmix64(fnv1a64(key)))``.

    Keyed by the point's own assignments, so growing the grid leaves the seeds
    of existing points unchanged.
    """
    return splitmix64((root_seed & MASK64) ^ splitmix64(fnv1a64(point_key)))


# --- sweep grids ----------------------------------------------------------------

DEFAULT_SWEEP_CAP = 64


@dataclass(frozen=True)
class SweepGrid:
    base: RunConfig
    axes: tuple[tuple[str, tuple[str, ...]], ...]
    cap: int = DEFAULT_SWEEP_CAP

    @property
    def size(self) -> int:
        n = 1
        for _, values in self.axes:
            n *= len(values)
        return n

    def points(self) -> list[tuple[str, RunConfig]]:
        """``(point_key, config)`` for every grid point; ``run.seed`` is the derived point seed."""
        if self.size > self.cap:
            raise ConfigError([f"sweep has {self.size} points, over the cap of {self.cap}"])
        names = [name for name, _ in self.axes]
        out = []
        for combo in itertools.product(*(values for _, values in self.axes)):
            key = ";".join(f"{n}={v}" for n, v in zip(names, combo))
            cfg = from_mapping(dict(zip(names, combo)), self.base)
            cfg = replace(cfg, seed=point_seed(self.base.seed, key))
            out.append((key, cfg))
        return out


def parse_grid(text: str, base_dir=None) -> SweepGrid:
    kv = parse_kv(text)
    cap = int(kv.pop("sweep.cap", DEFAULT_SWEEP_CAP))
    base_path = kv.pop("sweep.base", None)
    axes = []
    plain = {}
    for key, value in kv.items():
        if key.startswith("sweep."):
            values = tuple(v.strip() for v in value.split("|" if "|" in value else ",") if v.strip())
            if not values:
                raise ConfigError([f"{key}: empty axis"])
            axes.append((key[len("sweep."):], values))
        else:
            plain[key] = value
    base = RunConfig()
    if base_path is not None:
        path = Path(base_path)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        base = load(path)
    base = from_mapping(plain, base)
    grid = SweepGrid(base, tuple(axes), cap)
    # axis values are validated eagerly so a bad grid fails before any run
    errors = []
    for name, values in grid.axes:
        for v in values:
            try:
                from_mapping({name: v}, base)
            except ConfigError as exc:
                errors.extend(exc.errors)
    if errors:
        raise ConfigError(errors)
    return grid


def load_grid(path) -> SweepGrid:
    path = Path(path)
    return parse_grid(path.read_text(encoding="utf-8"), base_dir=path.parent)
