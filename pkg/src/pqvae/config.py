"""Flat ``key=value`` run configuration and dataset selection."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .data import Dataset, SyntheticSpec, generate_synthetic, load_cifar10, load_mnist, split_dataset
from .errors import ConfigurationError
from .trainer import DEFAULT_LAMBDA_GRID, TrainConfig


def _ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(t) for t in text.split(",")) if text else ()


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: str = "synthetic"
    data_path: str = ""
    limit: int = 10000  # database items for mnist/cifar10; 0 = all
    query_limit: int = 1000  # query items for mnist/cifar10; 0 = all
    query_fraction: float = 0.1  # synthetic only
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    R: int = 1000
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    provided: frozenset = frozenset()  # keys set explicitly


_TRAIN_KEYS = {
    "K": int, "M": int, "D": int, "N": int, "beta": float, "lambda": float,
    "gamma": float, "learning_rate": float, "batch_size": int, "iterations": int,
    "codebook_update_mode": str, "seed": int, "encoder_hidden": _ints, "decoder_hidden": _ints,
}
_SYNTH_KEYS = {
    "num_clusters": int, "points_per_cluster": int, "dimension": int,
    "cluster_std": float, "center_scale": float, "data_seed": int,
}
_RUN_KEYS = {
    "dataset": str, "data_path": str, "limit": int, "query_limit": int,
    "query_fraction": float, "R": int, "lambda_grid": _floats,
}
KNOWN_KEYS = frozenset(_TRAIN_KEYS) | frozenset(_SYNTH_KEYS) | frozenset(_RUN_KEYS)


def parse_pairs(text: str, source: str = "config") -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def build_config(pairs: dict[str, str]) -> RunConfig:
    unknown = sorted(set(pairs) - KNOWN_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig(provided=frozenset(pairs))
    for key, text in pairs.items():
        try:
            if key in _TRAIN_KEYS:
                setattr(cfg.train, "lam" if key == "lambda" else key, _TRAIN_KEYS[key](text))
            elif key in _SYNTH_KEYS:
                setattr(cfg.synthetic, "seed" if key == "data_seed" else key, _SYNTH_KEYS[key](text))
            else:
                setattr(cfg, key, _RUN_KEYS[key](text))
        except ValueError as exc:
            raise ConfigurationError(f"invalid value for {key}: {text!r}") from exc
    cfg.train.validate()
    cfg.synthetic.validate()
    if cfg.dataset not in ("synthetic", "mnist", "cifar10"):
        raise ConfigurationError(f"unknown dataset {cfg.dataset!r}")
    if cfg.R < 1:
        raise ConfigurationError("R must be >= 1")
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a config file (optional) and apply ``key=value`` overrides on top."""
    pairs = {}
    if path is not None:
        with open(path) as f:
            pairs.update(parse_pairs(f.read(), str(path)))
    pairs.update(parse_pairs("\n".join(overrides), "override"))
    return build_config(pairs)


def config_to_text(cfg: RunConfig) -> str:
    """Every key with its effective value, in a stable order."""
    t, s = cfg.train, cfg.synthetic
    values = {f.name: getattr(t, f.name) for f in fields(t)}
    values["lambda"] = values.pop("lam")
    values.update(
        num_clusters=s.num_clusters, points_per_cluster=s.points_per_cluster,
        dimension=s.dimension, cluster_std=s.cluster_std, center_scale=s.center_scale,
        data_seed=s.seed, dataset=cfg.dataset, data_path=cfg.data_path, limit=cfg.limit,
        query_limit=cfg.query_limit, query_fraction=cfg.query_fraction, R=cfg.R,
        lambda_grid=cfg.lambda_grid,
    )
    lines = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


def _head(ds: Dataset, n: int) -> Dataset:
    return ds if n <= 0 else ds.subset(slice(0, n))


def load_splits(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """(database, query) datasets; the database doubles as the training set."""
    if cfg.dataset == "synthetic":
        return split_dataset(generate_synthetic(cfg.synthetic), cfg.query_fraction, cfg.synthetic.seed)
    if not cfg.data_path:
        raise ConfigurationError(f"dataset {cfg.dataset} needs data_path")
    loader = load_mnist if cfg.dataset == "mnist" else load_cifar10
    db = loader(cfg.data_path, "train")
    q = loader(cfg.data_path, "test")
    return _head(db, cfg.limit), _head(q, cfg.query_limit)
