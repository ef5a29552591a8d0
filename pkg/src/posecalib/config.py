"""Pipeline configuration (YAML on disk)."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace

import yaml

from .exceptions import ConfigError
from .registration import RegistrationOptions
from .stba import StbaOptions

WORKERS_ENV = "POSECALIB_WORKERS"
STAGES = ("pr", "mi", "ba", "iba")


@dataclass(frozen=True)
class PipelineConfig:
    window: int = 5
    stride: int | None = None
    max_offset: int = 10
    sync: bool = True
    ransac: bool = True
    subset_size: int = 2
    max_hypotheses: int = 64
    em_max_iter: int = 200
    em_tol: float = 1e-7
    grad_tol: float = 1e-8
    theta_match: float = 0.5
    kappa_max: float = 1e4
    init: str = "tetrahedral"
    n_init: int = 12
    pgo_robust: bool = True
    pgo_loss_scale: float = 0.1
    stba_huber: float = 3.0
    stba_max_iter: int = 100
    stba_rel_tol: float = 1e-8
    stba_rounds: int = 10
    motion_window: int = 5
    prune_factor: float = 3.0
    prune_floor: float = 1.0
    translation_joints: tuple | None = None
    stop_after: str | None = None
    seed: int = 0
    workers: int | None = None

    def __post_init__(self):
        if self.translation_joints is not None:
            object.__setattr__(self, "translation_joints", tuple(int(j) for j in
                                                                 self.translation_joints))
        self.validate()

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)
        need(isinstance(self.window, int) and self.window >= 1, "window must be a positive integer")
        need(self.stride is None or (isinstance(self.stride, int) and self.stride >= 1),
             "stride must be a positive integer")
        need(isinstance(self.max_offset, int) and self.max_offset >= 0,
             "max_offset must be a non-negative integer")
        need(isinstance(self.subset_size, int) and self.subset_size >= 1,
             "subset_size must be a positive integer")
        need(self.max_hypotheses >= 1, "max_hypotheses must be positive")
        need(self.em_max_iter >= 1 and self.em_tol > 0 and self.grad_tol > 0,
             "EM iteration limit and tolerances must be positive")
        need(0 < self.theta_match <= 3.1416, "theta_match must lie in (0, pi]")
        need(self.kappa_max > 0, "kappa_max must be positive")
        need(self.init in ("tetrahedral", "single", "random"),
             "init must be tetrahedral, single or random")
        need(self.n_init >= 1, "n_init must be positive")
        need(self.pgo_loss_scale > 0 and self.stba_huber > 0, "loss scales must be positive")
        need(self.stba_max_iter >= 1 and self.stba_rel_tol > 0, "invalid STBA limits")
        need(self.stba_rounds >= 0, "stba_rounds must be non-negative")
        need(self.motion_window >= 2, "motion_window must be at least 2")
        need(self.prune_factor > 0 and self.prune_floor >= 0, "invalid pruning rule")
        need(self.stop_after in (None, "pr", "mi", "ba"), "stop_after must be pr, mi or ba")
        need(isinstance(self.seed, int), "seed must be an integer")
        need(self.workers is None or self.workers >= 1, "workers must be positive")

    def with_(self, **kw):
        try:
            return replace(self, **kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def n_workers(self):
        if self.workers is not None:
            return int(self.workers)
        env = os.environ.get(WORKERS_ENV)
        if env:
            try:
                n = int(env)
            except ValueError:
                raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
            if n < 1:
                raise ConfigError(f"{WORKERS_ENV} must be positive")
            return n
        return 1

    def registration_options(self):
        return RegistrationOptions(
            window=self.window, stride=self.stride, max_offset=self.max_offset,
            kappa_max=self.kappa_max, max_iter=self.em_max_iter, tol=self.em_tol,
            grad_tol=self.grad_tol, theta_match=self.theta_match, init=self.init,
            n_init=self.n_init, subset_size=self.subset_size,
            max_hypotheses=self.max_hypotheses, seed=self.seed)

    def stba_options(self):
        return StbaOptions(window=self.motion_window, huber=self.stba_huber,
                           max_iter=self.stba_max_iter, rel_tol=self.stba_rel_tol,
                           max_rounds=self.stba_rounds, prune_factor=self.prune_factor,
                           prune_floor=self.prune_floor)

    def to_dict(self):
        d = asdict(self)
        if d["translation_joints"] is not None:
            d["translation_joints"] = list(d["translation_joints"])
        return d

    @classmethod
    def from_dict(cls, d):
        if d is None:
            return cls()
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def load_config(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(str(exc)) from None
    return PipelineConfig.from_dict(data)


def save_config(config, path):
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=True)
