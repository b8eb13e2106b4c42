"""Game and training configuration, TOML loading and ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field, fields

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid configuration value; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class GameConfig:
    n_defenders: int = 3
    n_attackers: int = 3
    R: float = 1.0
    epsilon: float = 0.1
    delta: float = 0.02
    d_safe: float = 0.15
    d_th: float | None = None  # defaults to epsilon
    dt: float = 0.05
    horizon: int = 80
    alpha1: float = -0.01
    alpha2: float = 10.0
    alpha3: float = 10.0
    alpha4: float = -0.03
    seed: int = 0
    defender_radius_max: float = 0.9  # fraction of R
    attacker_radius_min: float = 1.2
    attacker_radius_max: float = 2.5
    defender_speed_scale: float = 1.0
    attacker_speed_scale: float = 0.5
    wind_scale: float = 1.0
    max_spawn_tries: int = 10_000

    def __post_init__(self):
        self.validate()

    @property
    def interception_threshold(self) -> float:
        return self.epsilon if self.d_th is None else self.d_th

    def validate(self) -> None:
        if self.n_defenders < 1 or self.n_attackers < 1:
            raise ConfigError("n_defenders", "team sizes must be at least 1")
        if self.n_defenders != self.n_attackers:
            raise ConfigError("n_attackers", "the game requires equal team sizes")
        if self.R <= 0:
            raise ConfigError("R", "radius must be positive")
        if not 0 < self.epsilon < 0.2 * self.R:
            raise ConfigError("epsilon", "capture radius must lie in (0, 0.2 R)")
        if self.delta <= 0:
            raise ConfigError("delta", "breach tolerance must be positive")
        if self.horizon < 1:
            raise ConfigError("horizon", "horizon must be at least 1")
        if self.dt <= 0:
            raise ConfigError("dt", "time step must be positive")
        if self.d_safe < 0:
            raise ConfigError("d_safe", "must be non-negative")
        if not 0 < self.defender_radius_max <= 1:
            raise ConfigError("defender_radius_max", "must lie in (0, 1]")
        if not 1 < self.attacker_radius_min <= self.attacker_radius_max:
            raise ConfigError("attacker_radius_min", "attacker shell must lie outside the perimeter")


@dataclass
class TrainConfig:
    algo: str = "emfac"
    gamma: float = 0.99
    critic_lr: float = 1e-3
    actor_lr: float = 5e-4
    representation_lr: float = 1e-3
    k: float = 0.3
    high_action_dim: int = 4
    expl_noise: float = 0.1
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    tau_critic: float = 0.005
    tau_actor: float = 0.005
    buffer_size: int = 100_000
    batch_size: int = 256
    hidden_sizes: tuple[int, ...] = (128, 128)
    total_steps: int = 60_000
    warmup_steps: int = 2_000
    update_every: int = 1
    policy_delay: int = 2  # critic updates per actor/target update
    freeze_fraction: float = 0.2
    eval_every: int = 10_000
    eval_episodes: int = 20
    seed: int = 0
    paradigm: str = "ctde"  # or "dtde"
    # ablation switches (all on = full method)
    state_attention: bool = True
    action_attention: bool = True
    embedded_mean_field: bool = True
    min_one_selected: bool = True

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.k <= 1.0:
            raise ConfigError("k", "attention ratio must lie in [0, 1]")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma", "discount must lie in (0, 1]")
        if self.batch_size < 1 or self.buffer_size < self.batch_size:
            raise ConfigError("batch_size", "buffer must hold at least one batch")
        if self.policy_delay < 1 or self.update_every < 1:
            raise ConfigError("policy_delay", "update cadences must be positive")
        if self.high_action_dim < 1:
            raise ConfigError("high_action_dim", "must be positive")
        if self.paradigm not in ("ctde", "dtde"):
            raise ConfigError("paradigm", "must be 'ctde' or 'dtde'")
        if self.algo not in ALGOS:
            raise ConfigError("algo", f"unknown algorithm {self.algo!r}; choose from {sorted(ALGOS)}")
        for name in ("tau_critic", "tau_actor", "freeze_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(name, "must lie in [0, 1]")


ALGOS = ("emfac", "rule", "iac", "mf")


def _coerce(kind, raw: str):
    if kind is bool or kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float", "float | None"):
        return None if raw.strip().lower() == "none" else float(raw)
    if kind in ("tuple[int, ...]",):
        return tuple(int(x) for x in raw.strip("()[] ").split(",") if x.strip())
    return raw


def _apply(cls, data: dict, section: str):
    names = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{section}.{key}", "unknown field")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(section, str(exc)) from exc


@dataclass
class RunConfig:
    game: GameConfig = field(default_factory=GameConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    extra: dict = field(default_factory=dict)  # command-specific sections, e.g. [nash], [surface]

    def to_dict(self) -> dict:
        d = {"game": asdict(self.game), "train": asdict(self.train)}
        d["train"]["hidden_sizes"] = list(self.train.hidden_sizes)
        d.update(self.extra)
        return d


def load_config(path=None, overrides: list[str] | tuple[str, ...] = ()) -> RunConfig:
    """Read a TOML file with ``[game]`` / ``[train]`` (and free-form) sections, then apply ``--set`` pairs.

    Override keys are ``section.field=value``; bare ``field=value`` is looked up in
    ``game`` then ``train``.
    """
    raw: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(str(path), f"invalid TOML: {exc}") from exc
    game = dict(raw.pop("game", {}))
    train = dict(raw.pop("train", {}))
    extra = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    gfields = {f.name: f.type for f in fields(GameConfig)}
    tfields = {f.name: f.type for f in fields(TrainConfig)}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        section, _, name = key.rpartition(".")
        if not section:
            section = "game" if name in gfields else "train" if name in tfields else ""
        if section == "game" and name in gfields:
            target, kind = game, gfields[name]
        elif section == "train" and name in tfields:
            target, kind = train, tfields[name]
        elif section and section not in ("game", "train"):
            target, kind = extra.setdefault(section, {}), None
        else:
            raise ConfigError(key, "unknown field")
        try:
            if kind is None:
                target[name] = tomllib.loads(f"x = {value}")["x"]
            else:
                target[name] = _coerce(kind, value)
        except (ValueError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(key, f"cannot parse {value!r}") from exc
    return RunConfig(_apply(GameConfig, game, "game"), _apply(TrainConfig, train, "train"), extra)


def replace_config(cfg, **changes):
    return dataclasses.replace(cfg, **changes)


def config_from_dict(d: dict) -> RunConfig:
    """Inverse of ``RunConfig.to_dict`` (used to rerun from a manifest)."""
    d = dict(d)
    game = _apply(GameConfig, dict(d.pop("game", {})), "game")
    train = _apply(TrainConfig, dict(d.pop("train", {})), "train")
    return RunConfig(game, train, d)
