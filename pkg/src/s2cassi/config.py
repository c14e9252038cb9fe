"""Run configuration: `key = value` text with documented defaults.

One key per line, `#` starts a comment, unknown keys and bad values are
rejected with their line number. Defaults reproduce the reference training
setup (K=4, L=6, C=60, T=6, M=8, alpha 1.5 then 1.0, beta 10, lr 4e-4,
300 epochs switching at 150, batch 4), so an empty file is a valid config.
"""

from __future__ import annotations

from dataclasses import dataclass

from .autodiff import ContractError
from .network import NetworkConfig
from .objective import LossConfig
from .optics import ShearRule
from .training import OptimizerState, Schedule


class ConfigError(ValueError):
    pass


def _int(s: str) -> int:
    return int(s)


def _float(s: str) -> float:
    return float(s)


def _bool(s: str) -> bool:
    v = s.lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _choice(*options: str):
    def cast(s: str) -> str:
        if s not in options:
            raise ValueError(f"must be one of {options}, got {s!r}")
        return s
    return cast


# key -> (caster, default)
KEYS = {
    "seed": (_int, 0),
    "network.K": (_int, 4),
    "network.L": (_int, 6),
    "network.C": (_int, 60),
    "network.T": (_int, 6),
    "network.M": (_int, 8),
    "network.k_me": (_int, 2),
    "network.n_lambda": (_int, 28),
    "network.variant": (_choice("spa_spa", "spe_spe", "sequn_ss", "parall_ss"), "parall_ss"),
    "network.ffn_mult": (_int, 2),
    "network.cyclic_shift": (_bool, True),
    "optics.d": (_int, 2),
    "optics.noise_sigma": (_float, 0.0),
    "optics.mask_kind": (_choice("binary", "uniform", "file"), "binary"),
    "optics.mask_density": (_float, 0.5),
    "loss.alpha_pre": (_float, 1.5),
    "loss.alpha_main": (_float, 1.0),
    "loss.beta_ma": (_float, 10.0),
    "loss.eps_den": (_float, 1e-6),
    "loss.reduction": (_choice("global", "patchwise"), "global"),
    "loss.patch": (_int, 32),
    "loss.detach_weight": (_bool, False),
    "schedule.epochs": (_int, 300),
    "schedule.switch": (_int, 150),
    "schedule.lr_half_every": (_int, 50),
    "schedule.batch": (_int, 4),
    "optimizer.lr": (_float, 4e-4),
    "optimizer.beta1": (_float, 0.9),
    "optimizer.beta2": (_float, 0.999),
    "optimizer.eps": (_float, 1e-8),
    "optimizer.clip_norm": (_float, 0.0),
    "train.mode": (_choice("two_phase", "recon_only"), "two_phase"),
    "train.crop": (_int, 256),
    "train.eval_every": (_int, 0),
}


@dataclass
class RunConfig:
    """Parsed, validated key/value map with typed accessors."""

    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def network_config(self) -> NetworkConfig:
        v = self.values
        return NetworkConfig(k=v["network.K"], l=v["network.L"], c=v["network.C"],
                             t=v["network.T"], m=v["network.M"],
                             n_lambda=v["network.n_lambda"],
                             variant=v["network.variant"], k_me=v["network.k_me"],
                             ffn_mult=v["network.ffn_mult"],
                             cyclic_shift=v["network.cyclic_shift"])

    def schedule(self) -> Schedule:
        v = self.values
        return Schedule(total_epochs=v["schedule.epochs"],
                        phase_switch=v["schedule.switch"],
                        lr_half_every=v["schedule.lr_half_every"],
                        batch_size=v["schedule.batch"])

    def optimizer_state(self) -> OptimizerState:
        v = self.values
        return OptimizerState(beta1=v["optimizer.beta1"], beta2=v["optimizer.beta2"],
                              eps=v["optimizer.eps"], base_lr=v["optimizer.lr"],
                              clip_norm=v["optimizer.clip_norm"])

    def shear_rule(self) -> ShearRule:
        return ShearRule(d=self.values["optics.d"])

    def fit_kwargs(self) -> dict:
        """Loss and loop knobs for training.fit, phase alphas included."""
        v = self.values
        return dict(mode=v["train.mode"], alpha_pre=v["loss.alpha_pre"],
                    alpha_main=v["loss.alpha_main"], beta_ma=v["loss.beta_ma"],
                    eps_den=v["loss.eps_den"], reduction=v["loss.reduction"],
                    patch=v["loss.patch"], detach_weight=v["loss.detach_weight"],
                    crop=v["train.crop"], noise_sigma=v["optics.noise_sigma"],
                    eval_every=v["train.eval_every"])


def _family_line(seen: dict, prefix: str) -> int:
    lines = [ln for key, ln in seen.items() if key.startswith(prefix)]
    return max(lines) if lines else 0


def config_parse(text: str) -> RunConfig:
    """Parse and cross-validate; raises ConfigError with line numbers."""
    values = {key: default for key, (_, default) in KEYS.items()}
    seen: dict = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value', got {raw.strip()!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in KEYS:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
        cast = KEYS[key][0]
        try:
            values[key] = cast(val)
        except ValueError as e:
            raise ConfigError(f"line {ln}: bad value for {key}: {e}") from None
        seen[key] = ln

    cfg = RunConfig(values)
    # constraints live on the domain types; attribute failures to the last
    # line that touched the offending family
    for build, family in ((cfg.network_config, "network."),
                          (cfg.schedule, "schedule."),
                          (cfg.optimizer_state, "optimizer."),
                          (cfg.shear_rule, "optics.")):
        try:
            build()
        except ContractError as e:
            raise ConfigError(f"line {_family_line(seen, family)}: {e}") from None
    try:
        LossConfig(alpha=values["loss.alpha_pre"], beta_ma=values["loss.beta_ma"],
                   eps_den=values["loss.eps_den"], reduction=values["loss.reduction"],
                   patch=values["loss.patch"])
        LossConfig(alpha=values["loss.alpha_main"], beta_ma=values["loss.beta_ma"],
                   eps_den=values["loss.eps_den"], reduction=values["loss.reduction"],
                   patch=values["loss.patch"], phase="MA")
    except ContractError as e:
        raise ConfigError(f"line {_family_line(seen, 'loss.')}: {e}") from None
    if not (0.0 < values["optics.mask_density"] <= 1.0):
        raise ConfigError(
            f"line {_family_line(seen, 'optics.')}: optics.mask_density must lie in (0,1]")
    if values["optics.noise_sigma"] < 0:
        raise ConfigError(
            f"line {_family_line(seen, 'optics.')}: optics.noise_sigma must be >= 0")
    if values["train.crop"] < 0:
        raise ConfigError(
            f"line {_family_line(seen, 'train.')}: train.crop must be >= 0")
    if values["train.eval_every"] < 0:
        raise ConfigError(
            f"line {_family_line(seen, 'train.')}: train.eval_every must be >= 0")
    if values["seed"] < 0:
        raise ConfigError(f"line {seen.get('seed', 0)}: seed must be >= 0")
    return cfg


def config_from_file(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return config_parse(f.read())
