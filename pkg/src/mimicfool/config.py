"""``key = value`` config files for attacks and campaigns.

Example::

    # oimo sweep on the invertible model
    task = classify
    variant = oimo
    parameterization = tanh
    eps_sweep = 2, 5, 10
    n_images = 50
    models = models/invertible
"""

from __future__ import annotations

import configparser
import os

from .attack import AttackConfig
from .campaign import CampaignSpec


class ConfigError(ValueError):
    pass


def _int(v: str) -> int:
    return int(v)


def parse_eps_list(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.split(",") if x.strip())


# key -> (parser, destination field name)
KEYS = {
    "variant": (str, "variant"),
    "parameterization": (str, "parameterization"),
    "max_iter": (_int, "max_iter"),
    "lr": (float, "lr"),
    "lambda": (float, "lam"),
    "epsilon_linf": (float, "epsilon_linf"),
    "seed": (_int, "seed"),
    "task": (str, "task"),
    "n_images": (_int, "n_images"),
    "eps_sweep": (parse_eps_list, "eps_sweep"),
    "out_dir": (str, "out_dir"),
    "models": (str, "models_dir"),
    "start_image": (str, "start_image_path"),
    "n_jobs": (_int, "n_jobs"),
}
ATTACK_FIELDS = ("variant", "parameterization", "max_iter", "lr", "lam", "epsilon_linf", "seed")


def parse_config(text: str, source: str = "<config>") -> dict:
    """Typed values keyed by destination field name."""
    parser = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    out = {}
    for key, raw in parser["config"].items():
        if key not in KEYS:
            raise ConfigError(f"{source}: unknown key {key!r}; known keys: {', '.join(sorted(KEYS))}")
        conv, dest = KEYS[key]
        try:
            out[dest] = conv(raw.strip())
        except ValueError:
            raise ConfigError(f"{source}: bad value for {key!r}: {raw!r}") from None
    return out


def load_config(path: str | os.PathLike) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), source=str(path))


def attack_config_from(values: dict) -> AttackConfig:
    return AttackConfig(**{k: values[k] for k in ATTACK_FIELDS if k in values})


def campaign_spec_from(values: dict) -> CampaignSpec:
    rest = {k: v for k, v in values.items() if k not in ATTACK_FIELDS or k == "seed"}
    return CampaignSpec(attack=attack_config_from(values), **rest)
