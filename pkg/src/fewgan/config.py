"""Training configuration and its flat ``key=value`` text format."""

import dataclasses
from dataclasses import dataclass, field

from fewgan.losses import LossWeights


@dataclass
class TrainConfig:
    # Pyramid. T=None picks the largest T allowed by min_size.
    T: int | None = None
    scale_factor: float = 0.75
    min_size: int = 32
    # Quantizer.
    n_embeddings: int = 128
    n_z: int = 16
    lambda_pos: int = 4
    beta: float = 0.25
    # Adversarial training.
    lambda_gp: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    side_as_fake: bool = False
    steps_per_scale: int = 2000
    critic_steps: int = 3
    lr_g: float = 5e-4
    lr_d: float = 5e-4
    lr_decay_at: float = 0.8
    lr_decay: float = 0.5
    # Architecture.
    ae_channels: int = 64
    gan_channels: int = 32
    gan_layers: int = 5
    # Prior.
    prior_epochs: int = 200
    prior_lr: float = 1e-3
    prior_channels: int = 64
    prior_blocks: int = 5
    seed: int = 0
    train_dataset_path: str = ""
    side_dataset_path: str = ""

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.T is not None and self.T < 0:
            raise ValueError("T must be non-negative")
        if not 0 < self.scale_factor < 1:
            raise ValueError("scale_factor must be in (0, 1)")
        if self.beta < 0 or self.lambda_gp < 0:
            raise ValueError("beta and lambda_gp must be non-negative")
        for name in ("n_embeddings", "n_z", "lambda_pos", "critic_steps",
                     "ae_channels", "gan_channels", "gan_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.steps_per_scale < 0 or self.prior_epochs < 0:
            raise ValueError("step counts must be non-negative")

    @property
    def n_scales(self):
        return None if self.T is None else self.T + 1

    def to_dict(self):
        flat = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "weights":
                flat.update(dataclasses.asdict(value))
            else:
                flat[f.name] = value
        return flat

    @classmethod
    def from_dict(cls, values):
        values = dict(values)
        weight_keys = {f.name for f in dataclasses.fields(LossWeights)}
        weights = {k: values.pop(k) for k in list(values) if k in weight_keys}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(weights=LossWeights(**weights), **values)


def _kind(tp):
    if tp == (int | None):
        return "optional_int"
    return tp.__name__


_KINDS = {f.name: _kind(f.type) for f in dataclasses.fields(TrainConfig)
          if f.name != "weights"}
_KINDS.update({f.name: "float" for f in dataclasses.fields(LossWeights)})


def _parse_value(key, text):
    kind = _KINDS.get(key)
    if kind is None:
        raise ValueError(f"unknown config key: {key}")
    if kind == "optional_int":
        return None if text.lower() in ("", "none", "auto") else int(text)
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    return text


def parse_overrides(pairs):
    """Parses ``key=value`` strings into typed values."""
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ValueError(f"expected key=value, got {pair!r}")
        try:
            out[key] = _parse_value(key, value.strip())
        except ValueError as e:
            raise ValueError(f"bad value for {key}: {e}") from e
    return out


def loads(text, **overrides):
    lines = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    values = parse_overrides(lines)
    values.update(overrides)
    return TrainConfig.from_dict(values)


def load(path, **overrides):
    with open(path) as f:
        return loads(f.read(), **overrides)


def dumps(cfg):
    lines = []
    for key, value in cfg.to_dict().items():
        if value is None:
            value = "auto"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def save(cfg, path):
    with open(path, "w") as f:
        f.write(dumps(cfg))
