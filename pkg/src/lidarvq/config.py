"""Plain-text ``key = value`` run configuration shared by every CLI subcommand."""

from dataclasses import dataclass, fields

from .generator import GenConfig, GenModelConfig, GenTrainConfig
from .scenes import BeamConfig, SceneConfig
from .voxel import GridConfig
from .vqvae import ModelConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # grid
    x_min: float = 0.0
    x_max: float = 51.2
    y_min: float = -25.6
    y_max: float = 25.6
    z_min: float = -2.4
    z_max: float = 2.4
    vx: float = 0.4
    vy: float = 0.4
    vz: float = 0.3
    # scenes and sensor
    n_scenes: int = 200
    boxes_min: int = 3
    boxes_max: int = 8
    slope_max: float = 0.05
    z0_min: float = -1.9
    z0_max: float = -1.7
    n_beams: int = 8
    elevation_min: float = -30.0
    elevation_max: float = -2.0
    azimuth_steps: int = 256
    max_range: float = 60.0
    densify_factor: int = 4
    # vq-vae
    vq_blocks: int = 4
    vq_dim: int = 64
    vq_heads: int = 4
    n_codes: int = 128
    code_dim: int = 64
    vq_head_hidden: int = 256
    vq_iterations: int = 3000
    vq_batch_size: int = 1
    vq_learning_rate: float = 1e-3
    warmup_iters: int = 500
    commitment_weight: float = 0.25
    kmeans_init: bool = True
    reinit: bool = True
    reinit_threshold: float = 0.5
    reinit_every: int = 256
    bank_capacity: int = 8192
    kmeans_iters: int = 10
    vq_grad_clip: float = 1.0
    # generator
    gen_blocks: int = 6
    gen_dim: int = 128
    gen_heads: int = 4
    gen_iterations: int = 2000
    gen_batch_size: int = 4
    gen_learning_rate: float = 5e-4
    label_smoothing: float = 0.1
    gen_grad_clip: float = 1.0
    steps: int = 12
    suppress_steps: int = 6
    temperature: float = 1.0
    blank_coverage: float = 0.5
    denoise_rounds: int = 2
    denoise_fraction: float = 0.25
    # evaluation
    bandwidth: str = "auto"
    log_every: int = 0

    def grid(self):
        return GridConfig(self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max,
                          self.vx, self.vy, self.vz)

    def scene(self):
        return SceneConfig(roi=(self.x_min, self.x_max, self.y_min, self.y_max),
                           n_boxes=(self.boxes_min, self.boxes_max),
                           slope_range=(-self.slope_max, self.slope_max),
                           z0_range=(self.z0_min, self.z0_max))

    def beams(self):
        return BeamConfig(self.n_beams, self.elevation_min, self.elevation_max, self.azimuth_steps, self.max_range)

    def vq_model(self):
        return ModelConfig(self.grid(), self.vq_blocks, self.vq_dim, self.vq_heads, self.n_codes, self.code_dim,
                           self.vq_head_hidden)

    def vq_train(self, seed):
        return TrainConfig(self.vq_iterations, self.vq_batch_size, self.vq_learning_rate, self.warmup_iters,
                           self.commitment_weight, seed, self.reinit, self.reinit_threshold, self.reinit_every,
                           self.bank_capacity, self.kmeans_iters, self.vq_grad_clip, self.log_every, self.kmeans_init)

    def gen_model(self):
        h, w = self.grid().code_shape
        return GenModelConfig(h, w, self.n_codes, self.gen_blocks, self.gen_dim, self.gen_heads)

    def gen_train(self, seed):
        return GenTrainConfig(self.gen_iterations, self.gen_batch_size, self.gen_learning_rate,
                              self.label_smoothing, self.gen_grad_clip, seed, self.log_every)

    def sampling(self, seed):
        return GenConfig(self.steps, self.suppress_steps, self.temperature, seed)


_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _convert(name, kind, raw):
    try:
        if kind is bool:
            return _BOOL[raw.lower()]
        return kind(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config(text, base=None):
    cfg = RunConfig() if base is None else base
    kinds = {f.name: f.type for f in fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind = kinds[key]
        kind = {"float": float, "int": int, "bool": bool, "str": str}.get(kind, kind)
        setattr(cfg, key, _convert(key, kind, raw))
    return cfg


def load_config(path=None):
    if path is None:
        return RunConfig()
    with open(path) as f:
        return parse_config(f.read())


def dump_config(cfg):
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(RunConfig))
