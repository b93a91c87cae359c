from __future__ import annotations

from dataclasses import asdict, dataclass, fields

__all__ = ["AgentConfig"]


@dataclass(frozen=True)
class AgentConfig:
    """Hyperparameters of the masked actor and the dropout critics.

    The defaults are the full-size network; :meth:`desk` gives a small variant
    that trains in minutes on one CPU core.
    """

    gamma: float = 0.98
    lr: float = 3e-4
    actor_lr: float | None = None       # defaults to lr
    critic_updates: int = 4
    actor_updates: int = 2
    batch_size: int = 256
    tau: float = 0.005
    dropout: float = 0.01
    warmup: int = 1000
    buffer_size: int = 50_000
    init_alpha: float = 1e-3
    autotune_alpha: bool = True
    target_entropy_scale: float = 1.0   # target = -scale * (number of unmasked entries)
    reward_scale: float = 0.05
    log_std_min: float = -20.0
    log_std_max: float = 2.0
    context_hidden: tuple = (256, 256)
    z_context: int = 64
    lstm_hidden: int = 256
    lstm_layers: int = 2
    encoder_channels: tuple = (2, 8, 16, 32)
    encoder_kernels: tuple = (4, 3, 3)
    decoder_channels: tuple = (32, 16, 8, 2)
    decoder_kernel: int = 2
    head_init_scale: float = 0.01       # shrinks the initial mean/log-std head weights
    critic_hidden: tuple = (256, 256)
    signal_clip: float = 10.0
    seed: int = 0

    def __post_init__(self):
        for name in ("context_hidden", "encoder_channels", "encoder_kernels",
                     "decoder_channels", "critic_hidden"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        for name in ("lr", "init_alpha", "reward_scale", "head_init_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("critic_updates", "actor_updates", "batch_size", "buffer_size",
                     "z_context", "lstm_hidden", "lstm_layers"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.actor_lr is not None and not self.actor_lr > 0:
            raise ValueError("actor_lr must be > 0")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if self.batch_size > self.buffer_size:
            raise ValueError("batch_size exceeds buffer_size")
        if self.encoder_channels[0] != 2 or self.decoder_channels[-1] != 2:
            raise ValueError("parameter image and action have 2 channels")
        if len(self.encoder_kernels) != len(self.encoder_channels) - 1:
            raise ValueError("need one encoder kernel per encoder stage")
        if 8 - sum(k - 1 for k in self.encoder_kernels) != 1:
            raise ValueError("encoder kernels must shrink the 8x8 image to 1x1")
        if len(self.decoder_channels) != 4:
            raise ValueError("decoder needs three upsampling stages (1 -> 2 -> 4 -> 8)")
        if self.log_std_min >= self.log_std_max:
            raise ValueError("log_std_min must be below log_std_max")

    @classmethod
    def desk(cls, **kw) -> "AgentConfig":
        base = dict(context_hidden=(32, 32), z_context=16, lstm_hidden=32, lstm_layers=1,
                    critic_hidden=(128, 128), batch_size=64, warmup=400,
                    lr=1e-3, actor_lr=1e-4, gamma=0.8)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown agent keys: {sorted(unknown)}")
        return cls(**d)
