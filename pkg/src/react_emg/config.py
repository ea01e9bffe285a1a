"""Model hyperparameters at full and desk scale."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

# Depth from the output side, used by layer-wise learning-rate decay.
GROUP_DEPTHS = {
    "decoder.head": 0,
    "decoder.lstm": 1,
    "conditioning": 1,
    "encoder.tds2": 2,
    "encoder.tds1": 3,
    "encoder.conv": 4,
}
BACKBONE_GROUPS = ("encoder", "decoder")


@dataclass(frozen=True)
class ModelConfig:
    emg_channels: int = 16
    sample_rate: int = 2000
    pose_rate: int = 50
    num_dof: int = 20

    conv1_channels: int = 256
    conv1_kernel: int = 11
    conv1_stride: int = 5
    conv2_channels: int = 256
    conv2_kernel: int = 5
    conv2_stride: int = 2
    tds_channels: int = 16
    tds_width: int = 16
    tds_kernels: tuple = (9, 5)
    tds_blocks: int = 2
    feature_dim: int = 64
    decimation: int = 4

    decoder_hidden: int = 512
    output_scale: float = 0.01
    direct_position_steps: int = 12

    char_channels: int = 128
    char_kernel: int = 3
    char_layers: int = 2
    char_dropout: float = 0.1
    gru_hidden: int = 64
    gru_layers: int = 3
    gru_dropout: float = 0.1
    attn_layers: int = 3
    attn_heads: int = 4
    attn_ff_mult: int = 4
    film_hidden: int = 128
    max_calibration: int = 32

    window_samples: int = 11790
    content_samples: int = 10000
    window_stride: int = 2000

    def __post_init__(self):
        if self.conv2_channels != self.tds_channels * self.tds_width:
            raise ValueError("conv2_channels must equal tds_channels * tds_width")
        if self.embed_dim % self.attn_heads:
            raise ValueError("embedding dim must be divisible by attn_heads")
        if self.content_samples % self.samples_per_frame:
            raise ValueError("content_samples must be a multiple of samples_per_frame")

    @property
    def samples_per_frame(self):
        return self.conv1_stride * self.conv2_stride * self.decimation

    @property
    def embed_dim(self):
        """Width of per-recording vectors, the group encoder and z."""
        return 2 * self.gru_hidden

    @property
    def decoder_input(self):
        return self.feature_dim + self.num_dof

    @property
    def content_frames(self):
        return self.content_samples // self.samples_per_frame

    @property
    def context_samples(self):
        return self.window_samples - self.content_samples

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["tds_kernels"] = list(self.tds_kernels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "tds_kernels" in d:
            d["tds_kernels"] = tuple(d["tds_kernels"])
        return cls(**d)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def full_config():
    """Hyperparameters of the published architecture."""
    return ModelConfig()


def desk_config():
    """A CPU-trainable configuration that keeps every interface width the
    decoder and FiLM see (64 features, 20 DOF, 84-d decoder input).

    Windows keep the full 1790-sample left context but carry 2000 samples
    (50 frames) of labeled content.
    """
    return ModelConfig(
        conv1_channels=32,
        conv2_channels=32,
        tds_channels=4,
        tds_width=8,
        decoder_hidden=48,
        char_channels=32,
        gru_hidden=16,
        gru_layers=3,
        attn_layers=2,
        attn_heads=4,
        film_hidden=64,
        window_samples=3790,
        content_samples=2000,
        window_stride=2000,
    )


def tiny_config():
    """Smallest sensible model, for gradient checks and fast structural tests."""
    return ModelConfig(
        emg_channels=4,
        num_dof=20,
        conv1_channels=6,
        conv2_channels=6,
        tds_channels=2,
        tds_width=3,
        feature_dim=64,
        decoder_hidden=6,
        char_channels=6,
        gru_hidden=4,
        gru_layers=2,
        attn_layers=1,
        attn_heads=2,
        film_hidden=8,
        window_samples=1790 + 400,
        content_samples=400,
        window_stride=400,
    )
