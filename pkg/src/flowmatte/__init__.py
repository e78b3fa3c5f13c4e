"""Video matting as latent flow matching, at desk scale."""

from .codec import CodecConfig, CodecParams, decode, encode, train_codec
from .core import AlphaSequence, VideoClip, composite, from_codec_range, to_codec_range
from .defocus import defocus
from .denoiser import DenoiserConfig, LoraConfig, VideoDenoiser, inject_lora
from .flow import SamplerConfig, corrupt, euler_sample, reconstruct_clean
from .inference import Chunking, infer

__version__ = "0.1.0"
