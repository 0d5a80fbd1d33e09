"""Multimodal conditioned diffusion for time-series forecasting.

Timestamps are fused into the denoiser through self-attention over the joint
series/timestamp token sequence, text through cross-attention with
classifier-free guidance at sampling time.
"""

__version__ = "0.1.0"
