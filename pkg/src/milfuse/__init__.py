"""milfuse: weakly supervised slide-level response prediction.

Pipeline stages: tissue tiling (`tiling`), per-patch embedding and fusion
(`embedding`), the gated-attention MIL model (`model`), class-weighted
training with k-fold evaluation (`training`, `metrics`), dataset
manifests and synthetic benchmark generation (`data`, `synth`), and the
`milfuse` CLI (`cli`).
"""

__version__ = "0.1.0"
