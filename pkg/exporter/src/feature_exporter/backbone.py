"""Backbone seam: pretrained monocular depth model or a deterministic stub.

A backbone maps a preprocessed float32 image (H, W, 3) in [0, 1] to four
encoder feature maps at 1/4, 1/8, 1/16, 1/32 resolution plus the decoder's
last-layer feature map at 1/4 resolution. The pretrained path taps
intermediate transformer layers of Depth Anything V2 and the final neck
activation; the stub produces deterministic image-dependent features with
the same interface for offline testing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCALE_FACTORS = (4, 8, 16, 32)


@dataclass(frozen=True)
class Variant:
    key: str
    name: str
    model_id: str
    layer_ids: tuple


VARIANTS = {
    "s": Variant("s", "small", "depth-anything/Depth-Anything-V2-Small-hf", (2, 5, 8, 11)),
    "b": Variant("b", "base", "depth-anything/Depth-Anything-V2-Base-hf", (2, 5, 8, 11)),
    "l": Variant("l", "large", "depth-anything/Depth-Anything-V2-Large-hf", (4, 11, 17, 23)),
}


class BackboneUnavailable(RuntimeError):
    """The pretrained model could not be loaded."""


def _scale_extent(x: int, factor: int) -> int:
    return max(1, int(round(x / factor)))


class StubBackbone:
    """Deterministic stand-in with the real interface and realistic shapes.

    Features are seeded random projections of average-pooled image patches;
    identical inputs give bit-identical outputs.
    """

    tap = "stub"

    def __init__(self, variant: Variant, seed: int = 0, enc_channels: int = 48,
                 mono_channels: int = 32):
        self.variant = variant
        self.seed = seed
        self.enc_channels = enc_channels
        self.mono_channels = mono_channels
        rng = np.random.default_rng(seed)
        self._proj = [rng.normal(size=(3, enc_channels)).astype(np.float32)
                      for _ in SCALE_FACTORS]
        self._mono_proj = rng.normal(size=(3, mono_channels)).astype(np.float32)

    def _pool(self, img: np.ndarray, oh: int, ow: int) -> np.ndarray:
        h, w = img.shape[:2]
        ys = (np.linspace(0, h, oh + 1)).astype(int)
        xs = (np.linspace(0, w, ow + 1)).astype(int)
        out = np.empty((oh, ow, img.shape[2]), dtype=np.float64)
        for i in range(oh):
            for j in range(ow):
                out[i, j] = img[ys[i]:max(ys[i + 1], ys[i] + 1),
                                xs[j]:max(xs[j + 1], xs[j] + 1)].mean(axis=(0, 1))
        return out

    def __call__(self, image: np.ndarray):
        h, w = image.shape[:2]
        scales = []
        for proj, factor in zip(self._proj, SCALE_FACTORS):
            pooled = self._pool(image, _scale_extent(h, factor), _scale_extent(w, factor))
            scales.append((pooled @ proj.astype(np.float64)).astype(np.float32))
        pooled = self._pool(image, _scale_extent(h, 4), _scale_extent(w, 4))
        mono = (pooled @ self._mono_proj.astype(np.float64)).astype(np.float32)
        return scales, mono


class PretrainedBackbone:
    """Depth Anything V2 through transformers; deterministic inference."""

    def __init__(self, variant: Variant, model, processor):
        self.variant = variant
        self.model = model
        self.processor = processor
        self.tap = "neck.final"

    def __call__(self, image: np.ndarray):
        import torch

        h, w = image.shape[:2]
        with torch.inference_mode():
            inputs = self.processor(
                images=(image * 255).astype(np.uint8), return_tensors="pt",
                do_resize=False,
            )
            captured = {}

            def hook(module, args, output):
                captured["neck"] = output

            handle = self.model.neck.register_forward_hook(hook)
            try:
                out = self.model(**inputs, output_hidden_states=True)
            finally:
                handle.remove()

        hidden = out.hidden_states  # (layers+1) x (1, tokens, C)
        patch = self.model.config.patch_size
        gh, gw = h // patch, w // patch
        scales = []
        for layer, factor in zip(self.variant.layer_ids, SCALE_FACTORS):
            tokens = hidden[layer + 1][0]
            if tokens.shape[0] == gh * gw + 1:
                tokens = tokens[1:]
            grid = tokens.reshape(gh, gw, -1).permute(2, 0, 1)[None]
            target = (_scale_extent(h, factor), _scale_extent(w, factor))
            resized = torch.nn.functional.interpolate(
                grid, size=target, mode="bilinear", align_corners=False
            )
            scales.append(resized[0].permute(1, 2, 0).numpy().astype(np.float32))
        neck_out = captured["neck"]
        feat = neck_out[-1] if isinstance(neck_out, (list, tuple)) else neck_out
        target = (_scale_extent(h, 4), _scale_extent(w, 4))
        mono = torch.nn.functional.interpolate(
            feat, size=target, mode="bilinear", align_corners=False
        )[0].permute(1, 2, 0).numpy().astype(np.float32)
        return scales, mono


def load_backbone(variant_key: str, source: str = "pretrained"):
    """Resolve a backbone: 'pretrained', or 'stub' / 'stub:<seed>'."""
    if variant_key not in VARIANTS:
        raise ValueError(f"unknown variant {variant_key!r}; choices: s, b, l")
    variant = VARIANTS[variant_key]
    if source.startswith("stub"):
        seed = int(source.split(":", 1)[1]) if ":" in source else 0
        return StubBackbone(variant, seed=seed)
    try:
        import torch  # noqa: F401
        from transformers import AutoImageProcessor, AutoModelForDepthEstimation
    except ImportError as exc:
        raise BackboneUnavailable(
            f"torch/transformers not installed ({exc}); install the 'model' extra: "
            "pip install 'mono-feature-exporter[model]'"
        ) from exc
    try:
        processor = AutoImageProcessor.from_pretrained(variant.model_id)
        model = AutoModelForDepthEstimation.from_pretrained(variant.model_id)
        model.eval()
    except Exception as exc:
        raise BackboneUnavailable(
            f"could not load {variant.model_id}: {exc}; download the weights on a "
            "machine with network access or pass --backbone stub for testing"
        ) from exc
    return PretrainedBackbone(variant, model, processor)
