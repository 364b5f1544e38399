"""Export per-view backbone features to MTF files plus a hashed manifest.

Images are taken at 256x256 or resized with an aspect-preserving scale and
zero padding on the bottom/right; the preprocessing is recorded per view.
Output layout matches the reconstruction pipeline's file provider:
``view_<i>_scale_<s>.mtf`` for s = 0..3 plus ``view_<i>_mono.mtf``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .backbone import SCALE_FACTORS, StubBackbone, VARIANTS, load_backbone
from .mtf import write_mtf

TARGET_SIZE = 256
MANIFEST_NAME = "manifest.json"


class ShapeDriftError(RuntimeError):
    """Produced features disagree with an existing manifest."""


@dataclass
class ExportManifest:
    variant: str
    model_id: str
    layer_ids: list
    tap: str
    views: list = field(default_factory=list)
    manifest_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "format": 1,
            "variant": self.variant,
            "model_id": self.model_id,
            "layer_ids": self.layer_ids,
            "tap": self.tap,
            "views": self.views,
            "manifest_hash": self.manifest_hash,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExportManifest":
        return cls(
            variant=data["variant"],
            model_id=data["model_id"],
            layer_ids=list(data["layer_ids"]),
            tap=data["tap"],
            views=list(data["views"]),
            manifest_hash=data.get("manifest_hash", ""),
        )


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / np.float32(255.0)


def _preprocess(img: np.ndarray):
    """Aspect-preserving resize to fit 256x256, zero-pad bottom/right."""
    h, w = img.shape[:2]
    if (h, w) == (TARGET_SIZE, TARGET_SIZE):
        return img, {"scale": 1.0, "pad": [0, 0], "input_size": [h, w]}
    scale = TARGET_SIZE / max(h, w)
    nh, nw = round(h * scale), round(w * scale)
    pil = Image.fromarray((np.clip(img, 0, 1) * 255).astype(np.uint8))
    resized = np.asarray(pil.resize((nw, nh), Image.BILINEAR), dtype=np.float32) / 255.0
    canvas = np.zeros((TARGET_SIZE, TARGET_SIZE, 3), dtype=np.float32)
    canvas[:nh, :nw] = resized
    return canvas, {"scale": scale, "pad": [TARGET_SIZE - nh, TARGET_SIZE - nw],
                    "input_size": [h, w]}


def _expected_extent(factor: int) -> int:
    return max(1, round(TARGET_SIZE / factor))


def normalized_layer_ids(layer_ids) -> list:
    return sorted(int(v) for v in layer_ids)


def export(images, variant: str = "s", out_dir="features", backbone=None,
           sources=None) -> ExportManifest:
    """Write features for ``images`` (paths or arrays) and return the manifest.

    Raises ShapeDriftError when ``out_dir`` already holds a manifest whose
    declared shapes or layer ids disagree with this export.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choices: s, b, l")
    spec = VARIANTS[variant]
    backbone = backbone or load_backbone(variant)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    previous = None
    manifest_path = out / MANIFEST_NAME
    if manifest_path.exists():
        previous = ExportManifest.from_dict(
            json.loads(manifest_path.read_text(encoding="utf-8"))
        )
        if normalized_layer_ids(previous.layer_ids) != normalized_layer_ids(spec.layer_ids):
            raise ShapeDriftError(
                f"existing manifest layers {previous.layer_ids} != {list(spec.layer_ids)}"
            )

    manifest = ExportManifest(
        variant=spec.name,
        model_id=spec.model_id if not isinstance(backbone, StubBackbone)
        else f"stub:{backbone.seed}",
        layer_ids=normalized_layer_ids(spec.layer_ids),
        tap=getattr(backbone, "tap", "unknown"),
    )

    file_hashes = []
    for i, item in enumerate(images):
        if isinstance(item, (str, Path)):
            img = _load_image(item)
            source = str(item)
        else:
            img = np.asarray(item, dtype=np.float32)
            source = f"<array-{i}>"
        pre, preprocess = _preprocess(img)
        scales, mono = backbone(pre)

        if len(scales) != len(SCALE_FACTORS):
            raise ShapeDriftError(f"backbone produced {len(scales)} scales, expected 4")
        view_files = {}
        for s, (factor, feat) in enumerate(zip(SCALE_FACTORS, scales)):
            expect = (_expected_extent(factor), _expected_extent(factor))
            if feat.shape[:2] != expect:
                raise ShapeDriftError(
                    f"view {i} scale {s}: shape {feat.shape[:2]} != expected {expect}"
                )
            name = f"view_{i}_scale_{s}.mtf"
            write_mtf(out / name, feat)
            digest = _sha256_bytes((out / name).read_bytes())
            view_files[name] = {"shape": list(feat.shape), "sha256": digest}
            file_hashes.append(digest)
        if mono.shape[:2] != (_expected_extent(4), _expected_extent(4)):
            raise ShapeDriftError(f"view {i} mono shape {mono.shape[:2]} unexpected")
        name = f"view_{i}_mono.mtf"
        write_mtf(out / name, mono)
        digest = _sha256_bytes((out / name).read_bytes())
        view_files[name] = {"shape": list(mono.shape), "sha256": digest}
        file_hashes.append(digest)

        if previous is not None and i < len(previous.views):
            for fname, meta in previous.views[i]["files"].items():
                if fname in view_files and meta["shape"] != view_files[fname]["shape"]:
                    raise ShapeDriftError(
                        f"{fname}: shape {view_files[fname]['shape']} drifted from "
                        f"manifest {meta['shape']}"
                    )
        manifest.views.append({
            "index": i,
            "source": source,
            "preprocess": preprocess,
            "files": view_files,
        })

    manifest.manifest_hash = _sha256_bytes("\n".join(sorted(file_hashes)).encode())
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
