"""Composed dispatch over the three networks: super-resolve inputs smaller
than the classifier input, classify, and if the occlusion-down attribute
fires above the trigger threshold, de-occlude and classify once more.

The final probability vector comes from the last classification pass, except
the occlusion-down entry, which is kept from the first pass: the
reconstruction removes the very evidence that attribute reports.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .config import RunConfig
from .errors import ConfigError, SizeError
from .synthgen import AttributeSchema, bilinear_upsample, load_image
from .trainloop import CHECKPOINT_FILES, load_model_from_checkpoint


@dataclass
class PipelineModels:
    classifier: object
    reconstruction: object
    sr: object
    schema: AttributeSchema
    config_hash: str


@dataclass
class PipelineDecision:
    used_sr: bool
    used_reconstruction: bool
    first_pass_probs: np.ndarray
    final_probs: np.ndarray
    images: dict | None = None


def load_models(models_dir, config: RunConfig, schema: AttributeSchema = None,
                require=("classifier", "reconstruction_generator", "sr_generator")):
    """Load the frozen models a pipeline needs, verifying that every
    checkpoint was produced under this exact resolved config."""
    models_dir = Path(models_dir)
    if schema is None:
        schema_path = models_dir / "schema.json"
        if not schema_path.exists():
            raise ConfigError(f"no schema.json next to models in {models_dir}")
        schema = AttributeSchema.load(schema_path)
    loaded = {}
    expected = config.hash()
    for kind in require:
        path = models_dir / CHECKPOINT_FILES[kind]
        if not path.exists():
            raise ConfigError(f"missing model checkpoint {path} (kind {kind})")
        model, ckpt = load_model_from_checkpoint(path, config, kind, schema)
        if ckpt.config_hash != expected:
            raise ConfigError(
                f"{path}: config hash {ckpt.config_hash} does not match the "
                f"resolved config {expected}")
        loaded[kind] = model
    return PipelineModels(
        classifier=loaded.get("classifier"),
        reconstruction=loaded.get("reconstruction_generator"),
        sr=loaded.get("sr_generator"),
        schema=schema,
        config_hash=expected,
    )


def _classify(models, batch: torch.Tensor) -> np.ndarray:
    with torch.no_grad():
        return torch.sigmoid(models.classifier(batch)).numpy()


def run(image, models: PipelineModels, config: RunConfig,
        keep_images=False) -> PipelineDecision:
    """Route one image (3, h, w) through the dispatch algorithm."""
    full = (config.image.height, config.image.width)
    quarter = (full[0] // config.dataset.lowres_factor,
               full[1] // config.dataset.lowres_factor)
    x = torch.as_tensor(np.asarray(image, dtype=np.float32)).unsqueeze(0)
    size = tuple(x.shape[-2:])
    if size == quarter:
        used_sr = True
        with torch.no_grad():
            x = models.sr(x)
    elif size == full:
        used_sr = False
    else:
        raise SizeError((full, quarter), size, what="pipeline input")

    first = _classify(models, x)[0]
    occ_idx = models.schema.occlusion_down_index
    used_reconstruction = bool(first[occ_idx] > config.pipeline.trigger)
    kept = {"input": np.asarray(image, dtype=np.float32)} if keep_images else None
    if used_sr and keep_images:
        kept["super_resolved"] = x[0].numpy()

    if used_reconstruction:
        with torch.no_grad():
            restored = models.reconstruction(x)
        final = _classify(models, restored)[0]
        final[occ_idx] = first[occ_idx]
        if keep_images:
            kept["reconstructed"] = restored[0].numpy()
    else:
        final = first.copy()
    return PipelineDecision(used_sr, used_reconstruction, first, final,
                            images=kept)


@dataclass
class BatchResult:
    corrupted: metrics.MetricsReport
    restored: metrics.MetricsReport
    deltas: list
    counts: dict

    def to_dict(self):
        return {
            "corrupted": self.corrupted.to_dict(),
            "restored": self.restored.to_dict(),
            "deltas": [{"name": r.name, "a": r.a, "b": r.b, "delta": r.delta}
                       for r in self.deltas],
            "counts": dict(self.counts),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def run_batch(manifest_records, dataset_dir, models: PipelineModels,
              config: RunConfig) -> BatchResult:
    """Score a manifest both ways: plain classification (quarter-size inputs
    bilinearly upsampled first) versus the full dispatch pipeline."""
    full = (config.image.height, config.image.width)
    factor = config.dataset.lowres_factor
    schema = models.schema
    labels = np.stack([r.labels for r in manifest_records]).astype(np.float32)

    direct_probs = np.zeros((len(manifest_records), len(schema)), dtype=np.float32)
    final_probs = np.zeros_like(direct_probs)
    counts = {"used_sr": 0, "used_reconstruction": 0, "false_triggers": 0,
              "samples": len(manifest_records)}
    occ_idx = schema.occlusion_down_index

    for i, record in enumerate(manifest_records):
        image = load_image(dataset_dir, record)
        size = tuple(image.shape[-2:])
        if size == full:
            plain = image
        elif size == (full[0] // factor, full[1] // factor):
            plain = bilinear_upsample(image, factor)
        else:
            raise SizeError((full, (full[0] // factor, full[1] // factor)),
                            size, what=f"manifest image {record.id}")
        direct_probs[i] = _classify(
            models, torch.from_numpy(plain).unsqueeze(0))[0]

        decision = run(image, models, config)
        final_probs[i] = decision.final_probs
        counts["used_sr"] += decision.used_sr
        counts["used_reconstruction"] += decision.used_reconstruction
        if decision.used_reconstruction and record.labels[occ_idx] == 0:
            counts["false_triggers"] += 1

    threshold = config.pipeline.threshold
    corrupted = metrics.evaluate(direct_probs, labels, schema.names, threshold)
    restored = metrics.evaluate(final_probs, labels, schema.names, threshold)
    return BatchResult(corrupted, restored, metrics.compare(corrupted, restored),
                       counts)
