"""Training: SGD with inverse-time learning-rate decay for the classifier,
Adam-driven discriminator/generator alternation for the two enhancement
networks, plus the binary checkpoint format and run-level seeding.

Every stochastic choice in a run (parameter init, batch order, occlusion
rates, donor picks) derives from the single configured seed, so a rerun with
the same config produces byte-identical history and checkpoints.
"""

import base64
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import enhancers, metrics
from .attrclassifier import AttributeClassifier, weighted_bce
from .config import RunConfig
from .enhancers import (Discriminator, DiscriminatorSpec, Generator,
                        reconstruction_generator_spec, sr_generator_spec)
from .errors import ConfigError
from .synthgen import AttributeSchema, load_image, load_manifest

CHECKPOINT_MAGIC = b"AENH"
CHECKPOINT_VERSION = 1

CHECKPOINT_FILES = {
    "classifier": "classifier.ckpt",
    "reconstruction_generator": "reconstruction_generator.ckpt",
    "reconstruction_discriminator": "reconstruction_discriminator.ckpt",
    "sr_generator": "sr_generator.ckpt",
    "sr_discriminator": "sr_discriminator.ckpt",
}

SATURATION_PROB = 1e-6
SATURATION_BATCHES = 100


# ---------------------------------------------------------------------------
# checkpoint format

@dataclass
class Checkpoint:
    kind: str
    config_hash: str
    epoch: int
    tensors: dict  # name -> float32 ndarray
    ints: dict  # name -> int
    blobs: dict  # name -> bytes


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    names = sorted(checkpoint.tensors)
    index = []
    offset = 0
    chunks = []
    for name in names:
        arr = np.ascontiguousarray(checkpoint.tensors[name], dtype="<f4")
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        offset += len(raw)
        chunks.append(raw)
    header = {
        "kind": checkpoint.kind,
        "config_hash": checkpoint.config_hash,
        "epoch": checkpoint.epoch,
        "tensors": index,
        "ints": {k: int(v) for k, v in sorted(checkpoint.ints.items())},
        "blobs": {k: base64.b64encode(v).decode("ascii")
                  for k, v in sorted(checkpoint.blobs.items())},
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for raw in chunks:
            f.write(raw)


def load_checkpoint(path, expected_kind=None, expected_hash=None) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint (magic {magic!r})")
        version, header_len = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ConfigError(
                f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
        header = json.loads(f.read(header_len))
        payload = f.read()
    if expected_kind is not None and header["kind"] != expected_kind:
        raise ConfigError(
            f"{path}: checkpoint kind {header['kind']!r}, expected {expected_kind!r}")
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise ConfigError(
            f"{path}: config hash {header['config_hash']} does not match the "
            f"resolved config {expected_hash}; refusing to mix runs")
    tensors = {}
    for entry in header["tensors"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        tensors[entry["name"]] = np.frombuffer(
            payload[lo:hi], dtype="<f4").reshape(entry["shape"]).copy()
    return Checkpoint(
        kind=header["kind"], config_hash=header["config_hash"],
        epoch=header["epoch"], tensors=tensors,
        ints={k: int(v) for k, v in header["ints"].items()},
        blobs={k: base64.b64decode(v) for k, v in header["blobs"].items()},
    )


def _collect_model(model, prefix="model."):
    tensors, ints = {}, {}
    for name, t in model.state_dict().items():
        if t.dtype in (torch.int64, torch.int32):
            ints[prefix + name] = int(t.item())
        else:
            tensors[prefix + name] = t.detach().cpu().numpy()
    return tensors, ints


def _restore_model(model, checkpoint: Checkpoint, prefix="model."):
    state = {}
    for name, t in model.state_dict().items():
        key = prefix + name
        if t.dtype in (torch.int64, torch.int32):
            if key not in checkpoint.ints:
                raise ConfigError(f"checkpoint missing tensor {key}")
            state[name] = torch.tensor(checkpoint.ints[key], dtype=t.dtype)
        else:
            if key not in checkpoint.tensors:
                raise ConfigError(f"checkpoint missing tensor {key}")
            state[name] = torch.from_numpy(
                checkpoint.tensors[key].copy()).to(t.dtype).reshape(t.shape)
    model.load_state_dict(state)


def _collect_optimizer(optimizer, named_params, prefix="opt."):
    tensors = {}
    for name, p in named_params:
        for key, value in optimizer.state.get(p, {}).items():
            if torch.is_tensor(value):
                tensors[f"{prefix}{name}.{key}"] = value.detach().cpu().numpy()
    return tensors


def _restore_optimizer(optimizer, named_params, checkpoint: Checkpoint,
                       prefix="opt."):
    for name, p in named_params:
        head = f"{prefix}{name}."
        state = {full[len(head):]: torch.from_numpy(arr.copy())
                 for full, arr in checkpoint.tensors.items()
                 if full.startswith(head)}
        if state:
            optimizer.state[p] = state


def _rng_blobs(np_rng):
    return {
        "torch_rng": torch.get_rng_state().numpy().tobytes(),
        "np_rng": json.dumps(np_rng.bit_generator.state, sort_keys=True).encode(),
    }


def _restore_rng(np_rng, blobs):
    torch.set_rng_state(torch.from_numpy(
        np.frombuffer(blobs["torch_rng"], dtype=np.uint8).copy()))
    np_rng.bit_generator.state = json.loads(blobs["np_rng"].decode())


def seed_run(seed: int):
    """Seed torch init and return the numpy generator for data-side draws."""
    ss = np.random.SeedSequence(seed)
    torch_child, np_child = ss.spawn(2)
    torch.manual_seed(int(torch_child.generate_state(1)[0]))
    return np.random.default_rng(np_child)


# ---------------------------------------------------------------------------
# model construction from config

def build_classifier(config: RunConfig, schema: AttributeSchema) -> AttributeClassifier:
    return AttributeClassifier(
        len(schema), (config.image.height, config.image.width),
        tuple(config.classifier.channels))


def build_generator(config: RunConfig, which: str) -> Generator:
    if which == "reconstruction":
        return Generator(reconstruction_generator_spec(config), name="recon_gen")
    if which == "sr":
        return Generator(sr_generator_spec(config), name="sr_gen")
    raise ConfigError(f"unknown gan {which!r}, expected reconstruction or sr")


def build_discriminator(config: RunConfig, which: str) -> Discriminator:
    gan = getattr(config, which, None)
    if which not in ("reconstruction", "sr"):
        raise ConfigError(f"unknown gan {which!r}, expected reconstruction or sr")
    size = (config.image.height, config.image.width)
    return Discriminator(DiscriminatorSpec(tuple(gan.disc_channels)), size,
                         name=f"{which}_disc")


def load_model_from_checkpoint(path, config: RunConfig, kind: str,
                               schema: AttributeSchema = None):
    ckpt = load_checkpoint(path, expected_kind=kind)
    if kind == "classifier":
        model = build_classifier(config, schema)
    elif kind.endswith("_generator"):
        model = build_generator(config, kind.rsplit("_", 1)[0])
    elif kind.endswith("_discriminator"):
        model = build_discriminator(config, kind.rsplit("_", 1)[0])
    else:
        raise ConfigError(f"unknown checkpoint kind {kind!r}")
    _restore_model(model, ckpt)
    model.eval()
    return model, ckpt


# ---------------------------------------------------------------------------
# data access

def load_split_arrays(dataset_dir, split_file):
    """Load one split manifest plus all of its images as uint8 (N, 3, H, W)."""
    dataset_dir = Path(dataset_dir)
    records = load_manifest(dataset_dir / split_file)
    if not records:
        raise ConfigError(f"{split_file} is empty")
    images = np.stack([
        (load_image(dataset_dir, r) * 255).astype(np.uint8) for r in records])
    labels = np.stack([r.labels for r in records]).astype(np.float32)
    return records, images, labels


def batched_probs(model, images, batch=64) -> np.ndarray:
    """Eval-mode probabilities for float32 images (N, 3, H, W) in [0, 1]."""
    model.eval()
    outs = []
    with torch.no_grad():
        for lo in range(0, len(images), batch):
            x = torch.from_numpy(np.ascontiguousarray(images[lo:lo + batch]))
            outs.append(torch.sigmoid(model(x)).numpy())
    return np.concatenate(outs)


def _write_history(out_dir, history):
    path = Path(out_dir) / "history.jsonl"
    with open(path, "w") as f:
        for record in history:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def _prior_history(out_dir, start_epoch):
    path = Path(out_dir) / "history.jsonl"
    if not path.exists():
        return []
    with open(path) as f:
        records = [json.loads(line) for line in f if line.strip()]
    return [r for r in records if r["epoch"] < start_epoch]


# ---------------------------------------------------------------------------
# classifier training

def train_classifier(dataset_dir, config: RunConfig, out_dir, resume=None):
    """SGD with momentum on the ratio-weighted BCE; the effective learning
    rate at global step t is lr / (1 + decay * t). History records per-epoch
    mean loss and clean-test mA."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cc = config.classifier
    schema = AttributeSchema.load(Path(dataset_dir) / "schema.json")
    records, images, labels = load_split_arrays(dataset_dir, "train.jsonl")
    _, test_images, test_labels = load_split_arrays(dataset_dir, "test_clean.jsonl")
    test_images = test_images.astype(np.float32) / 255.0

    rng = seed_run(config.seed)
    model = build_classifier(config, schema)
    optimizer = torch.optim.SGD(model.parameters(), lr=cc.lr, momentum=cc.momentum)
    named_params = list(model.named_parameters())
    ratios = torch.from_numpy(schema.ratios.astype(np.float32))

    start_epoch, global_step, history = 0, 0, []
    if resume is not None:
        ckpt = load_checkpoint(resume, expected_kind="classifier",
                               expected_hash=config.hash())
        _restore_model(model, ckpt)
        _restore_optimizer(optimizer, named_params, ckpt)
        _restore_rng(rng, ckpt.blobs)
        start_epoch = ckpt.epoch
        global_step = ckpt.ints["global_step"]
        history = _prior_history(out, start_epoch)

    n = len(records)
    ckpt_path = out / CHECKPOINT_FILES["classifier"]
    model.train()
    for epoch in range(start_epoch, cc.epochs):
        perm = rng.permutation(n)
        epoch_loss, batches = 0.0, 0
        for lo in range(0, n, cc.batch):
            idx = perm[lo:lo + cc.batch]
            x = torch.from_numpy(images[idx]).float() / 255.0
            y = torch.from_numpy(labels[idx])
            lr_t = cc.lr / (1.0 + cc.lr_decay * global_step)
            for group in optimizer.param_groups:
                group["lr"] = lr_t
            scores = model(x)
            loss = weighted_bce(scores, y, ratios)
            if not torch.isfinite(loss):
                ids = [records[i].id for i in idx]
                raise RuntimeError(
                    f"non-finite classifier loss {loss.item()} at epoch {epoch} "
                    f"on batch {ids}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            global_step += 1
            epoch_loss += float(loss)
            batches += 1
        report = metrics.evaluate(
            batched_probs(model, test_images), test_labels, schema.names,
            threshold=config.pipeline.threshold)
        model.train()
        history.append({"epoch": epoch, "loss_c": epoch_loss / batches,
                        "test_ma": report.mA})
        save_checkpoint(ckpt_path, _make_checkpoint(
            "classifier", config, model, optimizer, named_params,
            epoch + 1, global_step, rng))

    if not ckpt_path.exists():
        save_checkpoint(ckpt_path, _make_checkpoint(
            "classifier", config, model, optimizer, named_params,
            start_epoch, global_step, rng))
    history_path = _write_history(out, history)
    return ckpt_path, history_path, history


def _make_checkpoint(kind, config, model, optimizer, named_params, epoch,
                     global_step, rng):
    tensors, ints = _collect_model(model)
    tensors.update(_collect_optimizer(optimizer, named_params))
    ints["global_step"] = global_step
    return Checkpoint(kind=kind, config_hash=config.hash(), epoch=epoch,
                      tensors=tensors, ints=ints, blobs=_rng_blobs(rng))


# ---------------------------------------------------------------------------
# GAN training

def _occlude_batch(clean_u8, subject_idx, rng, all_images_u8):
    """Paste a random other subject's top rows over the bottom of each image,
    at a rate drawn from [0.5, 0.8). Operates on uint8 (B, 3, H, W)."""
    batch = clean_u8.copy()
    n_all = len(all_images_u8)
    h = batch.shape[2]
    for b, subject in enumerate(subject_idx):
        donor = int(rng.integers(n_all - 1))
        if donor >= subject:
            donor += 1
        rate = float(rng.uniform(0.5, 0.8))
        k = int(np.floor(rate * h))
        batch[b, :, h - k:, :] = all_images_u8[donor, :, :k, :]
    return batch


def train_gan(dataset_dir, config: RunConfig, which: str, out_dir, resume=None):
    """Alternating discriminator/generator updates (k discriminator steps,
    then one generator step, per batch). Corrupted inputs are built on the
    fly from the clean train images: random bottom occlusions for the
    de-occlusion network, area downsampling for super resolution."""
    if which not in ("reconstruction", "sr"):
        raise ConfigError(f"unknown gan {which!r}, expected reconstruction or sr")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gc = getattr(config, which)
    _, images, _ = load_split_arrays(dataset_dir, "train_clean.jsonl")

    rng = seed_run(config.seed)
    generator = build_generator(config, which)
    discriminator = build_discriminator(config, which)
    opt_g = torch.optim.Adam(generator.parameters(), lr=gc.lr,
                             betas=(gc.beta1, gc.beta2), eps=gc.adam_eps)
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=gc.lr,
                             betas=(gc.beta1, gc.beta2), eps=gc.adam_eps)
    gen_params = list(generator.named_parameters())
    disc_params = list(discriminator.named_parameters())

    start_epoch, history = 0, []
    if resume is not None:
        resume = Path(resume)
        g_ckpt = load_checkpoint(resume / CHECKPOINT_FILES[f"{which}_generator"],
                                 expected_kind=f"{which}_generator",
                                 expected_hash=config.hash())
        d_ckpt = load_checkpoint(resume / CHECKPOINT_FILES[f"{which}_discriminator"],
                                 expected_kind=f"{which}_discriminator",
                                 expected_hash=config.hash())
        _restore_model(generator, g_ckpt)
        _restore_model(discriminator, d_ckpt)
        _restore_optimizer(opt_g, gen_params, g_ckpt)
        _restore_optimizer(opt_d, disc_params, d_ckpt)
        _restore_rng(rng, g_ckpt.blobs)
        start_epoch = g_ckpt.epoch
        history = _prior_history(out, start_epoch)

    n = len(images)
    factor = config.dataset.lowres_factor
    g_path = out / CHECKPOINT_FILES[f"{which}_generator"]
    d_path = out / CHECKPOINT_FILES[f"{which}_discriminator"]
    saturated_run = 0
    generator.train()
    discriminator.train()
    for epoch in range(start_epoch, gc.epochs):
        perm = rng.permutation(n)
        sums = {"loss_sse": 0.0, "loss_gen": 0.0, "d_real": 0.0, "d_fake": 0.0}
        batches = 0
        warned = False
        for lo in range(0, n, gc.batch):
            idx = perm[lo:lo + gc.batch]
            clean_u8 = images[idx]
            clean = torch.from_numpy(clean_u8).float() / 255.0
            if which == "reconstruction":
                corrupt_u8 = _occlude_batch(clean_u8, idx, rng, images)
                corrupted = torch.from_numpy(corrupt_u8).float() / 255.0
            else:
                corrupted = torch.nn.functional.avg_pool2d(clean, factor)

            d_fake_mean = 0.0
            for _ in range(gc.k):
                with torch.no_grad():
                    fake = generator(corrupted)
                d_real = discriminator(clean)
                d_fake = discriminator(fake)
                d_loss = enhancers.discriminator_loss(d_real, d_fake)
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()
                d_fake_mean = float(d_fake.mean())

            generated = generator(corrupted)
            probs = discriminator(generated)
            sse = enhancers.loss_sse(generated, clean, gc.sse_pool)
            objective = sse + gc.adv_weight * enhancers.adversarial_nonsaturating(probs)
            if not torch.isfinite(objective):
                raise RuntimeError(
                    f"non-finite generator objective {objective.item()} "
                    f"at epoch {epoch}")
            opt_g.zero_grad()
            objective.backward()
            opt_g.step()

            sums["loss_sse"] += float(sse)
            sums["loss_gen"] += float(enhancers.loss_gen(probs.detach()))
            sums["d_real"] += float(d_real.mean())
            sums["d_fake"] += d_fake_mean
            batches += 1
            saturated_run = saturated_run + 1 if d_fake_mean < SATURATION_PROB else 0
            if saturated_run >= SATURATION_BATCHES:
                warned = True
        record = {"epoch": epoch}
        record.update({k: v / batches for k, v in sums.items()})
        record["loss_r"] = record["loss_sse"] + gc.adv_weight * record["loss_gen"]
        if warned:
            record["warning"] = "discriminator saturated"
        history.append(record)
        save_checkpoint(g_path, _make_checkpoint(
            f"{which}_generator", config, generator, opt_g, gen_params,
            epoch + 1, 0, rng))
        save_checkpoint(d_path, _make_checkpoint(
            f"{which}_discriminator", config, discriminator, opt_d, disc_params,
            epoch + 1, 0, rng))

    if not g_path.exists():
        save_checkpoint(g_path, _make_checkpoint(
            f"{which}_generator", config, generator, opt_g, gen_params,
            start_epoch, 0, rng))
        save_checkpoint(d_path, _make_checkpoint(
            f"{which}_discriminator", config, discriminator, opt_d, disc_params,
            start_epoch, 0, rng))
    history_path = _write_history(out, history)
    return g_path, d_path, history_path, history
