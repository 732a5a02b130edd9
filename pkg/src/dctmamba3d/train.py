"""Training loop, evaluation and the end-to-end split/normalise/train/score pipeline."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint
from .data import (BandStats, HsiCube, PatchSet, extract_patches, normalize_patches,
                   stratified_split, train_pixel_stats)
from .metrics import Scores, confusion, scores
from .model import DCTMamba3D, ModelConfig, loss_fn
from .nn import Adam
from .tensor import NonFiniteError, Tensor, no_grad

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: DCTMamba3D
    optimizer: Adam
    curve: list = field(default_factory=list)
    checkpoint: Checkpoint | None = None


def make_checkpoint(model: DCTMamba3D, opt: Adam, rng: np.random.Generator, step: int,
                    stats: BandStats | None = None) -> Checkpoint:
    tensors = {f"param/{name}": p.data.copy() for name, p in model.named_parameters()}
    tensors.update({f"optim/{k}": v.copy() for k, v in opt.state_arrays().items()})
    if stats is not None:
        tensors["norm/mean"] = np.asarray(stats.mean, dtype=np.float64)
        tensors["norm/std"] = np.asarray(stats.std, dtype=np.float64)
    return Checkpoint(model.config.to_dict(), tensors, step, opt.t, rng.bit_generator.state)


def restore(ck: Checkpoint) -> tuple[DCTMamba3D, Adam, BandStats | None]:
    config = ModelConfig.from_dict(ck.config)
    model = DCTMamba3D(config)
    params = ck.group("param/")
    for name, p in model.named_parameters():
        if params[name].shape != p.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {params[name].shape}, model expects {p.shape}")
        p.data[...] = params[name]
    opt = Adam(model.parameters(), config.optim.lr, (config.optim.beta1, config.optim.beta2))
    opt.load_state_arrays(ck.group("optim/"), ck.optimizer_t)
    stats = None
    if "norm/mean" in ck.tensors:
        stats = BandStats(ck.tensors["norm/mean"], ck.tensors["norm/std"])
    return model, opt, stats


def train(config: ModelConfig, train_set: PatchSet, stats: BandStats | None = None,
          checkpoint_dir=None, max_steps: int | None = None) -> TrainResult:
    """Mini-batch Adam on ``train_set``; one tape per step, freed by backward."""
    rng = np.random.default_rng(config.optim.seed)
    model = DCTMamba3D(config, rng)
    o = config.optim
    opt = Adam(model.parameters(), o.lr, (o.beta1, o.beta2))
    dtype = config.np_dtype
    curve: list[float] = []
    n = len(train_set)
    step = 0
    for epoch in range(o.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, o.batch_size):
            if max_steps is not None and step >= max_steps:
                break
            idx = perm[start:start + o.batch_size]
            if config.lambda_reg > 0 and idx.size < 2:
                continue
            x = Tensor(train_set.patches[idx], dtype=dtype)
            opt.zero_grad()
            try:
                logits, feats = model(x, return_features=True)
                loss = loss_fn(logits, train_set.labels[idx], feats, config.lambda_reg)
            except NonFiniteError as exc:
                raise TrainingDivergedError(f"non-finite values at step {step}: {exc}") from exc
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(f"loss is {value} at step {step}")
            loss.backward()
            opt.step()
            model.check_stability()
            curve.append(value)
            step += 1
            if checkpoint_dir is not None and o.checkpoint_every and step % o.checkpoint_every == 0:
                ckpt_io.save(make_checkpoint(model, opt, rng, step, stats),
                             Path(checkpoint_dir) / f"step_{step:06d}.dcm3")
        log.debug("epoch %d done, last loss %.4f", epoch, curve[-1] if curve else float("nan"))
    return TrainResult(model, opt, curve, make_checkpoint(model, opt, rng, step, stats))


def predict(model: DCTMamba3D, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
    dtype = model.config.np_dtype
    out = []
    with no_grad():
        for start in range(0, patches.shape[0], batch_size):
            logits = model(Tensor(patches[start:start + batch_size], dtype=dtype))
            out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: DCTMamba3D, ps: PatchSet) -> tuple[Scores, np.ndarray, np.ndarray]:
    preds = predict(model, ps.patches)
    cm = confusion(preds, ps.labels, model.config.num_classes)
    return scores(cm), cm, preds


def write_loss_curve(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(curve):
            w.writerow([i, repr(float(v))])


def read_loss_curve(path) -> list[float]:
    with open(path, newline="") as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]


def moving_average(values, window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return np.array([v.mean()]) if v.size else v
    return np.convolve(v, np.ones(window) / window, mode="valid")


@dataclass
class Experiment:
    result: TrainResult
    train_set: PatchSet
    test_set: PatchSet
    scores: Scores
    cm: np.ndarray
    preds: np.ndarray


def prepare_splits(cube: HsiCube, patch_spatial: int, train_fraction: float, seed: int):
    """Split labelled pixels, then standardise bands with train-pixel statistics."""
    ps = extract_patches(cube, patch_spatial)
    train_set, test_set = stratified_split(ps, train_fraction, seed, cube.num_classes)
    stats = train_pixel_stats(cube, train_set)
    return normalize_patches(train_set, stats), normalize_patches(test_set, stats), stats


def run_experiment(cube: HsiCube, config: ModelConfig, train_fraction: float = 0.10,
                   split_seed: int | None = None, checkpoint_dir=None) -> Experiment:
    split_seed = config.optim.seed if split_seed is None else split_seed
    if config.bands != cube.bands or config.num_classes != cube.num_classes:
        config = ModelConfig.from_dict({**config.to_dict(), "bands": cube.bands,
                                        "num_classes": cube.num_classes})
    tr, te, stats = prepare_splits(cube, config.ssdm.patch_spatial, train_fraction, split_seed)
    if len(te) == 0:
        raise ValueError(f"train_fraction {train_fraction} leaves no test pixels to score")
    res = train(config, tr, stats, checkpoint_dir)
    sc, cm, preds = evaluate(res.model, te)
    return Experiment(res, tr, te, sc, cm, preds)
