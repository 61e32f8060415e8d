"""Spectral loss, decoupled-weight-decay Adam, schedules, and the train loop.

Training runs the recorded graph per utterance, accumulates clipped
batch gradients, and steps AdamW.  Validation always goes through the
numpy inference path (the same code that serves enhancement), so the
reported numbers describe the deployed pipeline, not the training
surrogate.  The learning rate halves after a plateau of the validation
loss; training stops early when the plateau outlasts the stopping
patience.
"""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError
from .scenes import load_wav
from .stft import analyze

IMPROVE_REL = 1e-6  # relative improvement needed to reset patience counters


class NanLossError(RuntimeError):
    """Forward or backward produced a non-finite value during training."""


class DataError(RuntimeError):
    """A manifest entry could not be resolved or loaded."""


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 3e-4
    plateau_patience_epochs: int = 3
    lr_halving_factor: float = 0.5
    clip_norm: float = 5.0
    batch_size: int = 8
    max_epochs: int = 150
    early_stop_patience: int = 10
    weight_decay: float = 1e-2
    beta_msae: float = 0.4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.beta_msae <= 1.0):
            raise ValueError("beta_msae must lie in [0, 1]")
        for name in ("lr_init", "clip_norm", "batch_size", "max_epochs",
                     "plateau_patience_epochs", "early_stop_patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float

    def to_json(self):
        return json.dumps({"epoch": self.epoch, "train_loss": self.train_loss,
                           "val_loss": self.val_loss, "lr": self.lr,
                           "seconds": round(self.seconds, 3)})


def msae_loss(clean_left, clean_right, est_left, est_right, beta=0.4):
    """Mean spectral absolute error with exact moduli.

    Per bin: beta * |x - x_hat| + (1 - beta) * ||x| - |x_hat||, averaged
    over both ears and all bins/frames of the utterance.
    """
    total = 0.0
    count = 0
    for clean, est in ((clean_left, est_left), (clean_right, est_right)):
        x = np.asarray(getattr(clean, "data", clean))
        xh = np.asarray(getattr(est, "data", est))
        if x.shape != xh.shape:
            raise ValueError(f"shape mismatch {x.shape} vs {xh.shape}")
        term = beta * np.abs(x - xh) + (1.0 - beta) * np.abs(np.abs(x) - np.abs(xh))
        total += term.sum(dtype=np.float64)
        count += term.size
    return float(total / count)


def clip_gradients(grads, clip_norm):
    """Scale all gradients so the global l2 norm is at most clip_norm."""
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(np.square(g, dtype=np.float64)))
    norm = float(np.sqrt(sq))
    if norm > clip_norm:
        scale = clip_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def init_adamw_state(params):
    return {"step": 0,
            "m": {k: np.zeros_like(p.value) for k, p in params.items()},
            "v": {k: np.zeros_like(p.value) for k, p in params.items()}}


def adamw_step(params, grads, state, cfg, lr):
    """One decoupled-weight-decay Adam update, in place."""
    state["step"] += 1
    t = state["step"]
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k]
        m = state["m"][k]
        v = state["v"][k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + cfg.adam_eps)
        p.value -= lr * (update + cfg.weight_decay * p.value).astype(p.value.dtype)
    return state


def plateau_schedule(val_history, cfg):
    """Learning rate implied by a validation-loss history (stateless replay)."""
    if not len(val_history):
        raise ValueError("validation history must be nonempty")
    lr = cfg.lr_init
    best = np.inf
    stale = 0
    for loss in val_history:
        if loss <= best * (1.0 - IMPROVE_REL) or not np.isfinite(best):
            best = loss
            stale = 0
        else:
            stale += 1
            if stale >= cfg.plateau_patience_epochs:
                lr *= cfg.lr_halving_factor
                stale = 0
    return lr


def read_manifest(path):
    records = []
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{i + 1}: bad manifest record: {e}") from e
    if not records:
        raise DataError(f"manifest is empty: {path}")
    return records


def _load_utterances(manifest_path):
    """Resolve a manifest into in-memory audio; errors identify the file."""
    utterances = []
    for rec in read_manifest(manifest_path):
        entry = {"id": rec.get("id", "?")}
        for key in ("noisy_l", "noisy_r", "clean_l", "clean_r"):
            path = rec.get(key)
            if path is None:
                raise DataError(f"manifest record {entry['id']} missing field {key}")
            try:
                entry[key] = load_wav(path).samples.astype(np.float64)
            except (OSError, ValueError) as e:
                raise DataError(f"cannot load {key} for {entry['id']} ({path}): {e}") from e
        utterances.append(entry)
    return utterances


def _spectrograms(entry, stft_config):
    return {key: analyze(entry[key], stft_config) for key in
            ("noisy_l", "noisy_r", "clean_l", "clean_r")}


def _batches(utterances, stft_config, batch_size, rng):
    """Seeded shuffle into equal-length buckets, then fixed-size batches."""
    buckets = {}
    for idx, entry in enumerate(utterances):
        buckets.setdefault(len(entry["noisy_l"]), []).append(idx)
    batches = []
    for length in sorted(buckets):
        idxs = np.array(buckets[length])
        rng.shuffle(idxs)
        for i in range(0, len(idxs), batch_size):
            batches.append(idxs[i:i + batch_size].tolist())
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def _validation_loss(model, utterances, stft_config, beta):
    losses = []
    for entry in utterances:
        specs = _spectrograms(entry, stft_config)
        est_l, est_r = model.enhance(specs["noisy_l"], specs["noisy_r"])
        losses.append(msae_loss(specs["clean_l"], specs["clean_r"], est_l, est_r, beta))
    return float(np.mean(losses))


def train(model, train_manifest, val_manifest, cfg, out_dir, resume=False,
          progress=None):
    """Full optimization run; returns the list of EpochReports.

    Writes into ``out_dir``: model.bin/model.json (best validation),
    last.bin/optimizer.bin/state.json (resume point), and train_log.jsonl
    (one record per epoch).  Epoch 0 reports the untrained validation
    loss; training epochs count from 1.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stft_config = model.stft_config
    train_set = _load_utterances(train_manifest)
    val_set = _load_utterances(val_manifest)
    params = model.parameters()

    state = init_adamw_state(params)
    val_history = []
    reports = []
    start_epoch = 1
    best_val = np.inf
    if resume:
        state_path = out_dir / "state.json"
        if not state_path.exists():
            raise DataError(f"cannot resume: {state_path} missing")
        with open(state_path) as fh:
            saved = json.load(fh)
        tensors = ad.load_tensors(out_dir / "last.bin")
        for k, p in params.items():
            p.value = tensors[k].astype(p.value.dtype)
        opt = ad.load_tensors(out_dir / "optimizer.bin")
        state = {"step": saved["step"],
                 "m": {k: opt[f"m.{k}"] for k in params},
                 "v": {k: opt[f"v.{k}"] for k in params}}
        val_history = list(saved["val_history"])
        best_val = float(saved["best_val"])
        start_epoch = int(saved["epoch"]) + 1

    log_path = out_dir / "train_log.jsonl"
    log_mode = "a" if resume else "w"
    beta = cfg.beta_msae

    def log(report):
        reports.append(report)
        with open(log_path, log_mode if report is reports[0] else "a") as fh:
            fh.write(report.to_json() + "\n")
        if progress:
            progress(report)

    if start_epoch == 1:
        t0 = time.perf_counter()
        val0 = _validation_loss(model, val_set, stft_config, beta)
        log(EpochReport(0, float("nan"), val0, cfg.lr_init, time.perf_counter() - t0))
        val_history.append(val0)
        best_val = val0
        model.save(out_dir)

    stale = 0
    for epoch in range(start_epoch, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        lr = plateau_schedule(val_history, cfg)
        rng = np.random.default_rng([cfg.seed, epoch])
        batch_losses = []
        for batch_no, batch in enumerate(_batches(train_set, stft_config,
                                                  cfg.batch_size, rng)):
            for p in params.values():
                p.grad = None
            utt_losses = []
            try:
                for idx in batch:
                    specs = _spectrograms(train_set[idx], stft_config)
                    tape = ad.Tape()
                    with ad.record(tape):
                        loss = model.loss_graph(specs["noisy_l"].data,
                                                specs["noisy_r"].data,
                                                specs["clean_l"].data,
                                                specs["clean_r"].data)
                    ad.backward(tape, loss)
                    utt_losses.append(float(loss.value))
            except NonFiniteError as e:
                raise NanLossError(
                    f"non-finite loss at epoch {epoch} batch {batch_no}: {e}") from e
            n = len(batch)
            grads = {k: (p.grad / n if p.grad is not None else np.zeros_like(p.value))
                     for k, p in params.items()}
            grads, _ = clip_gradients(grads, cfg.clip_norm)
            adamw_step(params, grads, state, cfg, lr)
            batch_losses.append(float(np.mean(utt_losses)))

        val = _validation_loss(model, val_set, stft_config, beta)
        if not np.isfinite(val):
            raise NanLossError(f"non-finite validation loss at epoch {epoch}")
        val_history.append(val)
        log(EpochReport(epoch, float(np.mean(batch_losses)), val, lr,
                        time.perf_counter() - t0))

        if val <= best_val * (1.0 - IMPROVE_REL):
            best_val = val
            stale = 0
            model.save(out_dir)
        else:
            stale += 1

        ad.save_tensors(out_dir / "last.bin", {k: p.value for k, p in params.items()})
        opt = {f"m.{k}": state["m"][k] for k in params}
        opt.update({f"v.{k}": state["v"][k] for k in params})
        ad.save_tensors(out_dir / "optimizer.bin", opt)
        with open(out_dir / "state.json", "w") as fh:
            json.dump({"epoch": epoch, "step": state["step"], "best_val": best_val,
                       "val_history": val_history}, fh)

        if stale >= cfg.early_stop_patience:
            break
    return reports
