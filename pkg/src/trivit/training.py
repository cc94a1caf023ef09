"""Joint end-to-end training of the view encoders and fusion under MSE.

ADAM with bias correction, L2 weight regularization folded into the
gradients, and inverse-time learning-rate decay. All randomness is derived
from (seed, purpose, epoch, index) counters, so any state -- including a
mid-epoch checkpoint -- resumes bit-exactly without storing RNG state.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from dataclasses import dataclass, field

import numpy as np

from trivit import metrics as metrics_mod
from trivit import volume as volume_mod
from trivit.errors import ConfigError, ContractError, TrainingError
from trivit.metrics import MetricsReport
from trivit.model import ModelConfig, TriViewModel
from trivit.numerics import Tape, Tensor, concat, mean, mul, scale, sub, tsum
from trivit.volume import AugmentConfig, DatasetManifest, Volume

# rng stream tags; the tuple (seed, tag, *counters) seeds an independent stream
_INIT, _SHUFFLE, _AUGMENT, _DROPOUT = 1, 2, 3, 4


def derive_rng(seed: int, tag: int, *counters: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((int(seed), int(tag), *map(int, counters))))


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    lr_decay: float = 1e-6             # lr_t = lr / (1 + decay * t)
    lr_decay_scope: str = "step"       # "step" or "epoch"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 5e-4         # L2, added to gradients
    batch_size: int = 100
    epochs: int = 10
    seed: int = 3407
    parallel_workers: int = 0          # 0 = serial deterministic path

    def __post_init__(self):
        if self.learning_rate <= 0 or self.lr_decay < 0:
            raise ConfigError("learning_rate must be > 0 and lr_decay >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.lr_decay_scope not in ("step", "epoch"):
            raise ConfigError(f"lr_decay_scope {self.lr_decay_scope!r} invalid")


def mse_loss(preds: Tensor, ages: np.ndarray) -> Tensor:
    """Mean squared residual between predictions and chronological ages."""
    if preds.size == 0:
        raise ContractError("mse_loss on an empty batch")
    ages = np.asarray(ages, dtype=preds.dtype).reshape(preds.shape)
    diff = sub(preds, Tensor(ages))
    return mean(mul(diff, diff))


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, named_params):
        state = cls()
        for name, t in named_params:
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        return state


def current_lr(cfg: TrainConfig, state: OptimizerState, epoch: int) -> float:
    t = state.step if cfg.lr_decay_scope == "step" else epoch
    return cfg.learning_rate / (1.0 + cfg.lr_decay * t)


def adam_step(named_params, state: OptimizerState, cfg: TrainConfig,
              epoch: int = 0) -> OptimizerState:
    """Bias-corrected ADAM over ``(name, tensor)`` pairs using each tensor's
    accumulated ``.grad``. L2 regularization enters as weight_decay * theta
    added to the gradient."""
    lr = current_lr(cfg, state, epoch)
    t_next = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** t_next
    bc2 = 1.0 - cfg.beta2 ** t_next
    for name, p in named_params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        g = g + cfg.weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)).astype(p.data.dtype)
        if not np.isfinite(p.data).all():
            raise TrainingError(f"non-finite parameter {name!r} after update")
    state.step = t_next
    return state


@dataclass
class EpochLog:
    epoch: int
    train_mse: float
    val_mae: float
    val_r: float | None
    val_rp: float | None
    lr: float


class Trainer:
    """Epoch loop: seeded shuffle, augment, reslice, forward, fuse, MSE,
    backward, ADAM; validation after every epoch with best-MAE retention."""

    def __init__(self, model: TriViewModel, manifest: DatasetManifest,
                 train_cfg: TrainConfig, augment_cfg: AugmentConfig | None = None):
        manifest.validate()
        if not manifest.split("train"):
            raise ContractError("manifest has an empty train split")
        if not manifest.split("val"):
            raise ContractError("manifest has an empty val split")
        self.model = model
        self.manifest = manifest
        self.cfg = train_cfg
        self.augment_cfg = augment_cfg
        self.epoch = 0
        self.opt_state = OptimizerState.for_params(model.parameters())
        self.best_val_mae = float("inf")
        self.best_params: dict[str, np.ndarray] | None = None
        self.best_epoch = -1
        self.logs: list[EpochLog] = []
        self._cache: dict[str, Volume] = {}

    # -- data ------------------------------------------------------------

    def _load(self, record) -> Volume:
        path = self.manifest.resolve(record)
        vol = self._cache.get(path)
        if vol is None:
            vol = volume_mod.load_volume(path)
            if self.model.cfg.normalize_input:
                vol = volume_mod.normalize(vol)
            self._cache[path] = vol
        return vol

    def _train_sample(self, record, sample_index: int) -> np.ndarray:
        vol = self._load(record)
        if self.augment_cfg is not None and self.augment_cfg.apply_probability > 0:
            rng = derive_rng(self.cfg.seed, _AUGMENT, self.epoch, sample_index)
            vol = volume_mod.augment(vol, self.augment_cfg, rng)
        return vol.data

    # -- optimization ----------------------------------------------------

    def _forward_sample(self, data: np.ndarray, sample_index: int):
        rng = derive_rng(self.cfg.seed, _DROPOUT, self.epoch, sample_index)
        result = self.model.forward(data, train=True, rng=rng)
        if self.model.cfg.fusion.strategy == "best":
            # train each view against the target; selection happens at eval
            preds = [result.view_preds[a] for a in self.model.cfg.views]
            return concat(preds, axis=0)
        return result.fused

    def train_batch(self, records, sample_indices) -> float:
        """One optimizer step over a batch; returns the batch MSE."""
        params = list(self.model.parameters())
        for _, p in params:
            p.zero_grad()
        if self.cfg.parallel_workers > 1:
            batch_mse = self._batch_parallel(records, sample_indices, params)
        else:
            batch_mse = self._batch_serial(records, sample_indices, params)
        adam_step(params, self.opt_state, self.cfg, epoch=self.epoch)
        return batch_mse

    def _batch_serial(self, records, sample_indices, params) -> float:
        ages = []
        with Tape() as tape:
            preds = []
            for record, idx in zip(records, sample_indices):
                data = self._train_sample(record, idx)
                pred = self._forward_sample(data, idx)
                preds.append(pred)
                ages.extend([record.age] * pred.shape[0])
            batch_preds = concat(preds, axis=0)
            loss = mse_loss(batch_preds, np.asarray(ages, dtype=batch_preds.dtype).reshape(-1, 1))
            tape.backward(loss, params=[p for _, p in params])
        return loss.item()

    def _sample_loss(self, record, idx: int, denom: int):
        """Per-sample share of the batch MSE plus its parameter gradients,
        on a private tape (thread-safe)."""
        with Tape() as tape:
            data = self._train_sample(record, idx)
            pred = self._forward_sample(data, idx)
            ages = np.full(pred.shape, record.age, dtype=pred.dtype)
            diff = sub(pred, Tensor(ages))
            contrib = scale(tsum(mul(diff, diff)), 1.0 / denom)
            grads = tape.backward(contrib, accumulate=False)
        return contrib.item(), grads

    def _batch_parallel(self, records, sample_indices, params) -> float:
        from concurrent.futures import ThreadPoolExecutor

        denom = len(records) * (len(self.model.cfg.views)
                                if self.model.cfg.fusion.strategy == "best" else 1)
        with ThreadPoolExecutor(max_workers=self.cfg.parallel_workers) as pool:
            futures = [
                pool.submit(self._sample_loss, record, idx, denom)
                for record, idx in zip(records, sample_indices)
            ]
            results = [f.result() for f in futures]
        # reduce in sample order so the float sums are schedule-independent
        total = 0.0
        for _, grads in results:
            for t, g in grads.items():
                t.grad = g if t.grad is None else t.grad + g
        for value, _ in results:
            total += value
        return total

    def train_epoch(self) -> float:
        train_records = self.manifest.split("train")
        order = derive_rng(self.cfg.seed, _SHUFFLE, self.epoch).permutation(len(train_records))
        total, count = 0.0, 0
        bs = self.cfg.batch_size
        for start in range(0, len(order), bs):
            idxs = order[start:start + bs]
            batch = [train_records[i] for i in idxs]
            batch_mse = self.train_batch(batch, [int(i) for i in idxs])
            total += batch_mse * len(batch)
            count += len(batch)
        self.epoch += 1
        return total / count

    def evaluate(self, split: str) -> tuple[MetricsReport, list[tuple[str, float, float]]]:
        """Eval-mode metrics plus (path, age, prediction) per sample."""
        report, rows, _ = evaluate_model(self.model, self.manifest, split)
        return report, rows

    def fit(self) -> list[EpochLog]:
        if self.best_params is None:
            self._snapshot_best(initial=True)
        while self.epoch < self.cfg.epochs:
            train_mse = self.train_epoch()
            val_report, _, view_maes = evaluate_model(
                self.model, self.manifest, "val", view_breakdown=True
            )
            self.model.view_val_mae = view_maes
            log = EpochLog(
                epoch=self.epoch,
                train_mse=train_mse,
                val_mae=val_report.mae,
                val_r=val_report.r,
                val_rp=val_report.rp,
                lr=current_lr(self.cfg, self.opt_state, self.epoch),
            )
            self.logs.append(log)
            if val_report.mae < self.best_val_mae:
                self.best_val_mae = val_report.mae
                self.best_epoch = self.epoch
                self._snapshot_best()
        return self.logs

    def _snapshot_best(self, initial: bool = False):
        self.best_params = {name: t.data.copy() for name, t in self.model.parameters()}
        if initial:
            self.best_epoch = 0

    def best_model(self) -> TriViewModel:
        """A model carrying the best-validation parameters."""
        model = clone_model(self.model)
        if self.best_params is not None:
            for name, t in model.parameters():
                t.data = self.best_params[name].copy()
        model.view_val_mae = self.model.view_val_mae
        return model


def clone_model(model: TriViewModel) -> TriViewModel:
    fresh = TriViewModel.build(model.cfg, derive_rng(0, _INIT),
                               dtype=next(iter(dict(model.parameters()).values())).dtype)
    for (_, src), (_, dst) in zip(model.parameters(), fresh.parameters()):
        dst.data = src.data.copy()
    fresh.view_val_mae = dict(model.view_val_mae) if model.view_val_mae else None
    return fresh


def build_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> TriViewModel:
    return TriViewModel.build(cfg, derive_rng(seed, _INIT), dtype=dtype)


def evaluate_model(model: TriViewModel, manifest: DatasetManifest, split: str,
                   view_breakdown: bool = False):
    """Eval-mode (no dropout, no augmentation) predictions and metrics.

    Returns (report, per-sample rows, per-view MAE dict or None).
    """
    records = manifest.split(split)
    if not records:
        raise ContractError(f"split {split!r} is empty")
    strategy = model.cfg.fusion.strategy
    if strategy == "best" and len(model.cfg.views) > 1 and split != "val" \
            and not model.view_val_mae:
        raise ContractError(
            "best-view fusion needs per-view validation MAE; run a val pass first"
        )
    fused_preds, ages, rows = [], [], []
    view_preds: dict[str, list[float]] = {a: [] for a in model.cfg.views}
    for record in records:
        vol = volume_mod.load_volume(manifest.resolve(record))
        data = model.prepare_volume(vol)
        result = model.forward(data, train=False)
        for axis in model.cfg.views:
            view_preds[axis].append(result.view_preds[axis].item())
        fused_preds.append(result.fused.item() if result.fused is not None else None)
        ages.append(record.age)
    ages_arr = np.asarray(ages)
    view_maes = None
    if view_breakdown or strategy == "best":
        view_maes = {a: metrics_mod.mae(np.asarray(v), ages_arr) for a, v in view_preds.items()}
    if strategy == "best" and len(model.cfg.views) > 1 and split == "val":
        # selection happens on this split; report the chosen view's predictions
        model.view_val_mae = view_maes
        best_axis = min(model.cfg.views, key=lambda a: (view_maes[a], "xyz".index(a)))
        fused_preds = view_preds[best_axis]
    rows = [(r.path, r.age, p) for r, p in zip(records, fused_preds)]
    report = metrics_mod.compute_report(np.asarray(fused_preds), ages_arr)
    return report, rows, view_maes


# -- checkpointing --------------------------------------------------------

_CHECKPOINT_VERSION = 1


def _write_zip_entry(zf: zipfile.ZipFile, name: str, payload: bytes):
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path: str, trainer: Trainer, run_config: dict | None = None):
    """Single deterministic zip: JSON metadata plus one raw f32le array per
    parameter/moment, for both the live and the best-validation weights."""
    model = trainer.model
    params = list(model.parameters())
    meta = {
        "version": _CHECKPOINT_VERSION,
        "epoch": trainer.epoch,
        "opt_step": trainer.opt_state.step,
        "best_val_mae": None if trainer.best_val_mae == float("inf") else trainer.best_val_mae,
        "best_epoch": trainer.best_epoch,
        "seed": trainer.cfg.seed,
        "view_val_mae": model.view_val_mae,
        "tokens_per_view": {a: model.cfg.tokens_per_view(a) for a in model.cfg.views},
        "run_config": run_config,
        "params": [{"name": n, "shape": list(t.shape)} for n, t in params],
        "logs": [vars(log) for log in trainer.logs],
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _write_zip_entry(zf, "meta.json", json.dumps(meta, sort_keys=True).encode())
        for name, t in params:
            _write_zip_entry(zf, f"params/{name}", t.data.astype("<f4").tobytes())
            _write_zip_entry(zf, f"opt/m/{name}", trainer.opt_state.m[name].astype("<f4").tobytes())
            _write_zip_entry(zf, f"opt/v/{name}", trainer.opt_state.v[name].astype("<f4").tobytes())
            if trainer.best_params is not None:
                _write_zip_entry(zf, f"best/{name}", trainer.best_params[name].astype("<f4").tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def _read_array(zf: zipfile.ZipFile, name: str, shape) -> np.ndarray:
    raw = zf.read(name)
    expected = 4 * int(np.prod(shape)) if shape else 4
    if len(raw) != expected:
        raise ConfigError(f"checkpoint array {name!r}: expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def load_checkpoint(path: str, model_cfg: ModelConfig):
    """Rebuilds (model, best_model, opt_state, meta); every array shape is
    validated against the configuration."""
    model = TriViewModel.build(model_cfg, derive_rng(0, _INIT))
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("meta.json").decode())
        expected = {n: tuple(t.shape) for n, t in model.parameters()}
        listed = {p["name"]: tuple(p["shape"]) for p in meta["params"]}
        if listed != expected:
            missing = sorted(set(expected) - set(listed))
            extra = sorted(set(listed) - set(expected))
            wrong = sorted(
                n for n in set(listed) & set(expected) if listed[n] != expected[n]
            )
            raise ConfigError(
                f"checkpoint does not match config: missing={missing} "
                f"extra={extra} shape-mismatch={wrong}"
            )
        opt_state = OptimizerState(step=int(meta["opt_step"]))
        best_params = {}
        names = set(zf.namelist())
        for name, t in model.parameters():
            t.data = _read_array(zf, f"params/{name}", t.shape)
            opt_state.m[name] = _read_array(zf, f"opt/m/{name}", t.shape)
            opt_state.v[name] = _read_array(zf, f"opt/v/{name}", t.shape)
            if f"best/{name}" in names:
                best_params[name] = _read_array(zf, f"best/{name}", t.shape)
    model.view_val_mae = meta.get("view_val_mae")
    return model, (best_params or None), opt_state, meta


def resume_trainer(path: str, model_cfg: ModelConfig, manifest: DatasetManifest,
                   train_cfg: TrainConfig, augment_cfg: AugmentConfig | None) -> Trainer:
    model, best_params, opt_state, meta = load_checkpoint(path, model_cfg)
    trainer = Trainer(model, manifest, train_cfg, augment_cfg)
    trainer.opt_state = opt_state
    trainer.epoch = int(meta["epoch"])
    trainer.best_epoch = int(meta["best_epoch"])
    trainer.best_val_mae = (
        float("inf") if meta["best_val_mae"] is None else float(meta["best_val_mae"])
    )
    trainer.best_params = best_params
    trainer.logs = [EpochLog(**entry) for entry in meta.get("logs", [])]
    return trainer


def write_log_csv(logs: list[EpochLog], path: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,train_mse,val_mae,val_r,val_rp,lr\n")
        for log in logs:
            r = "nan" if log.val_r is None else repr(log.val_r)
            rp_ = "nan" if log.val_rp is None else repr(log.val_rp)
            fh.write(
                f"{log.epoch},{log.train_mse!r},{log.val_mae!r},{r},{rp_},{log.lr!r}\n"
            )
