"""Splits, training loop with early stopping, metrics, and sweeps."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, NumericError
from .img_repr import render_composite
from .model import CareModel, ModelConfig
from .objective import ContrastiveConfig, care_loss, ce_loss, sica_loss
from .preprocess import (PreprocessConfig, fit_normalization_stats, process_segments,
                         resolve_auto_length, filter_events)
from .seq_repr import build_sequence_tensor, feature_dim


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 60
    patience: int = 10
    learning_rate: float = 1e-3
    optimizer: str = "adam"      # adam | sgd_momentum
    momentum: float = 0.9
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    train_fraction: float = 0.7
    valid_fraction: float = 0.15  # carved out of the training split
    k_folds: int = 5
    average: str = "weighted"     # weighted | macro

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (contrastive pairs)")
        if not (0.0 < self.train_fraction < 1.0):
            raise ConfigError("train_fraction must lie in (0,1)")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.average not in ("weighted", "macro"):
            raise ConfigError(f"unknown metric average {self.average!r}")


# ---------------------------------------------------------------------------
# splits


def stratified_split(segments, fraction: float, seed: int):
    """Deterministic per-class split; returns (train, test) lists.

    Per-class train counts use half-up rounding and always leave at least
    one sample on each side; singleton classes are an error.
    """
    by_class: dict[int, list[int]] = {}
    for idx, seg in enumerate(segments):
        by_class.setdefault(seg.label, []).append(idx)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for label in sorted(by_class):
        indices = by_class[label]
        if len(indices) < 2:
            raise DataError(f"class {label} has only {len(indices)} segment(s); cannot split")
        perm = rng.permutation(len(indices))
        n_train = int(np.floor(fraction * len(indices) + 0.5))
        n_train = min(len(indices) - 1, max(1, n_train))
        for pos, p in enumerate(perm):
            (train_idx if pos < n_train else test_idx).append(indices[p])
    train_idx.sort()
    test_idx.sort()
    return [segments[i] for i in train_idx], [segments[i] for i in test_idx]


def kfold_indices(segments, k: int, seed: int, warnings: list | None = None):
    """k class-stratified folds partitioning the index range of `segments`."""
    if k < 2:
        raise ConfigError("k must be >= 2")
    by_class: dict[int, list[int]] = {}
    for idx, seg in enumerate(segments):
        by_class.setdefault(seg.label, []).append(idx)
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    for label in sorted(by_class):
        indices = by_class[label]
        if len(indices) < k and warnings is not None:
            warnings.append(f"class {label} has {len(indices)} < k={k} samples; "
                            "some folds will miss it")
        perm = rng.permutation(len(indices))
        for pos, p in enumerate(perm):
            folds[pos % k].append(indices[p])
    return [sorted(f) for f in folds]


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: dict
    confusion: list
    time_per_batch_s: float = 0.0
    extras: dict = field(default_factory=dict)

    def flat(self) -> dict:
        row = {"acc": self.accuracy, "prec": self.precision, "rec": self.recall,
               "f1": self.f1, "time_per_batch_s": self.time_per_batch_s}
        row.update(self.extras)
        return row


def compute_metrics(y_true, y_pred, n_classes: int, average: str = "weighted") -> MetricsReport:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise DataError("compute_metrics: empty data")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        confusion[t, p] += 1
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    tp = np.diag(confusion).astype(np.float64)
    precision_c = np.divide(tp, predicted, out=np.zeros(n_classes), where=predicted > 0)
    recall_c = np.divide(tp, support, out=np.zeros(n_classes), where=support > 0)
    denom = precision_c + recall_c
    f1_c = np.divide(2 * precision_c * recall_c, denom, out=np.zeros(n_classes), where=denom > 0)
    if average == "weighted":
        weights = support / support.sum()
    else:
        present = support > 0
        weights = present / max(1, present.sum())
    per_class = {
        str(c): {"precision": float(precision_c[c]), "recall": float(recall_c[c]),
                 "f1": float(f1_c[c]), "support": int(support[c])}
        for c in range(n_classes)
    }
    return MetricsReport(
        accuracy=float(tp.sum() / support.sum()),
        precision=float((weights * precision_c).sum()),
        recall=float((weights * recall_c).sum()),
        f1=float((weights * f1_c).sum()),
        per_class=per_class,
        confusion=confusion.tolist(),
    )


def aggregate_reports(reports) -> dict:
    """mean +/- population std of the headline metrics across seeds."""
    out = {}
    for key in ("accuracy", "precision", "recall", "f1"):
        values = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        out[key] = {"mean": float(values.mean()), "std": float(values.std())}
    out["time_per_batch_s"] = float(np.mean([r.time_per_batch_s for r in reports]))
    return out


# ---------------------------------------------------------------------------
# encoded datasets


@dataclass
class EncodedDataset:
    seq: np.ndarray        # (N, L, D) float32
    mask: np.ndarray       # (N, L) float32
    images: np.ndarray | None  # (N, 3, 256, 512) float16, None for seq-only view
    labels: np.ndarray     # (N,) int64

    def __len__(self):
        return self.labels.shape[0]


def build_dataset(processed, registry, bins_per_day: int, no_time: bool = False,
                  with_images: bool = True, with_sequences: bool = True) -> EncodedDataset:
    if not processed:
        raise DataError("build_dataset: no segments")
    length = processed[0].length
    n_sensors = len(registry)
    n = len(processed)
    if with_sequences:
        seq = np.zeros((n, length, feature_dim(n_sensors)), dtype=np.float32)
        mask = np.zeros((n, length), dtype=np.float32)
        for i, segment in enumerate(processed):
            tensor = build_sequence_tensor(segment, n_sensors, bins_per_day, length,
                                           no_time=no_time)
            seq[i] = tensor.data
            mask[i] = tensor.mask
    else:
        seq = np.zeros((n, length, feature_dim(n_sensors)), dtype=np.float32)
        mask = np.ones((n, length), dtype=np.float32)
    images = None
    if with_images:
        images = np.zeros((n, 3, 256, 512), dtype=np.float16)
        for i, segment in enumerate(processed):
            images[i] = render_composite(segment, registry, bins_per_day)
    labels = np.asarray([s.label for s in processed], dtype=np.int64)
    return EncodedDataset(seq=seq, mask=mask, images=images, labels=labels)


# ---------------------------------------------------------------------------
# optimizers


class _Adam:
    def __init__(self, params, lr):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class _SGDMomentum:
    def __init__(self, params, lr, momentum):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.v[i] = self.momentum * self.v[i] - self.lr * p.grad
            p.data = p.data + self.v[i]


def _make_optimizer(config: TrainConfig, params):
    if config.optimizer == "adam":
        return _Adam(params, config.learning_rate)
    return _SGDMomentum(params, config.learning_rate, config.momentum)


# ---------------------------------------------------------------------------
# training loop


def _forward(model: CareModel, dataset: EncodedDataset, idx, ccfg: ContrastiveConfig,
             with_loss=True):
    view = model.config.view
    labels = dataset.labels[idx]
    r_seq = r_img = None
    if view in ("both", "seq"):
        r_seq = model.seq_encode(dataset.seq[idx], dataset.mask[idx])
    if view in ("both", "img"):
        r_img = model.img_encode(dataset.images[idx].astype(np.float32))
    logits = model.classify(r_seq, r_img)
    if not with_loss:
        return logits, None, None
    ce = ce_loss(logits, labels)
    sica = None
    if view == "both" and ccfg.mode != "off" and ccfg.beta > 0:
        z_seq = model.project(r_seq, "seq")
        z_img = model.project(r_img, "img")
        sica = sica_loss(z_seq, z_img, labels, ccfg)
    return logits, ce, sica


def fit(model: CareModel, train_ds: EncodedDataset, valid_ds: EncodedDataset,
        tcfg: TrainConfig, ccfg: ContrastiveConfig, seed: int = 0):
    """Mini-batch training with early stopping on validation F1.

    Returns (best_state, log) where log has one row per epoch and
    best_state is the parameter snapshot with the highest validation F1
    (earliest epoch on ties).
    """
    optimizer = _make_optimizer(tcfg, model.parameters())
    n = len(train_ds)
    best_f1 = -1.0
    best_state = model.state_arrays()
    best_epoch = 0
    log = []
    bad_epochs = 0
    for epoch in range(1, tcfg.max_epochs + 1):
        rng = np.random.default_rng((seed, epoch))
        order = rng.permutation(n)
        ce_total, sica_total, batches = 0.0, 0.0, 0
        for start in range(0, n, tcfg.batch_size):
            idx = order[start : start + tcfg.batch_size]
            if idx.shape[0] < 2:
                continue  # contrastive loss and batch stats need >= 2 samples
            model.zero_grad()
            _, ce, sica = _forward(model, train_ds, idx, ccfg)
            loss = care_loss(sica, ce, ccfg.beta if sica is not None else 0.0)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} step {batches}: "
                    f"ce={ce.item():.4g} sica={'-' if sica is None else sica.item():.4g}")
            ad.backward(loss)
            optimizer.step()
            ce_total += ce.item()
            sica_total += sica.item() if sica is not None else 0.0
            batches += 1
        valid_report = evaluate(model, valid_ds, tcfg.batch_size, average=tcfg.average)
        log.append({"epoch": epoch,
                    "train_ce": ce_total / max(1, batches),
                    "train_sica": sica_total / max(1, batches),
                    "valid_f1": valid_report.f1,
                    "valid_acc": valid_report.accuracy})
        if valid_report.f1 > best_f1:
            best_f1 = valid_report.f1
            best_state = model.state_arrays()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= tcfg.patience:
                break
    model.load_state_arrays(best_state)
    return best_state, {"epochs": log, "best_epoch": best_epoch, "best_valid_f1": best_f1}


def evaluate(model: CareModel, dataset: EncodedDataset, batch_size: int = 64,
             average: str = "weighted") -> MetricsReport:
    if len(dataset) == 0:
        raise DataError("evaluate: empty data")
    preds = []
    batch_times = []
    with ad.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = np.arange(start, min(start + batch_size, len(dataset)))
            tic = time.perf_counter()
            logits, _, _ = _forward(model, dataset, idx, ContrastiveConfig(mode="off"),
                                    with_loss=False)
            batch_times.append(time.perf_counter() - tic)
            preds.append(logits.data.argmax(axis=1))
    report = compute_metrics(dataset.labels, np.concatenate(preds),
                             model.config.n_classes, average=average)
    report.time_per_batch_s = float(np.mean(batch_times))
    return report


# ---------------------------------------------------------------------------
# full pipeline on raw segments


def run_pipeline(segments, registry, prep_cfg: PreprocessConfig,
                 model_cfg: ModelConfig, ccfg: ContrastiveConfig, tcfg: TrainConfig,
                 seed: int = 0, no_time: bool = False):
    """Split, fit preprocessing stats on train, train one model, evaluate on test."""
    train_raw, test_raw = stratified_split(segments, tcfg.train_fraction, seed)
    temp_range = fit_normalization_stats(train_raw)
    prep = PreprocessConfig(
        bin_width_hours=prep_cfg.bin_width_hours,
        filter_threshold=prep_cfg.filter_threshold,
        fixed_length=prep_cfg.fixed_length,
        temperature_range=temp_range,
        cyclic_bins=prep_cfg.cyclic_bins,
        use_time_bins=prep_cfg.use_time_bins,
        registry_order=prep_cfg.registry_order,
    )
    if prep.fixed_length is None:
        filtered = train_raw
        if prep.filter_threshold is not None:
            filtered = [filter_events(s, prep.filter_threshold) for s in train_raw]
        length = resolve_auto_length(filtered)
    else:
        length = prep.fixed_length

    train_proc = process_segments(train_raw, registry, prep, length)
    test_proc = process_segments(test_raw, registry, prep, length)

    with_images = model_cfg.view in ("both", "img")
    with_sequences = model_cfg.view in ("both", "seq")
    bins = prep.bins_per_day
    train_all = build_dataset(train_proc, registry, bins, no_time=no_time,
                              with_images=with_images, with_sequences=with_sequences)
    test_ds = build_dataset(test_proc, registry, bins, no_time=no_time,
                            with_images=with_images, with_sequences=with_sequences)

    # carve a validation slice out of the training portion for early stopping
    fit_raw, valid_raw = stratified_split(train_proc, 1.0 - tcfg.valid_fraction,
                                          seed + 10_000)
    fit_ds = build_dataset(fit_raw, registry, bins, no_time=no_time,
                           with_images=with_images, with_sequences=with_sequences)
    valid_ds = build_dataset(valid_raw, registry, bins, no_time=no_time,
                             with_images=with_images, with_sequences=with_sequences)

    cfg = ModelConfig(**{**model_cfg.__dict__, "input_dim": train_all.seq.shape[2],
                         "seed": seed})
    model = CareModel(cfg)
    _, train_log = fit(model, fit_ds, valid_ds, tcfg, ccfg, seed=seed)
    report = evaluate(model, test_ds, tcfg.batch_size, average=tcfg.average)
    train_report = evaluate(model, train_all, tcfg.batch_size, average=tcfg.average)
    report.extras.update({
        "seed": seed,
        "train_accuracy": train_report.accuracy,
        "best_epoch": train_log["best_epoch"],
        "fixed_length": length,
        "temperature_range": temp_range,
    })
    return model, report, train_log


def sweep(segments, registry, prep_cfg: PreprocessConfig, model_cfg: ModelConfig,
          tcfg: TrainConfig, grid: dict, seed: int = 0):
    """Grid sweep over bin width / filter threshold / mode / beta.

    grid values: bin_hours (floats or the string "no_time"), theta (floats
    or None), mode, beta. Returns one flat report row per grid cell in
    deterministic order.
    """
    bin_values = grid.get("bin_hours", [prep_cfg.bin_width_hours])
    theta_values = grid.get("theta", [prep_cfg.filter_threshold])
    mode_values = grid.get("mode", ["cross_view"])
    beta_values = grid.get("beta", [0.5])
    rows = []
    for bin_value in bin_values:
        for theta in theta_values:
            for mode in mode_values:
                for beta in beta_values:
                    no_time = bin_value == "no_time"
                    prep = PreprocessConfig(
                        bin_width_hours=prep_cfg.bin_width_hours if no_time else float(bin_value),
                        filter_threshold=theta,
                        fixed_length=prep_cfg.fixed_length,
                        cyclic_bins=prep_cfg.cyclic_bins,
                    )
                    view = {"uni-seq": "seq", "uni-img": "img"}.get(mode, "both")
                    ccfg_mode = mode if mode in ("cross_view", "within_view") else "off"
                    mcfg = ModelConfig(**{**model_cfg.__dict__, "view": view})
                    ccfg = ContrastiveConfig(mode=ccfg_mode,
                                             beta=beta if ccfg_mode != "off" else 0.0)
                    _, report, _ = run_pipeline(segments, registry, prep, mcfg, ccfg,
                                                tcfg, seed=seed, no_time=no_time)
                    row = {"bin_hours": bin_value, "theta": "off" if theta is None else theta,
                           "mode": mode, "beta": ccfg.beta}
                    row.update(report.flat())
                    rows.append(row)
    return rows
