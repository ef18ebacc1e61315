"""Training recipe: weighted MSE on smoothed predictions, layer-wise
adaptive optimizer with a constant-then-cosine schedule, unit-dropout
augmentation, single/multi-session loops, transfer, and R-squared
evaluation with convergence analysis.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import engine
from .engine import Tensor
from .data import Segment, unit_dropout
from .model import SpikachuModel

EVAL_BATCH = 128


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class Hyperparams:
    lr0: float = 2e-3
    weight_decay: float = 1e-4
    epochs: int = 1000
    batch_size: int = 128
    reach_weight: float = 5.0
    smooth_window: int = 20
    keep_prob: float = 0.9
    seed: int = 42
    causal_smoothing: bool = False
    # graph slices per optimizer step (gradient accumulation); the loss
    # and update are exactly those of the full batch
    micro_batch: int = 32
    # optional stopping aids; None preserves the fixed-epoch protocol
    early_stop_r2: float | None = None
    max_seconds: float | None = None

    def __post_init__(self):
        if self.smooth_window < 1:
            raise ValueError("smooth_window must be >= 1")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr0 < 0 or self.weight_decay < 0:
            raise ValueError("lr0 and weight_decay must be non-negative")
        if not 0.0 <= self.keep_prob <= 1.0:
            raise ValueError("keep_prob must lie in [0, 1]")

    @classmethod
    def multisession(cls, **overrides):
        base = {"epochs": 400, "batch_size": 512}
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_r2: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1

    def append(self, epoch, loss, r2, lr):
        self.epochs.append(epoch)
        self.train_loss.append(loss)
        self.val_r2.append(r2)
        self.lr.append(lr)

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "train_loss", "val_r2", "lr"])
            for row in zip(self.epochs, self.train_loss, self.val_r2, self.lr):
                w.writerow([row[0], repr(float(row[1])), repr(float(row[2])),
                            repr(float(row[3]))])
        return path

    @classmethod
    def from_csv(cls, path):
        h = cls()
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        for ep, loss, r2, lr in rows[1:]:
            h.append(int(ep), float(loss), float(r2), float(lr))
        return h


# -- smoothing ---------------------------------------------------------------


def smoothing_matrix(length: int, window: int, causal: bool = False) -> np.ndarray:
    """Row-normalized moving-average operator with shrinking edge windows."""
    if window < 1:
        raise ValueError("window must be >= 1")
    m = np.zeros((length, length), dtype=np.float32)
    for t in range(length):
        if causal:
            lo, hi = t - window + 1, t
        else:
            lo = t - (window - 1) // 2 - (1 if window % 2 == 0 else 0)
            hi = t + (window - 1) // 2
        lo, hi = max(lo, 0), min(hi, length - 1)
        m[t, lo:hi + 1] = 1.0 / (hi - lo + 1)
    return m


_SMOOTH_CACHE: dict = {}


def _cached_matrix(length, window, causal):
    key = (length, window, causal)
    if key not in _SMOOTH_CACHE:
        _SMOOTH_CACHE[key] = smoothing_matrix(length, window, causal)
    return _SMOOTH_CACHE[key]


def smooth(pred, window: int = 20, causal: bool = False):
    """Moving average along the time axis of [..., T, D] predictions.

    Centered by default (shrinking at the edges); the trailing variant is
    for online-style evaluation.  Accepts either a graph tensor or a
    plain array and returns the same kind.
    """
    if window == 1:
        return pred
    if isinstance(pred, Tensor):
        mat = Tensor(_cached_matrix(pred.shape[-2], window, causal)
                     .astype(pred.data.dtype))
        return engine.matmul(mat, pred)
    pred = np.asarray(pred)
    return np.matmul(_cached_matrix(pred.shape[-2], window, causal)
                     .astype(pred.dtype), pred)


# -- objective / metrics -------------------------------------------------------


def weighted_mse(pred, target, weights, normalizer=None):
    """Sum_t w_t * |pred_t - target_t|^2 / sum_t w_t (graph-recorded).

    ``weights`` has one entry per timepoint ([..., T]); the squared error
    sums over output dimensions.  ``normalizer`` overrides the weight
    total, which lets gradient-accumulation slices reproduce the exact
    full-batch loss.
    """
    target = np.asarray(target, dtype=pred.data.dtype)
    weights = np.asarray(weights, dtype=pred.data.dtype)
    if pred.shape != target.shape or weights.shape != pred.shape[:-1]:
        raise engine.ShapeError(
            f"weighted_mse shapes: pred {pred.shape}, target {target.shape}, "
            f"weights {weights.shape}")
    diff = pred - Tensor(target)
    sq = diff * diff
    wsum = float(weights.sum()) if normalizer is None else float(normalizer)
    if wsum <= 0:
        raise ValueError("weights must have positive total mass")
    return (sq * Tensor(weights[..., None])).sum() * (1.0 / wsum)


def reach_weights(mask: np.ndarray, task: str, reach_weight: float) -> np.ndarray:
    """Per-timepoint loss weights: reach bins upweighted for CO only."""
    if task == "CO":
        return np.where(mask, reach_weight, 1.0).astype(np.float32)
    return np.ones_like(mask, dtype=np.float32)


def r_squared(pred: np.ndarray, target: np.ndarray,
              eval_mask: np.ndarray | None = None):
    """Variance-weighted multivariate R^2 over masked timepoints.

    Flattens all leading axes; ``eval_mask`` selects timepoints.  Returns
    (pooled, per_dim) coefficients.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, pred.shape[-1])
    target = np.asarray(target, dtype=np.float64).reshape(-1, target.shape[-1])
    if eval_mask is not None:
        sel = np.asarray(eval_mask, dtype=bool).reshape(-1)
        pred, target = pred[sel], target[sel]
    if len(target) < 2:
        raise ValueError("need at least 2 evaluation timepoints")
    mean = target.mean(axis=0)
    ss_res = ((pred - target) ** 2).sum(axis=0)
    ss_tot = ((target - mean) ** 2).sum(axis=0)
    if np.any(ss_tot <= 0):
        raise ValueError("target has zero variance on an output dimension")
    pooled = 1.0 - ss_res.sum() / ss_tot.sum()
    per_dim = 1.0 - ss_res / ss_tot
    return float(pooled), [float(x) for x in per_dim]


def convergence_epoch(history, frac: float = 0.9) -> int:
    """First epoch whose validation R^2 reaches ``frac`` of the maximum."""
    vals = history.val_r2 if isinstance(history, TrainHistory) else list(history)
    if not vals:
        raise ValueError("empty history")
    target = frac * max(vals)
    for i, v in enumerate(vals):
        if v >= target:
            return i
    return len(vals) - 1


# -- optimizer -----------------------------------------------------------------


def lr_schedule(epoch: int, total_epochs: int, lr0: float) -> float:
    """Constant for the first 75% of epochs, cosine to zero afterwards."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    knee = 0.75 * total_epochs
    if epoch < knee:
        return lr0
    frac = (epoch - knee) / (0.25 * total_epochs)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * frac))


class Lamb:
    """Layer-wise adaptive moments: adam-style update rescaled per tensor
    by the trust ratio |theta| / |update|, clamped to [0, 10]."""

    def __init__(self, named_params, lr=2e-3, weight_decay=1e-4,
                 betas=(0.9, 0.999), eps=1e-6, trust_clamp=10.0):
        self.params = [(n, p) for n, p in named_params]
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.trust_clamp = trust_clamp
        self.state = {n: (np.zeros_like(p.data), np.zeros_like(p.data))
                      for n, p in self.params}
        self.t = 0

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for {name}")
            m, v = self.state[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            w_norm = float(np.linalg.norm(p.data))
            u_norm = float(np.linalg.norm(update))
            if w_norm == 0.0 or u_norm == 0.0:
                trust = 1.0
            else:
                trust = min(w_norm / u_norm, self.trust_clamp)
            p.data = p.data - (lr * trust) * update


# -- batching helpers --------------------------------------------------------------


def _segment_arrays(segments):
    counts = np.stack([s.effective_counts() for s in segments])
    targets = np.stack([s.targets for s in segments])
    masks = np.stack([s.reach_mask for s in segments])
    return counts, targets, masks


def _session_groups(segments):
    """Stack contiguous same-session runs into forward groups."""
    groups = []
    i = 0
    while i < len(segments):
        j = i
        sid = segments[i].session_id
        while j < len(segments) and segments[j].session_id == sid:
            j += 1
        counts = np.stack([s.effective_counts() for s in segments[i:j]])
        groups.append((sid, counts))
        i = j
    return groups


def _grouped_batch(segments, task, reach_weight):
    """Order a mixed-session batch by session and build forward groups."""
    order = sorted(range(len(segments)),
                   key=lambda i: (segments[i].session_id, i))
    segs = [segments[i] for i in order]
    groups = _session_groups(segs)
    targets = np.stack([s.targets for s in segs])
    masks = np.stack([s.reach_mask for s in segs])
    weights = reach_weights(masks, task, reach_weight)
    return groups, targets, weights


def _optimizer_batch(model, batch, task_of, hp: Hyperparams):
    """One accumulated forward/backward over a batch; returns the loss.

    Segments are sorted by session, sliced into micro-batches, and each
    slice's weighted error is normalized by the whole batch's weight mass
    so the accumulated gradient equals the full-batch gradient exactly.
    """
    order = sorted(range(len(batch)), key=lambda i: (batch[i].session_id, i))
    segs = [batch[i] for i in order]
    weights = np.stack([
        reach_weights(s.reach_mask, task_of(s.session_id), hp.reach_weight)
        for s in segs])
    total_w = float(weights.sum())
    total_loss = 0.0
    step = max(hp.micro_batch, 1)
    for lo in range(0, len(segs), step):
        chunk = segs[lo:lo + step]
        groups = _session_groups(chunk)
        targets = np.stack([s.targets for s in chunk])
        pred = model.forward_segment_batch(groups, training=True)
        pred = smooth(pred, hp.smooth_window, hp.causal_smoothing)
        loss = weighted_mse(pred, targets, weights[lo:lo + step],
                            normalizer=total_w)
        total_loss += loss.item()
        loss.backward()
    return total_loss


def predict_segments(model: SpikachuModel, segments, batch_size=EVAL_BATCH):
    """Eval-mode forward over segments; returns [N, 100, 2] predictions."""
    preds = []
    with engine.no_grad():
        for i in range(0, len(segments), batch_size):
            chunk = segments[i:i + batch_size]
            groups, _, _ = _grouped_batch(chunk, task="RT", reach_weight=1.0)
            out = model.forward_segment_batch(groups, training=False)
            # undo the session-sorted order
            order = sorted(range(len(chunk)),
                           key=lambda k: (chunk[k].session_id, k))
            inv = np.argsort(order)
            preds.append(out.data[inv])
    return np.concatenate(preds, axis=0)


def evaluate_segments(model: SpikachuModel, segments, task: str,
                      smooth_window: int = 20, causal: bool = False,
                      batch_size=EVAL_BATCH):
    """Smoothed, mask-aware R^2 over a segment list."""
    preds = predict_segments(model, segments, batch_size)
    preds = smooth(preds, smooth_window, causal)
    targets = np.stack([s.targets for s in segments])
    masks = np.stack([s.reach_mask for s in segments])
    eval_mask = masks if task == "CO" else np.ones_like(masks, dtype=bool)
    pooled, per_dim = r_squared(preds, targets, eval_mask)
    return {"r2": pooled, "per_dim_r2": per_dim,
            "n_eval_points": int(eval_mask.sum()),
            "smoothing": "causal" if causal else "centered"}


# -- training loops ------------------------------------------------------------------


def _snapshot(model):
    return ([p.data.copy() for _, p in model.parameters()],
            [b.copy() for _, b in model.named_buffers()],
            [(bn.state.running_mean.copy(), bn.state.running_var.copy())
             for bn in model.bn_layers()])


def _restore(model, snap):
    params, bufs, bns = snap
    for (_, p), arr in zip(model.parameters(), params):
        p.data = arr.copy()
    for (_, b), arr in zip(model.named_buffers(), bufs):
        b[...] = arr
    for bn, (rm, rv) in zip(model.bn_layers(), bns):
        bn.state.running_mean = rm.copy()
        bn.state.running_var = rv.copy()


def fit_output_transform(model, segments):
    """Point the readout at the train-split target statistics."""
    targets = np.concatenate([s.targets for s in segments], axis=0)
    std = targets.std(axis=0)
    std[std < 1e-6] = 1.0
    model.output_scale = std.astype(np.float32)
    model.output_shift = targets.mean(axis=0).astype(np.float32)


def train_session(model: SpikachuModel, splits, hp: Hyperparams,
                  task: str = "CO", log=None):
    """Mini-batch training on one session's chronological splits.

    ``splits`` is (train, val, test) segment lists.  Per batch:
    unit dropout -> segment forward -> centered smoothing -> weighted MSE
    -> backward -> optimizer step at the scheduled rate.  Validation
    R^2 is tracked every epoch and the best-validation parameters are
    restored at the end.
    """
    train_segs, val_segs, _ = splits
    if not train_segs or not val_segs:
        raise ValueError("empty training or validation split")
    rng = np.random.default_rng(hp.seed)
    if np.all(model.output_scale == 1.0) and np.all(model.output_shift == 0.0):
        fit_output_transform(model, train_segs)
    opt = Lamb(list(model.parameters()), lr=hp.lr0,
               weight_decay=hp.weight_decay)
    history = TrainHistory()
    best = (-np.inf, None)
    t_start = time.time()
    n = len(train_segs)
    for epoch in range(hp.epochs):
        lr = lr_schedule(epoch, hp.epochs, hp.lr0)
        perm = rng.permutation(n)
        total_loss = 0.0
        for lo in range(0, n, hp.batch_size):
            idx = perm[lo:lo + hp.batch_size]
            batch = [unit_dropout(train_segs[i], rng, hp.keep_prob)
                     for i in idx]
            opt.zero_grad()
            lval = _optimizer_batch(model, batch, lambda sid: task, hp)
            if not math.isfinite(lval):
                raise TrainingDiverged(
                    f"loss diverged at epoch {epoch}", history)
            opt.step(lr)
            total_loss += lval * len(idx)
        val = evaluate_segments(model, val_segs, task, hp.smooth_window,
                                hp.causal_smoothing)
        history.append(epoch, total_loss / n, val["r2"], lr)
        if val["r2"] > best[0]:
            best = (val["r2"], _snapshot(model))
            history.best_epoch = epoch
        if log:
            log(f"epoch {epoch}: loss {total_loss / n:.5f} "
                f"val_r2 {val['r2']:.4f} lr {lr:.2e}")
        if hp.early_stop_r2 is not None and val["r2"] >= hp.early_stop_r2:
            break
        if hp.max_seconds is not None and time.time() - t_start > hp.max_seconds:
            break
    if best[1] is not None:
        _restore(model, best[1])
    return model, history


def pretrain_multisession(model: SpikachuModel, session_splits: dict,
                          hp: Hyperparams, log=None):
    """Train on segments pooled uniformly across several sessions.

    ``session_splits`` maps session_id -> (task, (train, val, test)).
    The architecture is exactly the single-session one; only embedding
    rows differ per session.  Validation R^2 is pooled across sessions.
    """
    if len(session_splits) < 2:
        raise ValueError("multi-session pretraining needs >= 2 sessions")
    registered = set(model.sessions())
    missing = [sid for sid in session_splits if sid not in registered]
    if missing:
        raise ValueError(f"sessions with unregistered units: {missing}")
    rng = np.random.default_rng(hp.seed)
    train_pool = []
    task_by_session = {}
    all_train = []
    for sid, (task, (tr, va, te)) in session_splits.items():
        task_by_session[sid] = task
        train_pool.extend(tr)
        all_train.extend(tr)
    if np.all(model.output_scale == 1.0) and np.all(model.output_shift == 0.0):
        fit_output_transform(model, all_train)
    opt = Lamb(list(model.parameters()), lr=hp.lr0,
               weight_decay=hp.weight_decay)
    history = TrainHistory()
    best = (-np.inf, None)
    t_start = time.time()
    n = len(train_pool)
    for epoch in range(hp.epochs):
        lr = lr_schedule(epoch, hp.epochs, hp.lr0)
        perm = rng.permutation(n)
        total_loss = 0.0
        for lo in range(0, n, hp.batch_size):
            idx = perm[lo:lo + hp.batch_size]
            batch = [unit_dropout(train_pool[i], rng, hp.keep_prob)
                     for i in idx]
            opt.zero_grad()
            # weights follow each segment's own task kind
            lval = _optimizer_batch(model, batch,
                                    lambda sid: task_by_session[sid], hp)
            if not math.isfinite(lval):
                raise TrainingDiverged(f"loss diverged at epoch {epoch}",
                                       history)
            opt.step(lr)
            total_loss += lval * len(idx)
        # pooled validation across sessions
        preds, tgts, masks = [], [], []
        for sid, (task, (tr, va, te)) in session_splits.items():
            p = predict_segments(model, va)
            p = smooth(p, hp.smooth_window, hp.causal_smoothing)
            m = np.stack([s.reach_mask for s in va]) if task == "CO" else \
                np.ones((len(va), p.shape[1]), dtype=bool)
            preds.append(p.reshape(-1, p.shape[-1]))
            tgts.append(np.stack([s.targets for s in va]).reshape(-1, 2))
            masks.append(m.reshape(-1))
        pooled, _ = r_squared(np.concatenate(preds), np.concatenate(tgts),
                              np.concatenate(masks))
        history.append(epoch, total_loss / n, pooled, lr)
        if pooled > best[0]:
            best = (pooled, _snapshot(model))
            history.best_epoch = epoch
        if log:
            log(f"epoch {epoch}: loss {total_loss / n:.5f} "
                f"val_r2 {pooled:.4f} lr {lr:.2e}")
        if hp.early_stop_r2 is not None and pooled >= hp.early_stop_r2:
            break
        if hp.max_seconds is not None and time.time() - t_start > hp.max_seconds:
            break
    if best[1] is not None:
        _restore(model, best[1])
    return model, history


def finetune(model: SpikachuModel, new_session_id, unit_ids, splits,
             hp: Hyperparams, task: str = "CO", log=None):
    """Continue training pretrained weights on one (possibly new) session.

    Fresh embedding rows are created for unseen sessions; every learnable
    parameter is updated by the same loop as scratch training.
    """
    if new_session_id not in model.sessions():
        model.register_session(new_session_id, unit_ids)
    return train_session(model, splits, hp, task=task, log=log)


def profile_probes(model: SpikachuModel, segments, batch_size=EVAL_BATCH):
    """Mean spike fractions and token count over an evaluation pass."""
    totals = {}
    token_sum = 0.0
    token_bins = 0
    with engine.no_grad():
        for i in range(0, len(segments), batch_size):
            chunk = segments[i:i + batch_size]
            groups, _, _ = _grouped_batch(chunk, task="RT", reach_weight=1.0)
            model.clear_token_probe()
            model.forward_segment_batch(groups, training=False)
            for layer_name, sn in _named_lif_layers(model):
                spikes, total = sn.probe.spike_count, sn.probe.total_count
                agg = totals.setdefault(layer_name, [0, 0])
                agg[0] += spikes
                agg[1] += total
            token_sum += model._token_sum
            token_bins += model._token_bins
    probes = {name: (agg[0] / agg[1] if agg[1] else 0.0)
              for name, agg in totals.items()}
    probes["tokens_per_bin"] = token_sum / token_bins if token_bins else 0.0
    return probes


def _named_lif_layers(model: SpikachuModel):
    named = []
    for s, ffn in enumerate(model.msnn1):
        for l, sn in enumerate(ffn.lif_layers()):
            named.append((f"msnn1.s{s}.l{l}", sn))
    if model.ssa is not None and not model.config.ann_mode:
        named.append(("ssa.attn", model.ssa.sn_attn))
        named.append(("ssa.ffn0", model.ssa.ffn.lif_layers()[0]))
        named.append(("ssa.ffn1", model.ssa.ffn.lif_layers()[1]))
    from .snn import SpikingFfnLayer
    if isinstance(model.smlp, SpikingFfnLayer):
        named.append(("smlp", model.smlp.sn))
    for s, ffn in enumerate(model.msnn2):
        for l, sn in enumerate(ffn.lif_layers()):
            named.append((f"msnn2.s{s}.l{l}", sn))
    return named
