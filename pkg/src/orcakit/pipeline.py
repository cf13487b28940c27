"""Three-stage workflow: task-specific architecture generation, embedder
alignment against cached source features, and fine-tuning; plus source
pretraining/caching and the train-fraction sweep."""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .bundles import Bundle, load_bundle, save_bundle
from .config import RUN_MODES, ExperimentConfig, StageConfig
from .distances import (
    LabeledDataset,
    kmeans_pseudolabels,
    mmd,
    otdd,
    otdd_grad,
    _otdd_solve,
    pairwise_sq_dists,
)
from .errors import ContractError, RunError
from .models import (
    BodySpec,
    HeadSpec,
    Model,
    ParameterSet,
    build_embedder,
    embedder_backward,
    embedder_forward,
    init_body,
    init_embedder_params,
    init_head,
    merge_params,
    trainable_mask,
    warm_init_layernorm,
)
from .tensor import make_rng


def worker_count() -> int:
    env = os.environ.get("ORCAKIT_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# schedules / optimizer / losses

def lr_at(cfg: StageConfig, epoch: int) -> float:
    """Learning rate for 1-based epoch `epoch`."""
    if cfg.schedule == "step":
        return cfg.lr * cfg.schedule_factor ** ((epoch - 1) // cfg.schedule_period)
    warm = cfg.warmup_epochs
    if epoch <= warm:
        return cfg.lr * epoch / warm
    if cfg.epochs <= warm:
        return cfg.lr
    return cfg.lr * (cfg.epochs - epoch) / (cfg.epochs - warm)


class Optimizer:
    """SGD or Adam (betas 0.9/0.999) with decoupled weight decay and
    optional global-norm gradient clipping; touches only trainable tensors."""

    def __init__(self, params: ParameterSet, cfg: StageConfig):
        self.params = params
        self.cfg = cfg
        self.state = {}
        self.t = 0

    def step(self, grads: dict, lr: float):
        cfg = self.cfg
        grads = {n: g for n, g in grads.items() if self.params.entry(n).trainable}
        if cfg.grad_clip > 0:
            total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                                for g in grads.values()))
            if total > cfg.grad_clip:
                scale = cfg.grad_clip / total
                grads = {n: g * scale for n, g in grads.items()}
        self.t += 1
        for n, g in grads.items():
            v = self.params[n].astype(np.float64)
            g = g.astype(np.float64)
            if cfg.weight_decay > 0:
                v = v - lr * cfg.weight_decay * v
            if cfg.optimizer == "sgd":
                v = v - lr * g
            else:
                m, s = self.state.get(n, (np.zeros_like(v), np.zeros_like(v)))
                m = 0.9 * m + 0.1 * g
                s = 0.999 * s + 0.001 * g * g
                self.state[n] = (m, s)
                mh = m / (1 - 0.9 ** self.t)
                sh = s / (1 - 0.999 ** self.t)
                v = v - lr * mh / (np.sqrt(sh) + 1e-8)
            self.params.set(n, v)


def softmax_ce(logits, labels, class_weights):
    """Weighted cross-entropy; returns (loss, grad wrt logits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = labels.shape[0]
    w = class_weights[labels]
    wsum = w.sum()
    ll = -np.log(np.maximum(p[np.arange(n), labels], 1e-30))
    loss = float(np.sum(w * ll) / wsum)
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    grad *= (w / wsum)[:, None]
    return loss, grad


def mse_loss(pred, target):
    diff = pred - target
    loss = float(np.mean(diff ** 2))
    return loss, 2.0 * diff / diff.size


def class_weight_vector(labels, classes):
    counts = np.bincount(labels, minlength=classes).astype(np.float64)
    counts[counts == 0] = 1.0
    return 1.0 / counts


# ---------------------------------------------------------------------------
# model construction per task

def body_spec_of(cfg: ExperimentConfig) -> BodySpec:
    m = cfg.model
    return BodySpec(layers=m.layers, heads=m.heads, embed_dim=m.embed_dim,
                    seq_len=m.seq_len)


def embedder_for_bundle(bundle: Bundle, cfg: ExperimentConfig, seed: int):
    m = cfg.model
    shape = bundle.features.shape[1:]
    if len(shape) == 3:
        # pick the patch size whose grid fills the body sequence
        return build_embedder(shape, m.embed_dim, m.seq_len,
                              body_patch=m.source_patch,
                              body_resolution=shape[1:], seed=seed)
    return build_embedder(shape, m.embed_dim, m.seq_len,
                          target_seq_len=m.target_seq_len, seed=seed)


def head_for_bundle(bundle: Bundle, emb_spec, cfg: ExperimentConfig) -> HeadSpec:
    if bundle.label_kind == "classification":
        return HeadSpec(mode="classification", classes=bundle.classes)
    k = emb_spec.k
    out_extents = () if (k == 1 and emb_spec.input_rank == 1) else bundle.labels.shape[2:]
    return HeadSpec(mode="dense", classes=bundle.labels.shape[1], k=k,
                    out_extents=tuple(out_extents))


# ---------------------------------------------------------------------------
# supervised training (pretraining and refinement share this loop)

def _batches(n, batch_size, rng):
    idx = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield idx[i : i + batch_size]


def evaluate(model: Model, bundle: Bundle, metric_name: str, batch_size=64) -> float:
    from .report import metric as eval_metric

    preds = []
    for i in range(0, bundle.n, batch_size):
        out, _ = model.forward(bundle.features[i : i + batch_size])
        preds.append(out)
    preds = np.concatenate(preds, axis=0)
    if metric_name == "auroc":
        z = preds - preds.max(axis=1, keepdims=True)
        p = np.exp(z)
        scores = (p / p.sum(axis=1, keepdims=True))[:, 1]
        return eval_metric("auroc", scores, bundle.labels).value
    return eval_metric(metric_name, preds, bundle.labels).value


def train_supervised(model: Model, train: Bundle, val: Bundle | None,
                     cfg: StageConfig, metric_name: str | None = None):
    metric_name = metric_name or cfg.metric
    classification = train.label_kind == "classification"
    weights = class_weight_vector(train.labels, train.classes) if classification else None
    opt = Optimizer(model.params, cfg)
    epochs_log = [{
        "epoch": 0,
        "train_loss": None,
        "metric": evaluate(model, val, metric_name) if val is not None else None,
        "lr": None,
    }]
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at(cfg, epoch)
        rng = make_rng(cfg.seed, "train_epoch", epoch)
        losses = []
        for idx in _batches(train.n, cfg.batch_size, rng):
            x = train.features[idx]
            out, tape = model.forward(x)
            if classification:
                loss, g = softmax_ce(out, train.labels[idx], weights)
            else:
                loss, g = mse_loss(out, train.labels[idx].astype(out.dtype))
            if not np.isfinite(loss):
                raise RunError(f"loss diverged at epoch {epoch}")
            grads = model.backward(tape, g)
            opt.step(grads, lr)
            losses.append(loss)
        epochs_log.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else None,
            "metric": evaluate(model, val, metric_name) if val is not None else None,
            "lr": lr,
        })
    return epochs_log


# ---------------------------------------------------------------------------
# stage 0: source pretraining and feature caching

def pretrain_source(source: Bundle, cfg: ExperimentConfig, out_dir=None):
    """Supervised training of embedder+body+head on the source task; returns
    (model, record) and optionally writes the checkpoint."""
    stage = cfg.pretrain
    emb_spec, emb_params = embedder_for_bundle(source, cfg, stage.seed)
    body_spec = body_spec_of(cfg)
    head_spec = head_for_bundle(source, emb_spec, cfg)
    model = Model(emb_spec, body_spec, head_spec,
                  merge_params(emb_params, init_body(body_spec, stage.seed),
                               init_head(head_spec, body_spec.embed_dim, stage.seed)))

    rng = make_rng(stage.seed, "pretrain_split")
    idx = rng.permutation(source.n)
    n_val = max(1, source.n // 5)
    val = source.subset(idx[:n_val])
    train = source.subset(idx[n_val:])

    t0 = time.perf_counter()
    epochs_log = train_supervised(model, train, val, stage, "zero_one_error")
    val_err = epochs_log[-1]["metric"]
    majority = np.bincount(val.labels, minlength=val.classes).max() / val.n
    flags = []
    if (1.0 - val_err) < majority + 0.20:
        flags.append("weak_source")
    record = {
        "config": cfg.to_dict(),
        "stage": "pretrain",
        "seeds": [stage.seed],
        "epochs": epochs_log,
        "final_metrics": {"val_zero_one_error": val_err,
                          "majority_rate": float(majority)},
        "flags": flags,
        "timing": {"wall_seconds": time.perf_counter() - t0},
    }
    if out_dir:
        model.params.save(out_dir, meta={
            "embedder_spec": emb_spec.to_dict(),
            "body_spec": body_spec.to_dict(),
            "head_spec": head_spec.to_dict(),
            "val_zero_one_error": val_err,
            "flags": flags,
        })
    return model, record


def cache_source(model: Model, source: Bundle, n: int = 5000, seed: int = 0,
                 out_path=None):
    """One pass of the source data through the source embedder, sequence-mean
    reduced; the cached set backs every later distance computation."""
    rng = make_rng(seed, "cache_source")
    flags = []
    if n > source.n:
        idx = np.sort(rng.choice(source.n, size=n, replace=True))
        flags.append("sampled_with_replacement")
    elif n < source.n:
        idx = np.sort(rng.choice(source.n, size=n, replace=False))
    else:
        idx = np.arange(source.n)
    feats = []
    for i in range(0, idx.size, 64):
        seq, _ = embedder_forward(model.emb_spec, model.params,
                                  source.features[idx[i : i + 64]])
        feats.append(seq.mean(axis=1))
    feats = np.concatenate(feats, axis=0).astype(np.float32)
    labels = source.labels[idx].astype(np.int32)
    cache = Bundle("source_cache", feats[:, None, :], labels,
                   "classification", source.classes)
    if out_path:
        save_bundle(cache, out_path)
    return cache, flags


def cache_dataset(cache: Bundle) -> LabeledDataset:
    return LabeledDataset(cache.features[:, 0, :], cache.labels.astype(np.int64))


# ---------------------------------------------------------------------------
# stage 2: embedder alignment

def _embed_all(emb_spec, emb_params, features, batch_size=64):
    out = []
    for i in range(0, features.shape[0], batch_size):
        seq, _ = embedder_forward(emb_spec, emb_params, features[i : i + batch_size])
        out.append(seq.mean(axis=1))
    return np.concatenate(out, axis=0)


def target_labels_for_alignment(target: Bundle, emb_spec, emb_params,
                                source_classes: int, seed: int) -> np.ndarray:
    """Dense tasks get k-means pseudo-labels (K = source class count) on the
    initially embedded, sequence-reduced target features."""
    if target.label_kind == "classification":
        return target.labels.astype(np.int64)
    feats = _embed_all(emb_spec, emb_params, target.features)
    return kmeans_pseudolabels(feats, source_classes, seed=seed)


def _mmd_grad(z, zs, bandwidth=None):
    pooled = np.vstack([z, zs])
    sq = pairwise_sq_dists(pooled, pooled)
    if bandwidth is None:
        med = float(np.median(np.sqrt(sq[np.triu_indices_from(sq, k=1)])))
        bandwidth = med if med > 0 else 1.0
    bsz, msz = z.shape[0], zs.shape[0]
    kzz = np.exp(-sq[:bsz, :bsz] / (2 * bandwidth ** 2))
    kzs = np.exp(-sq[:bsz, bsz:] / (2 * bandwidth ** 2))
    kss = np.exp(-sq[bsz:, bsz:] / (2 * bandwidth ** 2))
    m2 = kzz.mean() + kss.mean() - 2 * kzs.mean()
    val = float(np.sqrt(max(m2, 0.0)))
    # dK(x, y)/dx = K * (y - x) / sigma^2
    gz = (2.0 / bsz ** 2) * ((kzz @ z) - kzz.sum(axis=1)[:, None] * z) / bandwidth ** 2
    gz -= (2.0 / (bsz * msz)) * ((kzs @ zs) - kzs.sum(axis=1)[:, None] * z) / bandwidth ** 2
    if val > 1e-12:
        gz = gz / (2 * val)
    return val, gz


def _alignment_loss_grad(z, labels, src_ds: LabeledDataset, stage: StageConfig,
                         step_seed: int):
    """Distance value and gradient w.r.t. the reduced embeddings z."""
    metric = stage.distance_metric
    if metric in ("otdd", "otdd-sub"):
        tgt = LabeledDataset(z, labels)
        if metric == "otdd":
            return otdd_grad(tgt, src_ds, eps=stage.eps, seed=step_seed)[:2]
        total = 0.0
        grad = np.zeros_like(z)
        n = z.shape[0]
        b = stage.subsample_b
        for label in np.unique(labels):
            idx = np.flatnonzero(labels == label)
            w = idx.size / n
            b_eff = idx.size if b in (None, "full", 0) else min(int(b), idx.size)
            for r in range(stage.subsample_rounds):
                rng = make_rng(step_seed, "align_sub", int(label), r)
                sub = idx if b_eff == idx.size else np.sort(
                    rng.choice(idx, size=b_eff, replace=False))
                v, g, _ = otdd_grad(LabeledDataset(z[sub], labels[sub]), src_ds,
                                    eps=stage.eps, seed=step_seed)
                total += w * v / stage.subsample_rounds
                grad[sub] += (w / stage.subsample_rounds) * g
        return total, grad
    if metric == "otdd-gaussian":
        tgt = LabeledDataset(z, labels)
        plan, _, _, _, _ = _otdd_solve(tgt, src_ds, mode="gaussian", eps=stage.eps,
                                       seed=step_seed)
        value = float(np.sqrt(max(plan.value, 0.0)))
        pi = plan.matrix
        zs = src_ds.reduced()
        grad = 2.0 * (pi.sum(axis=1)[:, None] * z - pi @ zs)
        if value > 0:
            grad /= 2.0 * value
        return value, grad
    if metric == "mmd":
        return _mmd_grad(z, src_ds.reduced())
    if metric == "euclidean":
        zs = src_ds.reduced()
        k = min(z.shape[0], zs.shape[0])
        rng = make_rng(step_seed, "euclid_pairing")
        ia = rng.permutation(z.shape[0])[:k]
        ib = rng.permutation(zs.shape[0])[:k]
        diff = z[ia] - zs[ib]
        value = float(np.mean(np.sum(diff * diff, axis=1)))
        grad = np.zeros_like(z)
        grad[ia] = 2.0 * diff / k
        return value, grad
    raise ContractError(f"unknown distance metric {metric!r}")


def align_embedder(target: Bundle, cache: Bundle, emb_spec, emb_params: ParameterSet,
                   stage: StageConfig, align_labels: np.ndarray | None = None):
    """Stage 2: minimize the configured distance between embedded target
    batches and the cached source features. Only embedder tensors move.

    OTDD gradients use the envelope rule: plans are re-solved each step with
    the current embeddings, then frozen while the quadratic cost terms are
    backpropagated. The exact full-set OTDD is logged every epoch.
    """
    src_ds = cache_dataset(cache)
    if align_labels is None:
        align_labels = target_labels_for_alignment(
            target, emb_spec, emb_params, cache.classes, stage.seed)
    opt = Optimizer(emb_params, stage)
    t0 = time.perf_counter()

    def exact_distance():
        feats = _embed_all(emb_spec, emb_params, target.features)
        return otdd(LabeledDataset(feats, align_labels), src_ds,
                    eps=stage.eps, seed=stage.seed)

    rep0 = exact_distance()
    epochs_log = [{"epoch": 0, "distance": None, "distance_exact": rep0.value,
                   "lr": None}]
    step = 0
    for epoch in range(1, stage.epochs + 1):
        lr = lr_at(stage, epoch)
        rng = make_rng(stage.seed, "align_epoch", epoch)
        losses = []
        for idx in _batches(target.n, stage.batch_size, rng):
            step += 1
            x = target.features[idx]
            seq, tape = embedder_forward(emb_spec, emb_params, x)
            z = seq.mean(axis=1)
            value, gz = _alignment_loss_grad(z, align_labels[idx], src_ds,
                                             stage, step_seed=step)
            if not np.isfinite(value):
                raise RunError(
                    f"alignment distance NaN at epoch {epoch}, batch rows {idx[:8].tolist()}"
                )
            g_seq = np.repeat(gz[:, None, :], seq.shape[1], axis=1) / seq.shape[1]
            grads = embedder_backward(emb_spec, emb_params, tape, g_seq)
            opt.step(grads, lr)
            losses.append(value)
        rep = exact_distance()
        epochs_log.append({
            "epoch": epoch,
            "distance": float(np.mean(losses)) if losses else None,
            "distance_exact": rep.value,
            "lr": lr,
        })
    record = {
        "stage": "align",
        "seeds": [stage.seed],
        "epochs": epochs_log,
        "final_metrics": {
            "initial_otdd": epochs_log[0]["distance_exact"],
            "final_otdd": epochs_log[-1]["distance_exact"],
        },
        "timing": {"wall_seconds": time.perf_counter() - t0},
    }
    return emb_params, record


# ---------------------------------------------------------------------------
# stage 3: weight refinement

def assemble_refine_model(mode: str, cfg: ExperimentConfig, target: Bundle,
                          checkpoint: ParameterSet | None,
                          aligned_embedder: ParameterSet | None,
                          seed: int) -> Model:
    if mode not in RUN_MODES:
        raise ContractError(f"unknown run mode {mode!r}")
    body_spec = body_spec_of(cfg)
    emb_spec, fresh_emb = embedder_for_bundle(target, cfg, seed)
    head_spec = head_for_bundle(target, emb_spec, cfg)

    needs_ckpt = mode != "scratch"
    if needs_ckpt and checkpoint is None:
        raise ContractError(f"mode {mode} requires a pretrained checkpoint")
    if mode in ("orca", "orca_layernorm"):
        if aligned_embedder is None:
            raise ContractError(f"mode {mode} requires an aligned embedder")
        emb_params = aligned_embedder.copy()
    else:
        emb_params = fresh_emb

    if mode == "scratch":
        body_params = init_body(body_spec, seed)
    else:
        body_params = ParameterSet()
        for name in checkpoint.names():
            if name.startswith("body."):
                body_params.add(name, checkpoint[name].copy(), True, "pretrained")

    head_params = init_head(head_spec, body_spec.embed_dim, seed)
    params = merge_params(emb_params, body_params, head_params)

    if mode in ("orca_layernorm", "ft_layernorm"):
        trainable_mask(params, "layernorm_only")
    else:
        trainable_mask(params, "full")
    if mode == "ft_warm_init":
        warm_init_layernorm(params)
    return Model(emb_spec, body_spec, head_spec, params)


def refine(target: Bundle, val: Bundle | None, cfg: ExperimentConfig, mode: str,
           checkpoint: ParameterSet | None = None,
           aligned_embedder: ParameterSet | None = None,
           seed: int | None = None):
    stage = cfg.refine
    seed = stage.seed if seed is None else seed
    stage = StageConfig.from_dict({**stage.to_dict(), "seed": seed})
    model = assemble_refine_model(mode, cfg, target, checkpoint,
                                  aligned_embedder, seed)
    train = target
    if stage.train_fraction < 1.0:
        train = subsample_fraction(target, stage.train_fraction, seed)
    t0 = time.perf_counter()
    epochs_log = train_supervised(model, train, val, stage)
    record = {
        "stage": "refine",
        "mode": mode,
        "seeds": [seed],
        "epochs": epochs_log,
        "final_metrics": {stage.metric: epochs_log[-1]["metric"]}
        if val is not None else {},
        "timing": {"wall_seconds": time.perf_counter() - t0},
    }
    return model, record


def subsample_fraction(bundle: Bundle, fraction: float, seed: int) -> Bundle:
    """Seeded stratified subsample keeping at least one sample per class."""
    if not 0.0 < fraction <= 1.0:
        raise ContractError("fraction must be in (0, 1]")
    if fraction == 1.0:
        return bundle
    rng = make_rng(seed, "fraction")
    if bundle.label_kind == "classification":
        keep = []
        for c in np.unique(bundle.labels):
            idx = np.flatnonzero(bundle.labels == c)
            k = max(1, int(round(fraction * idx.size)))
            keep.append(np.sort(rng.choice(idx, size=k, replace=False)))
        keep = np.sort(np.concatenate(keep))
    else:
        k = max(1, int(round(fraction * bundle.n)))
        keep = np.sort(rng.choice(bundle.n, size=k, replace=False))
    return bundle.subset(keep)


# ---------------------------------------------------------------------------
# full runs and sweeps

def run_pipeline(cfg: ExperimentConfig, mode: str | None = None):
    """Stages 1-3 end to end; reuses checkpoint/cache files when present."""
    mode = mode or cfg.mode
    source = load_bundle(cfg.paths["source_bundle"])
    target = load_bundle(cfg.paths["target_bundle"])
    val = load_bundle(cfg.paths["val_bundle"]) if cfg.paths.get("val_bundle") else None

    ckpt_path = cfg.paths.get("checkpoint") or os.path.join(cfg.out_dir, "checkpoint")
    if os.path.exists(os.path.join(ckpt_path, "manifest.json")):
        checkpoint, _meta = ParameterSet.load(ckpt_path)
    else:
        model, _rec = pretrain_source(source, cfg, out_dir=ckpt_path)
        checkpoint = model.params

    cache_path = cfg.paths.get("cache") or os.path.join(cfg.out_dir, "cache")
    if os.path.exists(os.path.join(cache_path, "manifest.json")):
        cache = load_bundle(cache_path)
    else:
        src_model = _source_model(cfg, source, checkpoint)
        cache, _flags = cache_source(src_model, source, n=min(5000, source.n),
                                     seed=cfg.seed, out_path=cache_path)

    align_record = None
    aligned = None
    if mode in ("orca", "orca_layernorm"):
        emb_spec, emb_params = embedder_for_bundle(target, cfg, cfg.align.seed)
        aligned, align_record = align_embedder(target, cache, emb_spec,
                                               emb_params, cfg.align)

    model, refine_record = refine(target, val, cfg, mode, checkpoint=checkpoint,
                                  aligned_embedder=aligned)
    record = {
        "config": cfg.to_dict(),
        "mode": mode,
        "seeds": [cfg.seed, cfg.align.seed, cfg.refine.seed],
        "epochs": refine_record["epochs"],
        "align": align_record,
        "final_metrics": refine_record["final_metrics"],
        "timing": {"wall_seconds": (align_record or {}).get("timing", {}).get("wall_seconds", 0.0)
                   + refine_record["timing"]["wall_seconds"]},
    }
    return model, record


def _source_model(cfg: ExperimentConfig, source: Bundle, params: ParameterSet) -> Model:
    emb_spec, _ = embedder_for_bundle(source, cfg, cfg.pretrain.seed)
    body_spec = body_spec_of(cfg)
    head_spec = head_for_bundle(source, emb_spec, cfg)
    return Model(emb_spec, body_spec, head_spec, params)


def sweep_train_fraction(cfg: ExperimentConfig, fractions, modes, seeds,
                         target: Bundle, val: Bundle,
                         checkpoint: ParameterSet,
                         aligned_by_seed: dict | None = None):
    """Grid of (fraction, mode, seed) refinement runs; cells run on a thread
    pool capped by ORCAKIT_THREADS."""
    if not fractions:
        raise ContractError("empty fraction list")
    cells = [(f, m, s) for f in fractions for m in modes for s in seeds]

    def run_cell(cell):
        f, m, s = cell
        cell_cfg = ExperimentConfig.from_dict({
            **cfg.to_dict(),
            "refine": {**cfg.refine.to_dict(), "train_fraction": f, "seed": s},
        })
        aligned = (aligned_by_seed or {}).get(s)
        _model, rec = refine(target, val, cell_cfg, m, checkpoint=checkpoint,
                             aligned_embedder=aligned, seed=s)
        return {"fraction": f, "mode": m, "seed": s,
                "metric": rec["epochs"][-1]["metric"]}

    if worker_count() > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = [run_cell(c) for c in cells]
    return rows
