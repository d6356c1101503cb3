"""Federated protocol simulation: the two-site adversarial exchange, the
multi-site round with noisy uploads and averaging, the cross-round
contrastive module, and per-site objective assembly.

Each round the central labeled site computes its objective and gradient once,
broadcasts parameters plus that gradient map, every local site trains one
step on the combined gradient, adds Gaussian noise, and uploads; the server
averages the uploads. Messages travel as serialized bytes so byte counts and
the privacy scan are meaningful.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import rng
from . import tensor as tt
from .data import SiteDataset
from .disentangle import marginal_permutation, mi_loss, mine_estimate
from .fusion import (adversarial_ramp, classify_loss, domain_loss, domain_probs,
                     total_loss)
from .network import (Batch, make_batch, model_forward, param_groups, init_theta)
from .optim import Adam, LrProfile, ParamStore, adam_step, is_running_stat, lr_at
from .tensor import Tensor, backward
from . import wire

logger = logging.getLogger(__name__)

ROLE_SOURCE = "source"
ROLE_TARGET_LABELED = "target_labeled"
ROLE_TARGET_UNLABELED = "target_unlabeled"


class TrainingDiverged(RuntimeError):
    def __init__(self, round_idx: int, site_id: str, part: str):
        self.round_idx = round_idx
        self.site_id = site_id
        super().__init__(f"non-finite {part} loss at round {round_idx}, site {site_id}")


@dataclass
class NoiseSpec:
    """Parameter-noise level: per tensor the noise std is alpha times that
    tensor's own empirical standard deviation."""

    alpha: float = 0.01
    key: tuple = ()

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"noise level must be >= 0, got {self.alpha}")


def add_noise(theta: ParamStore, spec: NoiseSpec, *extra_key) -> ParamStore:
    """Independent Gaussian noise per weight tensor; alpha=0 returns an
    identical copy, and constant tensors (zero spread) pass through unchanged.

    Normalization running statistics are exempt: they are data-derived
    buffers, not weights, and additive noise sized by the tensor-wide spread
    drives small variance entries negative, corrupting every evaluation pass.
    """
    out = theta.copy()
    if spec.alpha == 0.0:
        return out
    for name, t in out.items():
        if is_running_stat(name):
            continue
        sigma = float(t.data.std())
        if sigma == 0.0:
            continue
        noise = rng.stream(*spec.key, *extra_key, name).normal(0.0, spec.alpha * sigma, t.shape)
        t.data[...] = t.data + noise
    return out


def aggregate(uploads: list[ParamStore]) -> ParamStore:
    """Unweighted elementwise mean of parameter sets (running statistics
    included). Identical uploads are a fixed point, exactly."""
    if not uploads:
        raise ValueError("aggregate: no uploads")
    names = uploads[0].names()
    for i, up in enumerate(uploads[1:], start=1):
        if up.names() != names:
            extra = set(up.names()) ^ set(names)
            raise ValueError(f"aggregate: upload {i} name set differs on {sorted(extra)[:3]}")
        for name in names:
            if up[name].shape != uploads[0][name].shape:
                raise ValueError(f"aggregate: shape mismatch for {name!r}")
    out = ParamStore()
    k = len(uploads)
    for name in names:
        base = uploads[0][name].data
        if k == 1:
            out.add(name, base.copy())
        else:
            delta = np.zeros_like(base)
            for up in uploads[1:]:
                delta += up[name].data - base
            out.add(name, base + delta / k)
    return out


# ---------------------------------------------------------------------------
# contrastive module


def contrastive_loss(anchor: Tensor, positive: np.ndarray,
                     negatives: list, tau: float = 0.5) -> Tensor:
    """Cross-round contrastive objective on the invariant component.

    `anchor` is the live (batch, d) feature under the local parameters,
    `positive` the same samples under the previous global parameters, and
    `negatives[i]` the list of queued past snapshots for sample i. Samples
    with an empty queue contribute exactly zero.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    n = anchor.shape[0]
    if n == 0:
        return Tensor(0.0)
    counts = [len(negs) for negs in negatives]
    terms = []
    for j in sorted(set(counts)):
        idx = [i for i, c in enumerate(counts) if c == j]
        a = tt.take_rows(anchor, idx)
        sims = [tt.cosine_similarity(a, Tensor(positive[idx]))]
        for m in range(j):
            neg_m = Tensor(np.stack([negatives[i][m] for i in idx]))
            sims.append(tt.cosine_similarity(a, neg_m))
        g = len(idx)
        mat = tt.scale(tt.concat([tt.reshape(s, (g, 1)) for s in sims], axis=1), 1.0 / tau)
        peak = tt.amax(mat, axis=1)
        lse = tt.add(tt.log(tt.tsum(tt.exp(tt.sub(mat, tt.reshape(peak, (g, 1)))), axis=1)), peak)
        terms.append(tt.sub(lse, tt.scale(sims[0], 1.0 / tau)))
    return tt.mean(tt.concat(terms, axis=0)) if len(terms) > 1 else tt.mean(terms[0])


def update_queue(queue: dict, uids: list[str], snapshot: np.ndarray, capacity: int):
    """Push this round's per-sample features; the oldest beyond `capacity`
    fall off. capacity=0 keeps every queue empty."""
    if capacity < 0:
        raise ValueError("queue capacity must be >= 0")
    for i, uid in enumerate(uids):
        dq = queue.get(uid)
        if dq is None or dq.maxlen != capacity:
            dq = deque(dq or (), maxlen=capacity)
            queue[uid] = dq
        if capacity:
            dq.append(snapshot[i].copy())


# ---------------------------------------------------------------------------
# per-site state and objective


@dataclass
class TrainSettings:
    seed: int = 0
    rounds: int = 50
    lambda_mi: float = 1.0
    lambda_cl: float = 0.1
    gamma: float = 10.0
    tau: float = 0.5
    queue_len: int = 5
    alpha: float = 0.01
    lr: LrProfile = field(default_factory=lambda: LrProfile("decay", 0.01, 0.99))
    batch_denom: int = 16
    use_stfg: bool = True
    use_rd: bool = True
    use_dat: bool = True
    use_cl: bool = True
    reversal: bool = True  # gradient reversal separable from the loss weight
    broadcast_grads: bool = True  # off: sites treat the central loss as a constant
    mode: str = "dafed_u"  # "dafed_l" adds the classification term at labeled targets


@dataclass
class SiteState:
    site_id: str
    role: str
    dataset: SiteDataset
    adam_main: Adam
    adam_mine: Adam
    queue: dict = field(default_factory=dict)
    prev_global: ParamStore | None = None
    theta: ParamStore | None = None  # the central site owns the shared model


def build_states(datasets: list[SiteDataset], roles: dict[str, str],
                 theta: ParamStore) -> tuple[SiteState, list[SiteState]]:
    """One source state plus target states, with fresh optimizers sized for
    the given parameter set."""
    main_names, mine_names = param_groups(theta)
    source = None
    targets = []
    for ds in datasets:
        role = roles[ds.site_id]
        if len(ds.samples) < 2:
            raise ValueError(f"site {ds.site_id}: needs at least 2 samples")
        if role != ROLE_SOURCE and role not in (ROLE_TARGET_LABELED, ROLE_TARGET_UNLABELED):
            raise ValueError(f"site {ds.site_id}: unknown role {role!r}")
        if role in (ROLE_SOURCE, ROLE_TARGET_LABELED) and not ds.labeled:
            raise ValueError(f"site {ds.site_id}: role {role} needs labels")
        state = SiteState(site_id=ds.site_id, role=role, dataset=ds,
                          adam_main=Adam(names=main_names), adam_mine=Adam(names=mine_names))
        if role == ROLE_SOURCE:
            if source is not None:
                raise ValueError("exactly one source site per run")
            source = state
        else:
            targets.append(state)
    if source is None:
        raise ValueError("exactly one source site per run")
    return source, targets


def select_batch(state: SiteState, round_idx: int, settings: TrainSettings) -> Batch:
    """Deterministic per-(site, round) minibatch: size max(2, n // 16)."""
    samples = state.dataset.samples
    n = len(samples)
    size = min(n, max(2, n // settings.batch_denom))
    idx = rng.stream(settings.seed, "batch", state.site_id, round_idx).choice(n, size, replace=False)
    graphs = [samples[i] for i in idx]
    domain = 0 if state.role == ROLE_SOURCE else 1
    batch = make_batch(graphs, domain, use_graph=settings.use_stfg)
    hidden = getattr(state.dataset, "hidden_labels", None)
    batch.metric_labels = hidden[idx] if (batch.labels is None and hidden is not None) else batch.labels
    return batch


@dataclass
class SiteObjective:
    total: Tensor
    estimator_objective: Tensor | None  # minimized by the estimator optimizer
    parts: dict  # raw loss component values for metrics
    anchor: np.ndarray  # detached invariant features of this batch
    accuracy: float  # batch accuracy, nan when no labels are known
    sim_pos: float = float("nan")  # mean anchor/positive cosine, diagnostics only


def site_objective(theta: ParamStore, batch: Batch, *, role: str, ramp: float,
                   settings: TrainSettings, queue: dict | None,
                   prev_global: ParamStore | None, key: tuple,
                   train: bool = True) -> SiteObjective:
    """Forward one batch and assemble the weighted objective for its role."""
    fw = model_forward(theta, batch, train=train, drop_key=key)
    tensors = {}
    parts = {"cls": 0.0, "mi": 0.0, "cl": 0.0, "dom": 0.0}

    include_cls = role == ROLE_SOURCE or (role == ROLE_TARGET_LABELED and settings.mode == "dafed_l")
    if include_cls:
        if batch.labels is None:
            raise ValueError(f"role {role} needs labels for the classification term")
        tensors["cls"] = classify_loss(fw.class_probs, batch.labels)
        parts["cls"] = tensors["cls"].item()

    estimator_objective = None
    if settings.use_rd:
        perm = marginal_permutation(batch.size, rng.stream(*key, "marginal"))
        dv = mine_estimate(theta, fw.f_di, fw.f_ds, perm, train=train)
        tensors["mi"] = mi_loss(dv)
        parts["mi"] = tensors["mi"].item()
        dv_phi = mine_estimate(theta, fw.f_di.detach(), fw.f_ds.detach(), perm,
                               train=train, update_running=False)
        estimator_objective = tt.scale(dv_phi, -1.0)

    if settings.use_dat:
        mask = (rng.dropout_keep_masks((160,), 0.5, batch.uids, *key, "dom")
                if train else None)
        probs = domain_probs(theta, fw.f_di, train=train, drop_mask=mask,
                             reverse_scale=ramp if settings.reversal else None)
        tensors["dom"] = domain_loss(probs, batch.domains)
        parts["dom"] = tensors["dom"].item()

    sim_pos = float("nan")
    if settings.use_cl and queue is not None and prev_global is not None:
        with tt.no_grad():
            positive = model_forward(prev_global, batch, train=False).f_di.data
        negatives = [list(queue.get(uid, ())) for uid in batch.uids]
        tensors["cl"] = contrastive_loss(fw.f_di, positive, negatives, settings.tau)
        parts["cl"] = tensors["cl"].item()
        anchor = fw.f_di.data
        norms = np.linalg.norm(anchor, axis=1) * np.linalg.norm(positive, axis=1)
        ok = norms > 0
        sim_pos = float(((anchor * positive).sum(axis=1)[ok] / norms[ok]).mean()) if ok.any() else float("nan")

    total = total_loss(tensors, lambda_mi=settings.lambda_mi,
                       lambda_cl=settings.lambda_cl, ramp=ramp, role=role)

    labels_for_metric = batch.metric_labels if batch.metric_labels is not None else batch.labels
    if labels_for_metric is None:
        accuracy = float("nan")
    else:
        pred = np.argmax(fw.class_probs.data, axis=1)
        accuracy = float((pred == labels_for_metric).mean())
    return SiteObjective(total=total, estimator_objective=estimator_objective,
                         parts=parts, anchor=fw.f_di.data.copy(), accuracy=accuracy,
                         sim_pos=sim_pos)


def _check_finite(parts: dict, total: float, round_idx: int, site_id: str):
    if not np.isfinite(total):
        raise TrainingDiverged(round_idx, site_id, "total")
    for name, value in parts.items():
        if not np.isfinite(value):
            raise TrainingDiverged(round_idx, site_id, name)


def _split_grads(theta: ParamStore, obj: SiteObjective) -> dict[str, np.ndarray]:
    """One gradient map covering disjoint parameter groups: the main
    objective drives every non-estimator parameter, the estimator's own
    maximization objective drives its parameters."""
    main_names, mine_names = param_groups(theta)
    grads = backward(obj.total, theta)
    merged = {name: grads[name] for name in main_names}
    if obj.estimator_objective is not None:
        phi = backward(obj.estimator_objective, theta)
        merged.update({name: phi[name] for name in mine_names})
    return merged


def _metrics_row(round_idx, state, obj, ramp, lr, bytes_up, bytes_down):
    parts = obj.parts
    return {"round": round_idx, "site": state.site_id, "role": state.role,
            "L_C": parts["cls"], "L_MI": parts["mi"], "L_CL": parts["cl"],
            "L_DI": parts["dom"], "lambda_p": ramp, "lr": lr, "acc": obj.accuracy,
            "bytes_up": bytes_up, "bytes_down": bytes_down, "sim_pos": obj.sim_pos}


def _source_step(state: SiteState, theta: ParamStore, round_idx: int,
                 total_rounds: int, settings: TrainSettings):
    """Central-site forward: objective value and gradient map, no update."""
    batch = select_batch(state, round_idx, settings)
    ramp = adversarial_ramp(round_idx / total_rounds, settings.gamma)
    key = (settings.seed, "drop", state.site_id, round_idx)
    obj = site_objective(theta, batch, role=state.role, ramp=ramp, settings=settings,
                         queue=state.queue, prev_global=state.prev_global, key=key)
    total = obj.total.item()
    _check_finite(obj.parts, total, round_idx, state.site_id)
    grads = _split_grads(theta, obj)
    update_queue(state.queue, batch.uids, obj.anchor, settings.queue_len)
    state.prev_global = theta.copy()
    row = _metrics_row(round_idx, state, obj, ramp,
                       lr_at(settings.lr, round_idx, total_rounds), 0, 0)
    return total, grads, row


def _local_update(state: SiteState, theta: ParamStore, source_grads: dict,
                  round_idx: int, total_rounds: int, settings: TrainSettings):
    """One local training step on the combined (local + broadcast) gradient."""
    pristine = theta.copy()
    batch = select_batch(state, round_idx, settings)
    ramp = adversarial_ramp(round_idx / total_rounds, settings.gamma)
    key = (settings.seed, "drop", state.site_id, round_idx)
    obj = site_objective(theta, batch, role=state.role, ramp=ramp, settings=settings,
                         queue=state.queue, prev_global=state.prev_global, key=key)
    total = obj.total.item()
    _check_finite(obj.parts, total, round_idx, state.site_id)
    local = _split_grads(theta, obj)
    combined = {}
    for name, g in local.items():
        src = source_grads.get(name) if settings.broadcast_grads else None
        combined[name] = g if src is None else g + src
    lr = lr_at(settings.lr, round_idx, total_rounds)
    adam_step(theta, state.adam_main, combined, lr)
    if settings.use_rd:
        adam_step(theta, state.adam_mine, combined, lr)
    update_queue(state.queue, batch.uids, obj.anchor, settings.queue_len)
    state.prev_global = pristine
    row = _metrics_row(round_idx, state, obj, ramp, lr, 0, 0)
    return theta, row


def multi_site_round(theta_global: ParamStore, source: SiteState,
                     targets: list[SiteState], round_idx: int, total_rounds: int,
                     settings: TrainSettings, noise: NoiseSpec):
    """One federated iteration; returns the next global parameters and one
    metrics row per site."""
    if not targets:
        raise ValueError("multi_site_round: needs at least one local site")
    src_loss, src_grads, src_row = _source_step(source, theta_global, round_idx,
                                                total_rounds, settings)
    broadcast = wire.encode_message(wire.Message(
        round_idx=round_idx, kind=wire.KIND_BROADCAST,
        params=wire.store_to_arrays(theta_global), grads=src_grads,
        scalars={"loss_total_source": src_loss}))
    rows = [src_row]
    uploads = []
    upload_bytes_total = 0
    for state in targets:
        msg = wire.decode_message(broadcast)
        theta_k = wire.arrays_to_store(msg.params)
        theta_k, row = _local_update(state, theta_k, msg.grads, round_idx,
                                     total_rounds, settings)
        noised = add_noise(theta_k, noise, state.site_id, round_idx)
        upload = wire.encode_message(wire.Message(
            round_idx=round_idx, kind=wire.KIND_UPLOAD,
            params=wire.store_to_arrays(noised)))
        uploads.append(wire.arrays_to_store(wire.decode_message(upload).params))
        row["bytes_up"] = len(upload)
        row["bytes_down"] = len(broadcast)
        upload_bytes_total += len(upload)
        rows.append(row)
    src_row["bytes_up"] = len(broadcast)
    src_row["bytes_down"] = upload_bytes_total
    return aggregate(uploads), rows


def two_site_round(source: SiteState, target: SiteState, round_idx: int,
                   total_rounds: int, settings: TrainSettings):
    """The plain two-domain exchange: parameters and the source gradient go
    out, the updated parameters come back and replace the source's. No noise
    is injected on this path."""
    if source.theta is None:
        raise ValueError("two_site_round: source state must hold the model")
    new_theta, rows = multi_site_round(source.theta, source, [target], round_idx,
                                       total_rounds, settings, NoiseSpec(alpha=0.0))
    source.theta = new_theta
    return rows


# ---------------------------------------------------------------------------
# drivers


@dataclass
class TrainResult:
    theta: ParamStore
    metrics: list[dict]
    source: SiteState
    targets: list[SiteState]


def run_training(settings: TrainSettings, datasets: list[SiteDataset],
                 roles: dict[str, str], on_round=None) -> TrainResult:
    """Full multi-site run from a fresh model; `on_round(round, theta, states)`
    fires after every aggregation."""
    n_rois = datasets[0].samples[0].n_rois
    theta = init_theta(n_rois, settings.seed)
    source, targets = build_states(datasets, roles, theta)
    noise = NoiseSpec(alpha=settings.alpha, key=(settings.seed, "noise"))
    metrics = []
    for round_idx in range(settings.rounds):
        theta, rows = multi_site_round(theta, source, targets, round_idx,
                                       settings.rounds, settings, noise)
        metrics.extend(rows)
        if on_round is not None:
            on_round(round_idx, theta, (source, targets))
    return TrainResult(theta=theta, metrics=metrics, source=source, targets=targets)


def train_source_only(settings: TrainSettings, dataset: SiteDataset) -> ParamStore:
    """No-federation baseline: the same architecture trained with the
    classification loss alone on the source data, same budget and schedule."""
    n_rois = dataset.samples[0].n_rois
    theta = init_theta(n_rois, settings.seed)
    local = TrainSettings(seed=settings.seed, rounds=settings.rounds,
                          lr=settings.lr, batch_denom=settings.batch_denom,
                          use_stfg=settings.use_stfg, use_rd=False,
                          use_dat=False, use_cl=False)
    main_names, _ = param_groups(theta)
    opt = Adam(names=main_names)
    state = SiteState(site_id=dataset.site_id, role=ROLE_SOURCE, dataset=dataset,
                      adam_main=opt, adam_mine=Adam(names=()))
    for round_idx in range(local.rounds):
        batch = select_batch(state, round_idx, local)
        key = (local.seed, "drop", state.site_id, round_idx)
        obj = site_objective(theta, batch, role=ROLE_SOURCE, ramp=0.0, settings=local,
                             queue=None, prev_global=None, key=key)
        _check_finite(obj.parts, obj.total.item(), round_idx, state.site_id)
        grads = backward(obj.total, theta)
        adam_step(theta, opt, grads, lr_at(local.lr, round_idx, local.rounds))
    return theta


def dataset_predictions(theta: ParamStore, dataset: SiteDataset, indices=None, *,
                        use_graph: bool = True, chunk: int = 512):
    """(predicted classes, true labels) over the given sample indices in
    evaluation mode; labels fall back to the generator's held-back truth."""
    if indices is None:
        indices = range(len(dataset.samples))
    idx_list = list(indices)
    labels = []
    hidden = getattr(dataset, "hidden_labels", None)
    for i in idx_list:
        g = dataset.samples[i]
        if g.label is not None:
            labels.append(g.label)
        elif hidden is not None:
            labels.append(int(hidden[i]))
        else:
            raise ValueError(f"site {dataset.site_id}: no labels available for accuracy")
    preds = np.empty(len(idx_list), dtype=np.int64)
    for start in range(0, len(idx_list), chunk):
        part = idx_list[start:start + chunk]
        batch = make_batch([dataset.samples[i] for i in part], 1, use_graph=use_graph)
        with tt.no_grad():
            probs = model_forward(theta, batch, train=False).class_probs.data
        preds[start:start + len(part)] = np.argmax(probs, axis=1)
    return preds, np.asarray(labels)


def dataset_accuracy(theta: ParamStore, dataset: SiteDataset, *,
                     use_graph: bool = True, chunk: int = 512,
                     indices=None) -> float:
    """Window accuracy of the model on a dataset in evaluation mode."""
    preds, labels = dataset_predictions(theta, dataset, indices,
                                        use_graph=use_graph, chunk=chunk)
    return float((preds == labels).mean())
