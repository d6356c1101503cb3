"""Command-line surface: synth, train, eval, explain, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import math
import sys
from collections import deque
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import explain as explain_mod
from . import fedsim, network, rng, wire
from . import tensor as tt
from .config import ConfigError, RunConfig, parse_config
from .data import IngestError, SynthConfig, SynthSite, synth_multisite, synth_series
from .fedsim import TrainingDiverged, site_objective
from .optim import grad_check

METRICS_HEADER = ["round", "site", "role", "L_C", "L_MI", "L_CL", "L_DI",
                  "lambda_p", "lr", "acc", "bytes_up", "bytes_down"]


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return ""
    return repr(value)


def _load_datasets(cfg: RunConfig) -> list[data_mod.SiteDataset]:
    if cfg.data == "synth":
        datasets = synth_multisite(cfg.synth_config(), cfg.seed)
    else:
        datasets = data_mod.ingest_csv(cfg.manifest_path(), cfg.window, cfg.stride, cfg.top_k)
    roles = cfg.roles()
    known = {ds.site_id for ds in datasets}
    missing = set(roles) - known
    if missing:
        raise ConfigError(f"config names sites absent from the data: {sorted(missing)}")
    extra = known - set(roles)
    if extra:
        raise ConfigError(f"data contains sites without a configured role: {sorted(extra)}")
    order = {spec.site_id: i for i, spec in enumerate(cfg.site_specs)}
    return sorted(datasets, key=lambda ds: order[ds.site_id])


def _site_digests(source, targets) -> dict[str, bytes]:
    out = {}
    for state in [source] + list(targets):
        h = hashlib.sha256()
        h.update(wire.optimizer_digest(state.adam_main))
        h.update(wire.optimizer_digest(state.adam_mine))
        out[state.site_id] = h.digest()
    return out


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    cfg = parse_config(args.config, _overrides(args))
    if cfg.data != "synth":
        raise ConfigError("synth command needs data = synth")
    out = Path(args.out)
    series_dir = out / "series"
    series_dir.mkdir(parents=True, exist_ok=True)
    series = synth_series(cfg.synth_config(), cfg.seed)
    rows = []
    for ts in series:
        rel = Path("series") / f"{ts.subject_id}.csv"
        with open(out / rel, "w", newline="") as fh:
            for row in ts.values:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
        label = "" if ts.label is None else str(ts.label)
        rows.append((ts.subject_id, ts.site_id, label, str(rel)))
    with open(out / "manifest.csv", "w", newline="") as fh:
        fh.write("subject_id,site_id,label,path\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
    print(f"wrote {len(rows)} subjects across {len(cfg.site_specs)} sites to {out}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = parse_config(args.config, _overrides(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    datasets = _load_datasets(cfg)
    settings = cfg.settings()
    digest = cfg.digest()

    def on_round(round_idx, theta, states):
        if (round_idx + 1) % 10 == 0:
            source, targets = states
            wire.save_checkpoint(out / f"checkpoint_r{round_idx + 1:04d}.ckpt", theta,
                                 round_idx + 1, digest, _site_digests(source, targets))

    result = fedsim.run_training(settings, datasets, cfg.roles(), on_round=on_round)
    wire.save_checkpoint(out / "checkpoint_final.ckpt", result.theta, settings.rounds,
                         digest, _site_digests(result.source, result.targets))
    with open(out / "metrics.csv", "w", newline="") as fh:
        fh.write(",".join(METRICS_HEADER) + "\n")
        for row in result.metrics:
            fh.write(",".join(_fmt(row[col]) for col in METRICS_HEADER) + "\n")
    n_samples = {ds.site_id: len(ds.samples) for ds in datasets}
    per_subject = {ds.site_id: len(ds.subject_index) for ds in datasets}
    for site_id in n_samples:
        windows = n_samples[site_id] // max(1, per_subject[site_id])
        print(f"site {site_id}: {n_samples[site_id]} windows "
              f"({per_subject[site_id]} subjects, {windows} windows/subject)")
    print(f"trained {settings.rounds} rounds; metrics at {out / 'metrics.csv'}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _subject_label(dataset, subject_id) -> int:
    idx = dataset.subject_index[subject_id][0]
    g = dataset.samples[idx]
    if g.label is not None:
        return int(g.label)
    hidden = getattr(dataset, "hidden_labels", None)
    if hidden is None:
        raise ConfigError(f"site {dataset.site_id}: no labels available for evaluation")
    return int(hidden[idx])


def subject_folds(dataset, n_folds: int) -> list[list[int]]:
    """Subject-stratified fold assignment: subjects of each class are sorted
    and dealt round-robin, so every subject lands in exactly one fold and
    windows never split across folds."""
    by_class: dict[int, list[str]] = {}
    for subject_id in sorted(dataset.subject_index):
        by_class.setdefault(_subject_label(dataset, subject_id), []).append(subject_id)
    for label, members in sorted(by_class.items()):
        if len(members) < n_folds:
            raise ConfigError(f"site {dataset.site_id}: class {label} has "
                              f"{len(members)} subjects, needs >= {n_folds}")
    folds: list[list[int]] = [[] for _ in range(n_folds)]
    for label in sorted(by_class):
        for pos, subject_id in enumerate(by_class[label]):
            folds[pos % n_folds].extend(dataset.subject_index[subject_id])
    return folds


def cmd_eval(args) -> int:
    cfg = parse_config(args.config, _overrides(args))
    n_folds = args.folds if args.folds is not None else cfg.folds
    if n_folds < 2:
        raise ConfigError("folds must be >= 2")
    theta, _, _, _ = wire.load_checkpoint(args.checkpoint)
    datasets = _load_datasets(cfg)
    lines = ["site,fold,n_windows,acc"]
    summary = []
    for ds in datasets:
        folds = subject_folds(ds, n_folds)
        accs = []
        for fold_idx, indices in enumerate(folds):
            acc = fedsim.dataset_accuracy(theta, ds, use_graph=cfg.use_stfg,
                                          indices=indices)
            accs.append(acc)
            lines.append(f"{ds.site_id},{fold_idx},{len(indices)},{_fmt(acc)}")
        mean = float(np.mean(accs))
        std = float(np.std(accs))
        lines.append(f"{ds.site_id},mean,{len(ds.samples)},{_fmt(mean)}")
        lines.append(f"{ds.site_id},std,{len(ds.samples)},{_fmt(std)}")
        summary.append((ds.site_id, mean, std))
        if cfg.subject_vote:
            vote = _subject_vote_accuracy(theta, ds, cfg.use_stfg)
            print(f"site {ds.site_id}: subject majority-vote accuracy {vote:.4f}")
    report = "\n".join(lines)
    print(report)
    for site_id, mean, std in summary:
        print(f"site {site_id}: window accuracy {mean:.4f} +/- {std:.4f} over {n_folds} folds")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text(report + "\n")
    return 0


def _subject_vote_accuracy(theta, dataset, use_graph) -> float:
    correct = 0
    for subject_id, indices in sorted(dataset.subject_index.items()):
        preds, _ = fedsim.dataset_predictions(theta, dataset, indices, use_graph=use_graph)
        vote = int(np.bincount(preds, minlength=2).argmax())
        correct += int(vote == _subject_label(dataset, subject_id))
    return correct / len(dataset.subject_index)


# ---------------------------------------------------------------------------
# explain


def cmd_explain(args) -> int:
    cfg = parse_config(args.config, _overrides(args))
    layer = args.layer if args.layer is not None else cfg.explain_layer
    target_class = args.target_class if args.target_class is not None else cfg.explain_class
    if not 1 <= layer <= 4:
        raise ConfigError("layer must be in 1..4")
    if target_class not in (0, 1):
        raise ConfigError("class must be 0 or 1")
    theta, _, _, _ = wire.load_checkpoint(args.checkpoint)
    datasets = _load_datasets(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    subject_windows = []  # (dataset, subject_id, [sample indices])
    for ds in datasets:
        for subject_id in sorted(ds.subject_index):
            indices = ds.subject_index[subject_id][:cfg.explain_windows]
            subject_windows.append((ds, subject_id, indices))

    n_rois = datasets[0].samples[0].n_rois
    per_layer_subject_scores = {l: [] for l in range(1, 5)}
    focus_window_maps = []
    focus_graphs = []
    for ds, subject_id, indices in subject_windows:
        for l in range(1, 5):
            maps = [explain_mod.score_cam(theta, ds.samples[i], l, target_class)
                    for i in indices]
            per_layer_subject_scores[l].append(np.mean([m.scores for m in maps], axis=0))
            if l == layer:
                focus_window_maps.extend(m.scores for m in maps)
                focus_graphs.extend(ds.samples[i] for i in indices)

    with open(out / "saliency.csv", "w", newline="") as fh:
        fh.write("roi_index,layer,class,mean_score\n")
        for l in range(1, 5):
            pooled = np.mean(per_layer_subject_scores[l], axis=0)
            for roi in range(n_rois):
                fh.write(f"{roi},{l},{target_class},{_fmt(pooled[roi])}\n")

    # group-discriminative edges among the top ROIs at the focus layer
    scores = np.stack(per_layer_subject_scores[layer])
    fc = np.stack([np.mean([ds.samples[i].features for i in indices], axis=0)
                   for ds, _, indices in subject_windows])
    groups = np.array([_subject_label(ds, subject_id)
                       for ds, subject_id, _ in subject_windows])
    edges = explain_mod.significant_edges(scores, fc, groups)
    with open(out / "edges.csv", "w", newline="") as fh:
        fh.write("roi_a,roi_b,correlation,p_value\n")
        for e in edges:
            fh.write(f"{e.roi_a},{e.roi_b},{_fmt(e.correlation)},{_fmt(e.p_value)}\n")

    # faithfulness of the maps against an equal-sparsity random control
    masks = np.stack(focus_window_maps)
    clean, masked = explain_mod.saliency_masked_scores(theta, focus_graphs, masks)
    control = explain_mod.permuted_masks(masks, cfg.seed, "explain")
    _, masked_ctl = explain_mod.saliency_masked_scores(theta, focus_graphs, control)
    drop = explain_mod.average_drop(clean, masked)
    drop_ctl = explain_mod.average_drop(clean, masked_ctl)
    inc = explain_mod.average_increase(clean, masked)
    inc_ctl = explain_mod.average_increase(clean, masked_ctl)
    with open(out / "faithfulness.csv", "w", newline="") as fh:
        fh.write("layer,class,mask,average_drop,average_increase\n")
        fh.write(f"{layer},{target_class},saliency,{_fmt(drop)},{_fmt(inc)}\n")
        fh.write(f"{layer},{target_class},random,{_fmt(drop_ctl)},{_fmt(inc_ctl)}\n")
    print(f"layer {layer} class {target_class}: "
          f"average drop {drop:.2f}% (random control {drop_ctl:.2f}%), "
          f"average increase {inc:.2f}% (random control {inc_ctl:.2f}%)")
    top = explain_mod.top_rois(
        [explain_mod.SaliencyMap(s, layer, target_class, "", 0)
         for s in per_layer_subject_scores[layer]], 10)
    print("top ROIs:", " ".join(str(int(r)) for r in top))
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def build_gradcheck_toy(seed: int = 0):
    """A 2-site, 8-sample, 6-ROI instance exercising all four loss terms."""
    cfg = SynthConfig(sites=[SynthSite("a", 1, True, 0.0), SynthSite("b", 1, False, 0.3)],
                      n_rois=6, t=27, class_sep=0.6, window=20, top_k=2)
    datasets = synth_multisite(cfg, seed=seed)
    graphs = datasets[0].samples[:4] + datasets[1].samples[:4]
    labels = np.array([int(datasets[0].hidden_labels[i]) for i in range(4)]
                      + [int(datasets[1].hidden_labels[i]) for i in range(4)])
    batch = network.make_batch(graphs, 0, labels=labels)
    batch.domains = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    theta = network.init_theta(6, seed)
    prev = network.init_theta(6, seed + 1)
    queue = {}
    for uid in batch.uids:
        stream = rng.stream(seed, "toyqueue", uid)
        queue[uid] = deque((stream.standard_normal(128) for _ in range(2)), maxlen=5)
    # reversal off: the reversal node deliberately reports the negated
    # upstream gradient, which no finite-difference probe can match; its
    # contract has its own direct test
    settings = fedsim.TrainSettings(seed=seed, reversal=False)

    def objective(store):
        obj = site_objective(store, batch, role="source", ramp=0.62, settings=settings,
                             queue=queue, prev_global=prev,
                             key=(seed, "drop", "toy", 0), train=True)
        return obj.total

    return objective, theta


def cmd_gradcheck(args) -> int:
    cfg = parse_config(args.config, _overrides(args))
    objective, theta = build_gradcheck_toy(cfg.seed)
    result = grad_check(objective, theta, h=1e-5, max_coords_per_param=3, seed=cfg.seed)
    status = "pass" if (result.ok and result.max_rel_error < 1e-4) else "FAIL"
    print(f"gradient check: max relative error {result.max_rel_error:.3e} "
          f"at parameter {result.worst_name!r} (index {result.worst_index}, "
          f"{result.n_coordinates} coordinates probed): {status}")
    if result.nan_failures:
        for name, idx in result.nan_failures[:5]:
            print(f"  NaN probe at {name}[{idx}]")
    return 0 if status == "pass" else 1


# ---------------------------------------------------------------------------
# wiring


def _overrides(args) -> dict:
    return {"seed": args.seed} if args.seed is not None else {}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dafed",
        description="Federated domain-adversarial training on connectivity graphs")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p_synth = sub.add_parser("synth", help="write synthetic per-subject series and a manifest")
    common(p_synth)
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="run federated training")
    common(p_train)
    p_train.add_argument("--out", required=True)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="cross-validated accuracy of a checkpoint")
    common(p_eval)
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--folds", type=int, default=None)
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_explain = sub.add_parser("explain", help="saliency, edges, and faithfulness")
    common(p_explain)
    p_explain.add_argument("checkpoint")
    p_explain.add_argument("--layer", type=int, default=None)
    p_explain.add_argument("--class", dest="target_class", type=int, default=None)
    p_explain.add_argument("--out", required=True)
    p_explain.set_defaults(func=cmd_explain)

    p_gc = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    common(p_gc)
    p_gc.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, IngestError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except TrainingDiverged as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ValueError, wire.WireError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
