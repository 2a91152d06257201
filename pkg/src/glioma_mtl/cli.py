"""Command line entry point: ``glioma-mtl <subcommand> --config run.ini``.

Every subcommand writes into ``<run_dir>/<subcommand>/`` only, records a
``manifest.json`` there and refuses to touch existing output without
``--force``. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import shutil
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import __version__
from .data_model import CHANNELS, Case, VolumeGrid, VolumeKind, encode_labelset
from .errors import (AugmentError, BuildError, ConfigError, GliomaMTLError, IngestionError,
                     InferenceError, NonFiniteLossError, PreprocessError, UndefinedMetricError,
                     VocabularyError)

log = logging.getLogger("glioma_mtl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
STAGE_DIRS = {"synth": "synth", "preprocess": "preprocessed", "train": "train", "tune": "tune",
              "pseudo-label": "pseudo", "predict": "predict", "evaluate": "evaluate",
              "saliency": "saliency", "filters": "filters"}


def exit_code(exc):
    if isinstance(exc, (NonFiniteLossError, UndefinedMetricError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, BuildError)):
        return EXIT_CONFIG
    if isinstance(exc, (IngestionError, PreprocessError, AugmentError, InferenceError,
                        VocabularyError, FileNotFoundError)):
        return EXIT_DATA
    return EXIT_DATA


# -- run directory helpers --------------------------------------------------------

class Run:
    def __init__(self, cfg, run_dir, force):
        self.cfg = cfg
        self.root = Path(run_dir)
        self.force = force

    def stage(self, name):
        return self.root / STAGE_DIRS[name]

    def open_stage(self, name):
        out = self.stage(name)
        if out.exists() and any(out.iterdir()):
            if not self.force:
                raise ConfigError(f"{out} already holds output; pass --force to overwrite")
            shutil.rmtree(out)
        out.mkdir(parents=True, exist_ok=True)
        return out

    def raw_dir(self):
        raw = self.cfg.get("data", "raw")
        return Path(raw) if raw else self.stage("synth")

    def require(self, name, what):
        path = self.stage(name)
        if not path.is_dir():
            raise IngestionError(f"{what} not found at {path}; run `{name}` first")
        return path


def write_manifest(out, args, cfg, **extra):
    import scipy
    import torch

    seeds = {}
    for section in ("synth", "train", "augment", "interpret"):
        try:
            seeds[section] = cfg.get(section, "seed")
        except ConfigError:
            pass
    manifest = {
        "subcommand": args.command,
        "argv": [a for a in sys.argv[1:]],
        "config": cfg.snapshot(),
        "seeds": seeds,
        "versions": {"glioma_mtl": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__,
                     "torch": torch.__version__},
    }
    manifest.update(extra)
    (Path(out) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True,
                                                        default=_jsonable) + "\n")
    (Path(out) / "config.ini").write_text(cfg.to_ini())


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    return str(value)


def _set_threads(cfg):
    import torch

    threads = int(cfg.get("train", "threads"))
    if threads > 0:
        torch.set_num_threads(threads)


def _load_samples(run):
    from .preprocess import load_bundles

    return load_bundles(run.require("preprocess", "preprocessed bundles"))


def _splits(run, samples):
    """``{"train", "val", "test"}`` lists of samples, from the fixed-seed split."""
    from .tuning import split_dataset

    seed = int(run.cfg.get("data", "split_seed"))
    dev, test = split_dataset(samples, float(run.cfg.get("data", "test_fraction")), seed)
    train, val = split_dataset(dev, float(run.cfg.get("data", "val_fraction")), seed)
    return {"train": train, "val": val, "test": test}


def _truths(run, samples):
    """Ground-truth labels per case: a complete-labels CSV if present, else observed labels."""
    from .preprocess import read_labels_csv

    path = run.cfg.get("data", "truth_labels")
    path = Path(path) if path else run.raw_dir() / "truth_labels.csv"
    if path.is_file():
        rows = read_labels_csv(path)
        return {cid: encode_labelset(row) for cid, row in rows.items()}
    return {s.case_id: s.labels for s in samples}


def _sample_to_case(sample, spacing=(1.0, 1.0, 1.0)):
    channels = tuple(VolumeGrid(c, spacing) for c in sample.image)
    seg = None
    if sample.mask is not None:
        seg = VolumeGrid(sample.mask, spacing, VolumeKind.BINARY_MASK)
    return Case(sample.case_id, channels, sample.labels, seg)


def _find_case(samples, case_id):
    for s in samples:
        if s.case_id == case_id:
            return s
    raise IngestionError(f"case {case_id!r} is not among the preprocessed bundles")


# -- subcommands -------------------------------------------------------------------

def cmd_synth(run, args):
    from .synthdata import write_dataset

    spec = cfgmod.phantom_spec(run.cfg)
    n = args.n if args.n is not None else int(run.cfg.get("synth", "n"))
    out = run.open_stage("synth")
    cases, _ = write_dataset(spec, n, out)
    write_manifest(out, args, run.cfg, n_cases=len(cases))
    print(f"wrote {len(cases)} phantoms to {out}")


def cmd_preprocess(run, args):
    from .preprocess import (load_dataset, preprocess_case, read_volume, save_bundle)

    pcfg = cfgmod.preprocess_config(run.cfg)
    raw = run.raw_dir()
    if not raw.is_dir():
        raise IngestionError(f"raw dataset directory {raw} does not exist")
    brain = None
    if pcfg.brain_mask_path is None and (raw / "brain_mask.nii.gz").is_file():
        brain = read_volume(raw / "brain_mask.nii.gz", VolumeKind.BINARY_MASK)
    cases = load_dataset(raw)
    out = run.open_stage("preprocess")
    float16 = bool(run.cfg.get("preprocess", "store_float16"))
    degenerate = {}
    for case in cases:
        processed, info = preprocess_case(case, pcfg, brain)
        if info["degenerate_channels"]:
            degenerate[case.case_id] = info["degenerate_channels"]
        save_bundle(processed, info, out, float16=float16)
    write_manifest(out, args, run.cfg, n_cases=len(cases), degenerate_channels=degenerate)
    print(f"preprocessed {len(cases)} cases into {out}")


def cmd_train(run, args):
    from .losses import weights_from_split
    from .network import build_psnet, save_checkpoint
    from .preprocess import median_smooth_mask
    from .reporting import write_csv
    from .trainer import HISTORY_COLUMNS, history_rows, train
    from .data_model import Sample

    _set_threads(run.cfg)
    samples = _load_samples(run)
    splits = _splits(run, samples)
    tcfg = cfgmod.train_config(run.cfg)
    aug = cfgmod.augment_config(run.cfg)
    spec = cfgmod.network_spec(run.cfg, samples[0].image.shape[1:] + (len(CHANNELS),))
    train_samples = splits["train"]
    if run.cfg.get("preprocess", "smooth_training_masks"):
        train_samples = [s if s.mask is None else Sample(
            s.case_id, s.image, s.labels,
            np.asarray(median_smooth_mask(VolumeGrid(s.mask, kind=VolumeKind.BINARY_MASK)).values))
            for s in train_samples]
    out = run.open_stage("train")
    model = build_psnet(spec, seed=tcfg.seed)
    result = train(model, train_samples, splits["val"], tcfg, aug)
    save_checkpoint(result.model, out / "model.pt")
    rows = [{k: ("" if v is None else (f"{v:.8g}" if isinstance(v, float) else str(v)))
             for k, v in row.items()} for row in history_rows(result.history)]
    write_csv(out / "history.csv", rows, HISTORY_COLUMNS)
    (out / "split.json").write_text(json.dumps(
        {k: [s.case_id for s in v] for k, v in splits.items()}, indent=2) + "\n")
    cw, lw = weights_from_split(train_samples, tuple(spec.classification_heads))
    write_manifest(out, args, run.cfg, class_weights=cw, loss_weights=lw,
                   best_epoch=result.best_epoch, best_loss=result.best_loss,
                   network=json.loads(spec.to_json()))
    print(f"trained {len(result.history)} epochs; best epoch {result.best_epoch} "
          f"loss {result.best_loss:.6f}")


def cmd_tune(run, args):
    from .reporting import write_csv
    from .tuning import GridSpec, grid_search, psnet_trainer

    _set_threads(run.cfg)
    samples = _load_samples(run)
    splits = _splits(run, samples)
    grid = cfgmod.grid_spec(run.cfg)
    spec = cfgmod.network_spec(run.cfg, samples[0].image.shape[1:] + (len(CHANNELS),))
    train_fn = psnet_trainer(spec, cfgmod.train_config(run.cfg), cfgmod.augment_config(run.cfg))
    out = run.open_stage("tune")
    best, board = grid_search(grid, split=(splits["train"], splits["val"]), train_fn=train_fn,
                              workers=int(run.cfg.get("grid", "workers")))
    columns = ("rank", "index") + GridSpec.axes() + ("val_loss",)
    write_csv(out / "leaderboard.csv",
              [{k: (f"{v:.8g}" if isinstance(v, float) else str(v)) for k, v in r.items()}
               for r in board], columns)
    (out / "best.json").write_text(json.dumps(best, indent=2) + "\n")
    write_manifest(out, args, run.cfg, grid_size=grid.size, best=best)
    print(f"evaluated {len(board)} grid points; best {best}")


def _gate(run):
    from .pseudolabel import GATES, DiceThresholdGate
    from .preprocess import read_volume

    kind = run.cfg.get("gate", "kind")
    if kind not in GATES:
        raise ConfigError(f"[gate] kind must be one of {sorted(GATES)}, got {kind!r}")
    if kind == "dice":
        # reference masks live in the raw layout and are cropped like the images
        refs = {}
        truth_dir = run.raw_dir() / "truth_masks"
        bundles = run.stage("preprocess")
        for sidecar in sorted(bundles.glob("*.json")):
            if sidecar.name == "manifest.json":
                continue
            info = json.loads(sidecar.read_text())
            path = truth_dir / f"{info['case_id']}.nii.gz"
            if path.is_file():
                full = np.asarray(read_volume(path, VolumeKind.BINARY_MASK).values)
                o, s = info["offset"], info["shape"]
                refs[info["case_id"]] = full[o[0]:o[0] + s[0], o[1]:o[1] + s[1], o[2]:o[2] + s[2]]
        return DiceThresholdGate(refs, float(run.cfg.get("gate", "threshold")))
    if kind == "command":
        return GATES[kind](run.cfg.get("gate", "command"))
    return GATES[kind]()


def cmd_pseudo_label(run, args):
    from .preprocess import save_bundle
    from .pseudolabel import predict_mask, pseudo_label_loop, segmentation_trainer

    _set_threads(run.cfg)
    samples = _load_samples(run)
    cases = [_sample_to_case(s) for s in samples]
    labeled = [c for c in cases if c.segmentation is not None]
    unlabeled = [c for c in cases if c.segmentation is None]
    spec = cfgmod.network_spec(run.cfg, samples[0].image.shape[1:] + (len(CHANNELS),))
    gate = _gate(run)
    out = run.open_stage("pseudo-label")
    max_rounds = int(run.cfg.get("gate", "max_rounds")) or None
    result = pseudo_label_loop(labeled, unlabeled, gate,
                               segmentation_trainer(spec, cfgmod.train_config(run.cfg),
                                                    cfgmod.augment_config(run.cfg)),
                               predict_mask, max_rounds=max_rounds)
    for case in result.cases:
        save_bundle(case, {"case_id": case.case_id,
                           "segmentation_source": case.segmentation_source.value}, out / "bundles")
    (out / "rounds.json").write_text(json.dumps(
        {"rounds": result.rounds, "stalled": result.stalled,
         "remaining": [c.case_id for c in result.remaining]}, indent=2) + "\n")
    write_manifest(out, args, run.cfg, n_rounds=len(result.rounds), stalled=result.stalled)
    print(f"{len(result.rounds)} rounds; {len(result.cases) - len(labeled)} cases pseudo-labelled, "
          f"{len(result.remaining)} remaining")


def cmd_predict(run, args):
    import torch

    from .network import load_checkpoint
    from .postprocess import build_prediction_record, final_segmentation
    from .preprocess import write_volume
    from .reporting import write_predictions

    _set_threads(run.cfg)
    samples = _load_samples(run)
    train_dir = run.require("train", "trained model")
    model = load_checkpoint(train_dir / "model.pt")
    if args.split != "all":
        ids = set(json.loads((train_dir / "split.json").read_text())[args.split])
        samples = [s for s in samples if s.case_id in ids]
    truths = _truths(run, samples)
    out = run.open_stage("predict")
    records = []
    model.eval()
    with torch.no_grad():
        for s in samples:
            o = model(torch.as_tensor(s.image[None]))
            prob = o["seg_probabilities"][0, 1].numpy()
            records.append(build_prediction_record(
                s.case_id, o["idh_scores"][0].numpy(), o["codeletion_scores"][0].numpy(),
                o["grade_scores"][0].numpy()))
            write_volume(final_segmentation(prob), out / "masks" / f"{s.case_id}.nii.gz")
    write_predictions(out / "predictions.csv", records, truths)
    write_manifest(out, args, run.cfg, split=args.split, n_cases=len(records))
    print(f"wrote predictions for {len(records)} cases to {out / 'predictions.csv'}")


def cmd_evaluate(run, args):
    from .metrics import segmentation_report
    from .preprocess import read_volume
    from .reporting import (SEGMENTATION_COLUMNS, confusion_tables, metrics_report,
                            plot_roc, plot_segmentation_boxplot, read_csv, roc_inputs,
                            segmentation_row, write_confusion_csv, write_csv,
                            write_metrics_json)

    pred_path = Path(args.predictions) if args.predictions else \
        run.require("predict", "predictions") / "predictions.csv"
    if not pred_path.is_file():
        raise IngestionError(f"predictions CSV {pred_path} not found")
    rows, columns = read_csv(pred_path)
    mask_dir = pred_path.parent / "masks"
    seg_rows = []
    bundles = run.stage("preprocess")
    if mask_dir.is_dir() and bundles.is_dir():
        from .preprocess import load_bundle

        for r in rows:
            bundle, pred = bundles / f"{r['case_id']}.npz", mask_dir / f"{r['case_id']}.nii.gz"
            if not (bundle.is_file() and pred.is_file()):
                continue
            gt = load_bundle(bundle).mask
            if gt is None:
                continue
            pm = np.asarray(read_volume(pred, VolumeKind.BINARY_MASK).values)
            seg_rows.append(segmentation_row(r["case_id"], segmentation_report(pm, gt)))
    out = run.open_stage("evaluate")
    report = metrics_report(rows, seg_rows)
    write_metrics_json(out / "metrics.json", report)
    for task, (names, matrix) in confusion_tables(rows).items():
        write_confusion_csv(out / f"confusion_{task}.csv", names, matrix)
    for task, (scores, labels) in roc_inputs(rows).items():
        if scores:
            plot_roc(out / f"roc_{task}.png", scores, labels, task)
    write_csv(out / "segmentation_metrics.csv", seg_rows, SEGMENTATION_COLUMNS)
    plot_segmentation_boxplot(out / "segmentation_boxplot.png", seg_rows)
    write_csv(out / "predictions.csv", rows, columns)
    write_manifest(out, args, run.cfg, predictions=str(pred_path), n_cases=len(rows))
    print(json.dumps(report["all"], indent=2, sort_keys=True))


def cmd_saliency(run, args):
    from .interpret import smoothgrad_saliency
    from .network import load_checkpoint
    from .preprocess import write_volume

    model = load_checkpoint(run.require("train", "trained model") / "model.pt")
    sample = _find_case(_load_samples(run), args.case)
    s = run.cfg.section("interpret")
    maps = smoothgrad_saliency(model, sample, args.head, int(s["n_samples"]),
                               float(s["noise_fraction"]), int(s["seed"]))
    out = run.open_stage("saliency")
    for name, grid in zip(CHANNELS, maps):
        write_volume(grid, out / f"{args.case}_{args.head}_{name}.nii.gz")
    if args.png:
        _render_saliency(out / f"{args.case}_{args.head}.png", sample.image, maps)
    write_manifest(out, args, run.cfg, case=args.case, head=args.head)
    print(f"wrote {len(maps)} saliency maps to {out}")


def _render_saliency(path, image, maps):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    z = image.shape[-1] // 2
    fig, axes = plt.subplots(1, len(maps), figsize=(3 * len(maps), 3))
    for ax, name, channel, grid in zip(axes, CHANNELS, image, maps):
        ax.imshow(channel[:, :, z].T, cmap="gray", origin="lower")
        ax.imshow(np.asarray(grid.values)[:, :, z].T, cmap="hot", alpha=0.5, origin="lower")
        ax.set_title(name)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_filters(run, args):
    from .interpret import filter_outputs
    from .network import load_checkpoint
    from .preprocess import write_volume

    model = load_checkpoint(run.require("train", "trained model") / "model.pt")
    sample = _find_case(_load_samples(run), args.case)
    maps = filter_outputs(model, sample, args.layer)
    out = run.open_stage("filters")
    for i, grid in enumerate(maps):
        write_volume(grid, out / f"{args.case}_{args.layer}_{i:03d}.nii.gz")
    write_manifest(out, args, run.cfg, case=args.case, layer=args.layer, n_filters=len(maps))
    print(f"wrote {len(maps)} filter maps of {args.layer} to {out}")


COMMANDS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train,
            "tune": cmd_tune, "pseudo-label": cmd_pseudo_label, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "saliency": cmd_saliency, "filters": cmd_filters}


def build_parser():
    parser = argparse.ArgumentParser(prog="glioma-mtl", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="run configuration (INI)")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override a configuration value")
    common.add_argument("--run-dir", help="run directory (overrides [data] run_dir)")
    common.add_argument("--force", action="store_true", help="overwrite existing output")
    common.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", parents=[common], help="write synthetic phantoms")
    p.add_argument("--n", type=int, help="number of phantoms (overrides [synth] n)")
    sub.add_parser("preprocess", parents=[common], help="crop, normalise and bundle cases")
    sub.add_parser("train", parents=[common], help="train the multi-task network")
    sub.add_parser("tune", parents=[common], help="exhaustive hyperparameter grid search")
    sub.add_parser("pseudo-label", parents=[common], help="iteratively segment unsegmented cases")
    p = sub.add_parser("predict", parents=[common], help="predict labels and segmentations")
    p.add_argument("--split", choices=("test", "val", "train", "all"), default="test")
    p = sub.add_parser("evaluate", parents=[common], help="metrics, confusion matrices, ROC plots")
    p.add_argument("--predictions", help="predictions CSV (default: the predict output)")
    p = sub.add_parser("saliency", parents=[common], help="SmoothGrad saliency maps for one case")
    p.add_argument("--case", required=True)
    p.add_argument("--head", choices=("idh", "codeletion", "grade"), required=True)
    p.add_argument("--png", action="store_true", help="also render a mid-slice overlay")
    p = sub.add_parser("filters", parents=[common], help="filter outputs of one convolution")
    p.add_argument("--case", required=True)
    p.add_argument("--layer", required=True, help="registry name, e.g. encoder.0.conv1")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load_config(args.config, args.overrides)
        if args.run_dir:
            cfg.set("data", "run_dir", args.run_dir)
        run = Run(cfg, cfg.get("data", "run_dir"), args.force)
        COMMANDS[args.command](run, args)
    except GliomaMTLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
