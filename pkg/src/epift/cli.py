"""Command-line entry points: train, evaluate, dataset prepare, augment preview."""

from __future__ import annotations

import argparse
import csv
import hashlib
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, audio, augment, evalharness, learners, metaopt, nn
from .audio import AudioDataError, ParseError, SynthTaskSpec, Waveform
from .config import PRESET_SPLITS, RunConfig, config_to_text, make_config, parse_config_text
from .evalharness import UsageError, episode_seed
from .learners import HeadConfig
from .nn import ConfigError
from .tensor import NumericError

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4


# -- model assembly -------------------------------------------------------


def backbone_spec(cfg: RunConfig):
    return nn.BackboneSpec(
        kind=cfg.backbone,
        input_shape=(cfg.mel_bins, cfg.frames),
        widths=cfg.width_list(),
        embed_mode="map" if cfg.head == "can" else "flat",
    )


def synth_task_spec(cfg: RunConfig):
    return SynthTaskSpec(n_classes=cfg.synth_train_classes + cfg.synth_test_classes,
                         mel_bins=cfg.mel_bins)


def build_model(cfg: RunConfig, n_train_classes=None):
    """Backbone + head parameters, curvature, and the meta configuration."""
    spec = backbone_spec(cfg)
    rng = np.random.default_rng(cfg.seed)
    params = nn.init_backbone(
        spec, rng,
        n_train_classes=n_train_classes if cfg.head == "can" else None)
    if cfg.head == "can":
        learners.add_can_params(params, spec, rng)
    curvature = metaopt.CurvatureSet(params, mode=cfg.curvature_mode)
    head = HeadConfig(head=cfg.head, distance=cfg.distance, tau=cfg.tau,
                      global_weight=cfg.global_weight)
    augmenter = None
    if cfg.augment != "none":
        task = synth_task_spec(cfg)
        augmenter = augment.make_sample_augmenter(
            cfg.augment, cfg.mel_bins, task.window, task.hop)
    mcfg = metaopt.MetaConfig(
        spec=spec, head=head, scheme=cfg.scheme, alpha=cfg.alpha, beta=cfg.beta,
        rounds=cfg.rounds, second_order=cfg.second_order,
        curvature_mode=cfg.curvature_mode, augmenter=augmenter,
        learn_curvature=(cfg.meta == "mc"))
    return spec, params, curvature, mcfg


def synth_pools(cfg: RunConfig):
    """Class-disjoint synthetic train/test pools; fully seed-determined."""
    task = synth_task_spec(cfg)
    train_classes = range(cfg.synth_train_classes)
    test_classes = range(cfg.synth_train_classes,
                         cfg.synth_train_classes + cfg.synth_test_classes)
    train = audio.synth_dataset(task, cfg.synth_per_class, cfg.seed,
                                classes=train_classes,
                                keep_waveform=(cfg.augment != "none"))
    test = audio.synth_dataset(task, cfg.synth_per_class, cfg.seed,
                               classes=test_classes,
                               keep_waveform=(cfg.augment != "none"))
    return train, test


def load_cached_pools(cfg: RunConfig):
    """Feature-cache pools for a real-dataset preset prepared by `dataset prepare`."""
    index = Path(cfg.cache_dir) / "index.csv"
    if not index.exists():
        raise ConfigError(f"no feature cache at {cfg.cache_dir}; run `dataset prepare`")
    pools = {"train": {}, "val": {}, "test": {}}
    class_ids = {}
    with open(index) as f:
        for row in csv.DictReader(f):
            cid = class_ids.setdefault(row["class_name"], len(class_ids))
            feats = nn.load_checkpoint(Path(cfg.cache_dir) / row["cache_file"])["features"]
            sample = audio.Sample(features=feats, class_id=cid,
                                  source_id=row["filepath"])
            pools[row["split"]].setdefault(cid, []).append(sample)
    return pools["train"], pools["test"]


def resolve_pools(cfg: RunConfig):
    if cfg.preset == "synthetic":
        return synth_pools(cfg)
    return load_cached_pools(cfg)


# -- subcommands ----------------------------------------------------------


def run_manifest_text(cfg: RunConfig):
    lines = [f"epift {__version__}", "", config_to_text(cfg)]
    if cfg.preset == "synthetic":
        lines.append(
            f"split = train:0..{cfg.synth_train_classes - 1} "
            f"test:{cfg.synth_train_classes}.."
            f"{cfg.synth_train_classes + cfg.synth_test_classes - 1}")
    return "\n".join(lines) + "\n"


def cmd_train(cfg: RunConfig):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_pool, _ = resolve_pools(cfg)
    n_classes = len(train_pool)
    spec, params, curvature, mcfg = build_model(cfg, n_train_classes=n_classes)
    mcfg.global_class_index = {cid: i for i, cid in enumerate(sorted(train_pool))}
    optimizer = metaopt.OuterOptimizer("sgd", beta=cfg.beta)
    log_rows = []
    for i in range(cfg.train_episodes):
        rng = np.random.default_rng(episode_seed(cfg.seed ^ 0x7261696E, i))
        episode = ep_sample(train_pool, cfg, rng)
        loss, acc = metaopt.meta_step(params, curvature, episode, mcfg,
                                      optimizer=optimizer, rng=rng)
        log_rows.append((i, loss, acc))
        if (i + 1) % 100 == 0:
            recent = np.mean([r[1] for r in log_rows[-100:]])
            print(f"episode {i + 1}/{cfg.train_episodes}  "
                  f"loss(ma100)={recent:.4f}  acc={acc:.3f}", flush=True)
    nn.params_to_checkpoint(out / "checkpoint.bin", params,
                            curvature=curvature.named_tensors())
    with open(out / "manifest.txt", "w") as f:
        f.write(run_manifest_text(cfg))
    with open(out / "train_log.csv", "w") as f:
        f.write("episode,meta_loss,query_acc\n")
        for i, loss, acc in log_rows:
            f.write(f"{i},{loss:.8f},{acc:.6f}\n")
    print(f"wrote {out / 'checkpoint.bin'}")
    return 0


def ep_sample(pool, cfg, rng):
    from .episodes import sample_episode
    return sample_episode(pool, cfg.way, cfg.shot, cfg.queries, rng)


def load_model(cfg: RunConfig, checkpoint):
    _, test_pool = resolve_pools(cfg)
    train_pool, _ = resolve_pools(cfg)
    spec, params, curvature, mcfg = build_model(cfg, n_train_classes=len(train_pool))
    arrays, curv_arrays = nn.checkpoint_to_params(checkpoint)
    if sorted(arrays) != sorted(params.names()):
        raise ConfigError(
            f"checkpoint {checkpoint} does not match config "
            f"(head={cfg.head}, backbone={cfg.backbone})")
    for name, a in arrays.items():
        if tuple(a.shape) != params[name].shape:
            raise ConfigError(f"checkpoint tensor {name} has shape {a.shape}, "
                              f"model expects {params[name].shape}")
        params[name].data = a.copy()
    curvature.load_arrays(curv_arrays)
    return spec, params, curvature, mcfg, test_pool


def cmd_evaluate(cfg: RunConfig, checkpoint, table=False):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec, params, curvature, mcfg, test_pool = load_model(cfg, checkpoint)
    records, summary = evalharness.evaluate_suite(
        params, curvature, test_pool, mcfg, cfg.way, cfg.shot, cfg.queries,
        cfg.eval_episodes, cfg.seed)
    with open(out / "records.csv", "w") as f:
        f.write(evalharness.records_to_csv(records))
    with open(out / "summary.json", "w") as f:
        f.write(evalharness.summary_to_json(summary))
    if table:
        gain = summary.mean_after - summary.mean_before
        print(evalharness.render_table([(f"{cfg.meta}-{cfg.head}-{cfg.scheme}",
                                         summary, gain)]))
    print(f"mean acc before={summary.mean_before:.4f} ± {summary.ci_before:.4f}  "
          f"after={summary.mean_after:.4f} ± {summary.ci_after:.4f}")
    return 0


def cmd_dataset_prepare(cfg: RunConfig):
    """Resample, trim, featurize every manifest row into the cache directory."""
    if not cfg.manifest:
        raise UsageError("dataset prepare needs manifest = <csv path>")
    if cfg.preset == "synthetic":
        raise ConfigError("dataset prepare applies to real-dataset presets only")
    with open(cfg.manifest) as f:
        rows = [r for r in csv.reader(f) if r]
    if not rows:
        raise UsageError(f"manifest {cfg.manifest} is empty")
    if rows[0][0].strip().lower() == "filepath":
        rows = rows[1:]
    if not rows:
        raise UsageError(f"manifest {cfg.manifest} has a header but no rows")
    cache = Path(cfg.cache_dir or (Path(cfg.output_dir) / "cache"))
    cache.mkdir(parents=True, exist_ok=True)
    content_hash = hashlib.sha256(
        (cfg.preset + open(cfg.manifest).read()).encode()).hexdigest()
    hash_file = cache / "cache.hash"
    if hash_file.exists() and hash_file.read_text().strip() == content_hash:
        print(f"cache {cache} is up to date")
        return 0

    has_split = len(rows[0]) >= 3
    classes = sorted({r[1].strip() for r in rows})
    if not has_split:
        counts = PRESET_SPLITS[cfg.preset]
        tr, va, te = audio.split_classes(classes, counts, seed=cfg.seed)
        split_of = {c: "train" for c in tr}
        split_of.update({c: "val" for c in va})
        split_of.update({c: "test" for c in te})
    seconds = 1.0 if cfg.preset == "speech" else None
    index_rows, errors = [], []
    for i, row in enumerate(rows):
        path, cname = row[0].strip(), row[1].strip()
        split = row[2].strip() if has_split else split_of.get(cname)
        if split is None:
            continue
        try:
            w = audio.load_wav(path)
            w = audio.resample(w, 16000)
            if seconds is not None:
                w = audio.fix_duration(w, seconds)
            feats = audio.log_mel(w, bins=128)
        except (ParseError, AudioDataError, OSError) as e:
            errors.append(f"{path}: {e}")
            continue
        fname = f"feat_{i:06d}.bin"
        nn.save_checkpoint(cache / fname, [("features", feats)])
        index_rows.append((path, cname, split, fname))
    with open(cache / "index.csv", "w") as f:
        f.write("filepath,class_name,split,cache_file\n")
        for r in index_rows:
            f.write(",".join(r) + "\n")
    if errors:
        with open(cache / "errors.txt", "w") as f:
            f.write("\n".join(errors) + "\n")
    hash_file.write_text(content_hash + "\n")
    per_split = {}
    for _, cname, split, _ in index_rows:
        per_split.setdefault(split, set()).add(cname)
    print("cached", len(index_rows), "files;",
          {k: len(v) for k, v in sorted(per_split.items())}, "classes per split;",
          len(errors), "errors")
    return 0


def cmd_augment_preview(cfg: RunConfig, wav_path, kind, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    if wav_path:
        w = audio.load_wav(wav_path)
    else:
        w = audio.synth_waveform(synth_task_spec(cfg), 0, rng)
    w2 = augment.apply_augment(w, kind, rng)
    audio.write_wav(out / "before.wav", w)
    audio.write_wav(out / "after.wav", w2)
    print(f"wrote {out / 'before.wav'} and {out / 'after.wav'} ({kind})")
    return 0


# -- argument parsing -----------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--output-dir", help="run directory")
    p.add_argument("--seed", type=int)


def _resolve_config(args):
    overrides = {}
    for kv in args.set:
        if "=" not in kv:
            raise ConfigError(f"--set expects KEY=VALUE, got {kv!r}")
        k, v = kv.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    elif "output_dir" not in overrides and os.environ.get("EPIFT_OUTPUT_DIR"):
        overrides["output_dir"] = os.environ["EPIFT_OUTPUT_DIR"]
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.config:
        return parse_config_text(open(args.config).read(), overrides)
    return make_config(overrides)


def build_parser():
    p = argparse.ArgumentParser(prog="epift",
                                description="Episode-specific fine-tuning lab")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="meta-train a model")
    _add_common(t)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint over test episodes")
    _add_common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--table", action="store_true",
                   help="print the w/o FT | w/ FT | Gain table")

    d = sub.add_parser("dataset", help="dataset utilities")
    dsub = d.add_subparsers(dest="dataset_cmd", required=True)
    dp = dsub.add_parser("prepare", help="build the feature cache from a manifest")
    _add_common(dp)
    dp.add_argument("--manifest", required=True)
    dp.add_argument("--cache-dir")

    a = sub.add_parser("augment", help="augmentation utilities")
    asub = a.add_subparsers(dest="augment_cmd", required=True)
    ap = asub.add_parser("preview", help="write a before/after WAV pair")
    _add_common(ap)
    ap.add_argument("--wav", help="input WAV (defaults to a synthetic tone)")
    ap.add_argument("--kind", default="random",
                    choices=["noise", "equalizer", "pitch", "random"])
    ap.add_argument("--out", default="augment_preview")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.cmd == "train":
            return cmd_train(cfg)
        if args.cmd == "evaluate":
            return cmd_evaluate(cfg, args.checkpoint, table=args.table)
        if args.cmd == "dataset":
            if args.cache_dir:
                cfg.cache_dir = args.cache_dir
            cfg.manifest = args.manifest
            return cmd_dataset_prepare(cfg)
        if args.cmd == "augment":
            return cmd_augment_preview(cfg, args.wav, args.kind, args.out)
        raise UsageError(f"unknown command {args.cmd}")
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, OSError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
