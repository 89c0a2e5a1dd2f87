"""Command-line pipeline driver.

Each subcommand writes into a fresh run directory (never reused) holding a
resolved-config snapshot, a log, and the stage artifacts, so any run can be
reproduced from its own snapshot. Heavy imports happen after the thread cap
is applied, because BLAS pools size themselves at import time.

Exit codes: 0 success, 1 usage error, 2 data/artifact error, 3 numeric
failure (non-finite values during training or embedding).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

THREAD_ENV = "SSLGRADER_THREADS"
_BLAS_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
              "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")

log = logging.getLogger("sslgrader.cli")


class UsageError(Exception):
    """Bad flags, config keys, or argument values (exit 1)."""


class DataError(Exception):
    """Missing or malformed input artifacts (exit 2)."""


def _cap_threads() -> None:
    cap = os.environ.get(THREAD_ENV)
    if cap:
        for var in _BLAS_VARS:
            os.environ[var] = cap


@dataclass(frozen=True)
class RunConfig:
    """Every tunable in one flat record; the documented defaults double as
    the reference protocol values (512-pixel windows at 50% overlap resized
    to 128, Adam 5e-4 batch 16, SGD 0.5 batch 8, 29 transferred levels,
    80:20 split)."""

    seed: int = 0
    patch_size: int = 512
    overlap: float = 0.5
    target_size: int = 128
    input_size: int = 128
    stem_channels: int = 32
    channels: str = "32,64,128,256"
    bottleneck_convs: int = 4
    head_hidden: int = 200
    pretext_lr: float = 5e-4
    pretext_batch_size: int = 16
    pretext_epochs: int = 30
    downstream_lr: float = 0.5
    downstream_batch_size: int = 8
    downstream_epochs: int = 50
    transfer_levels: int = 29
    clip_norm: float = 0.0
    split_ratio: float = 0.8
    perplexity: float = 30.0
    tsne_iterations: int = 1000
    tsne_lr: float = 200.0
    early_exaggeration: float = 12.0
    layer: str = "gmp"
    synthetic: str = "0"
    sicap_dir: str = ""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; usage errors are 1 here
        raise UsageError(message)


def _field_types() -> dict[str, type]:
    # annotations are strings under `from __future__ import annotations`
    lookup = {"int": int, "float": float, "str": str}
    return {f.name: lookup[str(f.type)] if not isinstance(f.type, type) else f.type
            for f in fields(RunConfig)}


def _add_config_flags(sub: argparse.ArgumentParser, names: list[str]) -> None:
    # default None marks "not given", so precedence flags > file > defaults works
    kinds = _field_types()
    for name in names:
        sub.add_argument(f"--{name.replace('_', '-')}", dest=name,
                         type=kinds[name], default=None)


_COMMON = ["seed", "input_size", "stem_channels", "channels", "bottleneck_convs",
           "head_hidden"]


def build_parser() -> _Parser:
    parser = _Parser(prog="sslgrader",
                     description="Self-supervised grading pipeline over image patches.")
    parser.add_argument("--out-base", default="runs", help="directory holding run dirs")
    parser.add_argument("--config", default=None, help="flat JSON config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate labeled synthetic patches")
    p.add_argument("--per-class", default="8",
                   help="patch count per class, one int or 4 comma-separated")
    _add_config_flags(p, ["seed", "target_size"])

    p = sub.add_parser("patchify", help="cut large images into resized windows")
    p.add_argument("--input", required=True, help="image file or directory")
    _add_config_flags(p, ["seed", "patch_size", "overlap", "target_size"])

    p = sub.add_parser("split", help="assign stratified train/val splits")
    p.add_argument("--manifest", required=True)
    _add_config_flags(p, ["seed", "split_ratio"])

    p = sub.add_parser("pretrain", help="fit the autoencoder on patches")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="auto",
                   help="train|val|test|all|auto (train when assigned, else all)")
    _add_config_flags(p, _COMMON + ["pretext_lr", "pretext_batch_size", "pretext_epochs"])

    p = sub.add_parser("transfer", help="seed a classifier from autoencoder weights")
    p.add_argument("--checkpoint", required=True, help="autoencoder checkpoint")
    _add_config_flags(p, _COMMON + ["transfer_levels"])

    p = sub.add_parser("finetune", help="train the classifier end to end")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True, help="classifier checkpoint to start from")
    _add_config_flags(p, _COMMON + ["downstream_lr", "downstream_batch_size",
                                    "downstream_epochs", "clip_norm"])

    p = sub.add_parser("eval", help="metrics report for a trained classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    _add_config_flags(p, _COMMON)

    p = sub.add_parser("embed", help="2-d t-SNE of extracted features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    _add_config_flags(p, _COMMON + ["layer", "perplexity", "tsne_iterations",
                                    "tsne_lr", "early_exaggeration"])

    p = sub.add_parser("pipeline", help="run every stage in one directory")
    p.add_argument("--synthetic", dest="synthetic", default=None,
                   help="per-class synthetic patch count (enables synthetic mode)")
    p.add_argument("--sicap-dir", dest="sicap_dir", default=None,
                   help="root of a pre-extracted labeled patch dataset")
    _add_config_flags(p, [f.name for f in fields(RunConfig)
                          if f.name not in ("synthetic", "sicap_dir")])
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, then the config file, then explicit flags."""
    merged = asdict(RunConfig())
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise DataError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        unknown = set(file_cfg) - set(merged)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for field in fields(RunConfig):
        value = getattr(args, field.name, None)
        if value is not None:
            merged[field.name] = value
    kinds = _field_types()
    try:
        return RunConfig(**{name: kinds[name](value) for name, value in merged.items()})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config value: {exc}") from exc


def make_run_dir(base: str | Path, command: str, seed: int) -> Path:
    root = Path(base)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    candidate = root / f"{command}-{stamp}-s{seed}"
    bump = 0
    while candidate.exists():
        bump += 1
        candidate = root / f"{command}-{stamp}-s{seed}-{bump}"
    candidate.mkdir(parents=True)
    return candidate


def _start_run(args, cfg: RunConfig) -> tuple[Path, logging.Handler]:
    run_dir = make_run_dir(args.out_base, args.command, cfg.seed)
    (run_dir / "config.json").write_text(
        json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    handler = logging.FileHandler(run_dir / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    pkg_logger = logging.getLogger("sslgrader")
    pkg_logger.addHandler(handler)
    pkg_logger.setLevel(logging.INFO)
    log.info("run %s: %s", args.command, run_dir)
    return run_dir, handler


def _parse_counts(text: str) -> tuple[int, int, int, int]:
    parts = [p.strip() for p in str(text).split(",")]
    try:
        if len(parts) == 1:
            return (int(parts[0]),) * 4
        if len(parts) == 4:
            return tuple(int(p) for p in parts)  # type: ignore[return-value]
    except ValueError:
        pass
    raise UsageError(f"expected one or four integers, got {text!r}")


def _channels(cfg: RunConfig) -> tuple[int, ...]:
    try:
        chans = tuple(int(c) for c in cfg.channels.split(","))
    except ValueError:
        raise UsageError(f"channels must be comma-separated ints, got {cfg.channels!r}")
    if not chans:
        raise UsageError("channels must be non-empty")
    return chans


def _arch(cfg: RunConfig, seed: int):
    from .model import CaeConfig

    chans = _channels(cfg)
    return CaeConfig(
        input=(3, cfg.input_size, cfg.input_size),
        stem_channels=cfg.stem_channels,
        block_channels=chans,
        bottleneck_channels=chans[-1],
        bottleneck_convs=cfg.bottleneck_convs,
        seed=seed,
    )


def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _load_split(manifest, split: str, size: int):
    from .data import load_patches, read_manifest

    records = read_manifest(_require(manifest, "manifest"))
    if not records:
        raise DataError(f"manifest {manifest} is empty")
    if split == "auto":
        split = "train" if any(r.split == "train" for r in records) else "all"
    if split != "all":
        records = [r for r in records if r.split == split]
        if not records:
            raise DataError(f"manifest {manifest} has no records with split {split!r}")
    patches, labels = load_patches(records, size=size)
    return records, patches, labels


# ---------------------------------------------------------------------------
# stage bodies (shared between single commands and the pipeline)


def _stage_synth(cfg: RunConfig, counts, out_dir: Path, seed: int) -> Path:
    from .data import synth_generate, write_manifest

    records = synth_generate(counts, seed, out_dir / "patches", size=cfg.target_size)
    manifest = out_dir / "manifest.csv"
    write_manifest(records, manifest)
    log.info("synthesized %d patches into %s", len(records), out_dir)
    return manifest


def _stage_split(cfg: RunConfig, manifest: Path, out_dir: Path, seed: int) -> Path:
    from .data import read_manifest, write_manifest
    from .train import split_dataset

    records = read_manifest(_require(manifest, "manifest"))
    held_out = [r for r in records if r.split == "test"]
    train, val = split_dataset([r for r in records if r.split != "test"],
                               ratio=cfg.split_ratio, seed=seed)
    out = out_dir / "manifest.csv"
    write_manifest(train + val + held_out, out)
    log.info("split %d train / %d val / %d test", len(train), len(val), len(held_out))
    return out


def _stage_pretrain(cfg: RunConfig, manifest, split: str, out_dir: Path, seed: int) -> Path:
    from .model import build_cae
    from .train import PretextConfig, pretrain, write_history

    _, patches, _ = _load_split(manifest, split, cfg.input_size)
    cae = build_cae(_arch(cfg, seed))
    tcfg = PretextConfig(learning_rate=cfg.pretext_lr, batch_size=cfg.pretext_batch_size,
                         epochs=cfg.pretext_epochs, seed=seed)
    ckpt = out_dir / "cae.ckpt"
    history = pretrain(cae, patches, tcfg, checkpoint_path=ckpt)
    write_history(history, out_dir / "history.csv")
    if history:
        log.info("pretrained %d epochs, final loss %.6f", len(history),
                 history[-1]["train_loss"])
    return ckpt


def _stage_transfer(cfg: RunConfig, checkpoint, out_dir: Path, seed: int) -> Path:
    from .model import build_cae, build_classifier, load_checkpoint, save_checkpoint, transfer_prefix

    arch = _arch(cfg, seed)
    trained = build_cae(arch)
    load_checkpoint(trained, _require(checkpoint, "checkpoint"))
    classifier = build_classifier(build_cae(arch), hidden=cfg.head_hidden, seed=seed)
    copied = transfer_prefix(trained, classifier, cfg.transfer_levels)
    ckpt = out_dir / "classifier-init.ckpt"
    save_checkpoint(classifier, ckpt)
    log.info("transferred %d parameterized levels of %d requested",
             copied, cfg.transfer_levels)
    return ckpt


def _stage_finetune(cfg: RunConfig, manifest, checkpoint, out_dir: Path, seed: int) -> Path:
    from .model import build_cae, build_classifier, load_checkpoint
    from .train import DownstreamConfig, finetune, write_history

    _, patches, labels = _load_split(manifest, "train", cfg.input_size)
    if labels is None:
        raise DataError("finetune needs labels on every training record")
    try:
        _, val_patches, val_labels = _load_split(manifest, "val", cfg.input_size)
    except DataError:
        val_patches = val_labels = None

    classifier = build_classifier(build_cae(_arch(cfg, seed)), hidden=cfg.head_hidden,
                                  seed=seed)
    load_checkpoint(classifier, _require(checkpoint, "checkpoint"))
    dcfg = DownstreamConfig(learning_rate=cfg.downstream_lr,
                            batch_size=cfg.downstream_batch_size,
                            epochs=cfg.downstream_epochs,
                            transfer_levels=cfg.transfer_levels, seed=seed,
                            clip_norm=cfg.clip_norm or None)
    ckpt = out_dir / "classifier.ckpt"
    history = finetune(classifier, patches, labels, dcfg,
                       val_patches=val_patches, val_labels=val_labels,
                       checkpoint_path=ckpt)
    write_history(history, out_dir / "history.csv")
    if history:
        log.info("finetuned %d epochs, train acc %.3f", len(history),
                 history[-1]["train_accuracy"])
    return ckpt


def _load_classifier(cfg: RunConfig, checkpoint, seed: int):
    from .model import build_cae, build_classifier, load_checkpoint

    classifier = build_classifier(build_cae(_arch(cfg, seed)), hidden=cfg.head_hidden,
                                  seed=seed)
    load_checkpoint(classifier, _require(checkpoint, "checkpoint"))
    return classifier


def _stage_eval(cfg: RunConfig, manifest, checkpoint, split: str, out_dir: Path,
                seed: int) -> Path:
    from .evaluate import confusion, predict, report

    _, patches, labels = _load_split(manifest, split, cfg.input_size)
    if labels is None:
        raise DataError("eval needs labels on every record")
    classifier = _load_classifier(cfg, checkpoint, seed)
    cm = confusion(labels, predict(classifier, patches))
    paths = report(cm, out_dir)
    log.info("metrics written to %s", paths["metrics"])
    return paths["metrics"]


def _stage_embed(cfg: RunConfig, manifest, checkpoint, split: str, out_dir: Path,
                 seed: int) -> Path:
    from .evaluate import TsneConfig, extract_features, tsne, write_embedding

    _, patches, labels = _load_split(manifest, split, cfg.input_size)
    classifier = _load_classifier(cfg, checkpoint, seed)
    features = extract_features(classifier, patches, layer=cfg.layer)
    tsne_cfg = TsneConfig(perplexity=cfg.perplexity, iterations=cfg.tsne_iterations,
                          learning_rate=cfg.tsne_lr,
                          early_exaggeration=cfg.early_exaggeration, seed=seed)
    coords, kl_history = tsne(features, tsne_cfg)
    paths = write_embedding(coords, labels, out_dir)
    with open(out_dir / "kl_history.csv", "w") as fh:
        fh.write("iteration,kl\n")
        for i, kl in enumerate(kl_history):
            fh.write(f"{i},{kl!r}\n")
    log.info("embedding written to %s", paths["embedding_csv"])
    return paths["embedding_csv"]


def _run_pipeline(cfg: RunConfig, run_dir: Path) -> None:
    counts = _parse_counts(cfg.synthetic)
    if sum(counts) > 0:
        data_dir = run_dir / "data"
        data_dir.mkdir()
        manifest = _stage_synth(cfg, counts, data_dir, cfg.seed)
    elif cfg.sicap_dir:
        from .data import ingest_sicap, write_manifest

        records = ingest_sicap(cfg.sicap_dir)
        if not records:
            raise DataError(f"no records ingested from {cfg.sicap_dir}")
        data_dir = run_dir / "data"
        data_dir.mkdir()
        manifest = data_dir / "manifest.csv"
        write_manifest(records, manifest)
    else:
        raise UsageError("pipeline needs --synthetic N or --sicap-dir PATH")

    # fixed per-stage seed offsets keep stages independently reproducible
    stage_dirs = {name: run_dir / name for name in
                  ("split", "pretrain", "transfer", "finetune", "eval", "embed")}
    for d in stage_dirs.values():
        d.mkdir()
    manifest = _stage_split(cfg, manifest, stage_dirs["split"], cfg.seed + 1)
    cae_ckpt = _stage_pretrain(cfg, manifest, "train", stage_dirs["pretrain"], cfg.seed + 2)
    init_ckpt = _stage_transfer(cfg, cae_ckpt, stage_dirs["transfer"], cfg.seed + 3)
    clf_ckpt = _stage_finetune(cfg, manifest, init_ckpt, stage_dirs["finetune"], cfg.seed + 4)
    _stage_eval(cfg, manifest, clf_ckpt, "val", stage_dirs["eval"], cfg.seed + 5)
    _stage_embed(cfg, manifest, clf_ckpt, "val", stage_dirs["embed"], cfg.seed + 6)


def _stage_patchify(cfg: RunConfig, input_path, out_dir: Path) -> Path:
    from .data import PatchParams, patchify, read_image, write_manifest

    src = _require(input_path, "input")
    files = sorted(p for p in src.rglob("*") if p.is_file()) if src.is_dir() else [src]
    params = PatchParams(patch_size=cfg.patch_size, overlap=cfg.overlap,
                         target_size=cfg.target_size)
    records = []
    for path in files:
        try:
            image = read_image(path)
        except Exception as exc:
            log.warning("skipping unreadable image %s (%s)", path, exc)
            continue
        recs, _ = patchify(image, params, source_id=path.stem,
                           out_dir=out_dir / "patches")
        records.extend(recs)
    if not records:
        raise DataError(f"no patches produced from {src}")
    manifest = out_dir / "manifest.csv"
    write_manifest(records, manifest)
    log.info("wrote %d patches from %d images", len(records), len(files))
    return manifest


def _dispatch(args, cfg: RunConfig, run_dir: Path) -> None:
    if args.command == "synth-data":
        _stage_synth(cfg, _parse_counts(args.per_class), run_dir, cfg.seed)
    elif args.command == "patchify":
        _stage_patchify(cfg, args.input, run_dir)
    elif args.command == "split":
        _stage_split(cfg, Path(args.manifest), run_dir, cfg.seed)
    elif args.command == "pretrain":
        _stage_pretrain(cfg, args.manifest, args.split, run_dir, cfg.seed)
    elif args.command == "transfer":
        _stage_transfer(cfg, args.checkpoint, run_dir, cfg.seed)
    elif args.command == "finetune":
        _stage_finetune(cfg, args.manifest, args.checkpoint, run_dir, cfg.seed)
    elif args.command == "eval":
        _stage_eval(cfg, args.manifest, args.checkpoint, args.split, run_dir, cfg.seed)
    elif args.command == "embed":
        _stage_embed(cfg, args.manifest, args.checkpoint, args.split, run_dir, cfg.seed)
    elif args.command == "pipeline":
        _run_pipeline(cfg, run_dir)
    else:  # unreachable: argparse requires a known subcommand
        raise UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    _cap_threads()
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = None
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        run_dir, handler = _start_run(args, cfg)
        _dispatch(args, cfg, run_dir)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    finally:
        if handler is not None:
            logging.getLogger("sslgrader").removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
