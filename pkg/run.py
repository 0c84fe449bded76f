import argparse
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from core.denoiser import Denoiser
from core.diffusion import SamplerConfig, repaint_densify, sample
from core.errors import ConfigError, DataError, EqDiffError
from core.metrics import (
    MetricReport,
    feature_statistics,
    frechet_distance,
    jsd,
    masked_error,
    mmd,
    occupancy_histogram,
)
from core.params import load_array
from core.range_codec import (
    MASK_KINDS,
    RangeImage,
    bev_rasterize,
    export_depth_png,
    load_range_image,
    make_mask,
    project,
    read_scan_bin,
    save_range_image,
    unproject,
    write_scan_bin,
)
from core.text import (
    embed_text,
    load_pairs,
    load_rules,
    make_provider,
    normalize_caption,
    token_frequencies,
    write_frequency_report,
    write_pairs,
)
from core.trainer import Trainer, TrainingExample
from utils.config import RunConfig
from utils.experiment import ExperimentDir, range_image_stems, setup_logging

logger = logging.getLogger("EqDiff")


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors map to exit code 1."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def run_jobs(fn, items, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def text_embedding(config: RunConfig, caption: str, dim: int) -> Optional[np.ndarray]:
    if not caption:
        return None
    options = config.text_options()
    rules = load_rules(options["rules"] or None)
    provider = make_provider(options["provider"], options["dim"], options["seed"], options["bank"] or None)
    embedding = embed_text(normalize_caption(caption, rules), provider)
    if embedding.vector.shape[0] != dim:
        raise ConfigError(f"text embeddings have {embedding.vector.shape[0]} values but the denoiser expects {dim}")
    return embedding.vector


def cmd_project(args, config: RunConfig) -> int:
    sensor = config.sensor_config()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def convert(path: str) -> Optional[str]:
        try:
            image = project(read_scan_bin(path), sensor)
            stem = out / Path(path).stem
            save_range_image(image, stem, meta={"source": str(path)})
            if args.png:
                export_depth_png(image, f"{stem}.png")
            logger.info(f"Projected {path}: {int(image.valid.sum())} valid pixels")
            return None
        except EqDiffError as e:
            logger.error(f"Error projecting {path}: {e}")
            return f"{path}: {e}"

    failures = [f for f in run_jobs(convert, list(args.scans), args.jobs) if f]
    for failure in failures:
        print(failure, file=sys.stderr)
    return DataError.exit_code if failures else 0


def cmd_unproject(args, config: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def convert(stem: Path) -> None:
        cloud = unproject(load_range_image(stem))
        write_scan_bin(cloud, out / f"{stem.name}.bin")
        logger.info(f"Unprojected {stem.name}: {len(cloud)} points")

    run_jobs(convert, range_image_stems(args.artifacts), args.jobs)
    return 0


def apply_ablation_flags(args, config: RunConfig) -> None:
    for flag in ("ea", "rea", "cei", "fm"):
        if getattr(args, f"no_{flag}", False):
            config.set("denoiser", f"use_{flag}", False)
    if getattr(args, "d_layers", None):
        config.set("denoiser", "decoder_layers", args.d_layers)


def load_training_set(args, config: RunConfig, text_dim: int) -> list[TrainingExample]:
    stems = range_image_stems(args.dataset)
    if not stems:
        raise DataError(f"no range images found in {args.dataset}")
    captions = None
    if args.captions:
        options = config.text_options()
        rules = load_rules(options["rules"] or None)
        captions = load_pairs(args.captions, rules).by_frame()
        provider = make_provider(options["provider"], options["dim"], options["seed"], options["bank"] or None)
    examples = []
    for stem in stems:
        text = None
        if captions is not None:
            if stem.name not in captions:
                raise DataError(f"frame {stem.name} has no caption in {args.captions}")
            text = embed_text(captions[stem.name].normalized, provider).vector
            if text.shape[0] != text_dim:
                raise ConfigError(f"text embeddings have {text.shape[0]} values but the denoiser expects {text_dim}")
        examples.append(TrainingExample(stem.name, load_range_image(stem).channels(), text))
    return examples


def cmd_train(args, config: RunConfig) -> int:
    if args.steps is not None:
        config.set("training", "steps", args.steps)
    apply_ablation_flags(args, config)
    experiment = ExperimentDir(args.out)
    experiment.write_manifest(config, "train", {"dataset": args.dataset, "captions": args.captions})
    denoiser_config = config.denoiser_config()
    options = config.training_options()
    model = Denoiser(denoiser_config, config.sensor_config(), seed=options.seed)
    examples = load_training_set(args, config, denoiser_config.text_dim)
    trainer = Trainer(model, options, experiment.loss_log, str(experiment.checkpoints), config.hash())
    history = trainer.fit(examples)
    report = MetricReport(config={"steps": options.steps, "images": len(examples)})
    if history:
        report.add("final_loss", history[-1])
    report.add("parameter_count", model.parameter_count())
    report.save(experiment.reports / "train_report.json")
    return 0


def cmd_sample(args, config: RunConfig) -> int:
    if args.steps is not None:
        config.set("sampler", "steps", args.steps)
    experiment = ExperimentDir(args.out)
    experiment.write_manifest(config, "sample", {"checkpoint": args.checkpoint, "count": args.count, "caption": args.caption})
    if args.count <= 0:
        logger.info("Nothing to sample")
        return 0
    model = Denoiser.load(args.checkpoint)
    caption = args.caption if args.caption is not None else config.get("sampler", "caption")
    text = text_embedding(config, caption, model.config.text_dim)
    base = config.sampler_config(text)
    threshold = config.get("sampler", "ray_drop_threshold")
    shape = (model.sensor.height, model.sensor.width, 2)

    def generate(index: int) -> float:
        started = time.perf_counter()
        cfg = SamplerConfig(steps=base.steps, seed=base.seed + index, text=text, resample_n=base.resample_n)
        image = RangeImage.from_channels(sample(model, cfg, shape), model.sensor, ray_drop_threshold=threshold)
        stem = experiment.samples / f"sample_{index:04d}"
        save_range_image(image, stem, meta={"seed": cfg.seed, "caption": caption})
        write_scan_bin(unproject(image), f"{stem}.bin")
        if args.png:
            export_depth_png(image, f"{stem}.png")
        elapsed = time.perf_counter() - started
        logger.info(f"Sample {index} (seed {cfg.seed}) done in {elapsed:.2f} s")
        return elapsed

    timings = run_jobs(generate, list(range(args.count)), args.jobs)
    report = MetricReport(
        config={"checkpoint": str(args.checkpoint), "count": args.count, "steps": base.steps, "caption": caption}
    )
    report.add("parameter_count", model.parameter_count())
    report.add("seconds_per_sample", float(np.mean(timings)))
    report.save(experiment.reports / "sample_report.json")
    return 0


def cmd_densify(args, config: RunConfig) -> int:
    if args.steps is not None:
        config.set("sampler", "steps", args.steps)
    experiment = ExperimentDir(args.out)
    experiment.write_manifest(config, "densify", {"checkpoint": args.checkpoint, "input": args.input, "mask": args.mask})
    model = Denoiser.load(args.checkpoint)
    known = load_range_image(args.input)
    if known.shape != (model.sensor.height, model.sensor.width):
        raise DataError(f"input {args.input} is {known.shape}, the checkpoint expects {model.sensor.height}x{model.sensor.width}")
    mask = make_mask(args.mask, known.config, args.mask_seed, valid=known.valid)
    caption = args.caption if args.caption is not None else config.get("sampler", "caption")
    cfg = config.sampler_config(text_embedding(config, caption, model.config.text_dim))
    dense = repaint_densify(model, known.channels(), mask, cfg)
    threshold = config.get("sampler", "ray_drop_threshold")
    valid = np.where(mask, known.valid, dense[..., 0] > threshold)
    result = RangeImage.from_channels(dense, known.config, valid=valid)
    stem = experiment.samples / f"densified_{Path(args.input).name}"
    save_range_image(result, stem, meta={"mask": args.mask, "seed": cfg.seed})

    report = MetricReport(config={"mask": args.mask, "known_pixels": int(mask.sum()), "steps": cfg.steps})
    if args.truth:
        errors = masked_error(result, load_range_image(args.truth), ~mask)
        for channel, values in errors.items():
            for name, value in values.items():
                report.add(f"{channel}_{name}", value)
    report.save(experiment.reports / "densify_report.json")
    return 0


def cmd_eval(args, config: RunConfig) -> int:
    options = config.metric_options()
    n, extent = options["bev_size"], options["bev_extent"]

    def grids(directory):
        stems = range_image_stems(directory)
        if not stems:
            raise DataError(f"no range images found in {directory}")
        return [bev_rasterize(unproject(load_range_image(stem)), n, extent) for stem in stems]

    gen, ref = grids(args.generated), grids(args.reference)
    report = MetricReport(
        config={
            "bev_size": n,
            "bev_extent_m": extent,
            "jsd_log_base": "e",
            "jsd_histogram": "counts summed over each set, normalized once",
            "mmd_distance": "squared L2 between per-grid occupancy probabilities",
            "generated_count": len(gen),
            "reference_count": len(ref),
        }
    )
    report.add("jsd", jsd(occupancy_histogram(gen), occupancy_histogram(ref)))
    report.add("mmd", mmd(gen, ref))
    if args.gen_features and args.ref_features:
        mu1, sigma1 = feature_statistics(load_array(args.gen_features)[0])
        mu2, sigma2 = feature_statistics(load_array(args.ref_features)[0])
        report.add("frechet", frechet_distance(mu1, sigma1, mu2, sigma2))
    if args.out:
        report.save(args.out)
    print(report.to_json())
    return 0


def cmd_normalize_text(args, config: RunConfig) -> int:
    rules = load_rules(args.rules or config.get("text", "rules") or None)
    manifest = load_pairs(args.input, rules)
    write_pairs(manifest, args.output)
    report = args.report or f"{args.output}.tokens.tsv"
    write_frequency_report(token_frequencies(manifest), report)
    logger.info(f"Normalized {len(manifest)} captions ({manifest.duplicates} duplicate ids) into {args.output}")
    return 0


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="eqdiff", description="Equirectangular LiDAR diffusion toolkit")
    parser.add_argument("--config", help="run configuration file (key = value sections)")
    parser.add_argument("--verbose", action="store_true", help="also log to the console")
    parser.add_argument("--jobs", type=int, default=1, help="parallel batch items")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("project", help="convert .bin scans to range-image artifacts")
    p.add_argument("scans", nargs="*")
    p.add_argument("--out", required=True)
    p.add_argument("--png", action="store_true")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("unproject", help="convert range-image artifacts back to .bin scans")
    p.add_argument("artifacts")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_unproject)

    p = sub.add_parser("train", help="train a denoiser on a directory of range images")
    p.add_argument("dataset")
    p.add_argument("--captions")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    for flag in ("ea", "rea", "cei", "fm"):
        p.add_argument(f"--no-{flag}", action="store_true")
    p.add_argument("--d-layers", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate range images from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--caption")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--png", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("densify", help="complete a sparse range image")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("--mask", required=True, choices=MASK_KINDS)
    p.add_argument("--mask-seed", type=int, default=0)
    p.add_argument("--truth")
    p.add_argument("--caption")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_densify)

    p = sub.add_parser("eval", help="compare generated and reference range images")
    p.add_argument("generated")
    p.add_argument("reference")
    p.add_argument("--out")
    p.add_argument("--gen-features")
    p.add_argument("--ref-features")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("normalize-text", help="normalize a caption manifest")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--rules")
    p.add_argument("--report")
    p.set_defaults(func=cmd_normalize_text)
    return parser


def log_file_for(args) -> str:
    if args.command in ("train", "sample", "densify"):
        return str(Path(args.out) / "logs" / "run.log")
    return "eqdiff.log"


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        print(e, file=sys.stderr)
        return e.exit_code
    setup_logging(log_file_for(args), args.verbose)
    try:
        config = RunConfig(args.config)
        return args.func(args, config)
    except EqDiffError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
