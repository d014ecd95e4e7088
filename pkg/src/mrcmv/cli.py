"""Command line entry point: ``mrcmv synth | train | eval | retrieve | verify``.

Exit codes: 0 success, 1 verification failure, 2 usage or input error,
3 numerical divergence.  Every command prints its resolved configuration to
stderr before doing any work.
"""
from __future__ import annotations

import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import click
import numpy as np

from .data import (
    FeatureFileError,
    SyntheticSpec,
    VideoStreams,
    eval_clip,
    generate_synthetic,
    load_dataset,
    load_features,
    resample_indices,
    split_dataset,
)
from .losses import LossConfig
from .model import (
    CheckpointMismatchError,
    EmbeddingRecord,
    ModelConfig,
    embed_catalog,
    joint_embed,
    load_checkpoint,
    save_checkpoint,
)
from .retrieval import DEFAULT_KS, EmbeddingIndex, evaluate, rank_candidates
from .trainer import DivergenceError, TrainConfig, init_parameters, train, write_report
from .verify import run_gradcheck_suite, run_oracle_suite

EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3


@dataclass
class DataConfig:
    train_fraction: float = 0.75
    # None: derive the split from the run seed
    split_seed: int | None = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "data": asdict(self.data), "seed": self.seed}


def _merge(section: dict, overrides: dict) -> dict:
    out = dict(section)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def resolve_config(config_file: str | None, model: dict, train: dict, loss: dict, data: dict, seed: int | None) -> RunConfig:
    """Paper defaults, then the JSON file, then flags; invariant violations are usage errors."""
    raw = json.loads(Path(config_file).read_text()) if config_file else {}
    unknown = set(raw) - {"model", "train", "data", "seed"}
    if unknown:
        raise click.UsageError(f"unknown config sections: {sorted(unknown)}")
    train_raw = dict(raw.get("train", {}))
    loss_raw = _merge(train_raw.pop("loss", {}), loss)
    seed = seed if seed is not None else raw.get("seed", 0)
    try:
        loss_cfg = LossConfig(**loss_raw)
        train_cfg = TrainConfig(**_merge(train_raw, train), loss=loss_cfg)
        if train.get("seed") is None and "seed" not in train_raw:
            train_cfg.seed = seed
        model_cfg = ModelConfig(**_merge(raw.get("model", {}), model))
        data_cfg = DataConfig(**_merge(raw.get("data", {}), data))
    except (TypeError, ValueError) as exc:
        raise click.UsageError(f"invalid configuration: {exc}") from exc
    if not 0 < data_cfg.train_fraction < 1:
        raise click.UsageError("data.train_fraction must be in (0, 1)")
    return RunConfig(model_cfg, train_cfg, data_cfg, seed)


def banner(payload: dict) -> None:
    click.echo("# resolved config: " + json.dumps(payload, sort_keys=True), err=True)


def fail(message: str, code: int = EXIT_USAGE):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def check_data_depths(cfg: ModelConfig, videos: list[VideoStreams]) -> None:
    want = {"video_fast": ("video_merge.w", cfg.d_fast), "video_slow": ("video_merge.w", cfg.d_slow),
            "voiceover": ("voiceover_proj.w", cfg.d_vo), "bgm": ("bgm_proj.w", cfg.d_bgm)}
    problems = []
    for stream, (param, depth) in want.items():
        got = {v.streams[stream].shape[1] for v in videos}
        if got != {depth}:
            problems.append(f"{param}: expects {stream} depth {depth}, data has {sorted(got)}")
    if problems:
        raise CheckpointMismatchError(problems)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log per-epoch progress.")
def main(verbose: bool) -> None:
    """Cross-modal background-music retrieval from video and voice-over features."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


@main.command("synth")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--videos", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--latent-dim", type=click.IntRange(min=1), default=8, show_default=True)
@click.option("--noise-std", type=click.FloatRange(min=0.0), default=0.1, show_default=True)
@click.option("--d-fast", type=click.IntRange(min=1), default=16, show_default=True)
@click.option("--d-slow", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--d-vo", type=click.IntRange(min=1), default=32, show_default=True)
@click.option("--d-bgm", type=click.IntRange(min=1), default=32, show_default=True)
@click.option("--min-duration", type=click.FloatRange(min=0.0, min_open=True), default=20.0, show_default=True)
@click.option("--max-duration", type=click.FloatRange(min=0.0, min_open=True), default=60.0, show_default=True)
def cmd_synth(out_dir, videos, seed, latent_dim, noise_std, d_fast, d_slow, d_vo, d_bgm, min_duration, max_duration):
    """Generate a synthetic correlated-feature corpus."""
    try:
        spec = SyntheticSpec(
            n_videos=videos, latent_dim=latent_dim, noise_std=noise_std, d_fast=d_fast, d_slow=d_slow,
            d_vo=d_vo, d_bgm=d_bgm, duration_range=(min_duration, max_duration), seed=seed,
        )
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    banner({"synthetic": asdict(spec)})
    ds = generate_synthetic(spec, out_dir)
    durations = [e.duration_s for e in ds.entries]
    click.echo(
        f"wrote {len(ds.entries)} videos to {ds.root} "
        f"(durations {min(durations):.2f}-{max(durations):.2f} s, "
        f"{sum(d < 32 for d in durations)} shorter than one clip)"
    )


def _load_videos(data_dir) -> list[VideoStreams]:
    try:
        videos = load_dataset(data_dir)
    except (OSError, FeatureFileError, ValueError, KeyError) as exc:
        fail(f"cannot load dataset {data_dir}: {exc}")
    if not videos:
        fail(f"dataset {data_dir} is empty")
    return videos


@main.command("train")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--epochs", type=click.IntRange(min=0))
@click.option("--seed", type=int)
@click.option("--lr", "learning_rate", type=click.FloatRange(min=0.0, min_open=True))
@click.option("--momentum", type=float)
@click.option("--batch-pairs", type=int)
@click.option("--margin-scale", type=float, help="Multiplier on the margin schedule (0.01 for unit-sphere runs).")
@click.option("--lambda", "lam", type=float, help="Weight of the pseudo-label loss.")
@click.option("--train-fraction", type=float)
@click.option("--checkpoint-every", type=click.IntRange(min=0))
def cmd_train(data_dir, out_dir, config_file, epochs, seed, learning_rate, momentum, batch_pairs, margin_scale,
              lam, train_fraction, checkpoint_every):
    """Train both branches and write a checkpoint plus a JSON report."""
    run = resolve_config(
        config_file,
        model={},
        train={"epochs": epochs, "learning_rate": learning_rate, "momentum": momentum,
               "batch_pairs": batch_pairs, "checkpoint_every": checkpoint_every, "seed": seed},
        loss={"margin_scale": margin_scale, "lam": lam},
        data={"train_fraction": train_fraction},
        seed=seed,
    )
    videos = _load_videos(data_dir)
    try:
        split_seed = run.seed if run.data.split_seed is None else run.data.split_seed
        train_set, test_set = split_dataset(videos, run.data.train_fraction, split_seed)
    except ValueError as exc:
        fail(str(exc))
    n_labels = max(2, len(train_set) * run.train.clips_per_video)
    run.model = ModelConfig(**{**run.model.to_dict(), "n_labels": n_labels})
    banner(run.to_dict())
    try:
        check_data_depths(run.model, videos)
    except CheckpointMismatchError as exc:
        fail(str(exc))
    params = init_parameters(run.model, run.train.seed)
    header = {
        "run": run.to_dict(),
        "train_ids": [v.id for v in train_set],
        "test_ids": [v.id for v in test_set],
    }
    try:
        report = train(train_set, params, run.train, out_dir=out_dir, header=header)
    except DivergenceError as exc:
        fail(f"training diverged: {exc}", EXIT_DIVERGED)
    except ValueError as exc:
        fail(str(exc))
    write_report(Path(out_dir) / "report.json", report)
    last = report.epochs[-1] if report.epochs else None
    summary = {"checkpoint": report.checkpoint_path, "epochs": len(report.epochs),
               "final_loss": last.loss if last else None, "loss_trace_digest": report.digest()}
    click.echo(json.dumps(summary, sort_keys=True))


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError as exc:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}") from exc
    if not ks or min(ks) < 1:
        raise click.BadParameter("K values must be positive integers")
    return ks


def _load_params(checkpoint):
    try:
        return load_checkpoint(checkpoint)
    except CheckpointMismatchError as exc:
        fail(f"checkpoint {checkpoint} does not match its configuration: {exc}")
    except (OSError, KeyError, ValueError) as exc:
        fail(f"cannot load checkpoint {checkpoint}: {exc}")


@main.command("eval")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--checkpoint", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--ks", default=",".join(map(str, DEFAULT_KS)), show_default=True)
@click.option("--split", type=click.Choice(["auto", "test", "all"]), default="auto", show_default=True,
              help="auto uses the checkpoint's held-out ids when it has them.")
@click.option("--out", "out_file", type=click.Path(dir_okay=False), help="Also write the JSON report here.")
def cmd_eval(data_dir, checkpoint, ks, split, out_file):
    """Recall@K and mean-feature distance of top-1 retrievals."""
    ks = _parse_ks(ks)
    params, header = _load_params(checkpoint)
    videos = _load_videos(data_dir)
    test_ids = header.get("test_ids")
    if split == "test" and not test_ids:
        fail("checkpoint records no test split; use --split all")
    if split in ("auto", "test") and test_ids:
        by_id = {v.id: v for v in videos}
        missing = [i for i in test_ids if i not in by_id]
        if missing:
            fail(f"{len(missing)} test ids missing from {data_dir}, e.g. {missing[:3]}")
        videos = [by_id[i] for i in test_ids]
    banner({"model": params.config.to_dict(), "ks": ks, "checkpoint": str(checkpoint), "n_videos": len(videos)})
    try:
        check_data_depths(params.config, videos)
    except CheckpointMismatchError as exc:
        fail(str(exc))
    report = evaluate(videos, params, ks, checkpoint_id=header.get("checkpoint_id", str(checkpoint)))
    if out_file:
        Path(out_file).write_text(report.to_json() + "\n")
    click.echo(report.to_json())
    click.echo(report.table())


def _read_sequence(path, modality: str, length: int) -> np.ndarray:
    values = load_features(path, modality).values
    if values.shape[0] != length:
        values = values[resample_indices(values.shape[0], length)]
    return values


@main.command("retrieve")
@click.option("--checkpoint", required=True, type=click.Path(file_okay=False))
@click.option("--query-fast", required=True, type=click.Path(dir_okay=False))
@click.option("--query-slow", required=True, type=click.Path(dir_okay=False))
@click.option("--query-vo", required=True, type=click.Path(dir_okay=False))
@click.option("--catalog", required=True, type=click.Path(file_okay=False))
@click.option("--top", type=click.IntRange(min=1), default=10, show_default=True)
def cmd_retrieve(checkpoint, query_fast, query_slow, query_vo, catalog, top):
    """Rank catalog BGMs for one query; prints JSON lines.

    The catalog is either a dataset directory (its manifest's beginning
    clips are used) or a directory of BGM feature files named by id.
    Query files are whole clips, resampled to the model's sequence length.
    """
    for path in (checkpoint, query_fast, query_slow, query_vo, catalog):
        if not Path(path).exists():
            fail(f"no such file or directory: {path}")
    params, _ = _load_params(checkpoint)
    cfg = params.config
    banner({"model": cfg.to_dict(), "checkpoint": str(checkpoint), "catalog": str(catalog), "top": top})
    try:
        q = [_read_sequence(p, m, cfg.seq_len) for p, m in
             ((query_fast, "video_fast"), (query_slow, "video_slow"), (query_vo, "voiceover"))]
        catalog = Path(catalog)
        if (catalog / "manifest.jsonl").exists():
            videos = load_dataset(catalog)
            ids = [v.id for v in videos]
            bgms = [eval_clip(v, length=cfg.seq_len).bgm.values for v in videos]
        else:
            files = sorted(catalog.glob("*.mrcf"))
            if not files:
                fail(f"catalog {catalog} holds no .mrcf files")
            ids = [f.stem for f in files]
            bgms = [_read_sequence(f, "bgm", cfg.seq_len) for f in files]
        index = EmbeddingIndex(embed_catalog(bgms, params, ids=ids))
        vec = joint_embed(q[0], q[1], q[2], params).value[0]
    except (FeatureFileError, ValueError, OSError) as exc:
        fail(str(exc))
    result = rank_candidates(EmbeddingRecord("query", None, vec), index)
    for rank, (cid, score) in enumerate(result.top(top), 1):
        click.echo(json.dumps({"rank": rank, "id": cid, "score": score}))


@main.command("verify")
@click.option("--suite", type=click.Choice(["gradcheck", "oracles", "all"]), default="all", show_default=True)
@click.option("--seeds", type=click.IntRange(min=1), default=3, show_default=True,
              help="Random pipelines for the gradient check.")
@click.option("--instances", type=click.IntRange(min=1), default=100, show_default=True,
              help="Random instances per oracle comparison.")
def cmd_verify(suite, seeds, instances):
    """Run the gradient-check and naive-oracle suites."""
    banner({"suite": suite, "seeds": seeds, "instances": instances})
    results = []
    if suite in ("oracles", "all"):
        results += run_oracle_suite(instances)
    if suite in ("gradcheck", "all"):
        results += run_gradcheck_suite(seeds)
    for r in results:
        click.echo(r.line())
    failed = [r for r in results if not r.passed]
    click.echo(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        sys.exit(EXIT_VERIFY)


if __name__ == "__main__":
    main()
