"""Single command-line entry point for all flows.

Exit codes: 0 success, 1 validation/config error, 2 runtime failure.
Precedence for tunables is flags > environment (DRS_*) > config file.
Every artifact-writing run drops a metadata sidecar (<out>.meta.json) with
the config digest, seed, provider models and wall-clock timestamps; artifact
outputs themselves are byte-deterministic under mock providers and a fixed
seed.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from pathlib import Path
from typing import Any

import click

from . import curriculum, metrics, pipeline, provider, schema, spanmask


class ConfigInvalid(ValueError):
    pass


_TOP_KEYS = {
    "providers",
    "concurrency",
    "seed",
    "quotas",
    "tau",
    "base_epochs",
    "snapshot_every",
    "gt_context",
}
_CONCURRENCY_KEYS = {"workers", "judge_concurrency"}
_QUOTA_KEYS = {
    "hypersim_count",
    "hypersim_min_per_category",
    "hypersim_min_open_ended",
    "cityscapes_min",
    "cityscapes_max",
}

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".webp")


def load_config(path: str | Path | None) -> dict[str, Any]:
    """Parse and validate the JSON run config; unknown keys are rejected."""
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigInvalid("config must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigInvalid(f"unknown config key(s): {sorted(unknown)}")
    concurrency = raw.get("concurrency", {})
    if set(concurrency) - _CONCURRENCY_KEYS:
        raise ConfigInvalid(f"unknown concurrency key(s): {sorted(set(concurrency) - _CONCURRENCY_KEYS)}")
    if any(int(v) < 1 for v in concurrency.values()):
        raise ConfigInvalid("concurrency values must be positive")
    quotas = raw.get("quotas", {})
    if set(quotas) - _QUOTA_KEYS:
        raise ConfigInvalid(f"unknown quota key(s): {sorted(set(quotas) - _QUOTA_KEYS)}")
    tau = raw.get("tau")
    if tau is not None and not 0.0 < float(tau) <= 1.0:
        raise ConfigInvalid(f"tau must be in (0, 1], got {tau}")
    return raw


def _setting(flag: Any, env_name: str, config: dict[str, Any], key: str, default: Any, cast) -> Any:
    if flag is not None:
        return flag
    env = os.environ.get(env_name)
    if env is not None:
        return cast(env)
    if key in config:
        return cast(config[key])
    return default


def _config_digest(config: dict[str, Any]) -> str:
    canonical = json.dumps(config, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _write_metadata(
    out_path: Path,
    command: str,
    config: dict[str, Any],
    seed: int | None,
    handles: dict[provider.Role, provider.ProviderHandle] | None,
    started_at: float,
) -> None:
    meta = {
        "command": command,
        "argv": sys.argv[1:],
        "config_sha256": _config_digest(config),
        "seed": seed,
        "providers": {role.value: handle.model for role, handle in (handles or {}).items()},
        "started_at": started_at,
        "finished_at": time.time(),
    }
    meta_path = out_path.with_name(out_path.name + ".meta.json")
    meta_path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def _build_handles(config: dict[str, Any], config_path: str | None) -> dict[provider.Role, provider.ProviderHandle]:
    providers_cfg = config.get("providers", {})
    base_dir = Path(config_path).parent if config_path else Path(".")
    try:
        return provider.handles_from_config(providers_cfg, base_dir=base_dir)
    except ValueError as exc:
        raise ConfigInvalid(f"bad provider config: {exc}") from None


@click.group()
def cli() -> None:
    """Schema-constrained supervision, masks, curricula, dataset QC and evaluation."""


@cli.command("emit-masks")
@click.option("--samples", required=True, type=click.Path(exists=True), help="Benchmark sample JSONL with annotation fields.")
@click.option("--tokenizations", type=click.Path(exists=True), help="Tokenization JSONL: {sample_id, offsets}.")
@click.option("--ref-tokenizer", type=click.Choice(["chunk", "whitespace"]), default="chunk", show_default=True, help="Reference tokenizer used when no tokenization file is given.")
@click.option("--chunk-bytes", type=int, default=4, show_default=True, help="Chunk size for the chunk reference tokenizer.")
@click.option("--phases", default="1,2,3,4", show_default=True, help="Comma-separated phase numbers.")
@click.option("--out", required=True, type=click.Path(), help="Output mask-artifact JSONL.")
def emit_masks_cmd(samples, tokenizations, ref_tokenizer, chunk_bytes, phases, out):
    """Render targets and write per-phase mask artifacts."""
    started = time.time()
    try:
        phase_list = [int(p) for p in phases.split(",") if p.strip()]
    except ValueError:
        raise ConfigInvalid(f"bad --phases value: {phases}") from None
    loaded = schema.load_samples(samples)
    targets = []
    skipped = []
    for sample in loaded:
        if sample.annotation is None:
            skipped.append(sample.record.id)
            continue
        targets.append(spanmask.RenderedTarget.from_annotation(sample.record.id, sample.annotation))
    if tokenizations:
        tok_map = spanmask.load_tokenizations(tokenizations)
    elif ref_tokenizer == "chunk":
        tok_map = {t.sample_id: spanmask.chunk_tokenization(t.text, chunk_bytes) for t in targets}
    else:
        tok_map = {t.sample_id: spanmask.whitespace_tokenization(t.text) for t in targets}
    written, failures = spanmask.emit_artifacts(targets, tok_map, phase_list, out)
    click.echo(f"wrote {written} mask artifacts to {out}")
    for sample_id in skipped:
        click.echo(f"skipped {sample_id}: no annotation fields", err=True)
    for failure in failures:
        click.echo(f"failed {failure.sample_id} (phase {failure.phase}): {failure.reason}", err=True)
    _write_metadata(Path(out), "emit-masks", {}, None, None, started)


@cli.command("schedule")
@click.option("--plan", "plan_kind", type=click.Choice(["default", "ablation"]), default="default", show_default=True)
@click.option("--stages", help="Ordered stage list for ablation plans, e.g. S3,S4.")
@click.option("--seed", type=int, default=None, help="Root seed recorded in metadata.")
@click.option("--base-epochs", type=float, default=None, help="Base epochs multiplied into each phase.")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), help="Plan JSON path; stdout when omitted.")
def schedule_cmd(plan_kind, stages, seed, base_epochs, config_path, out):
    """Emit a training-phase plan (default or stage ablation)."""
    started = time.time()
    config = load_config(config_path)
    seed = _setting(seed, "DRS_SEED", config, "seed", 0, int)
    base_epochs = _setting(base_epochs, "DRS_BASE_EPOCHS", config, "base_epochs", 1.0, float)
    if plan_kind == "ablation":
        if not stages:
            raise ConfigInvalid("--plan ablation requires --stages")
        stage_list = [s.strip() for s in stages.split(",") if s.strip()]
        plan = curriculum.ablation_plan(stage_list)
    else:
        plan = curriculum.default_plan()
    body = json.dumps(plan.to_dict(base_epochs), indent=2) + "\n"
    if out:
        Path(out).write_text(body, encoding="utf-8")
        click.echo(f"wrote plan with {len(plan.phases)} phases to {out}")
        _write_metadata(Path(out), "schedule", config, seed, None, started)
    else:
        click.echo(body, nl=False)


@cli.command("evaluate")
@click.option("--predictions", required=True, type=click.Path(exists=True))
@click.option("--records", "records_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--tau", type=float, default=None, help="Scene-graph soft-match threshold.")
@click.option("--out", type=click.Path(), help="Report JSON path.")
@click.option("--table/--no-table", default=True, show_default=True, help="Print the rendered tables.")
@click.option("--name", default="model", show_default=True, help="Row label in rendered tables.")
def evaluate_cmd(predictions, records_path, config_path, tau, out, table, name):
    """Score a predictions file against benchmark records."""
    started = time.time()
    config = load_config(config_path)
    tau = _setting(tau, "DRS_TAU", config, "tau", 0.5, float)
    handles = _build_handles(config, config_path)
    judge = handles.get(provider.Role.JUDGE_LLM)
    preds = metrics.load_predictions(predictions)
    samples = schema.load_samples(records_path)
    concurrency = int(config.get("concurrency", {}).get("judge_concurrency", 8))
    report = metrics.aggregate(preds, samples, judge, tau=tau, judge_concurrency=concurrency)
    if table:
        click.echo(metrics.render_report(report, name=name))
    if out:
        Path(out).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
        click.echo(f"wrote report to {out}")
        _write_metadata(Path(out), "evaluate", config, config.get("seed"), handles, started)


@cli.command("build-dataset")
@click.option("--source", type=click.Choice(["hypersim", "cityscapes"]), required=True)
@click.option("--images", "images_dir", required=True, type=click.Path(exists=True), help="Directory of scene images.")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--state", "state_path", required=True, type=click.Path(), help="Transition-log JSONL path.")
@click.option("--resume", is_flag=True, help="Continue an existing state log.")
def build_dataset_cmd(source, images_dir, config_path, state_path, resume):
    """Run generation and all quality-control steps over a directory of images."""
    started = time.time()
    config = load_config(config_path)
    state = Path(state_path)
    if state.exists() and not resume:
        raise ConfigInvalid(f"state log {state} exists; pass --resume to continue it")
    handles = _build_handles(config, config_path)
    all_mock = bool(handles) and all(h.is_mock for h in handles.values())
    clock = pipeline.LogicalClock() if all_mock else None
    store = pipeline.StateStore(
        state,
        snapshot_path=state.with_suffix(".snapshot.jsonl"),
        snapshot_every=int(config.get("snapshot_every", 0)),
        clock=clock,
    )
    quotas = config.get("quotas", {})
    runner_config = pipeline.RunnerConfig(
        source=schema.Source(source),
        workers=int(config.get("concurrency", {}).get("workers", 1)),
        gt_context=config.get("gt_context", pipeline.RunnerConfig.gt_context),
        **{k: int(v) for k, v in quotas.items()},
    )
    runner = pipeline.PipelineRunner(store, handles, runner_config)
    images = sorted(
        str(p) for p in Path(images_dir).iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES
    )
    if not images:
        raise ConfigInvalid(f"no images found under {images_dir}")
    try:
        runner.build_dataset(images)
    finally:
        store.close()
    counts = store.state_counts()
    click.echo(json.dumps(counts, indent=2, sort_keys=True))
    if runner.parked:
        click.echo(f"{len(runner.parked)} record(s) parked on provider errors; rerun with --resume", err=True)
    _write_metadata(state, "build-dataset", config, config.get("seed"), handles, started)


@cli.command("review")
@click.option("--state", "state_path", required=True, type=click.Path(exists=True))
def review_cmd(state_path):
    """Interactive human audit of verified records."""
    store = pipeline.StateStore(Path(state_path))
    try:
        counts = pipeline.audit_session(
            store,
            input_fn=lambda text: click.prompt(text, default="", show_default=False, prompt_suffix=""),
            echo=click.echo,
        )
    finally:
        store.close()
    click.echo(json.dumps(counts, sort_keys=True))


@cli.command("stats")
@click.option("--state", "state_path", required=True, type=click.Path(exists=True))
def stats_cmd(state_path):
    """Per-state record counts of a pipeline log."""
    store = pipeline.StateStore(Path(state_path))
    store.close()
    click.echo(json.dumps(store.state_counts(), indent=2, sort_keys=True))


@cli.command("report")
@click.option("--state", "state_path", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), help="Report JSON path.")
def report_cmd(state_path, out):
    """Retention and category-distribution report for a pipeline log."""
    started = time.time()
    store = pipeline.StateStore(Path(state_path))
    store.close()
    report = pipeline.retention_report(store)
    click.echo(pipeline.render_retention(report))
    if out:
        body = {
            "steps": [
                {"step": r.step, "in": r.n_in, "out": r.n_out, "retention": r.retention}
                for r in report.rows
            ],
            "distribution": [
                {"category": cat, "source": src, "count": n}
                for (cat, src), n in sorted(report.distribution.items())
            ],
        }
        Path(out).write_text(json.dumps(body, indent=2) + "\n", encoding="utf-8")
        _write_metadata(Path(out), "report", {}, None, None, started)


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, prog_name="drs", standalone_mode=False)
        return 0
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        click.echo("aborted", err=True)
        return 2
    except (ConfigInvalid, provider.AuthFailure) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, never raises
        click.echo(f"runtime failure: {type(exc).__name__}: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
