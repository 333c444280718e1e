"""Command-line entry point. Subcommand groups mirror the package layout
(bank, data, stage1, stage2, eval, interpret, pipeline); exit code 0 on
success, 1 with the failing module's error verbatim on stderr, 2 for
usage problems."""

from __future__ import annotations

import datetime
import json
import sys
from pathlib import Path

import click

from . import bank as bank_mod
from . import generation
from .config import canonical_json, config_digest, load_config
from .data import (
    label_space_for,
    load_manifest,
    sample_episode,
    split_base_novel,
    generate_synthetic,
    write_manifest,
)
from .encoders import load_bundle, load_context, save_context
from .errors import ConceptGuideError, ConfigurationError
from .interpret import contributions, export_sankey, report_to_dict, write_sankey
from .pipeline import execute, protocol_from, train_config_from
from .protocols import ProtocolSpec, run_ablation, run_base_to_novel, run_few_shot, write_report
from .stage1 import check_checkpoint_compat, infer_concepts, load_logits, save_logits, train
from .stage2 import KIND_ALIASES, load_model, predict, save_model
from .stage2 import fit as stage2_fit


def parse_int_list(text: str) -> list[int]:
    """"1-5" or "2,4,8" or a mix like "1-3,7"."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:  # leading minus would be a negative number, not a range
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise ConfigurationError(f"no integers found in {text!r}")
    return out


@click.group()
@click.option("--seed", type=int, default=None, help="Override every configured seed.")
@click.option("--shots", type=int, default=None, help="Override the configured shot count.")
@click.option("--encoder", type=str, default=None, help="Encoder name (mock, mock:<D>, mock:<D>:<seed>).")
@click.pass_context
def cli(ctx, seed, shots, encoder):
    """Two-stage interpretable disease classification from visual concepts."""
    ctx.ensure_object(dict)
    ctx.obj.update({"seed": seed, "shots": shots, "encoder": encoder})


def _global(ctx, key, fallback):
    value = (ctx.obj or {}).get(key)
    return fallback if value is None else value


def _overrides_from(ctx) -> dict:
    over: dict = {}
    obj = ctx.obj or {}
    if obj.get("encoder") is not None:
        over["encoder"] = obj["encoder"]
    proto = {}
    if obj.get("shots") is not None:
        proto["shots"] = obj["shots"]
    if obj.get("seed") is not None:
        proto["seeds"] = [obj["seed"]]
    if proto:
        over["protocol"] = proto
    return over


# ---------------------------------------------------------------- bank


@cli.group("bank")
def bank_group():
    """Build, review, and freeze the concept bank."""


@bank_group.command("build")
@click.option("--diseases", required=True, help="Comma-separated disease names.")
@click.option("--generator", "generator_name", default="fixture", show_default=True)
@click.option("--repeats", default=2, show_default=True, help="Generations per template.")
@click.option("--min-support", type=int, default=None, help="Generations a phrase must appear in (default: all).")
@click.option("--synonyms", "synonyms_path", type=click.Path(exists=True), default=None, help="JSON file mapping surface forms to canonical phrases.")
@click.option("--out", required=True, type=click.Path())
@click.option("--raw-out", type=click.Path(), default=None, help="Sidecar for raw generations (default: <out>.raw.json).")
def bank_build(diseases, generator_name, repeats, min_support, synonyms_path, out, raw_out):
    """Generate candidate concepts per disease and keep the intersection."""
    names = [d.strip() for d in diseases.split(",") if d.strip()]
    synonym_map = dict(generation.DEFAULT_SYNONYM_MAP)
    if synonyms_path:
        with open(synonyms_path, "r", encoding="utf-8") as fh:
            synonym_map.update(json.load(fh))
    generator = generation.make_generator(generator_name)
    built, raw_log = generation.build_bank(
        names, generator, repeats_per_template=repeats,
        synonym_map=synonym_map, min_support=min_support,
    )
    bank_mod.save_bank(built, out)
    sidecar = raw_out or f"{out}.raw.json"
    with open(sidecar, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(canonical_json([r.to_dict() for r in raw_log]))
    click.echo(
        f"bank: {built.K} diseases, {len(built.concepts)} candidate concepts -> {out} "
        f"(raw generations: {sidecar})"
    )


@bank_group.command("review")
@click.option("--bank", "bank_path", required=True, type=click.Path(exists=True))
@click.option("--concept", required=True, help="Concept id to decide on.")
@click.option("--decision", required=True, type=click.Choice(["validated", "rejected"]))
@click.option("--reviewer", required=True)
@click.option("--force", is_flag=True, help="Override an earlier decision or low support.")
def bank_review(bank_path, concept, decision, reviewer, force):
    """Record a clinician decision on one candidate concept."""
    loaded = bank_mod.load_bank(bank_path)
    bank_mod.validate_concept(loaded, concept, decision, reviewer, force=force)
    bank_mod.save_bank(loaded, bank_path)
    click.echo(f"{concept}: {decision} by {reviewer} (bank version {loaded.version})")


@bank_group.command("freeze")
@click.option("--bank", "bank_path", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None, help="Default: freeze in place.")
def bank_freeze(bank_path, out):
    """Drop unvalidated concepts and fix the bank for training."""
    loaded = bank_mod.load_bank(bank_path)
    frozen = bank_mod.freeze_bank(loaded)
    bank_mod.save_bank(frozen, out or bank_path)
    click.echo(
        f"frozen: {frozen.E} validated concepts across {frozen.K} diseases "
        f"(version {frozen.version}) -> {out or bank_path}"
    )


# ---------------------------------------------------------------- data


@cli.group("data")
def data_group():
    """Manifests, episodes, splits, and synthetic datasets."""


@data_group.command("validate")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--bank", "bank_path", required=True, type=click.Path(exists=True))
def data_validate(manifest, bank_path):
    """Check every manifest row against the bank and report the label space."""
    loaded = bank_mod.load_bank(bank_path)
    samples, label_space = load_manifest(manifest, loaded)
    splits = {name: sum(1 for s in samples if s.split == name) for name in ("train", "val", "test")}
    click.echo(
        f"{len(samples)} samples ({splits['train']} train / {splits['val']} val / "
        f"{splits['test']} test), K={label_space.K} diseases, E={label_space.E} concepts, "
        f"label-space digest {label_space.digest[:12]}"
    )


@data_group.command("episode")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--bank", "bank_path", required=True, type=click.Path(exists=True))
@click.option("--shots", "shots_opt", type=int, default=None)
@click.option("--seed", "seed_opt", type=int, default=None)
@click.option("--out", type=click.Path(), default=None, help="Write the episode as JSON.")
@click.pass_context
def data_episode(ctx, manifest, bank_path, shots_opt, seed_opt, out):
    """Draw a seeded n-shot episode from the train split."""
    shots = shots_opt if shots_opt is not None else _global(ctx, "shots", 16)
    seed = seed_opt if seed_opt is not None else _global(ctx, "seed", 1)
    loaded = bank_mod.load_bank(bank_path)
    samples, _ = load_manifest(manifest, loaded)
    episode = sample_episode(samples, shots, seed)
    payload = {
        "n_shots": episode.n_shots,
        "seed": episode.seed,
        "manifest_digest": episode.manifest_digest,
        "selected_ids": {k: episode.selected_ids[k] for k in sorted(episode.selected_ids)},
        "shortfall": {k: episode.shortfall[k] for k in sorted(episode.shortfall)},
    }
    text = canonical_json(payload)
    if out:
        Path(out).write_text(text, encoding="utf-8")
        click.echo(f"episode -> {out}")
    else:
        click.echo(text, nl=False)


@data_group.command("split-base-novel")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--bank", "bank_path", required=True, type=click.Path(exists=True))
def data_split(manifest, bank_path):
    """Show the frequency-ranked base/novel disease split."""
    loaded = bank_mod.load_bank(bank_path)
    samples, label_space = load_manifest(manifest, loaded)
    split, filtered = split_base_novel(samples, label_space)
    click.echo(
        canonical_json(
            {
                "base": list(split.base),
                "novel": list(split.novel),
                "base_only_train_samples": len(filtered),
            }
        ),
        nl=False,
    )


@data_group.command("synth")
@click.option("--k", default=4, show_default=True, help="Number of diseases.")
@click.option("--e-per-disease", default=3, show_default=True)
@click.option("--shared-fraction", default=0.0, show_default=True)
@click.option("--images-per-disease", default=20, show_default=True)
@click.option("--noise", default=0.0, show_default=True, help="Per-bit signature flip probability.")
@click.option("--seed", "seed_opt", type=int, default=None)
@click.option("--out-manifest", required=True, type=click.Path())
@click.option("--out-bank", required=True, type=click.Path())
@click.pass_context
def data_synth(ctx, k, e_per_disease, shared_fraction, images_per_disease, noise, seed_opt, out_manifest, out_bank):
    """Generate a synthetic manifest and pre-validated bank."""
    seed = seed_opt if seed_opt is not None else _global(ctx, "seed", 7)
    samples, built = generate_synthetic(
        k, e_per_disease, shared_fraction, images_per_disease, noise, seed
    )
    write_manifest(samples, out_manifest)
    bank_mod.save_bank(built, out_bank)
    click.echo(
        f"synthetic: {len(samples)} samples, {built.K} diseases, E={built.E} "
        f"-> {out_manifest}, {out_bank}"
    )


# ---------------------------------------------------------------- stage1


@cli.group("stage1")
def stage1_group():
    """Prompt-context training and concept inference."""


def _load_data_for(ctx, config_path, bank_path, manifest_path):
    config = load_config(config_path, _overrides_from(ctx))
    loaded_bank = bank_mod.load_bank(bank_path)
    samples, label_space = load_manifest(manifest_path, loaded_bank)
    bundle = load_bundle(config["encoder"])
    bundle.image_encoder.bind_label_space(label_space)
    return config, loaded_bank, samples, label_space, bundle


@stage1_group.command("train")
@click.option("--config", "config_path", default=None, help="JSON config file or 'quickstart'.")
@click.option("--bank", "bank_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--shots", "shots_opt", type=int, default=None)
@click.option("--seed", "seed_opt", type=int, default=None)
@click.option("--out", required=True, type=click.Path(), help="Checkpoint path.")
@click.pass_context
def stage1_train(ctx, config_path, bank_path, manifest, shots_opt, seed_opt, out):
    """Tune the prompt context on a seeded episode of the train split."""
    config, loaded_bank, samples, label_space, bundle = _load_data_for(
        ctx, config_path, bank_path, manifest
    )
    shots = shots_opt if shots_opt is not None else int(config["protocol"]["shots"])
    seed = seed_opt if seed_opt is not None else int(config["protocol"]["seeds"][0])
    from dataclasses import replace

    train_config = replace(train_config_from(config), seed=seed)
    episode = sample_episode(samples, shots, seed)
    by_id = {s.image_id: s for s in samples}
    train_pool = [by_id[i] for i in episode.unique_ids()]
    val_pool = [s for s in samples if s.split == "val"]
    state = train(bundle, loaded_bank, train_pool, val_pool, label_space, train_config)
    save_context(state.best_context, out, loaded_bank.version, label_space.digest)
    click.echo(
        f"trained {train_config.epochs} epochs (best val BCE {state.best_val_metric:.6f} "
        f"at epoch {state.best_epoch}) -> {out}"
    )


@stage1_group.command("infer")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--bank", "bank_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", show_default=True, type=click.Choice(["train", "val", "test", "all"]))
@click.option("--out", required=True, type=click.Path())
@click.pass_context
def stage1_infer(ctx, ckpt, bank_path, manifest, split, out):
    """Emit concept logits for a split using a trained checkpoint."""
    loaded_bank = bank_mod.load_bank(bank_path)
    samples, label_space = load_manifest(manifest, loaded_bank)
    context, header = load_context(ckpt)
    check_checkpoint_compat(header, loaded_bank, label_space)
    encoder = _global(ctx, "encoder", "mock:64:0")
    bundle = load_bundle(encoder)
    bundle.image_encoder.bind_label_space(label_space)
    pool = samples if split == "all" else [s for s in samples if s.split == split]
    logits = infer_concepts(bundle, context, pool, label_space)
    save_logits(logits, out, loaded_bank.version, label_space.digest)
    click.echo(f"{len(logits)} rows of E={label_space.E} logits -> {out}")


# ---------------------------------------------------------------- stage2


@cli.group("stage2")
def stage2_group():
    """Concept-to-disease classifiers."""


@stage2_group.command("fit")
@click.option("--kind", required=True, type=click.Choice(sorted(KIND_ALIASES)))
@click.option("--logits", "logits_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--bank", "bank_path", required=True, type=click.Path(exists=True))
@click.option("--mode", default="single_label", show_default=True, type=click.Choice(["single_label", "multi_label"]))
@click.option("--input-space", default="scores", show_default=True, type=click.Choice(["scores", "probabilities"]))
@click.option("--out", required=True, type=click.Path())
@click.pass_context
def stage2_fit_cmd(ctx, kind, logits_path, manifest, bank_path, mode, input_space, out):
    """Fit a classifier on a logits file; labels come from the manifest."""
    loaded_bank = bank_mod.load_bank(bank_path)
    samples, label_space = load_manifest(manifest, loaded_bank)
    logits, header = load_logits(logits_path)
    if header.get("label_space_digest") != label_space.digest:
        raise ConfigurationError(
            f"logits file digest {header.get('label_space_digest')} does not match the "
            f"manifest/bank label space {label_space.digest}"
        )
    labels = {s.image_id: s.disease_labels for s in samples}
    seed = _global(ctx, "seed", 0)
    model = stage2_fit(
        kind, logits, labels, label_space, mode=mode, hyper={"seed": seed}, input_space=input_space
    )
    save_model(model, out)
    suffix = f" ({len(model.warnings)} warnings)" if model.warnings else ""
    click.echo(f"{model.kind} over K={model.K}, E={model.e} -> {out}{suffix}")


@stage2_group.command("predict")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--logits", "logits_path", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None)
def stage2_predict_cmd(model_path, logits_path, out):
    """Score a logits file with a fitted model."""
    model = load_model(model_path)
    logits, _ = load_logits(logits_path)
    rows = [
        {
            "image_id": p.image_id,
            "scores": {d: float(p.scores[i]) for i, d in enumerate(model.diseases)},
            "decision": sorted(p.decision) if isinstance(p.decision, frozenset) else p.decision,
        }
        for p in predict(model, logits)
    ]
    text = canonical_json(rows)
    if out:
        Path(out).write_text(text, encoding="utf-8")
        click.echo(f"{len(rows)} predictions -> {out}")
    else:
        click.echo(text, nl=False)


# ---------------------------------------------------------------- eval


@cli.group("eval")
def eval_group():
    """Few-shot, base-to-novel, and ablation protocols."""


def _eval_setup(ctx, config_path, bank_path, manifest_path):
    config = load_config(config_path, _overrides_from(ctx))
    if bank_path and manifest_path:
        loaded_bank = bank_mod.load_bank(bank_path)
        samples, label_space = load_manifest(manifest_path, loaded_bank)
    else:
        from .pipeline import resolve_data

        samples, loaded_bank, label_space, _ = resolve_data(config)
    bundle = load_bundle(config["encoder"])
    return config, samples, loaded_bank, label_space, bundle


@eval_group.command("few-shot")
@click.option("--config", "config_path", default=None)
@click.option("--bank", "bank_path", type=click.Path(exists=True), default=None)
@click.option("--manifest", type=click.Path(exists=True), default=None)
@click.option("--shots", "shots_text", default=None, help="Comma list, e.g. 2,4,8,16.")
@click.option("--seeds", "seeds_text", default=None, help="Range or list, e.g. 1-5.")
@click.option("--kind", default=None, type=click.Choice(sorted(KIND_ALIASES)))
@click.option("--out", required=True, type=click.Path())
@click.pass_context
def eval_few_shot(ctx, config_path, bank_path, manifest, shots_text, seeds_text, kind, out):
    """n-shot protocol over a shot grid; one report with a table."""
    config, samples, loaded_bank, label_space, bundle = _eval_setup(ctx, config_path, bank_path, manifest)
    base = protocol_from(config)
    seeds = tuple(parse_int_list(seeds_text)) if seeds_text else base.seeds
    shot_grid = parse_int_list(shots_text) if shots_text else [base.shots]
    stage2_kind = KIND_ALIASES[kind] if kind else base.stage2_kind
    train_config = train_config_from(config)

    runs = {}
    table = {"rows": [stage2_kind], "columns": [str(n) for n in shot_grid], "cells": {stage2_kind: {}}}
    for n in shot_grid:
        protocol = ProtocolSpec(
            task="few_shot", shots=n, seeds=seeds, stage2_kind=stage2_kind,
            mode=base.mode, input_space=base.input_space,
        )
        report = run_few_shot(protocol, samples, label_space, loaded_bank, bundle, train_config, config=config)
        runs[str(n)] = report
        agg = report["aggregates"]["mAP"]
        table["cells"][stage2_kind][str(n)] = f"{agg['mean']:.4f}±{agg['std']:.4f}"
    write_report({"task": "few_shot_grid", "table": table, "runs": runs}, out)
    click.echo(f"few-shot grid {shot_grid} x seeds {list(seeds)} -> {out}")
    for n in shot_grid:
        click.echo(f"  n={n}: mAP {table['cells'][stage2_kind][str(n)]}")


@eval_group.command("base-novel")
@click.option("--config", "config_path", default=None)
@click.option("--bank", "bank_path", type=click.Path(exists=True), default=None)
@click.option("--manifest", type=click.Path(exists=True), default=None)
@click.option("--seeds", "seeds_text", default=None)
@click.option("--out", required=True, type=click.Path())
@click.pass_context
def eval_base_novel(ctx, config_path, bank_path, manifest, seeds_text, out):
    """Zero-shot transfer: train on base diseases, score novel ones."""
    config, samples, loaded_bank, label_space, bundle = _eval_setup(ctx, config_path, bank_path, manifest)
    base = protocol_from(config)
    seeds = tuple(parse_int_list(seeds_text)) if seeds_text else base.seeds
    protocol = ProtocolSpec(
        task="base_to_novel", shots=base.shots, seeds=seeds, stage2_kind=base.stage2_kind,
        mode=base.mode, input_space=base.input_space,
    )
    report = run_base_to_novel(protocol, samples, label_space, loaded_bank, bundle, train_config_from(config), config=config)
    write_report(report, out)
    agg = report["aggregates"]
    click.echo(
        f"novel mAP {agg['mAP']['mean']:.4f}±{agg['mAP']['std']:.4f}, "
        f"weighted F1 {agg['weighted_f1']['mean']:.4f} -> {out}"
    )


@eval_group.command("ablate")
@click.option("--sweep", required=True, type=click.Choice(["token-position", "num-tokens", "stage2"]))
@click.option("--config", "config_path", default=None)
@click.option("--bank", "bank_path", type=click.Path(exists=True), default=None)
@click.option("--manifest", type=click.Path(exists=True), default=None)
@click.option("--seeds", "seeds_text", default=None)
@click.option("--out", required=True, type=click.Path())
@click.pass_context
def eval_ablate(ctx, sweep, config_path, bank_path, manifest, seeds_text, out):
    """Grid sweep shaped like the corresponding results table."""
    config, samples, loaded_bank, label_space, bundle = _eval_setup(ctx, config_path, bank_path, manifest)
    base = protocol_from(config)
    seeds = tuple(parse_int_list(seeds_text)) if seeds_text else base.seeds
    protocol = ProtocolSpec(
        task="few_shot", shots=base.shots, seeds=seeds, stage2_kind=base.stage2_kind,
        mode=base.mode, input_space=base.input_space,
    )
    internal = {"token-position": "token_position", "num-tokens": "num_tokens", "stage2": "stage2_kind"}[sweep]
    table = run_ablation(internal, protocol, samples, label_space, loaded_bank, bundle, train_config_from(config))
    write_report(table, out)
    click.echo(f"{sweep} sweep: {len(table['rows'])} rows x {len(table['columns'])} columns -> {out}")
    header = " | ".join([f"{'kind':<20}"] + [f"{c:>15}" for c in table["columns"]])
    click.echo(header)
    for row in table["rows"]:
        cells = [f"{table['cells'][row][c]['display']:>15}" for c in table["columns"]]
        click.echo(" | ".join([f"{row:<20}"] + cells))


# ---------------------------------------------------------------- interpret


@cli.group("interpret")
def interpret_group():
    """Concept attribution reports and Sankey exports."""


def _attribution_inputs(model_path, logits_path, manifest_path, bank_path):
    model = load_model(model_path)
    logits, _ = load_logits(logits_path)
    loaded_bank = bank_mod.load_bank(bank_path)
    samples, label_space = load_manifest(manifest_path, loaded_bank)
    truth = {s.image_id: s.disease_labels for s in samples}
    return model, logits, label_space, truth


@interpret_group.command("report")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--logits", "logits_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--bank", "bank_path", required=True, type=click.Path(exists=True))
@click.option("--disease", required=True)
@click.option("--top", default=5, show_default=True)
@click.option("--bottom", default=5, show_default=True)
@click.option("--normalization", default="sum", show_default=True, type=click.Choice(["sum", "minmax", "none"]))
@click.option("--out", type=click.Path(), default=None)
def interpret_report(model_path, logits_path, manifest, bank_path, disease, top, bottom, normalization, out):
    """Per-concept contributions for one disease."""
    model, logits, label_space, truth = _attribution_inputs(model_path, logits_path, manifest, bank_path)
    report = contributions(
        model, logits, disease, label_space.concept_ids, truth=truth, normalization=normalization
    )
    payload = report_to_dict(report)
    if out:
        Path(out).write_text(canonical_json(payload), encoding="utf-8")
        click.echo(f"contributions for {disease} -> {out}")
    click.echo(f"{disease} (n={report.sample_count}):")
    for entry in report.top(top):
        click.echo(f"  +{entry.rank:<3} {entry.concept_id:<40} {entry.contribution:+.6f}")
    for entry in report.bottom(bottom):
        click.echo(f"  -{entry.rank:<3} {entry.concept_id:<40} {entry.contribution:+.6f}")


@interpret_group.command("sankey")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--logits", "logits_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--bank", "bank_path", required=True, type=click.Path(exists=True))
@click.option("--top", default=4, show_default=True)
@click.option("--bottom", default=4, show_default=True)
@click.option("--out", required=True, type=click.Path())
def interpret_sankey(model_path, logits_path, manifest, bank_path, top, bottom, out):
    """Concept-to-disease flow export across all diseases with samples."""
    model, logits, label_space, truth = _attribution_inputs(model_path, logits_path, manifest, bank_path)
    reports = []
    for disease in model.diseases:
        rows = [r for r in logits if disease in truth.get(r.image_id, frozenset())]
        if rows:
            reports.append(contributions(model, rows, disease, label_space.concept_ids))
    flow = export_sankey(reports, top_k=top, bottom_k=bottom)
    write_sankey(flow, out)
    click.echo(f"{len(flow['nodes'])} nodes, {len(flow['links'])} links -> {out}")


# ---------------------------------------------------------------- pipeline


@cli.group("pipeline")
def pipeline_group():
    """End-to-end orchestration."""


@pipeline_group.command("run")
@click.option("--config", "config_path", default=None, help="JSON config file or 'quickstart'.")
@click.option("--out-dir", type=click.Path(), default=None, help="Parent for the run directory.")
@click.pass_context
def pipeline_run(ctx, config_path, out_dir):
    """bank-load -> episode -> stage1 -> stage2 -> eval -> interpret."""
    config = load_config(config_path, _overrides_from(ctx))
    digest = config_digest(config)
    stamp = datetime.datetime.now(datetime.timezone.utc).strftime("%Y%m%dT%H%M%S")
    parent = Path(out_dir) if out_dir else Path(config["output_dir"])
    run_dir = parent / f"run-{stamp}-{digest[:8]}"
    counter = 0
    while run_dir.exists():  # same second, same config: suffix instead of clobbering
        counter += 1
        run_dir = parent / f"run-{stamp}-{digest[:8]}-{counter}"
    summary = execute(config, run_dir)
    click.echo(f"run dir: {summary['run_dir']}")
    click.echo(f"config digest: {summary['config_digest']}")
    for metric, agg in sorted(summary["aggregates"].items()):
        click.echo(f"{metric}: {agg['mean']:.4f}±{agg['std']:.4f}")
    if summary.get("interpret_note"):
        click.echo(summary["interpret_note"])


def dispatch(argv) -> int:
    """Programmatic entry point: returns the exit code instead of raising
    SystemExit."""
    try:
        cli.main(args=list(argv), prog_name="conceptguide", standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        exc.show()
        return 2
    except click.ClickException as exc:
        exc.show()
        return int(exc.exit_code)
    except ConceptGuideError as exc:
        click.echo(str(exc), err=True)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
