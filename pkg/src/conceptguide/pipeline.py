"""End-to-end run: resolve data, train stage 1, fit stage 2, evaluate,
attribute, and write every artifact under one run directory. The report
files depend only on the config content, never on the directory name or
the clock, so reruns of the same config digest are byte-identical."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from .bank import ConceptBank, load_bank, save_bank
from .config import canonical_json, config_digest
from .data import (
    AccessLog,
    generate_synthetic,
    label_space_for,
    load_manifest,
    sample_episode,
    write_manifest,
)
from .encoders import load_bundle, save_context
from .errors import ConfigurationError
from .interpret import contributions, export_sankey, report_to_dict, write_sankey
from .protocols import ProtocolSpec, run_base_to_novel, run_few_shot, write_report
from .stage1 import TrainConfig, infer_concepts, save_logits, train
from .stage2 import LINEAR_KINDS, fit, predict, save_model


def train_config_from(config: dict) -> TrainConfig:
    t = config["train"]
    return TrainConfig(
        lr=float(t["lr"]),
        schedule=t["schedule"],
        warmup_epochs=int(t["warmup_epochs"]),
        epochs=int(t["epochs"]),
        batch_size=int(t["batch_size"]),
        momentum=float(t["momentum"]),
        weight_decay=float(t["weight_decay"]),
        m=int(t["m"]),
        position_policy=t["position_policy"],
        init_sigma=float(t["init_sigma"]),
    )


def protocol_from(config: dict) -> ProtocolSpec:
    p = config["protocol"]
    return ProtocolSpec(
        task=p["task"],
        shots=int(p["shots"]),
        seeds=tuple(int(s) for s in p["seeds"]),
        stage2_kind=p["stage2_kind"],
        mode=p["mode"],
        input_space=p["input_space"],
        joint_mlp=bool(p.get("joint_mlp", False)),
    )


def resolve_data(config: dict):
    """Either load the configured bank+manifest or build the synthetic
    pair; returns (samples, bank, label_space, provenance note)."""
    if (config["manifest"] is None) != (config["bank"] is None):
        raise ConfigurationError("bank and manifest must be given together (or both omitted)")
    if config["manifest"] is not None:
        bank = load_bank(config["bank"])
        samples, label_space = load_manifest(config["manifest"], bank)
        return samples, bank, label_space, f"manifest: {config['manifest']}"
    syn = config["synthetic"]
    samples, bank = generate_synthetic(
        k=int(syn["k"]),
        e_per_disease=int(syn["e_per_disease"]),
        shared_fraction=float(syn["shared_fraction"]),
        images_per_disease=int(syn["images_per_disease"]),
        noise=float(syn["noise"]),
        seed=int(syn["seed"]),
    )
    return samples, bank, label_space_for(samples, bank), "synthetic"


def execute(config: dict, run_dir: Path) -> dict:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    digest = config_digest(config)
    (run_dir / "config.json").write_text(canonical_json(config), encoding="utf-8")

    samples, bank, label_space, data_note = resolve_data(config)
    write_manifest(samples, run_dir / "manifest.csv")
    save_bank(bank, run_dir / "bank.json")

    bundle = load_bundle(config["encoder"])
    bundle.image_encoder.bind_label_space(label_space)
    train_config = train_config_from(config)
    protocol = protocol_from(config)

    if protocol.task == "base_to_novel":
        report = run_base_to_novel(
            protocol, samples, label_space, bank, bundle, train_config, config=config
        )
    else:
        report = run_few_shot(
            protocol, samples, label_space, bank, bundle, train_config, config=config
        )
    write_report(report, run_dir / "report.json")

    # Representative artifacts from the first seed: checkpoint, logits,
    # fitted model, and the attribution exports.
    seed = protocol.seeds[0]
    episode = sample_episode(samples, protocol.shots, seed)
    by_id = {s.image_id: s for s in samples}
    train_pool = [by_id[i] for i in episode.unique_ids()]
    val_pool = [s for s in samples if s.split == "val"]
    test_pool = [s for s in samples if s.split == "test"]
    labels = {s.image_id: s.disease_labels for s in samples}

    state = train(
        bundle, bank, train_pool, val_pool, label_space, replace(train_config, seed=seed),
        access_log=AccessLog(),
    )
    context = state.best_context
    save_context(context, run_dir / "context.ckpt", bank.version, label_space.digest)

    train_logits = infer_concepts(bundle, context, train_pool, label_space)
    test_logits = infer_concepts(bundle, context, test_pool, label_space)
    save_logits(train_logits, run_dir / "train_logits.tsv", bank.version, label_space.digest)
    save_logits(test_logits, run_dir / "test_logits.tsv", bank.version, label_space.digest)

    model = fit(
        protocol.stage2_kind, train_logits, labels, label_space,
        mode=protocol.mode, hyper={"seed": seed}, input_space=protocol.input_space,
    )
    save_model(model, run_dir / "stage2.model")
    predictions = predict(model, test_logits)
    prediction_rows = [
        {
            "image_id": p.image_id,
            "scores": {d: float(p.scores[i]) for i, d in enumerate(model.diseases)},
            "decision": sorted(p.decision) if isinstance(p.decision, frozenset) else p.decision,
        }
        for p in predictions
    ]
    (run_dir / "predictions.json").write_text(
        canonical_json(prediction_rows), encoding="utf-8"
    )

    interpret_note = None
    if model.kind in LINEAR_KINDS:
        cfg = config["interpret"]
        reports = []
        for disease in label_space.diseases:
            rows = [r for r in test_logits if disease in labels.get(r.image_id, frozenset())]
            if not rows:
                continue
            reports.append(
                contributions(
                    model, rows, disease, label_space.concept_ids,
                    normalization=cfg["normalization"],
                )
            )
        (run_dir / "contributions.json").write_text(
            canonical_json([report_to_dict(r) for r in reports]), encoding="utf-8"
        )
        write_sankey(
            export_sankey(reports, top_k=int(cfg["top_k"]), bottom_k=int(cfg["bottom_k"])),
            run_dir / "sankey.json",
        )
    else:
        interpret_note = f"stage-2 kind {model.kind} is not linear; attribution skipped"
        (run_dir / "contributions.json").write_text(
            canonical_json({"skipped": interpret_note}), encoding="utf-8"
        )

    summary = {
        "run_dir": str(run_dir),
        "config_digest": digest,
        "data": data_note,
        "task": protocol.task,
        "aggregates": report["aggregates"],
        "interpret_note": interpret_note,
    }
    return summary
