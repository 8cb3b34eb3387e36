"""Command-line entry points.

Exit codes for `segment`: 0 success, 2 missing input file, 3 unresolved
prompts (with --strict, or when nothing resolves at all), 4 invalid config.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import nifti
from .errors import MedalSegError
from .metrics import evaluate_labelmaps
from .phantom import build_phantom
from .pipeline import PipelineConfig, desk_config, run
from .postproc import PostprocParams, refine_segmentation
from .textprompts import build_mappings, default_corpus_path, load_corpus
from .volume import ProbabilityMap


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        _fail(2, f"{what} not found: {p}")
    return p


def _load_config(path) -> PipelineConfig:
    if path is None:
        return desk_config()
    _require_file(path, "config file")
    try:
        return PipelineConfig.from_file(path)
    except MedalSegError as e:
        _fail(4, f"invalid config: {e}")
    except Exception as e:
        _fail(4, f"invalid config: {e}")


def _load_prompts(path) -> list[dict]:
    p = _require_file(path, "prompts file")
    doc = json.loads(p.read_text())
    if isinstance(doc, dict) and "prompts" in doc:
        doc = doc["prompts"]
    prompts = []
    for item in doc:
        if isinstance(item, str):
            prompts.append({"sentence": item, "instance_label": 0})
        else:
            prompts.append({"sentence": item["sentence"],
                            "instance_label": int(item.get("instance_label", 0))})
    return prompts


@click.group()
def main():
    """Promptable volumetric segmentation tools."""


@main.command()
@click.option("--image", required=True, help="input volume (.nii/.nii.gz)")
@click.option("--prompts", "prompts_path", required=True,
              help="JSON file: list of sentences or {sentence, instance_label} objects")
@click.option("--modality", default=None, help="override modality (default: from prompt text)")
@click.option("--mode", type=click.Choice(["text-only", "hybrid"]), default="text-only")
@click.option("--stage", type=click.Choice(["coarse", "two-stage"]), default="two-stage")
@click.option("--execution", type=click.Choice(["parallel", "sequential"]), default=None)
@click.option("--config", "config_path", default=None, help="pipeline config (.json/.toml)")
@click.option("--out", required=True, help="output label NIfTI path")
@click.option("--probs", "probs_path", default=None, help="also write the probability stack here")
@click.option("--report", "report_path", default=None, help="run report JSON (default: <out stem>.report.json)")
@click.option("--strict", is_flag=True, help="fail if any prompt does not resolve")
def segment(image, prompts_path, modality, mode, stage, execution, config_path, out,
            probs_path, report_path, strict):
    """Segment a volume from text prompts."""
    image = _require_file(image, "image")
    prompts = _load_prompts(prompts_path)
    cfg = _load_config(config_path)
    if mode != cfg.mode:
        cfg = dataclasses.replace(cfg, mode=mode)

    from .pipeline import resolve_prompts

    queries, errors = resolve_prompts(prompts)
    if errors and strict:
        for e in errors:
            click.echo(f"unresolved: {e['sentence']!r}: {e['error']}: {e['detail']}", err=True)
        sys.exit(3)
    if not queries:
        for e in errors:
            click.echo(f"unresolved: {e['sentence']!r}: {e['error']}: {e['detail']}", err=True)
        _fail(3, "no prompt resolved")

    vol = nifti.load_volume(image, modality or queries[0].modality)
    result = run(vol, queries, cfg, execution=execution, stage=stage)

    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    nifti.save_nifti(out, result.labels.data[0].astype(np.int32), vol.spacing)
    if probs_path:
        probs_path = Path(probs_path)
        nifti.save_nifti(probs_path, result.probabilities.data, vol.spacing)
        manifest = [{"channel": i, "class_id": q.class_id, "class_name": q.class_name,
                     "sentence": q.sentence} for i, q in enumerate(result.queries)]
        probs_path.with_suffix("").with_suffix(".channels.json").write_text(
            json.dumps(manifest, indent=2) + "\n")
    report_out = Path(report_path) if report_path else out.parent / (out.name.split(".")[0] + ".report.json")
    doc = result.report.to_dict()
    doc["prompt_errors"] = errors
    doc["classes"] = [{"class_id": q.class_id, "class_name": q.class_name, "sentence": q.sentence,
                       "instance_label": q.instance_label} for q in result.queries]
    report_out.write_text(json.dumps(doc, indent=2) + "\n")
    click.echo(f"wrote {out} ({result.report.n_classes} classes, "
               f"{result.report.backbone_forwards} backbone forwards)")


@main.command()
@click.option("--out-dir", required=True, help="directory for phantom volume/GT/prompts")
def phantom(out_dir):
    """Write the bundled synthetic MRI phantom (volume, GT labels, prompts)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    case = build_phantom()
    nifti.save_volume(out / "volume.nii.gz", case.volume)
    gt_labels = np.zeros(case.volume.dims, dtype=np.int32)
    for i, chan in enumerate(case.gt.data):
        gt_labels[chan > 0] = i + 1
    nifti.save_nifti(out / "gt.nii.gz", gt_labels, case.volume.spacing)
    (out / "prompts.json").write_text(json.dumps(case.prompts, indent=2) + "\n")
    (out / "classes.json").write_text(json.dumps(
        [{"class_id": cid, "class_name": name, "gt_value": i + 1}
         for i, (cid, name) in enumerate(zip(case.class_ids, case.class_names))], indent=2) + "\n")
    click.echo(f"phantom written to {out}")


@main.command()
@click.option("--classes", default="1,4,24", help="comma-separated class counts")
@click.option("--modes", default="parallel,sequential", help="comma-separated execution modes")
@click.option("--repeats", default=3, type=int)
@click.option("--out", "out_path", default=None, help="CSV output (default: stdout)")
def bench(classes, modes, repeats, out_path):
    """Benchmark parallel vs sequential multi-class decoding on a synthetic volume."""
    from .bench import run_benchmark, summary, to_csv

    counts = tuple(int(c) for c in classes.split(","))
    mode_list = tuple(m.strip() for m in modes.split(","))
    records = run_benchmark(class_counts=counts, modes=mode_list, repeats=repeats)
    text = to_csv(records)
    if out_path:
        Path(out_path).write_text(text)
        click.echo(f"wrote {out_path}")
    else:
        click.echo(text, nl=False)
    for n, s in summary(records).items():
        click.echo(f"n={n}: speedup={s['speedup']:.2f}x forwards={s['forward_ratio']:.1f}x")


@main.command()
@click.option("--gt", "gt_path", required=True, help="ground-truth label NIfTI")
@click.option("--pred", "pred_path", required=True, help="predicted label NIfTI")
@click.option("--classes", default=None, help="comma-separated class ids (default: GT labels > 0)")
@click.option("--manifest", "manifest_path", default=None,
              help="JSON [{class_id, class_name, gt_value|channel}] for row names")
@click.option("--tolerance", default=1.0, type=float, help="surface tolerance in mm")
@click.option("--out-csv", default=None)
@click.option("--out-json", default=None)
def metrics(gt_path, pred_path, classes, manifest_path, tolerance, out_csv, out_json):
    """Per-class DSC / NSD / instance F1 / DSC-TP between two label maps."""
    gt_path = _require_file(gt_path, "GT")
    pred_path = _require_file(pred_path, "prediction")
    gt, spacing = nifti.load_nifti(gt_path)
    pred, pred_spacing = nifti.load_nifti(pred_path)
    gt, pred = np.asarray(gt), np.asarray(pred)
    if gt.ndim == 4:
        gt = gt[0]
    if pred.ndim == 4:
        pred = pred[0]
    if gt.shape != pred.shape:
        _fail(2, f"shape mismatch: GT {gt.shape} vs prediction {pred.shape}")

    names = {}
    if manifest_path:
        doc = json.loads(_require_file(manifest_path, "manifest").read_text())
        if isinstance(doc, dict) and "channels" in doc:
            doc = doc["channels"]
        for e in doc:
            name = e.get("class_name", str(e["class_id"]))
            # join names to the label value the maps actually carry:
            # phantom manifests record it as gt_value, channel manifests
            # imply channel+1, plain manifests use the class id itself
            if "gt_value" in e:
                names[int(e["gt_value"])] = name
            elif "channel" in e:
                names[int(e["channel"]) + 1] = name
            else:
                names[int(e["class_id"])] = name
    if classes:
        ids = [int(c) for c in classes.split(",")]
    else:
        ids = [int(v) for v in np.unique(gt) if v > 0]
    if not ids:
        _fail(2, "no classes to evaluate")

    rows = evaluate_labelmaps(gt, pred, spacing, ids,
                              class_names=[names.get(i, str(i)) for i in ids],
                              tolerance=tolerance)
    header = ["class_id", "class_name", "dsc", "nsd", "f1", "dsc_tp", "tp", "fp", "fn"]
    click.echo(",".join(header))
    for r in rows:
        click.echo(f"{r.class_id},{r.class_name},{r.dsc:.4f},{r.nsd:.4f},"
                   f"{r.f1:.4f},{r.dsc_tp:.4f},{r.tp},{r.fp},{r.fn}")
    agg = {
        "mean_dsc": float(np.mean([r.dsc for r in rows])),
        "mean_nsd": float(np.mean([r.nsd for r in rows])),
        "mean_f1": float(np.mean([r.f1 for r in rows])),
        "mean_dsc_tp": float(np.mean([r.dsc_tp for r in rows])),
        "tolerance_mm": tolerance,
    }
    click.echo("mean,dsc={mean_dsc:.4f},nsd={mean_nsd:.4f},f1={mean_f1:.4f},dsc_tp={mean_dsc_tp:.4f}".format(**agg))

    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([r.class_id, r.class_name, f"{r.dsc:.6f}", f"{r.nsd:.6f}",
                            f"{r.f1:.6f}", f"{r.dsc_tp:.6f}", r.tp, r.fp, r.fn])
    if out_json:
        doc = {"per_class": [dataclasses.asdict(r) for r in rows], "aggregate": agg}
        Path(out_json).write_text(json.dumps(doc, indent=2) + "\n")


@main.command()
@click.option("--probs", "probs_path", required=True, help="4-D probability NIfTI stack")
@click.option("--manifest", "manifest_path", default=None, help="channel manifest JSON for class ids")
@click.option("--out", required=True, help="output label NIfTI")
@click.option("--tau", default=0.1, type=float)
@click.option("--prob-floor", default=0.86, type=float)
@click.option("--size-ratio", default=0.6, type=float)
@click.option("--connectivity", default="6", type=click.Choice(["6", "18", "26"]), callback=lambda c, p, v: int(v))
def postproc(probs_path, manifest_path, out, tau, prob_floor, size_ratio, connectivity):
    """Connected-component refinement of a saved probability stack."""
    probs_path = _require_file(probs_path, "probability stack")
    data, spacing = nifti.load_nifti(probs_path)
    if data.ndim == 3:
        data = data[None]
    meta = list(range(data.shape[0]))
    if manifest_path:
        doc = json.loads(_require_file(manifest_path, "manifest").read_text())
        if isinstance(doc, dict) and "channels" in doc:
            doc = doc["channels"]
        meta = [int(e["class_id"]) for e in doc]
    pmap = ProbabilityMap(data=np.clip(np.ascontiguousarray(data, dtype=np.float64), 0.0, 1.0),
                          channel_meta=meta)
    params = PostprocParams(tau=tau, prob_floor=prob_floor, size_ratio=size_ratio,
                            connectivity=connectivity)
    labels = refine_segmentation(pmap, params)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    nifti.save_nifti(out, labels.data[0].astype(np.int32), spacing)
    click.echo(f"wrote {out}")


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8000, type=int)
@click.option("--data-dir", default=None, help="session storage root (default: $MEDALSEG_DATA_DIR)")
def serve(host, port, data_dir):
    """Run the interactive-refinement HTTP service."""
    import uvicorn

    from .service import create_app

    app = create_app(root=Path(data_dir) if data_dir else None)
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.command("build-mappings")
@click.option("--corpus", "corpus_path", default=None, help="prompt corpus JSON (default: bundled)")
@click.option("--out-dir", required=True)
def build_mappings_cmd(corpus_path, out_dir):
    """Derive class-id and variant mappings from a prompt corpus."""
    if corpus_path:
        corpus_path = _require_file(corpus_path, "corpus")
    corpus = load_corpus(corpus_path or default_corpus_path())
    mapping, variants = build_mappings(corpus)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "class_mapping.json").write_text(mapping.to_json())
    (out / "variant_mapping.json").write_text(variants.to_json())
    n = sum(len(ids) for mod in mapping.table.values() for ids in mod.values())
    click.echo(f"wrote {out / 'class_mapping.json'} ({n} classes over {len(mapping.table)} modalities)")


if __name__ == "__main__":
    main()
