"""Operator command surface over JSONL manifests.

Subcommands: gen-instructions, filter, train, edit, eval, stats. Every
command reads one JSON run configuration, derives all randomness from the
configured seed, and writes outputs atomically: results land under their
final names only on success, otherwise a ``.partial`` file is left behind.
Each command also writes a small run manifest recording the config digest
next to its primary output.

Exit codes: 0 success, 2 configuration error, 3 provider failure,
4 contract violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import clients as cl
from . import diffusion as df
from . import filters as ft
from . import images as im
from . import model as md
from . import tasks
from .config import RunConfig, load_run_config
from .errors import (ConfigError, EditForgeError, ParseError,
                     ProviderError)
from .instructions import EditRecord, InContextPool, generate
from .tensor import from_array


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    partial = path.with_name(path.name + ".partial")
    partial.write_text(text)
    os.replace(partial, path)


def _atomic_write_bytes(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    partial = path.with_name(path.name + ".partial")
    partial.write_bytes(blob)
    os.replace(partial, path)


def _write_manifest(primary: Path, command: str, cfg: RunConfig, seed: int,
                    outputs: list[Path]) -> None:
    manifest = {
        "command": command,
        "config_digest": cfg.digest(),
        "seed": seed,
        "outputs": [str(p) for p in outputs],
    }
    _atomic_write(primary.with_name(primary.name + ".run.json"),
                  json.dumps(manifest, indent=2) + "\n")


def _resolve_providers(cfg: RunConfig, stub_only: bool) -> cl.ProviderSet:
    """Config URLs beat environment variables; stubs fill the gaps."""
    if stub_only:
        return cl.providers_from_env(stub_only=True)

    def pick(key, env, remote_cls, stub):
        url = cfg.providers.get(key) or os.environ.get(env, "")
        return remote_cls(url) if url else stub

    return cl.ProviderSet(
        textgen=pick("textgen_url", cl.ENV_TEXTGEN, cl.RemoteTextGen,
                     cl.StubTextGen()),
        embed=pick("embed_url", cl.ENV_EMBED, cl.RemoteEmbedder,
                   cl.StubEmbedder("stub-joint")),
        embed2=pick("embed2_url", cl.ENV_EMBED2, cl.RemoteEmbedder,
                    cl.StubEmbedder("stub-visual")),
        detect=pick("detect_url", cl.ENV_DETECT, cl.RemoteDetector,
                    cl.StubDetector()),
        vlm=pick("vlm_url", cl.ENV_VLM, cl.RemoteVlm, cl.StubVlm()),
        imageop=pick("imageop_url", cl.ENV_IMAGEOP, cl.RemoteImageOp,
                     cl.StubImageOp()),
    )


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}")
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ParseError("bad-jsonl", f"{path}:{n}: {exc}")
    return rows


def cmd_gen_instructions(cfg: RunConfig, args) -> int:
    providers = _resolve_providers(cfg, args.stub_providers)
    captions = _read_jsonl(cfg.path("captions"))
    pool = InContextPool.seeded(args.seed)
    record_lines: list[str] = []
    rejection_lines: list[str] = []
    for i, row in enumerate(captions):
        task = tasks.validate_task(row["edit type"])
        rng = np.random.default_rng([args.seed, i])
        out = generate(row["caption"], task, pool, None, providers.textgen, rng)
        if isinstance(out, EditRecord):
            source = row.get("image file", "")
            out.image_file = source
            stem = Path(source).stem if source else f"record_{i:03d}"
            out.edited_file = f"{stem}_edited.png"
            record_lines.append(json.dumps(out.to_dict(), ensure_ascii=False))
        else:
            rejection_lines.append(json.dumps({
                "caption": out.caption, "edit type": out.edit_type,
                "reason": out.reason, "attempts": out.attempts},
                ensure_ascii=False))

    records_path = cfg.path("records")
    _atomic_write(records_path, "\n".join(record_lines) + "\n")
    outputs = [records_path]
    rejections_path = cfg.path("rejections", required=False)
    if rejections_path is not None:
        _atomic_write(rejections_path, "\n".join(rejection_lines) + "\n")
        outputs.append(rejections_path)
    _write_manifest(records_path, "gen-instructions", cfg, args.seed, outputs)
    print(f"accepted {len(record_lines)} / {len(captions)} captions")
    return 0


def _image_meta_for(png: bytes, arr: np.ndarray) -> dict:
    meta = im.png_meta(png)
    out = {"width": arr.shape[1], "height": arr.shape[0]}
    if "stub-aesthetic" in meta:
        out["aesthetic"] = float(meta["stub-aesthetic"])
    return out


def cmd_filter(cfg: RunConfig, args) -> int:
    providers = _resolve_providers(cfg, args.stub_providers)
    images_dir = cfg.path("images_dir")
    rows = _read_jsonl(cfg.path("records"))
    records = [EditRecord.from_dict(r) for r in rows]

    def work(record: EditRecord) -> ft.FilterReport:
        png_o = (images_dir / record.image_file).read_bytes()
        png_e = (images_dir / record.edited_file).read_bytes()
        original = im.decode_png(png_o)
        edited = im.decode_png(png_e)
        if not args.skip_prefilter:
            ok, reasons = ft.pre_filter(record, _image_meta_for(png_o, original),
                                        cfg.thresholds)
            if not ok:
                return ft.FilterReport(
                    verdict="fail",
                    reasons=[f"prefilter:{r}" for r in reasons])
        return ft.run_gauntlet(record, original, edited, png_o, png_e,
                               providers, cfg.thresholds)

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            reports = list(pool.map(work, records))
    else:
        reports = [work(r) for r in records]

    report_lines = []
    accepted_lines = []
    for i, (record, report) in enumerate(zip(records, reports)):
        row = {"index": i, "edit type": record.edit_type,
               "image file": record.image_file}
        row.update(report.to_dict())
        report_lines.append(json.dumps(row, ensure_ascii=False))
        if report.verdict == "pass":
            accepted_lines.append(json.dumps(record.to_dict(),
                                             ensure_ascii=False))

    reports_path = cfg.path("reports")
    _atomic_write(reports_path, "\n".join(report_lines) + "\n")
    outputs = [reports_path]
    accepted_path = cfg.path("accepted", required=False)
    if accepted_path is not None:
        _atomic_write(accepted_path, "\n".join(accepted_lines) + "\n")
        outputs.append(accepted_path)
    summary = ft.summarize(reports)
    summary["config_digest"] = cfg.digest()
    summary_path = cfg.path("summary")
    _atomic_write(summary_path, json.dumps(summary, indent=2, sort_keys=True)
                  + "\n")
    outputs.append(summary_path)
    _write_manifest(reports_path, "filter", cfg, args.seed, outputs)
    print(f"pass {summary['pass']} / fail {summary['fail']} / "
          f"incomplete {summary['incomplete']} of {summary['total']}")
    return 0


def _load_training_set(cfg: RunConfig, model: md.ToyDenoiser,
                       providers: cl.ProviderSet) -> list[df.TrainingExample]:
    accepted = cfg.path("accepted", required=False)
    records_path = accepted if accepted is not None and accepted.exists() \
        else cfg.path("records")
    images_dir = cfg.path("images_dir")
    size = model.config.image_size
    examples = []
    for row in _read_jsonl(records_path):
        record = EditRecord.from_dict(row)
        original = im.resize_image(
            im.load_image(images_dir / record.image_file), size)
        target = im.resize_image(
            im.load_image(images_dir / record.edited_file), size)
        z_v = None
        if record.visual_input not in ("", "None"):
            png = (images_dir / record.visual_input).read_bytes()
            z_v = providers.embed.embed_image(png).values
        conditions = df.ConditionSet(
            c_i=original, c_t=model.encode_text(record.edit), c_v=z_v)
        examples.append(df.TrainingExample(from_array(target), conditions,
                                           record.edit_type))
    return examples


def cmd_train(cfg: RunConfig, args) -> int:
    providers = _resolve_providers(cfg, args.stub_providers)
    model = md.build(cfg.model)
    dataset = _load_training_set(cfg, model, providers)
    history: list[tuple[str, int, float]] = []
    if args.stage in ("1", "both"):
        for i, loss in enumerate(md.train_stage1(model, dataset, cfg.train)):
            history.append(("1", i, loss))
    if args.stage in ("2", "both"):
        if args.stage == "2":
            ckpt = cfg.path("checkpoint_dir")
            model = md.load_checkpoint(ckpt, expect_config=cfg.model)
            dataset = _load_training_set(cfg, model, providers)
        for i, loss in enumerate(md.train_stage2(model, dataset,
                                                 cfg.train_stage2)):
            history.append(("2", i, loss))

    ckpt_dir = cfg.path("checkpoint_dir")
    md.save_checkpoint(model, ckpt_dir)
    csv_path = cfg.path("loss_csv")
    lines = ["stage,step,loss"]
    lines += [f"{s},{i},{loss:.12g}" for s, i, loss in history]
    _atomic_write(csv_path, "\n".join(lines) + "\n")
    _write_manifest(csv_path, "train", cfg, args.seed,
                    [ckpt_dir, csv_path])
    print(f"trained stage {args.stage}: {len(history)} steps, "
          f"final loss {history[-1][2]:.6f}")
    return 0


def cmd_edit(cfg: RunConfig, args) -> int:
    providers = _resolve_providers(cfg, args.stub_providers)
    model = md.load_checkpoint(cfg.path("checkpoint_dir"),
                               expect_config=cfg.model)
    input_path = Path(args.input) if args.input else cfg.path("input_image")
    original = im.load_image(input_path)
    visual_ref = None
    ref_path = (Path(args.visual_ref) if args.visual_ref
                else cfg.path("visual_ref", required=False))
    if ref_path is not None:
        visual_ref = ref_path.read_bytes()
    predict_client = providers.textgen \
        if isinstance(providers.textgen, cl.RemoteTextGen) else None
    edited, predicted = md.edit_image(
        original, args.instruction, visual_ref, model, providers.embed,
        cfg.scales, cfg.sample_steps, np.random.default_rng(args.seed),
        predict_client=predict_client)
    out_path = Path(args.output) if args.output else cfg.path("output_image")
    _atomic_write_bytes(out_path, im.encode_png(edited))
    _write_manifest(out_path, "edit", cfg, args.seed, [out_path])
    print(f"edit type {predicted.task}"
          + (" (low confidence)" if predicted.low_confidence else ""))
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    providers = _resolve_providers(cfg, args.stub_providers)
    produced_path = (Path(args.produced) if args.produced
                     else cfg.path("produced_image"))
    reference_path = (Path(args.reference) if args.reference
                      else cfg.path("reference_image"))
    png_p = produced_path.read_bytes()
    png_r = reference_path.read_bytes()
    produced = im.decode_png(png_p)
    reference = im.decode_png(png_r)
    e_p = providers.embed.embed_image(png_p)
    e_r = providers.embed.embed_image(png_r)
    d_p = providers.embed2.embed_image(png_p)
    d_r = providers.embed2.embed_image(png_r)
    report = {
        "l1": ft.l1_distance(produced, reference),
        "clip_im": ft.clip_image_similarity(e_r, e_p).value,
        "dino": ft.clip_image_similarity(d_r, d_p).value,
        "config_digest": cfg.digest(),
    }
    if args.caption_in and args.caption_out:
        t_in = providers.embed.embed_text(args.caption_in)
        t_out = providers.embed.embed_text(args.caption_out)
        report["clip_out"] = ft.clip_text_alignment(e_p, t_out).value
        direction = ft.directional_similarity(e_r, e_p, t_in, t_out)
        report["directional"] = direction.value
        report["directional_degenerate"] = direction.degenerate
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    eval_path = cfg.path("eval_report", required=False)
    if eval_path is not None:
        _atomic_write(eval_path, text)
        _write_manifest(eval_path, "eval", cfg, args.seed, [eval_path])
    sys.stdout.write(text)
    return 0


def cmd_stats(cfg: RunConfig, args) -> int:
    rows = _read_jsonl(cfg.path("records"))
    per_type = {t: 0 for t in tasks.ALL_TASKS}
    for row in rows:
        task = tasks.validate_task(row["edit type"])
        per_type[task] += 1
    categories = {cat: sum(per_type[t] for t in members)
                  for cat, members in tasks.CATEGORIES.items()}
    report = {
        "per_type": {t: n for t, n in per_type.items() if n},
        "categories": {c: n for c, n in categories.items() if n},
        "total": len(rows),
        "config_digest": cfg.digest(),
        # full-scale reference counts, displayed for cross-checking only
        "reference": {
            "total_instructions": tasks.REFERENCE_TOTAL_INSTRUCTIONS,
            "per_type": tasks.REFERENCE_INSTRUCTION_COUNTS,
        },
    }
    sys.stdout.write(json.dumps(report, indent=2) + "\n")
    return 0


COMMANDS = {
    "gen-instructions": cmd_gen_instructions,
    "filter": cmd_filter,
    "train": cmd_train,
    "edit": cmd_edit,
    "eval": cmd_eval,
    "stats": cmd_stats,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="editforge",
        description="instruction-editing engine: dataset machinery and the "
                    "toy guided-diffusion editor")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--stub-providers", action="store_true",
                       help="force deterministic local providers")

    common(sub.add_parser("gen-instructions",
                          help="captions JSONL -> edit records JSONL"))
    f = sub.add_parser("filter",
                       help="records + images -> filter reports and summary")
    common(f)
    f.add_argument("--skip-prefilter", action="store_true")
    t = sub.add_parser("train", help="train the editing model")
    common(t)
    t.add_argument("--stage", choices=["1", "2", "both"], default="1")
    e = sub.add_parser("edit", help="edit one image")
    common(e)
    e.add_argument("--instruction", required=True)
    e.add_argument("--input", default=None)
    e.add_argument("--output", default=None)
    e.add_argument("--visual-ref", default=None)
    v = sub.add_parser("eval", help="metric battery between two images")
    common(v)
    v.add_argument("--produced", default=None)
    v.add_argument("--reference", default=None)
    v.add_argument("--caption-in", default=None)
    v.add_argument("--caption-out", default=None)
    s = sub.add_parser("stats", help="per-type counts over a records file")
    common(s)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        if args.seed is None:
            args.seed = cfg.seed
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        _emit_error(exc)
        return 2
    except ProviderError as exc:
        _emit_error(exc)
        return 3
    except EditForgeError as exc:
        _emit_error(exc)
        return 4


def _emit_error(exc: Exception) -> None:
    sys.stderr.write(json.dumps({
        "error": type(exc).__name__,
        "message": str(exc),
    }) + "\n")


if __name__ == "__main__":
    raise SystemExit(main())
