"""Command-line entry point: ``spexpp {gen-data,train,extract,evaluate}``.

Exit codes: 0 ok, 2 config/usage or input error, 3 numeric failure,
4 corrupt artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, all_keys, parse_override
from .dataset import SPLITS, Manifest, file_checksum, generate_corpus
from .multistage import SpExPlusPlus, forward_pipeline
from .network import ModelConfig
from .signal_core import Waveform, improvement
from .training import NumericError, fit
from .wavio import WavFormatError, load_wav, save_wav

logger = logging.getLogger("spexpp")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_CORRUPT = 0, 2, 3, 4
CORPUS_STAMP = "corpus.json"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# gen-data


def _corpus_keys(cfg: RunConfig) -> dict:
    keys = ("corpus_seed", "num_speakers", "test_speakers", "utterances_per_speaker", "num_train",
            "num_dev", "num_test", "utterance_seconds", "reference_seconds", "conditions")
    return {k: getattr(cfg, k) for k in keys}


def _corpus_files(data_dir: Path) -> List[Path]:
    files = [data_dir / f"{s}.jsonl" for s in SPLITS]
    for split in SPLITS:
        files.extend(sorted((data_dir / split).glob("*.wav")))
    return files


def _up_to_date(cfg: RunConfig, data_dir: Path) -> bool:
    stamp = data_dir / CORPUS_STAMP
    if not stamp.exists():
        return False
    try:
        saved = json.loads(stamp.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return False
    if saved.get("corpus") != json.loads(json.dumps(_corpus_keys(cfg))):
        return False
    sums = saved.get("checksums", {})
    current = _corpus_files(data_dir)
    if len(current) != len(sums):
        return False
    for path in current:
        rel = path.relative_to(data_dir).as_posix()
        if not path.exists() or sums.get(rel) != file_checksum(path):
            return False
    return True


def cmd_gen_data(cfg: RunConfig) -> int:
    data_dir = Path(cfg.data_dir)
    if _up_to_date(cfg, data_dir):
        print(f"{data_dir}: up-to-date (checksums match)")
        return EXIT_OK
    manifests = generate_corpus(
        cfg.num_speakers, cfg.utterances_per_speaker, cfg.corpus_seed, data_dir,
        test_speakers=cfg.test_speakers, num_train=cfg.num_train, num_dev=cfg.num_dev,
        num_test=cfg.num_test, utterance_seconds=cfg.utterance_seconds,
        reference_seconds=cfg.reference_seconds, conditions=cfg.conditions)
    sums = {p.relative_to(data_dir).as_posix(): file_checksum(p) for p in _corpus_files(data_dir)}
    stamp = dict(corpus=_corpus_keys(cfg), checksums=sums)
    (data_dir / CORPUS_STAMP).write_text(json.dumps(stamp, indent=1, sort_keys=True) + "\n",
                                         encoding="utf-8")
    for split, m in manifests.items():
        print(f"{split:5s} {len(m):5d} records  speakers {sorted(m.speaker_ids())}  "
              f"-> {data_dir / (split + '.jsonl')}")
    return EXIT_OK


# --------------------------------------------------------------------------
# train


def _load_manifest(path: Path, conditions) -> Manifest:
    if not path.exists():
        raise UsageError(f"manifest {path} not found; run gen-data first")
    manifest = Manifest.load(path)
    return manifest.filter(conditions) if conditions else manifest


def cmd_train(cfg: RunConfig, resume: bool = False) -> int:
    data_dir, run_dir = Path(cfg.data_dir), Path(cfg.run_dir)
    conditions = cfg.train_conditions or cfg.conditions
    train = _load_manifest(data_dir / "train.jsonl", conditions)
    dev = _load_manifest(data_dir / "dev.jsonl", conditions)
    if not len(train) or not len(dev):
        raise UsageError(f"no train/dev records for conditions {conditions}")
    torch.manual_seed(cfg.train.seed)
    model = SpExPlusPlus(cfg.model)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")
    result = fit(model, train, dev, cfg.train, out_dir=run_dir, resume=resume)
    print(f"best dev SI-SDRi {result.best_metric:.3f} dB after {len(result.history)} epochs; "
          f"checkpoint {result.best_checkpoint}")
    return EXIT_OK


# --------------------------------------------------------------------------
# extract


@torch.no_grad()
def cmd_extract(checkpoint, mixture, reference, out) -> int:
    model = load_checkpoint(checkpoint).eval()
    mix = load_wav(mixture)
    ref = load_wav(reference)
    result = forward_pipeline(mix, ref, model)
    est = result.final[0].double().numpy()
    peak = float(np.max(np.abs(est)))
    if peak > 1.0:
        est = est / peak
    save_wav(Waveform(est, mix.sample_rate), out)
    print(f"wrote {out}: {len(est)} samples from stage {len(result)} of {model.num_stages}")
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluate


def reference_mode(config: ModelConfig, stage: int) -> str:
    if stage == 0:
        return "mixture"
    if stage == 1:
        return "utt"
    parts = [name for name, on in (("utt", config.use_utt), ("frame", config.use_frame)) if on]
    return "+".join(parts) if parts else "utt(stage1)"


@torch.no_grad()
def evaluate_manifest(model, manifest: Manifest, num_stages: Optional[int] = None):
    """Per-example rows (stage 0 is the unprocessed mixture) and failure list."""
    model.eval()
    rows, failures = [], []
    for i, rec in enumerate(manifest.records):
        try:
            ex = manifest.load_example(i)
            out = forward_pipeline(ex.mixture, ex.reference, model, num_stages)
            stage_rows = [dict(index=i, condition=rec.condition, stage=0, sdri=0.0, si_sdri=0.0)]
            for k, stage in enumerate(out.stages, 1):
                est = stage.fused[0].double().numpy()
                if not np.all(np.isfinite(est)):
                    raise FloatingPointError("non-finite estimate")
                sdri, si_sdri = improvement(est, ex.mixture.samples, ex.target.samples)
                stage_rows.append(dict(index=i, condition=rec.condition, stage=k, sdri=sdri,
                                       si_sdri=si_sdri))
        except (OSError, ValueError, FloatingPointError) as exc:
            logger.warning("example %d (%s) failed: %s", i, rec.mixture_path, exc)
            failures.append(dict(index=i, condition=rec.condition, error=str(exc)))
            continue
        rows.extend(stage_rows)
    return rows, failures


def summarize(rows, failures, config: ModelConfig) -> List[dict]:
    groups = defaultdict(list)
    for r in rows:
        groups[(r["condition"], r["stage"])].append(r)
    failed = defaultdict(int)
    for f in failures:
        failed[f["condition"]] += 1
    report = []
    for (cond, stage), items in sorted(groups.items()):
        report.append(dict(condition=cond, num_stages=stage,
                           reference_mode=reference_mode(config, stage),
                           sdri=float(np.mean([r["sdri"] for r in items])),
                           si_sdri=float(np.mean([r["si_sdri"] for r in items])),
                           count=len(items), failed=failed[cond]))
    return report


def format_table(report: List[dict]) -> str:
    head = f"{'condition':14s} {'stage':>5s} {'reference':12s} {'SDRi (dB)':>10s} " \
           f"{'SI-SDRi (dB)':>13s} {'n':>5s} {'failed':>6s}"
    lines = [head, "-" * len(head)]
    for r in report:
        lines.append(f"{r['condition']:14s} {r['num_stages']:5d} {r['reference_mode']:12s} "
                     f"{r['sdri']:10.3f} {r['si_sdri']:13.3f} {r['count']:5d} {r['failed']:6d}")
    return "\n".join(lines)


def cmd_evaluate(checkpoint, manifest_path, report_path, num_stages=None, use_utt=None,
                 use_frame=None, conditions=None) -> List[dict]:
    model = load_checkpoint(checkpoint)
    if use_utt is not None:
        model.config.use_utt = use_utt
    if use_frame is not None:
        model.config.use_frame = use_frame
    if num_stages is not None and not 1 <= num_stages <= model.num_stages:
        raise UsageError(f"--num-stages must be in 1..{model.num_stages}")
    manifest = _load_manifest(Path(manifest_path), conditions)
    rows, failures = evaluate_manifest(model, manifest, num_stages)
    report = summarize(rows, failures, model.config)
    report_path = Path(report_path)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    with open(report_path, "w", encoding="utf-8") as fh:
        for r in report:
            fh.write(json.dumps(r) + "\n")
    with open(report_path.with_suffix(".examples.jsonl"), "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
        for f in failures:
            fh.write(json.dumps(dict(f, failed=True)) + "\n")
    table = format_table(report)
    report_path.with_suffix(".txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return report


# --------------------------------------------------------------------------
# argument parsing


def _add_overrides(parser):
    group = parser.add_argument_group("config overrides")
    for key in all_keys():
        group.add_argument("--" + key.replace("_", "-"), dest="ov_" + key, metavar="VALUE")


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spexpp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic corpus")
    p.add_argument("--config", required=True)
    _add_overrides(p)

    p = sub.add_parser("train", help="train a model on the generated corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", action="store_true", help="continue from run_dir/train_state.pt")
    _add_overrides(p)

    p = sub.add_parser("extract", help="extract the target speaker from a mixture WAV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mixture", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="per-condition, per-stage SDRi / SI-SDRi report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True, help="JSONL summary path (.txt table written alongside)")
    p.add_argument("--num-stages", type=int)
    p.add_argument("--use-utt", type=_bool)
    p.add_argument("--use-frame", type=_bool)
    p.add_argument("--conditions", help="comma-separated subset of conditions")
    return parser


def _run_config(args) -> RunConfig:
    overrides = {k[3:]: parse_override(k[3:], v) for k, v in vars(args).items()
                 if k.startswith("ov_") and v is not None}
    return RunConfig.load(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-data":
            return cmd_gen_data(_run_config(args))
        if args.command == "train":
            return cmd_train(_run_config(args), resume=args.resume)
        if args.command == "extract":
            return cmd_extract(args.checkpoint, args.mixture, args.reference, args.out)
        conditions = args.conditions.split(",") if args.conditions else None
        cmd_evaluate(args.checkpoint, args.manifest, args.report, args.num_stages, args.use_utt,
                     args.use_frame, conditions)
        return EXIT_OK
    except CheckpointError as exc:
        print(f"error: corrupt checkpoint: {exc} (key {exc.key})", file=sys.stderr)
        return EXIT_CORRUPT
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, WavFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
