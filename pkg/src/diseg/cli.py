"""Command-line entry point: gen-data, train, simulate, eval, verify, rerun.

Exit codes: 0 success, 1 usage, 2 data or runtime error, 3 verification failure.
Every command writes ``<output>.manifest.json`` next to its main output; the
``rerun`` command replays a manifest.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import CorpusConfig, CorpusFormatError, fingerprint, fixed_length_boundaries, generate, load_corpus, \
    save_corpus, vocab_sizes
from .metrics import MetricReport, corpus_bleu, corpus_latency, latency_metrics, segmentation_report
from .model import DiSegModel, ModelConfig, load_checkpoint, save_checkpoint
from .policy import format_k, parse_k, read_traces, simulate, write_traces
from .train import TrainingDiverged, train

log = logging.getLogger("diseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
LOSS_LOG_HEADER = ["epoch", "L_st", "L_asr", "L_mt", "L_num", "L_ctr", "total"]
BASELINE_SPACING_MS = 280.0


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; we reserve 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- manifests


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    code_version: str = ""
    duration_s: float = 0.0


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def code_version() -> str:
    """Package version plus a hash of the package sources."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def manifest_path(output: str | Path) -> Path:
    return Path(str(output) + ".manifest.json")


def write_manifest(manifest: RunManifest, primary_output: str | Path) -> Path:
    path = manifest_path(primary_output)
    atomic_write_text(path, json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")
    return path


def _ensure_parent(path: str | Path) -> None:
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise DataError(f"output directory {parent} does not exist")


def _load_corpus(path: str):
    try:
        return load_corpus(path)
    except FileNotFoundError as exc:
        raise DataError(f"corpus not found: {path}") from exc
    except (CorpusFormatError, ValueError) as exc:
        raise DataError(str(exc)) from exc


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, argv) -> int:
    start = time.perf_counter()
    overrides = _read_json(args.config)
    overrides.update(n_sentences=args.sentences, seed=args.seed)
    try:
        config = CorpusConfig.from_dict(overrides)
        config.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad corpus config: {exc}") from exc
    _ensure_parent(args.out)
    corpus = generate(config)
    try:
        save_corpus(corpus, args.out)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc}") from exc
    manifest = RunManifest("gen-data", argv, config.to_dict(), args.seed, {},
                           {args.out: sha256_file(args.out)}, code_version(), time.perf_counter() - start)
    write_manifest(manifest, args.out)
    log.info("wrote %d sentences to %s", len(corpus), args.out)
    return EXIT_OK


def cmd_train(args, argv) -> int:
    start = time.perf_counter()
    corpus = _load_corpus(args.corpus)
    if args.sentences is not None:
        corpus = corpus[: args.sentences]
    if not corpus:
        raise DataError("training corpus is empty")
    n_src, n_tgt = vocab_sizes(corpus)
    overrides = _read_json(args.config)
    overrides.update(src_vocab=n_src, tgt_vocab=n_tgt, frame_dim=int(corpus[0].features.frames.shape[1]),
                     seed=args.seed)
    for name in ("epochs", "lr", "batch_size", "d_model"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    try:
        cfg = ModelConfig.from_dict(overrides)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad model config: {exc}") from exc
    log_path = args.log or str(args.out) + ".loss.csv"
    _ensure_parent(args.out)
    _ensure_parent(log_path)
    try:
        params, history = train(corpus, cfg)
    except TrainingDiverged as exc:
        raise DataError(f"training diverged: {exc}") from exc
    except FloatingPointError as exc:
        raise DataError(f"non-finite loss during training: {exc}") from exc
    save_checkpoint(args.out, params, cfg, fingerprint(corpus))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOSS_LOG_HEADER)
    for entry in history:
        writer.writerow([entry.epoch] + [repr(float(v)) for v in entry.row()[1:]])
    atomic_write_text(log_path, buf.getvalue())
    manifest = RunManifest("train", argv, cfg.to_dict(), args.seed, {args.corpus: sha256_file(args.corpus)},
                           {args.out: sha256_file(args.out), log_path: sha256_file(log_path)}, code_version(),
                           time.perf_counter() - start)
    write_manifest(manifest, args.out)
    return EXIT_OK


def _parse_k_list(text: str) -> list[float]:
    try:
        ks = [parse_k(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --k value {text!r}: {exc}") from exc
    if not ks:
        raise UsageError("--k needs at least one value")
    return ks


def trace_filename(k: float) -> str:
    return f"traces_k{format_k(k)}.jsonl"


def cmd_simulate(args, argv) -> int:
    start = time.perf_counter()
    ks = _parse_k_list(args.k)
    try:
        params, cfg, _ = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {args.checkpoint}") from exc
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"malformed checkpoint {args.checkpoint}: {exc}") from exc
    corpus = _load_corpus(args.corpus)
    if args.sentences is not None:
        corpus = corpus[: args.sentences]
    out_dir = Path(args.out_dir)
    if not out_dir.is_dir():
        raise DataError(f"output directory {out_dir} does not exist")
    model = DiSegModel(params, cfg)
    outputs = {}
    for k in ks:
        traces = [simulate(s.features, model, k, s.frame_ms, s.id) for s in corpus]
        path = out_dir / trace_filename(k)
        write_traces(traces, path)
        outputs[str(path)] = sha256_file(path)
        log.info("k=%s: %d traces -> %s", format_k(k), len(traces), path)
    manifest = RunManifest("simulate", argv, {"k": [format_k(k) for k in ks], "sentences": len(corpus)}, None,
                           {args.checkpoint: sha256_file(args.checkpoint), args.corpus: sha256_file(args.corpus)},
                           outputs, code_version(), time.perf_counter() - start)
    write_manifest(manifest, out_dir / "simulate")
    return EXIT_OK


def evaluate_traces(traces, corpus_by_id: dict, tol_ms: float) -> MetricReport:
    """Metrics for one trace file against the reference corpus."""
    for tr in traces:
        if tr.id not in corpus_by_id:
            raise DataError(f"trace id {tr.id} not found in corpus")
    refs = [corpus_by_id[tr.id] for tr in traces]
    lat = corpus_latency([latency_metrics(tr.tau_ms, tr.T_ms) for tr in traces])
    bleu = corpus_bleu([tr.tokens for tr in traces], [s.target for s in refs])
    seg = segmentation_report([(tr.seg_boundaries_ms, s.boundaries_ms) for tr, s in zip(traces, refs)], tol_ms)
    k = format_k(traces[0].k) if traces else ""
    return MetricReport(k, lat and lat.AL, lat and lat.AP, lat and lat.CW, lat and lat.DAL, bleu, seg.P, seg.R,
                        seg.F1, seg.OS, seg.r_value, tol_ms, len(traces))


def cmd_eval(args, argv) -> int:
    start = time.perf_counter()
    if args.tolerance_frames < 0:
        raise UsageError("--tolerance-frames must be non-negative")
    corpus = _load_corpus(args.corpus)
    by_id = {s.id: s for s in corpus}
    frame_ms = corpus[0].frame_ms if corpus else 40.0
    tol_ms = args.tolerance_frames * frame_ms
    rows, extra = [], {}
    for path in args.traces:
        try:
            traces = read_traces(path)
        except FileNotFoundError as exc:
            raise DataError(f"trace file not found: {path}") from exc
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        if not traces:
            raise DataError(f"trace file {path} is empty")
        report = evaluate_traces(traces, by_id, tol_ms)
        rows.append(report)
        counts = [abs(len(tr.seg_boundaries_ms) - by_id[tr.id].K) for tr in traces]
        extra[report.k] = {"mean_abs_count_error": float(np.mean(counts)),
                           "capped": sum(tr.capped for tr in traces)}
    ids = sorted({tr_id for tr_id in by_id})
    baseline = segmentation_report(
        [(fixed_length_boundaries(by_id[i].T_ms, args.baseline_spacing_ms), by_id[i].boundaries_ms) for i in ids],
        tol_ms)

    buf = io.StringIO()
    buf.write(f"# tolerance_frames={args.tolerance_frames} tolerance_ms={tol_ms:g}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MetricReport.CSV_FIELDS)
    for r in rows:
        writer.writerow(r.csv_row())
    _ensure_parent(args.out)
    atomic_write_text(args.out, buf.getvalue())
    json_path = args.json or str(args.out) + ".json"
    doc = {
        "tolerance_frames": args.tolerance_frames,
        "tolerance_ms": tol_ms,
        "rows": [r.to_dict() for r in rows],
        "per_k": extra,
        "fixed_length_baseline": {"spacing_ms": args.baseline_spacing_ms, **asdict(baseline)},
    }
    atomic_write_text(json_path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    inputs = {p: sha256_file(p) for p in args.traces}
    inputs[args.corpus] = sha256_file(args.corpus)
    manifest = RunManifest("eval", argv, {"tolerance_frames": args.tolerance_frames,
                                          "baseline_spacing_ms": args.baseline_spacing_ms}, None, inputs,
                           {args.out: sha256_file(args.out), json_path: sha256_file(json_path)}, code_version(),
                           time.perf_counter() - start)
    write_manifest(manifest, args.out)
    return EXIT_OK


def cmd_verify(args, argv) -> int:
    from .verify import run_all

    report = run_all(gradient_fault=args.inject_gradient_fault)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        _ensure_parent(args.out)
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    for fam in report["families"]:
        status = "PASS" if fam["passed"] else "FAIL"
        print(f"{status} {fam['name']}: {fam['checks']} checks, {fam['failures']} failures, "
              f"max error {fam['max_error']:.3g}", file=sys.stderr)
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def cmd_rerun(args, argv) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
        recorded = manifest["argv"]
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"cannot read manifest {args.manifest}: {exc}") from exc
    if recorded and recorded[0] == "rerun":
        raise UsageError("refusing to rerun a rerun manifest")
    return main(recorded)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="diseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a planted-boundary corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sentences", type=int, default=2000)
    p.add_argument("--config", help="JSON file with corpus config overrides")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="loss log CSV (default <out>.loss.csv)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--d-model", type=int)
    p.add_argument("--sentences", type=int, help="train on the first N sentences only")
    p.add_argument("--config", help="JSON file with model config overrides")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="stream a corpus through the wait-seg policy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--k", required=True, help='comma-separated lagging values, e.g. "1,3,5,7" or "inf"')
    p.add_argument("--out-dir", required=True)
    p.add_argument("--sentences", type=int, help="simulate the first N sentences only")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="latency, quality and boundary metrics from trace files")
    p.add_argument("--traces", nargs="+", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="metrics CSV")
    p.add_argument("--json", help="JSON report (default <out>.json)")
    p.add_argument("--tolerance-frames", type=int, default=1)
    p.add_argument("--baseline-spacing-ms", type=float, default=BASELINE_SPACING_MS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the self-contained check suite")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.add_argument("--inject-gradient-fault", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("rerun", help="replay the command recorded in a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    recorded = [a for a in argv if a not in ("-v", "--verbose")]
    try:
        return args.func(args, recorded)
    except UsageError as exc:
        print(f"diseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"diseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"diseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
