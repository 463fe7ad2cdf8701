"""Command-line entry point: ``gen``, ``run``, ``eval``, ``dump-bank``.

Exit codes: 0 success, 1 configuration or usage error, 2 file IO or format
error, 3 numerical failure. No command writes outside the output location
it is given.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .engine import AdaptationConfig, build_source_model, run_stream
from .errors import (
    ConfigError,
    ContractViolation,
    NonFiniteLoss,
    NumericalDegeneracy,
    RejectedInput,
    StreamFormatError,
)
from .formats import (
    iter_stream,
    read_bank,
    read_stream,
    read_stream_header,
    write_bank,
    write_cov_dump,
    write_cov_text,
    write_stream,
    write_stream_csv,
)
from .synth import ScenarioSpec, generate, make_scenario

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 1, 2, 3
SEED_ENV = "MMTTA_SEED"

MANIFEST_NAME = "manifest.json"
METRICS_NAME = "metrics.jsonl"
REPORT_NAME = "report.json"

# config fields whose flag name differs from the kebab-cased field name
_FLAG_ALIASES = {"lam": "lambda"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    except OSError as exc:
        raise StreamFormatError(f"cannot read file ({exc.strerror})", path) from exc
    return h.hexdigest()


def _load_json(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise StreamFormatError(f"cannot read file ({exc.strerror})", path) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc.msg} at line {exc.lineno}", "file") from None


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# -- gen ---------------------------------------------------------------------


def load_scenario(path) -> ScenarioSpec:
    """A full scenario, or ``{"make_scenario": {...}}`` as a shorthand for the random builder.

    With the shorthand an optional top-level ``"seed"`` redraws the samples
    while keeping the class structure, which is how a source stream and a
    target stream of the same scenario are produced.
    """
    data = _load_json(path)
    if not isinstance(data, dict):
        raise ConfigError("scenario file must hold a JSON object", "file")
    if "make_scenario" in data:
        extra = set(data) - {"make_scenario", "seed"}
        if extra:
            raise ConfigError("unknown key next to make_scenario", sorted(extra)[0])
        args = dict(data["make_scenario"])
        corr = args.pop("corruption", None)
        try:
            spec = make_scenario(**args)
        except TypeError as exc:
            raise ConfigError(str(exc), "make_scenario") from None
        if corr:
            spec = spec.with_corruption(**corr)
        if "seed" in data:
            spec = spec.replace(seed=int(data["seed"]))
        return spec
    return ScenarioSpec.from_dict(data)


def cmd_gen(args) -> int:
    spec = load_scenario(args.spec)
    stream = generate(spec)
    out = Path(args.out)
    write_stream(out, stream)
    if args.csv:
        write_stream_csv(out.with_suffix(".csv"), stream)
    print(f"wrote {len(stream)} samples to {out}")
    return 0


# -- run ---------------------------------------------------------------------


def load_config(path, overrides=None, env=None) -> AdaptationConfig:
    """Config file, then command-line overrides, then the seed environment variable."""
    data = _load_json(path) if path is not None else {}
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object", "file")
    data = dict(data)
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    env = os.environ if env is None else env
    if env.get(SEED_ENV) is not None:
        try:
            data["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError("must be an integer", SEED_ENV) from None
    return AdaptationConfig.from_dict(data)


def build_manifest(cfg, stream_path, source_path, outputs) -> dict:
    return {
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "inputs": {
            "stream": {"path": str(stream_path), "sha256": sha256_file(stream_path)},
            "source": {"path": str(source_path), "sha256": sha256_file(source_path)},
        },
        "outputs": outputs,
    }


def verify_manifest(path) -> list:
    """Return the input names whose current hash no longer matches the manifest."""
    manifest = _load_json(path)
    return [
        name
        for name, entry in manifest["inputs"].items()
        if sha256_file(entry["path"]) != entry["sha256"]
    ]


def cmd_run(args) -> int:
    overrides = {f.name: getattr(args, f"cfg_{f.name}") for f in fields(AdaptationConfig)}
    cfg = load_config(args.config, overrides)
    C, d1, d2, count = read_stream_header(args.stream)
    source = read_stream(args.source)
    if (source.x_m1.shape[1], source.x_m2.shape[1]) != (d1, d2) or source.num_classes != C:
        raise StreamFormatError("source stream shape does not match the target stream", args.source)

    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    outputs = {
        "manifest": MANIFEST_NAME,
        "metrics": METRICS_NAME,
        "report": REPORT_NAME,
        "banks": {p: f"bank_{p}.bin" for p in ("M1", "M2", "FUSED")},
    }
    if args.dump_cov:
        outputs["covariance_dumps"] = {p: [f"cov_{p}.bin", f"cov_{p}.txt"] for p in ("M1", "M2", "FUSED")}
    (outdir / MANIFEST_NAME).write_text(_dump_json(build_manifest(cfg, args.stream, args.source, outputs)))

    params = build_source_model(source, cfg, num_classes=C)
    with open(outdir / METRICS_NAME, "w") as metrics:
        metrics.write(json.dumps({"config": cfg.to_dict()}, sort_keys=True) + "\n")

        def emit(record):
            metrics.write(json.dumps(record, sort_keys=True) + "\n")

        report = run_stream(iter_stream(args.stream, cfg.batch_size), params, cfg, on_record=emit)
        metrics.write(json.dumps({"aggregates": report.aggregates}, sort_keys=True) + "\n")
    if report.samples_seen != count:
        raise StreamFormatError(f"read {report.samples_seen} samples, header promises {count}", args.stream)

    (outdir / REPORT_NAME).write_text(_dump_json(report.to_dict()))
    for persp, bank in report.banks.items():
        write_bank(outdir / outputs["banks"][persp.name], bank)
        if args.dump_cov:
            write_cov_dump(outdir / f"cov_{persp.name}.bin", bank)
            write_cov_text(outdir / f"cov_{persp.name}.txt", bank)
    agg = report.aggregates
    print(
        f"{agg['batches']} batches, {agg['samples']} samples: "
        f"fused {agg['acc_fused']}, source {agg['acc_source']}, gda {agg['acc_gda']}"
    )
    return 0


# -- eval --------------------------------------------------------------------

_EVAL_COLUMNS = ("acc_fused", "acc_source", "acc_gda")


def compare_reports(paths) -> list:
    """One row per report; ``delta`` is fused accuracy minus the first report's."""
    rows = []
    for path in paths:
        agg = _load_json(path).get("aggregates")
        if not isinstance(agg, dict):
            raise StreamFormatError("report has no aggregates", path)
        rows.append({"report": str(path), **{k: agg.get(k) for k in _EVAL_COLUMNS}})
    base = rows[0]["acc_fused"] if rows else None
    for row in rows:
        both = row["acc_fused"] is not None and base is not None
        row["delta"] = row["acc_fused"] - base if both else None
    return rows


def format_table(rows) -> str:
    def cell(v):
        return "-" if v is None else f"{v:.4f}" if isinstance(v, float) else str(v)

    header = ("report",) + _EVAL_COLUMNS + ("delta",)
    body = [[cell(r[h]) for h in header] for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    rows = compare_reports(args.reports)
    text = format_table(rows)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.txt").write_text(text)
        (out / "eval.json").write_text(_dump_json(rows))
    return 0


# -- dump-bank ---------------------------------------------------------------


def cmd_dump_bank(args) -> int:
    bank = read_bank(args.bank)
    print(f"perspective {bank.perspective.name}  d={bank.dim}  C={bank.num_classes}  updates={bank.updates}")
    print(f"alpha={bank.ema.alpha}  shrinkage={bank.shrinkage}")
    for c, (g, s) in enumerate(zip(bank.params, bank.stats)):
        print(f"class {c}: prior={g.prior:.6g} count={s.count:.6g} log_det={g.log_det:.6g}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_cov_dump(out / f"cov_{bank.perspective.name}.bin", bank)
        write_cov_text(out / f"cov_{bank.perspective.name}.txt", bank)
    return 0


# -- parser ------------------------------------------------------------------


def _add_config_flags(p):
    for f in fields(AdaptationConfig):
        flag = "--" + _FLAG_ALIASES.get(f.name, f.name).replace("_", "-")
        dest = f"cfg_{f.name}"
        if isinstance(f.default, bool):
            p.add_argument(flag, dest=dest, action="store_true", default=None)
        else:
            p.add_argument(flag, dest=dest, type=type(f.default), default=None, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adapgc", description="Streaming GDA test-time adaptation on synthetic two-modality streams.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a feature stream from a scenario file")
    p.add_argument("spec")
    p.add_argument("out")
    p.add_argument("--csv", action="store_true", help="also write a CSV next to OUT")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="adapt over a stream and write metrics, report and banks")
    p.add_argument("config")
    p.add_argument("stream")
    p.add_argument("outdir")
    p.add_argument("--source", required=True, help="clean labelled stream used for the source pre-fit")
    p.add_argument("--dump-cov", action="store_true", help="write covariance-deviation dumps per perspective")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="compare run reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", help="directory for eval.txt / eval.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-bank", help="summarize a bank checkpoint")
    p.add_argument("bank")
    p.add_argument("--out", help="directory for covariance dumps of this bank")
    p.set_defaults(func=cmd_dump_bank)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractViolation) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StreamFormatError, RejectedInput) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"io error: {exc.filename or ''} {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalDegeneracy, NonFiniteLoss, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
