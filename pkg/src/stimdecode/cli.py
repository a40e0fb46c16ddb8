"""Command-line front end.

Subcommands: ``synth``, ``convert``, ``preprocess``, ``train`` and ``evaluate``.
Every run writes ``config.json`` (a snapshot of its arguments) and ``VERSION``
into its output directory; ``<command> --config <snapshot>`` reproduces it.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    Condition,
    Dataset,
    SyntheticConfig,
    Trial,
    generate_synthetic,
    load_dataset,
    preprocess_dataset,
    preprocess_trial,
    save_dataset,
    validate_real_layout,
)
from .decoder import AttentionLabels, load_decoder, save_decoder
from .envelope import Envelope
from .errors import ConfigError, MissingFileError, SchemaError, StimDecodeError
from .evaluation import (
    DEFAULT_WINDOW_LENGTHS,
    DecoderConfig,
    Protocol,
    cross_dataset,
    evaluate_decoder,
    run_protocol,
    train_on_dataset,
)
from .signal import MultichannelSignal

log = logging.getLogger("stimdecode")

OUTPUT_ROOT_ENV = "STIMDECODE_OUTPUT_ROOT"
EXPORT_FILE = "export.json"


# --------------------------------------------------------------------------- argument types

def _range(text: str):
    try:
        a, b = (float(v) for v in str(text).split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LOW:HIGH, got {text!r}") from None
    return [a, b]


def _floats(text: str):
    try:
        return [float(v) for v in str(text).split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _shrinkage(text: str):
    if text in ("ledoit-wolf", "ledoit-wolf-per-trial", "none"):
        return text
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            "shrinkage must be ledoit-wolf, ledoit-wolf-per-trial, none or a number in [0, 1]") from None
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError(f"shrinkage intensity {v} outside [0, 1]")
    return v


def _db(text: str) -> float:
    return float(text)


# --------------------------------------------------------------------------- helpers

def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if not root:
        raise ConfigError(f"no --out given and {OUTPUT_ROOT_ENV} is not set")
    return Path(root) / args.command


def _snapshot(args) -> dict:
    skip = {"func", "config", "out", "force"}
    values = {k: v for k, v in vars(args).items() if k not in skip}
    for k, v in values.items():
        if isinstance(v, float) and math.isinf(v):
            values[k] = "inf" if v > 0 else "-inf"
    return {"tool": "stimdecode", "version": __version__, "command": args.command, "args": values}


def _write_stamps(out: Path, args):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(_snapshot(args), indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    (out / "VERSION").write_text(f"stimdecode {__version__}\n", encoding="utf-8")


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) in (None, ""):
            raise ConfigError(f"{args.command}: --{n.replace('_', '-')} is required")


def _decoder_config(args) -> DecoderConfig:
    return DecoderConfig(tuple(args.lags_ms), args.shrinkage)


def _check_fs(ds: Dataset, fs: float):
    if ds.fs is not None and not np.isclose(ds.fs, fs):
        raise ConfigError(
            f"dataset {ds.name!r} is at {ds.fs} Hz but --fs is {fs}; run `preprocess` first")


# --------------------------------------------------------------------------- commands

def cmd_synth(args) -> Path:
    out = _out_dir(args)
    cfg = SyntheticConfig(
        n_subjects=args.subjects, n_channels=args.channels, duration_s=args.duration_s,
        fs=args.fs, kernel_ms=args.kernel_ms, snr_db=float(args.snr_db),
        unattended_leak_db=float(args.leak_db), subject_variability=args.subject_variability,
        seed=args.seed, family_seed=args.family_seed, name=args.name,
        conditions=tuple(Condition.parse(c) for c in args.conditions))
    ds = generate_synthetic(cfg)
    save_dataset(ds, out, force=args.force)
    _write_stamps(out, args)
    print(f"wrote {sum(1 for _ in ds.trials())} trials for {len(ds.subjects)} subjects to {out}")
    return out


def _load_array(root: Path, rel, where: str) -> np.ndarray:
    if not isinstance(rel, str):
        raise SchemaError(f"{where}: expected a file name, got {rel!r}")
    path = root / rel
    if not path.exists():
        raise MissingFileError(f"{path}: referenced by {where} but not found")
    try:
        return np.load(path, allow_pickle=False)
    except ValueError as exc:
        raise SchemaError(f"{path}: not a numeric .npy array ({exc})") from exc


_EXPORT_KEYS = {"name", "fs", "channel_labels", "trials", "conditions", "trials_per_condition"}
_EXPORT_TRIAL_KEYS = {"subject", "condition", "trial", "eeg", "envelope_1", "envelope_2", "attended"}


def read_export(export_dir) -> Dataset:
    """Read the intermediate export layout (``export.json`` plus ``.npy`` arrays)."""
    root = Path(export_dir)
    path = root / EXPORT_FILE
    if not path.exists():
        raise MissingFileError(f"{path}: export description not found")
    try:
        spec = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    for extra in sorted(set(spec) - _EXPORT_KEYS):
        log.warning("%s: ignoring unknown field %r", path, extra)
    if "fs" not in spec or "trials" not in spec:
        raise SchemaError(f"{path}: fields 'fs' and 'trials' are required")
    fs = float(spec["fs"])
    labels = spec.get("channel_labels")
    subjects = {}
    for i, e in enumerate(spec["trials"]):
        where = f"{path}: trials[{i}]"
        for extra in sorted(set(e) - _EXPORT_TRIAL_KEYS):
            log.warning("%s: ignoring unknown field %r", where, extra)
        missing = sorted(_EXPORT_TRIAL_KEYS - set(e))
        if missing:
            raise SchemaError(f"{where}: missing field(s) {missing}")
        eeg = _load_array(root, e["eeg"], where)
        s1 = _load_array(root, e["envelope_1"], where).ravel()
        s2 = _load_array(root, e["envelope_2"], where).ravel()
        n = eeg.shape[0]
        try:
            y = AttentionLabels.from_runs(e["attended"], n)
            trial = Trial(str(e["subject"]), Condition.parse(e["condition"]), int(e["trial"]),
                          MultichannelSignal(eeg, fs, labels), Envelope(s1, fs), Envelope(s2, fs),
                          y, {"source": str(path)})
        except SchemaError:
            raise
        except StimDecodeError as exc:
            raise SchemaError(f"{where}: {exc}") from exc
        subjects.setdefault(trial.subject, []).append(trial)
    return Dataset(spec.get("name", root.name), subjects,
                   tuple(spec.get("conditions", [c.value for c in Condition])),
                   int(spec.get("trials_per_condition", 2)))


def cmd_convert(args) -> Path:
    _require(args, "input")
    out = _out_dir(args)
    ds = read_export(args.input)
    if args.layout == "avgc":
        for t in ds.trials():
            validate_real_layout(t)
    if not args.no_preprocess:
        ds = preprocess_dataset(ds, tuple(args.band_hz), args.fs)
    save_dataset(ds, out, force=args.force)
    _write_stamps(out, args)
    absent = ds.absent_cells()
    print(f"converted {sum(1 for _ in ds.trials())} trials; {len(absent)} absent cell(s)")
    return out


def cmd_preprocess(args) -> Path:
    _require(args, "dataset")
    out = _out_dir(args)
    ds = preprocess_dataset(load_dataset(args.dataset), tuple(args.band_hz), args.fs)
    save_dataset(ds, out, force=args.force)
    _write_stamps(out, args)
    print(f"preprocessed {sum(1 for _ in ds.trials())} trials to {args.fs} Hz")
    return out


def cmd_train(args) -> Path:
    _require(args, "dataset")
    out = _out_dir(args)
    ds = load_dataset(args.dataset)
    _check_fs(ds, args.fs)
    model = train_on_dataset(ds, _decoder_config(args), jobs=args.jobs)
    _write_stamps(out, args)
    path = save_decoder(model, out / "decoder")
    print(f"trained on {model.n_samples} samples, lambda = {model.lam:.4g}; wrote {path}")
    return out


def _summary(report) -> str:
    wl = 60.0 if 60.0 in report.window_lengths else max(report.window_lengths)
    key = repr(float(wl))
    lines = [f"protocol {report.protocol}: mean accuracy at {wl:g} s",
             f"{'condition':<20}{'accuracy':>10}{'threshold':>11}{'subjects':>10}"]

    def row(name, e):
        acc = "-" if e["accuracy"] is None else f"{100 * e['accuracy']:.1f}%"
        thr = "-" if e["threshold"] is None else f"{100 * e['threshold']:.1f}%"
        lines.append(f"{name:<20}{acc:>10}{thr:>11}{e['n_subjects']:>10}")

    for cond, e in report.condition_mean[key].items():
        row(cond, e)
    row("all", report.mean[key])
    return "\n".join(lines)


def cmd_evaluate(args) -> Path:
    _require(args, "dataset", "protocol")
    out = _out_dir(args)
    protocol = Protocol.parse(args.protocol)
    test = load_dataset(args.dataset)
    _check_fs(test, args.fs)
    kw = dict(window_lengths=args.windows, alpha=args.alpha, overlap=args.overlap,
              drop_partial=not args.keep_partial)
    if protocol is Protocol.CrossDataset:
        if args.decoder:
            report = evaluate_decoder(load_decoder(args.decoder), test, **kw)
        else:
            _require(args, "train_dataset")
            train = load_dataset(args.train_dataset)
            report = cross_dataset(train, test, decoder=_decoder_config(args), jobs=args.jobs, **kw)
    else:
        report = run_protocol(test, protocol, decoder=_decoder_config(args), jobs=args.jobs, **kw)
    _write_stamps(out, args)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    report.write_decisions_csv(out / "decisions.csv")
    report.write_figure_csv(out / "figure_data.csv")
    report.write_summary_csv(out / "summary.csv")
    print(_summary(report))
    return out


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stimdecode", description="Linear stimulus-reconstruction auditory attention decoding.")
    parser.add_argument("--version", action="version", version=f"stimdecode {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p, out=True):
        p.add_argument("--config", help="rerun from a config.json snapshot; explicit flags override it")
        if out:
            p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<command>)")
            p.add_argument("--force", action="store_true", help="overwrite an existing dataset")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--subjects", type=int, default=4)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--duration-s", type=float, default=600.0)
    p.add_argument("--fs", type=float, default=20.0)
    p.add_argument("--kernel-ms", type=float, default=400.0)
    p.add_argument("--snr-db", type=_db, default=0.0)
    p.add_argument("--leak-db", type=_db, default=-6.0)
    p.add_argument("--subject-variability", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--family-seed", type=int, default=0)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--conditions", type=lambda s: s.split(","),
                   default=[c.value for c in Condition])
    p.set_defaults(func=cmd_synth)

    def preprocessing(p):
        p.add_argument("--band-hz", type=_range, default=[1.0, 9.0])
        p.add_argument("--fs", type=float, default=20.0, help="target sampling rate (Hz)")

    p = sub.add_parser("convert", help="convert an intermediate export into a dataset container")
    common(p)
    p.add_argument("--input", help=f"export directory containing {EXPORT_FILE}")
    p.add_argument("--layout", choices=["avgc", "generic"], default="avgc",
                   help="avgc: enforce 600 s trials with one switch at 300 s")
    p.add_argument("--no-preprocess", action="store_true")
    preprocessing(p)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("preprocess", help="bandpass, resample and z-score a dataset")
    common(p)
    p.add_argument("--dataset")
    preprocessing(p)
    p.set_defaults(func=cmd_preprocess)

    def decoding(p):
        p.add_argument("--lags-ms", type=_range, default=[0.0, 400.0])
        p.add_argument("--shrinkage", type=_shrinkage, default="ledoit-wolf")
        p.add_argument("--fs", type=float, default=20.0, help="expected dataset sampling rate (Hz)")
        p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("train", help="train one decoder on all trials of a dataset")
    common(p)
    p.add_argument("--dataset")
    decoding(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run a cross-validation protocol")
    common(p)
    p.add_argument("--dataset", help="dataset to evaluate (the test set for cross-dataset)")
    p.add_argument("--train-dataset", help="training dataset for --protocol cross-dataset")
    p.add_argument("--decoder", help="pre-trained decoder for --protocol cross-dataset")
    p.add_argument("--protocol", choices=[p_.value for p_ in Protocol])
    p.add_argument("--windows", type=_floats, default=list(DEFAULT_WINDOW_LENGTHS),
                   help="decision window lengths in seconds, comma-separated")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--overlap", type=float, default=0.0)
    p.add_argument("--keep-partial", action="store_true")
    decoding(p)
    p.set_defaults(func=cmd_evaluate)
    return parser


def _join_negative_values(argv):
    # argparse takes "-inf" for an option; bind it to the preceding flag instead
    out = []
    for tok in argv:
        if out and out[-1].startswith("--") and "=" not in out[-1] and \
                tok.lower() in ("-inf", "-infinity"):
            out[-1] = f"{out[-1]}={tok}"
        else:
            out.append(tok)
    return out


def _parse(parser, argv):
    argv = _join_negative_values(list(sys.argv[1:] if argv is None else argv))
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise MissingFileError(f"{path}: config snapshot not found")
        snap = json.loads(path.read_text(encoding="utf-8"))
        if snap.get("command") != args.command:
            raise ConfigError(f"{path}: snapshot is for {snap.get('command')!r}, not {args.command!r}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**{k: v for k, v in snap["args"].items() if k != "command"})
        args = parser.parse_args(argv)
    return args


def _fail(exc: BaseException, code: int, kind: str) -> int:
    msg = " ".join(str(exc).split())
    print(f"stimdecode: error[{kind}] exit={code}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if not args.command:
            parser.print_help(sys.stderr)
            return 2
        args.func(args)
        return 0
    except StimDecodeError as exc:
        return _fail(exc, exc.exit_code, exc.kind)
    except OSError as exc:
        return _fail(exc, 3, "io")
    except Exception as exc:  # noqa: BLE001
        return _fail(exc, 4, type(exc).__name__)


if __name__ == "__main__":
    sys.exit(main())
