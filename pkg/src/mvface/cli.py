"""mvface command line: gen, extract, train, eval, noise-sweep, report.

Exit codes: 0 success, 2 usage, 3 I/O, 4 data validation, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .classifiers import FAMILIES, ModelFormatError, TrainConfig, TrainingError
from .datagen import ALLOWED_YAWS, generate_dataset
from .ensemble import decision_log_csv, fuse, train_ensemble, write_ensembles
from .evaluation import (
    CaseKind,
    EvalCase,
    format_grid,
    noise_sweep,
    read_report_csv,
    run_case,
    sweep_csv,
)
from .imagecore import EmptyImageError, ImageReadError, UnsupportedFormatError, load_image
from .surf import DetectorConfig
from .template import (
    ANGLE_DIRS,
    DatasetError,
    SplitSpec,
    TemplateFormatError,
    TemplateSet,
    extract_templates,
    read_templates,
    scan_dataset,
    split,
    templates_csv,
    write_templates,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5

# fixed offsets from --seed; documented in --help
TRAIN_SEED_OFFSET = 100
NOISE_SEED_OFFSET = 200

SEED_HELP = (
    "all randomness derives from --seed: dataset root seed = seed, split seed = seed, "
    f"ensemble member i seed = seed + {TRAIN_SEED_OFFSET} + i, probe noise seed = seed + {NOISE_SEED_OFFSET}"
)


class UsageError(Exception):
    pass


# (section, key, type, default)
SETTINGS = {
    "data": ("data", "root", str, None),
    "k": ("data", "k", int, 4),
    "threshold": ("detector", "threshold", float, DetectorConfig().response_threshold),
    "octaves": ("detector", "octaves", int, DetectorConfig().octaves),
    "intervals": ("detector", "intervals", int, DetectorConfig().intervals_per_octave),
    "upright": ("detector", "upright", bool, False),
    "hidden": ("train", "hidden_units", int, 500),
    "epochs": ("train", "epochs", int, 300),
    "lr": ("train", "learning_rate", float, 0.03),
    "m": ("ensemble", "m", int, 5),
    "accuracy_weights": ("ensemble", "accuracy_weights", bool, False),
    "train_fraction": ("split", "train_fraction", float, 0.7),
    "sigmas": ("eval", "sigmas", str, "0,0.05"),
    "denoise": ("eval", "denoise", bool, True),
    "filter_k": ("eval", "filter_k", int, 3),
    "pooled": ("eval", "pooled_enrollment", bool, False),
    "seed": ("run", "seed", int, 0),
    "threads": ("run", "threads", int, None),
}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def resolve(args: argparse.Namespace, config: configparser.ConfigParser | None, name: str):
    """Flag value if given, else config file value, else the built-in default."""
    section, key, kind, default = SETTINGS[name]
    value = getattr(args, name, None)
    if value is not None:
        return value
    if config is not None and config.has_option(section, key):
        raw = config.get(section, key)
        try:
            return _parse_bool(raw) if kind is bool else kind(raw)
        except ValueError as exc:
            raise UsageError(f"config [{section}] {key}: {exc}") from exc
    if name == "threads":
        return os.cpu_count() or 1
    return default


def _load_config(path: str | None) -> configparser.ConfigParser | None:
    if path is None:
        return None
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise UsageError(f"config file {path}: {exc}") from exc
    return cp


@dataclass(frozen=True)
class RunConfig:
    data_root: Path | None
    K: int
    detector: DetectorConfig
    train: TrainConfig
    M: int
    accuracy_weights: bool
    split: SplitSpec
    seed: int
    threads: int


def build_run_config(args, config) -> RunConfig:
    r = lambda n: resolve(args, config, n)  # noqa: E731
    seed = r("seed")
    threads = r("threads")
    if seed < 0 or seed >= 2**64:
        raise UsageError("--seed must be a 64-bit unsigned integer")
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    K = r("k")
    M = r("m")
    if K < 1:
        raise UsageError("K must be >= 1")
    if M < 1:
        raise UsageError("ensemble size M must be >= 1")
    try:
        detector = DetectorConfig(
            octaves=r("octaves"), intervals_per_octave=r("intervals"),
            response_threshold=r("threshold"), upright=r("upright"),
        )
        train = TrainConfig(r("hidden"), r("epochs"), r("lr"), seed + TRAIN_SEED_OFFSET)
        sp = SplitSpec(r("train_fraction"), seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    root = r("data")
    return RunConfig(Path(root) if root else None, K, detector, train, M, r("accuracy_weights"), sp, seed, threads)


def parse_angles(text: str) -> list[int]:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok in ANGLE_DIRS:
            out.append(ANGLE_DIRS[tok])
            continue
        try:
            v = int(tok)
        except ValueError:
            raise UsageError(f"bad view angle {tok!r}") from None
        if v not in ALLOWED_YAWS:
            raise UsageError(f"view angle {v} not in {ALLOWED_YAWS}")
        out.append(v)
    if not out:
        raise UsageError("no view angles given")
    return out


def parse_sigmas(text: str) -> list[float]:
    """``a,b,c`` lists or ``start:stop:step`` inclusive ranges."""
    text = text.strip()
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            n = int(np.floor((stop - start) / step + 1e-9))
            values = [round(start + i * step, 12) for i in range(n + 1)]
        else:
            values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad sigma list {text!r} (use a,b,c or start:stop:step)") from None
    if not values or any(v < 0 for v in values):
        raise UsageError("sigmas must be non-negative")
    return values


def _write(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    path.write_bytes(data)


def _require_data(rc: RunConfig) -> Path:
    if rc.data_root is None:
        raise UsageError("a dataset root is required (--data or [data] root)")
    if not rc.data_root.is_dir():
        raise FileNotFoundError(f"dataset root {rc.data_root} does not exist")
    return rc.data_root


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, config) -> int:
    seed = resolve(args, config, "seed")
    views = parse_angles(args.views)
    if args.subjects < 2 or args.samples < 1:
        raise UsageError("need --subjects >= 2 and --samples >= 1")
    paths = generate_dataset(args.subjects, views, args.samples, seed, args.out, (args.canvas, args.canvas))
    print(f"{len(paths)} images written")
    return EXIT_OK


def cmd_extract(args, config) -> int:
    rc = build_run_config(args, config)
    root = _require_data(rc)
    records = scan_dataset(root)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        templates = extract_templates(records, rc.K, rc.detector, rc.threads)
    ts = TemplateSet(templates, sorted({r.subject_id for r in records}), rc.K, [r.relpath for r in records])
    _write(Path(args.out), write_templates(ts))
    if args.csv:
        _write(Path(args.csv), templates_csv(ts))
    padded = 0
    for src, t in zip(ts.sources, ts.templates):
        slots = t.padded_slots(rc.K)
        padded += slots > 0
        if args.verbose or slots:
            note = " (no keypoints: all-zero template)" if t.degraded else (f" ({slots} slot(s) zero-padded)" if slots else "")
            print(f"{src}: {t.keypoints} keypoints{note}")
    print(f"{len(ts)} templates ({len(ts.subjects)} subjects, K={rc.K}) written to {args.out}; {padded} padded")
    return EXIT_OK


def cmd_train(args, config) -> int:
    rc = build_run_config(args, config)
    ts = read_templates(args.templates)
    if args.view is not None:
        angle = parse_angles(args.view)[0]
        keep = [i for i, t in enumerate(ts.templates) if t.view_angle == angle]
        if not keep:
            raise DatasetError([f"no templates at view angle {angle}"])
        ts = ts.subset(keep)
    train_set, test_set = split(ts, rc.split)
    ensembles = []
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="RBF hidden_units")
        for fam in FAMILIES:
            ensembles.append(train_ensemble(fam, train_set, rc.train, rc.M, rc.accuracy_weights, rc.threads))
    _write(Path(args.out), write_ensembles(ensembles))
    Xtr, ytr = train_set.features(), train_set.labels()
    Xte, yte = test_set.features(), test_set.labels()
    for e in ensembles:
        losses = " ".join(f"{m.train_loss:.6f}" for m in e.members)
        tr = np.mean([fuse(s, "MV", e.member_weights, e.classes).predicted_class == e.classes[y]
                      for s, y in zip(e.member_scores(Xtr).transpose(1, 0, 2), ytr)])
        te = np.mean([fuse(s, "MV", e.member_weights, e.classes).predicted_class == e.classes[y]
                      for s, y in zip(e.member_scores(Xte).transpose(1, 0, 2), yte)]) if len(yte) else float("nan")
        print(f"{e.family}: member losses {losses}; MV train acc {100 * tr:.2f}%, held-out acc {100 * te:.2f}%")
    print(f"{sum(e.size for e in ensembles)} models written to {args.out}")
    return EXIT_OK


def _case_from(args, config) -> EvalCase:
    kind = CaseKind(args.case)
    denoise = resolve(args, config, "denoise")
    filter_k = resolve(args, config, "filter_k")
    pooled = resolve(args, config, "pooled")
    try:
        if kind is CaseKind.FRONTAL:
            return EvalCase(kind, (0,), pooled_enrollment=pooled)
        if kind is CaseKind.MULTIVIEW:
            angles = parse_angles(args.views) if args.views else [-45, 45]
            return EvalCase(kind, tuple(angles), pooled_enrollment=pooled)
        return EvalCase(kind, (0,), tuple(parse_sigmas(resolve(args, config, "sigmas"))), denoise, filter_k, pooled)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_eval(args, config) -> int:
    rc = build_run_config(args, config)
    case = _case_from(args, config)
    root = _require_data(rc)
    report = run_case(
        case, root, rc.train, rc.M, rc.K, rc.detector, rc.split,
        noise_seed=rc.seed + NOISE_SEED_OFFSET, threads=rc.threads,
        database=args.database, accuracy_weights=rc.accuracy_weights,
    )
    out = Path(args.out)
    _write(out / f"report_{case.kind.value}.csv", report.to_csv())
    _write(out / f"decisions_{case.kind.value}.csv", decision_log_csv(report.decisions))
    print(format_grid(report.cells), end="")
    if report.degraded_probes:
        print(f"warning: {report.degraded_probes} probe template(s) had no keypoints")
    print(f"report and decision log written to {out}")
    return EXIT_OK


def cmd_noise_sweep(args, config) -> int:
    rc = build_run_config(args, config)
    root = _require_data(rc)
    sigmas = parse_sigmas(args.sigmas)
    records = scan_dataset(root)
    if args.view is not None:
        angle = parse_angles(args.view)[0]
        records = [r for r in records if r.view_angle == angle]
    if args.limit is not None:
        records = records[: args.limit]
    if not records:
        raise DatasetError(["no images selected for the sweep"])
    images = [load_image(r.path) for r in records]
    rows = noise_sweep(images, sigmas, resolve(args, config, "filter_k"), seed=rc.seed + NOISE_SEED_OFFSET)
    text = sweep_csv(rows, conventional_psnr=args.psnr_conventional)
    if args.out:
        _write(Path(args.out), text)
        print(f"{len(rows)} sweep rows over {len(images)} images written to {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def cmd_report(args, config) -> int:
    cells = []
    for p in args.reports:
        try:
            cells.extend(read_report_csv(p))
        except (KeyError, ValueError) as exc:
            raise DatasetError([str(exc)]) from exc
    print(format_grid(cells), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", help="key = value config file with [section] headers; flags override it")
    p.add_argument("--seed", type=int, help=SEED_HELP)
    p.add_argument("--threads", type=int, help="worker threads (default: CPU count); outputs do not depend on it")
    if data:
        p.add_argument("--data", help="dataset root: <subject>/<angle>/<image>.pgm|png")
        p.add_argument("--K", dest="k", type=int, help="keypoints per template (default 4)")
        p.add_argument("--threshold", type=float, help="Hessian response threshold")
        p.add_argument("--octaves", type=int, help="detector octaves")
        p.add_argument("--intervals", type=int, help="scale levels per octave")
        p.add_argument("--upright", action="store_const", const=True, help="skip orientation assignment")


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--hidden", type=int, help="hidden units / prototypes / centers (default 500)")
    p.add_argument("--epochs", type=int, help="training epochs (default 300)")
    p.add_argument("--lr", type=float, help="learning rate (default 0.03)")
    p.add_argument("--M", dest="m", type=int, help="ensemble size (default 5)")
    p.add_argument("--accuracy-weights", dest="accuracy_weights", action="store_const", const=True,
                   help="weight members by accuracy on a held-out 20%% of the training split")
    p.add_argument("--train-fraction", dest="train_fraction", type=float, help="train split fraction (default 0.7)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvface", description="Multi-view face recognition with SURF templates and combined classifiers.",
                                     epilog=SEED_HELP)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="render a synthetic multi-view face dataset")
    _common(p, data=False)
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--views", default="0", help="comma list of angles, e.g. m45,0,p45 or -45,0,45")
    p.add_argument("--samples", type=int, required=True, help="samples per view")
    p.add_argument("--canvas", type=int, default=128, help="square canvas size in pixels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("extract", help="build the template file for a dataset")
    _common(p)
    p.add_argument("--out", required=True, help="template file (.mvbk)")
    p.add_argument("--csv", help="also export the templates as CSV for inspection")
    p.add_argument("-v", "--verbose", action="store_true", help="list every image's keypoint count")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the MLP, CLVQ and CRBF ensembles on a template file")
    _common(p, data=False)
    _training(p)
    p.add_argument("--templates", required=True)
    p.add_argument("--view", help="restrict to one view angle")
    p.add_argument("--out", required=True, help="model file (.mvbm)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run an evaluation case end to end")
    _common(p)
    _training(p)
    p.add_argument("--case", required=True, choices=[k.value for k in CaseKind])
    p.add_argument("--views", help="angles for the multiview case (default m45,p45)")
    p.add_argument("--sigmas", help="noise variances: a,b,c or start:stop:step (default 0,0.05)")
    p.add_argument("--no-denoise", dest="denoise", action="store_const", const=False,
                   help="do not mean-filter noisy probes before extraction")
    p.add_argument("--filter-k", dest="filter_k", type=int, help="mean filter window (default 3)")
    p.add_argument("--pooled-enrollment", dest="pooled", action="store_const", const=True,
                   help="enroll with the training split of every view")
    p.add_argument("--database", help="database name in the report (default: dataset directory name)")
    p.add_argument("--out", default="results", help="output directory (default: results)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("noise-sweep", help="image quality metrics over a range of noise variances")
    _common(p)
    p.add_argument("--sigmas", default="0:0.1:0.02", help="variances: a,b,c or start:stop:step")
    p.add_argument("--filter-k", dest="filter_k", type=int, help="mean filter window (default 3)")
    p.add_argument("--view", help="only images of this view angle")
    p.add_argument("--limit", type=int, help="use the first N images")
    p.add_argument("--psnr-conventional", action="store_true", help="PSNR over mean instead of summed squared error")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_noise_sweep)

    p = sub.add_parser("report", help="print GAR grids from report CSV files")
    p.add_argument("reports", nargs="+")
    p.set_defaults(func=cmd_report, config=None)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(getattr(args, "config", None))
        return args.func(args, config)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mvface: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, TemplateFormatError, ModelFormatError, UnsupportedFormatError, EmptyImageError) as exc:
        print(f"mvface: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"mvface: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ImageReadError) as exc:
        print(f"mvface: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
