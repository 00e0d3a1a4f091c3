"""Command-line entry point: ``olivia <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure (including
a numerical check that ran and failed).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import attention, data, spectral, training, verify
from .checkpoint import Checkpoint, CheckpointError
from .errors import ValidationError
from .harmonizer import HouseholderStack
from .model import ModelConfig, Stage

log = logging.getLogger("olivia")


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).write_text(text)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _emit(args, result) -> None:
    if getattr(args, "json", False):
        sys.stdout.write(_dumps(result))


def _domains(args, length: int, standardize: bool) -> dict[str, list[spectral.Window]]:
    series = data.load_csv(args.input)
    if not series:
        raise ValidationError(f"{args.input}: no series")
    return {
        sid: spectral.sample_windows(s, length, args.samples, args.seed, standardize=standardize, domain_id=sid)
        for sid, s in series.items()
    }


def _model_config(args) -> ModelConfig:
    if getattr(args, "config", None):
        obj = json.loads(Path(args.config).read_text())
        if not isinstance(obj, dict):
            raise ValidationError("config must be a JSON object")
        ModelConfig.from_json(obj)  # rejects unknown keys
    else:
        obj = {}
    if getattr(args, "window", None):
        obj["T"] = args.window
    if getattr(args, "horizons", None):
        obj["horizons"] = args.horizons
    if getattr(args, "literal_resonators", False):
        obj["literal_resonators"] = True
    if getattr(args, "no_instance_norm", False):
        obj["instance_norm"] = False
    if getattr(args, "seed", None) is not None and "seed" not in obj:
        obj["seed"] = args.seed
    return ModelConfig.from_json(obj)


def _schedule(args, pretrain_epochs: int, tune_epochs: int) -> training.TrainSchedule:
    if args.log and not getattr(args, "_log_started", False):
        Path(args.log).write_text("")
        args._log_started = True
    kw = {"pretrain_epochs": pretrain_epochs, "tune_epochs": tune_epochs, "batch_size": args.batch_size,
          "seed": args.seed, "log_path": args.log, "loss_paper_exact": getattr(args, "loss_paper_exact", False)}
    if args.lr is not None:
        kw["lr_pretrain" if pretrain_epochs else "lr_tune"] = args.lr
    return training.TrainSchedule(**kw)


# -- subcommands -----------------------------------------------------------


def cmd_psd(args) -> dict:
    domains = _domains(args, args.window, not args.no_standardize)
    T, psds = spectral.domain_psds(domains)
    labels = list(psds)
    mat = np.zeros((len(labels), len(labels)))
    for i, a in enumerate(labels):
        for j, b in enumerate(labels):
            if i < j:
                mat[i, j] = mat[j, i] = spectral.divergence(psds[a], psds[b], "js")
    report = spectral.DivergenceReport(labels, mat, T, psds).to_json()
    _write(args.out, _dumps(report))
    return report


def cmd_jsd(args) -> dict:
    transform = None
    if args.checkpoint:
        ck = Checkpoint.load(args.checkpoint)
        transform = HouseholderStack(ck.tensors["harmonizer.vectors"])
        T = ck.config.T
    elif args.transform:
        transform = HouseholderStack.from_json(json.loads(Path(args.transform).read_text()))
        T = transform.T
    else:
        T = args.window
    if args.window and args.window != T:
        raise ValidationError(f"--window {args.window} does not match transform dimension {T}")
    domains = _domains(args, T, not args.no_standardize)
    raw = spectral.harmonization_gap(domains)
    result = {"raw": raw.to_json(), "mean_js_raw": raw.mean_offdiagonal()}
    if transform is not None:
        aligned = spectral.harmonization_gap(domains, transform)
        result["aligned"] = aligned.to_json()
        result["mean_js_aligned"] = aligned.mean_offdiagonal()
        result["ratio"] = aligned.mean_offdiagonal() / raw.mean_offdiagonal() if raw.mean_offdiagonal() else None
    _write(args.out, _dumps(result))
    return {k: v for k, v in result.items() if k.startswith("mean") or k == "ratio"}


def cmd_corr(args) -> dict:
    domains = _domains(args, args.window, not args.no_standardize)
    if not args.out:
        raise ValidationError("corr needs --out DIR")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    for sid, windows in domains.items():
        mm = spectral.moment_matrix(windows)
        path = out / f"{sid}.csv"
        path.write_text(mm.to_csv())
        written[sid] = str(path)
    return {"files": written}


def cmd_gen(args) -> dict:
    if args.presets:
        specs = [data.SyntheticDomainSpec.from_json(o) for o in json.loads(Path(args.presets).read_text())]
    else:
        specs = data.default_presets(args.window, args.periods)
    series = {s.domain_id: data.generate_domain(s, args.seed) for s in specs}
    data.emit_csv(series, args.out)
    result = {"series": {k: len(v) for k, v in series.items()}}
    if args.manifest:
        corpus = data.corpus_from_series(series, args.window, args.samples, args.seed)
        data.write_manifest(corpus, args.manifest)
        result["manifest"] = corpus.manifest()
    return result


def _train_corpus(args, length: int) -> data.Corpus:
    series = data.load_csv(args.input)
    if not series:
        raise ValidationError(f"{args.input}: no series")
    return data.corpus_from_series(series, length, args.samples, args.seed)


def cmd_pretrain(args) -> dict:
    cfg = _model_config(args)
    corpus = _train_corpus(args, cfg.T)
    res = training.train(cfg, corpus, _schedule(args, args.epochs, 0))
    res.checkpoint.save(args.out)
    if args.best:
        res.best.save(args.best)
    return {"history": res.history, "manifest": corpus.manifest()}


def cmd_tune(args) -> dict:
    ck = Checkpoint.load(args.checkpoint)
    model = ck.to_model()
    if args.horizons and args.horizons != model.config.horizons:
        model.set_horizons(args.horizons)
    cfg = model.config
    corpus = _train_corpus(args, cfg.T + max(cfg.horizons))
    res = training.train(cfg, corpus, _schedule(args, 0, args.epochs), model=model)
    res.checkpoint.save(args.out)
    if args.best:
        res.best.save(args.best)
    return {"history": res.history, "manifest": corpus.manifest()}


def cmd_forecast(args) -> dict:
    import torch

    model = Checkpoint.load(args.checkpoint).to_model()
    T = model.config.T
    result = {}
    for sid, s in data.load_csv(args.input).items():
        if s.shape[0] < T:
            raise ValidationError(f"series {sid!r} has {s.shape[0]} values, need T={T}")
        with torch.no_grad():
            out = model(torch.from_numpy(s[-T:].copy()), Stage.INFER)
        result[sid] = {str(h): [float(v) for v in f] for h, f in out["forecasts"].items()}
    _write(args.out, _dumps(result))
    return result


def cmd_evaluate(args) -> dict:
    ck = Checkpoint.load(args.checkpoint)
    horizons = args.horizons or ck.config.horizons
    T = ck.config.T
    items = [w for ws in _domains(args, T + max(horizons), False).values() for w in ws]
    model = ck.to_model()
    result = {"model": training.evaluate(model, items, horizons),
              "persistence": training.persistence_baseline(items, T, horizons)}
    result = json.loads(json.dumps(result))  # int horizon keys -> strings
    _write(args.out, _dumps(result))
    return result


def cmd_gradcheck(args) -> dict:
    if args.config:
        cfg = ModelConfig.load(args.config)
    else:
        cfg = training.tiny_config(seed=args.seed)
    report = training.grad_check(cfg, args.tolerance, stage=args.stage, corrupt=args.corrupt, seed=args.seed)
    _write(args.out, _dumps(report))
    if not report["pass"]:
        raise CheckFailed(report)
    return report


def cmd_bench(args) -> dict:
    rows = attention.bench_scaling(args.Ls, args.M, args.P, args.H, args.repeats, args.seed)
    _write(args.out, attention.bench_csv(rows))
    d = args.H * args.P
    counts = [attention.harmonic_attention_counted(np.zeros((L, d)), np.zeros((args.H, d, args.P)),
                                                   np.zeros((args.H, args.M, args.P)), 0.1)[1] for L in args.Ls]
    return {"rows": rows,
            "doubling": {m: attention.doubling_ratios(rows, m) for m in ("harmonic", "full")},
            "multiply_fit": attention.complexity_fit(args.Ls, counts, args.M, args.P, d)}


def cmd_verify(args) -> dict:
    seeds = range(args.seed, args.seed + args.seeds)
    if args.prop == 1:
        reports = [verify.check_prop1(args.T, args.r, args.datasets, s) for s in seeds]
    else:
        reports = [verify.check_prop2(args.T, args.r, args.d, args.L, s) for s in seeds]
    report = reports[0] if len(reports) == 1 else {
        "proposition": args.prop, "params": {**reports[0]["params"], "seeds": list(seeds)},
        "metrics": {"instances": len(reports), "failures": sum(not r["pass"] for r in reports)},
        "pass": all(r["pass"] for r in reports)}
    _write(args.out, verify.report_json(report) + "\n")
    if not report["pass"]:
        raise CheckFailed(report)
    return report


def cmd_resonators(args) -> dict:
    """Train one model per resonator count and tabulate validation metrics."""
    cfg = _model_config(args)
    L = cfg.L
    Ms = args.M_values or [max(1, L // 4), max(1, L // 2), L]
    for M in Ms:
        if M > L:
            raise ValidationError(f"M={M} exceeds L={L} tokens")
    corpus = _train_corpus(args, cfg.T + max(cfg.horizons))
    pre_corpus = data.Corpus({d: [spectral.Window(w.values[: cfg.T], d) for w in ws]
                              for d, ws in corpus.domains.items()}, corpus.train, corpus.val)
    rows = []
    for M in Ms:
        mcfg = dataclasses.replace(cfg, M=M)
        log.info("training with M=%d", M)
        pre = training.train(mcfg, pre_corpus, _schedule(args, args.epochs, 0))
        model = pre.checkpoint.to_model()
        tuned = training.train(mcfg, corpus, _schedule(args, 0, args.tune_epochs), model=model)
        metrics = training.evaluate(tuned.checkpoint, corpus.val_windows())
        rows.append({"M": M, "mse": metrics["avg"]["mse"], "mae": metrics["avg"]["mae"]})
    table = "M,mse,mae\n" + "".join(f"{r['M']},{r['mse']:.9g},{r['mae']:.9g}\n" for r in rows)
    _write(args.out, table)
    return {"L": L, "rows": rows}


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="olivia", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(fn=fn)
        sp.add_argument("--out", help="output path")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--json", action="store_true", help="print the result as JSON on stdout")
        return sp

    def sampling(sp, window=True):
        sp.add_argument("--input", required=True, help="CSV with header series_id,value")
        if window:
            sp.add_argument("--window", type=int, default=512)
        sp.add_argument("--samples", type=int, default=2000, help="windows per series")
        sp.add_argument("--no-standardize", action="store_true")

    def model_flags(sp):
        sp.add_argument("--config", help="model config JSON")
        sp.add_argument("--window", type=int, help="override T")
        sp.add_argument("--horizons", type=_ints)
        sp.add_argument("--literal-resonators", action="store_true")
        sp.add_argument("--no-instance-norm", action="store_true")

    def train_flags(sp, epochs):
        sp.add_argument("--input", required=True)
        sp.add_argument("--samples", type=int, default=200, help="windows per series")
        sp.add_argument("--epochs", type=int, default=epochs)
        sp.add_argument("--batch-size", type=int, default=64)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--log", help="JSON-lines training log")
        sp.add_argument("--best", help="also save the best-validation checkpoint here")
        sp.add_argument("--loss-paper-exact", action="store_true")

    sampling(add("psd", cmd_psd, "dataset-level PSDs per series"))
    sp = add("jsd", cmd_jsd, "pairwise JS divergence, optionally after a trained Aligner")
    sampling(sp, window=False)
    sp.add_argument("--window", type=int)
    sp.add_argument("--checkpoint")
    sp.add_argument("--transform", help="Householder stack JSON")
    sampling(add("corr", cmd_corr, "second-order moment matrices as CSV"))

    sp = add("gen", cmd_gen, "synthetic multi-domain corpus")
    sp.add_argument("--window", type=int, default=128)
    sp.add_argument("--periods", type=int, default=32, help="series length in windows")
    sp.add_argument("--presets", help="JSON list of domain specs")
    sp.add_argument("--samples", type=int, default=100)
    sp.add_argument("--manifest", help="write the corpus split manifest here")

    sp = add("pretrain", cmd_pretrain, "reconstruction pretraining")
    model_flags(sp)
    train_flags(sp, 10)
    sp = add("tune", cmd_tune, "forecast tuning of a pretrained checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--horizons", type=_ints)
    train_flags(sp, 2)

    sp = add("forecast", cmd_forecast, "forecast from the last T values of each series")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp = add("evaluate", cmd_evaluate, "MSE/MAE on sampled windows")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--samples", type=int, default=100)
    sp.add_argument("--horizons", type=_ints)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient check")
    sp.add_argument("--config")
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--stage", choices=[s.value for s in Stage], default="tune")
    sp.add_argument("--corrupt", help="flip the sign of this tensor's gradient (negative control)")

    sp = add("bench", cmd_bench, "attention wall-clock scaling")
    sp.add_argument("--Ls", type=_ints, default=[1024, 2048, 4096])
    sp.add_argument("--M", type=int, default=16)
    sp.add_argument("--P", type=int, default=16)
    sp.add_argument("--H", type=int, default=4)
    sp.add_argument("--repeats", type=int, default=15)

    sp = add("verify", cmd_verify, "numerical oracles for the two propositions")
    sp.add_argument("--prop", type=int, choices=[1, 2], required=True)
    sp.add_argument("--T", type=int, default=None)
    sp.add_argument("--r", type=int, default=None)
    sp.add_argument("--d", type=int, default=2)
    sp.add_argument("--L", type=int, default=10)
    sp.add_argument("--datasets", type=int, default=4)
    sp.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")

    sp = add("resonators", cmd_resonators, "resonator-count sensitivity table")
    model_flags(sp)
    train_flags(sp, 3)
    sp.add_argument("--tune-epochs", type=int, default=2)
    sp.add_argument("--M-values", type=_ints, help="default L/4, L/2, L")
    return p


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "fn", None):
            raise UsageError(parser.format_usage() + "olivia: error: a subcommand is required")
        if args.command == "verify":
            args.T = args.T or (12 if args.prop == 1 else 16)
            args.r = args.r or (3 if args.prop == 1 else 2)
        result = args.fn(args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except (ValidationError, CheckpointError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        sys.stderr.write(f"olivia: error: {exc}\n")
        return 1
    except CheckFailed as exc:
        report = exc.args[0]
        if getattr(args, "json", False):
            sys.stdout.write(_dumps(report))
        sys.stderr.write("olivia: check failed\n")
        return 2
    except Exception as exc:  # noqa: BLE001
        sys.stderr.write(f"olivia: runtime failure: {exc!r}\n")
        return 2
    _emit(args, result)
    return 0


def main() -> None:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
