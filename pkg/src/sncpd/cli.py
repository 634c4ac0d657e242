"""Command-line entry point: ``sncpd {train,detect,evaluate,verify,experiment}``.

Every command writes into the output directory (``--out``, else the
``SNCPD_OUT`` environment variable, else ``./sncpd_out``) and leaves a
``<command>.manifest`` with the config hash, seed and output checksums.
Errors print ``error: <category>: <message>`` and exit non-zero; a failed
verification exits 1.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import plots
from .config import RunConfig, build_config
from .detector import (DetectionTrace, dynamics_experiment, evaluable_labels, margin_f1,
                       make_window_pairs, mmd_power_experiment, pair_embeddings, rejection_curve,
                       threshold_sweep)
from .detector.experiments import binomial_upper
from .encoders import EncoderModel, history_csv, load, save
from .errors import ConfigError, ConvergenceError, SncpdError, ValidationError
from .runner import detect_and_evaluate, fit, score_series, splits
from .specnorm import certify_bilipschitz, invert_hidden, sphere_pairs
from .statistics import MatrixNormalParams, kernel_preservation_check, lr_preservation_check

EXIT_CODES = {"usage": 2, "parse": 3, "validation": 4, "dimension": 5, "contract": 6,
              "convergence": 7, "decomposition": 8, "training": 9, "io": 10}


class Outputs:
    """Collects written files for the manifest."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.dir = cfg.out_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []

    def text(self, name: str, content: str) -> Path:
        path = self.dir / name
        path.write_text(content, encoding="utf-8", newline="\n")
        self.files.append(path)
        return path

    def add(self, path: Path) -> Path:
        self.files.append(path)
        return path

    def manifest(self) -> None:
        lines = [f"command={self.command}", f"config_sha256={self.cfg.digest()}", f"seed={self.cfg.seed}"]
        for path in self.files:
            lines.append(f"file={path.name} sha256={hashlib.sha256(path.read_bytes()).hexdigest()}")
        lines.append("# config")
        lines += self.cfg.canonical().splitlines()
        (self.dir / f"{self.command}.manifest").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _checkpoint(cfg: RunConfig, args) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else cfg.out_dir / "model.ckpt"
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} not found (run train first or pass --checkpoint)")
    return path


# -- commands --------------------------------------------------------------

def cmd_train(cfg: RunConfig, args) -> int:
    out = Outputs(cfg, "train")
    model, result = fit(cfg)
    save(model, out.add(cfg.out_dir / "model.ckpt"),
         extra={"family": cfg.family, "best_epoch": result.best_epoch, "window": cfg.window})
    out.text("loss.csv", history_csv(result.history))
    if result.validation:
        out.text("validation.csv", "epoch,val_f1\n" + "".join(
            f"{e},{v:.17g}\n" for e, v in enumerate(result.validation)))
    out.manifest()
    print(f"trained {cfg.family}: {len(result.history)} steps, best epoch {result.best_epoch}")
    return 0


def cmd_detect(cfg: RunConfig, args) -> int:
    model, _ = load(_checkpoint(cfg, args))
    out = Outputs(cfg, "detect")
    det = detect_and_evaluate(cfg, model)
    out.text("trace_val.csv", det.val.to_csv())
    out.text("trace_test.csv", det.test.to_csv())
    out.text("thresholds.csv", "margin,threshold\n" + "".join(
        f"{m},{d:.17g}\n" for m, d in det.thresholds.items()))
    if not args.no_plots:
        _, _, test_s = splits(cfg)
        path = cfg.out_dir / "trace_test.svg"
        plots.plot_trace(det.test, path, test_s.labels, f"{cfg.family} / {cfg.statistic}")
        out.add(path)
    out.manifest()
    for m, rep in det.reports.items():
        print(f"margin={m} f1={rep.f1:.4f}")
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    trace_path = Path(args.trace) if args.trace else cfg.out_dir / "trace_test.csv"
    if not trace_path.is_file():
        raise ConfigError(f"trace {trace_path} not found")
    trace, alarms = DetectionTrace.from_csv(trace_path.read_text(encoding="utf-8"))
    _, val_s, test_s = splits(cfg)
    val_path = Path(args.val_trace) if args.val_trace else cfg.out_dir / "trace_val.csv"
    val_trace = DetectionTrace.from_csv(val_path.read_text(encoding="utf-8"))[0] \
        if (args.val_trace or val_path.is_file()) and not args.use_alarms else None
    out = Outputs(cfg, "evaluate")
    rows = ["margin,threshold,precision,recall,f1,tp,fp,fn"]
    text = []
    for margin in cfg.margins:
        labels = evaluable_labels(trace.split_indices, test_s.labels, margin)
        if val_trace is not None:
            try:
                delta = threshold_sweep(val_trace, val_s.labels, margin).threshold
            except ValidationError:
                delta = float(np.max(val_trace.statistic)) + 1.0
            flags = trace.statistic > delta
        else:
            delta, flags = float("nan"), alarms
        rep = margin_f1(trace.split_indices, flags, labels, margin, trace.stride)
        rows.append(f"{margin},{delta:.17g},{rep.precision:.17g},{rep.recall:.17g},{rep.f1:.17g},"
                    f"{rep.tp},{rep.fp},{rep.fn}")
        text.append(f"margin={margin} precision={rep.precision:.4f} recall={rep.recall:.4f} f1={rep.f1:.4f}")
    out.text("f1.csv", "\n".join(rows) + "\n")
    out.text("f1.txt", "\n".join(text) + "\n")
    out.manifest()
    print("\n".join(text))
    return 0


def _lr_model(model: EncoderModel, rng: np.random.Generator) -> EncoderModel:
    """Same residual stack behind a seeded square, well-conditioned input map."""
    H = model.hidden_dims
    lr_model = model.copy()
    lr_model.config = replace(model.config, input_dims=H)
    q, _ = np.linalg.qr(rng.standard_normal((H, H)))
    lr_model.params["proj.weight"].data = q * rng.uniform(0.5, 1.5, size=H)
    lr_model.params["proj.bias"].data = 0.1 * rng.standard_normal(H)
    return lr_model


def cmd_verify(cfg: RunConfig, args) -> int:
    model, _ = load(_checkpoint(cfg, args))
    c = model.sn.c if model.sn is not None else cfg.cap_c
    if c >= 1.0:
        raise ConfigError(f"invertibility checks need a cap below 1, got c={c}")
    out = Outputs(cfg, "verify")
    rng = np.random.default_rng(cfg.seed)
    H, steps = model.hidden_dims, cfg.certify_steps
    status = {}

    pairs = sphere_pairs(cfg.certify_pairs, steps, H, cfg.seed)
    cert = certify_bilipschitz(model, pairs, c=c)
    out.text("certification.txt", cert.to_record())
    status["certification"] = cert.passed

    kern = kernel_preservation_check(model, pairs, cert.L1, cert.L2)
    out.text("kernel.txt", kern.to_record())
    status["kernel"] = kern.passed

    X = rng.standard_normal((20, steps, H))
    try:
        err = float(np.max(np.abs(invert_hidden(model, model.forward_hidden(X).data) - X)))
        inv_ok, inv_msg = err < 1e-6, f"max_abs_error={err:.17g}"
    except ConvergenceError as exc:
        inv_ok, inv_msg = False, f"error={exc}"
    out.text("inversion.txt", f"status={'PASS' if inv_ok else 'FAIL'}\n{inv_msg}\n")
    status["inversion"] = inv_ok

    lr_model = _lr_model(model, rng)
    p_inf = MatrixNormalParams(np.zeros((steps, H)), np.eye(steps), np.eye(H))
    p0 = MatrixNormalParams(np.full((steps, H), 0.1), np.eye(steps), np.eye(H))
    samples = np.concatenate([p_inf.sample(rng, 50), p0.sample(rng, 50)])
    try:
        chk = lr_preservation_check(samples, lr_model, p0, p_inf)
        agree, used = chk.agreement(0.0, 1e-3)
        lr_ok = chk.max_abs_diff < 1e-4 and agree == 1.0
        lr_msg = f"max_abs_diff={chk.max_abs_diff:.17g}\nagreement={agree:.17g}\ncompared={used}"
    except ConvergenceError as exc:
        lr_ok, lr_msg = False, f"error={exc}"
    out.text("likelihood_ratio.txt", f"status={'PASS' if lr_ok else 'FAIL'}\n{lr_msg}\n")
    status["likelihood_ratio"] = lr_ok

    D = model.input_dims
    shift = np.ones(D)

    def sphere(Z):
        return Z / np.linalg.norm(Z, axis=1, keepdims=True)

    power = mmd_power_experiment(
        lambda g, n: sphere(g.standard_normal((n, D))),
        lambda g, n: sphere(g.standard_normal((n, D)) + shift),
        lambda Z: model.hidden(Z[:, None, :]).data[:, 0, :],
        cfg.power_sizes, cfg.alpha, cfg.power_trials, cfg.seed)
    out.text("power.csv", power.to_csv())
    t2 = np.asarray(power.type2_embedded)
    ci = binomial_upper(cfg.alpha, cfg.power_trials)
    power_ok = bool(np.all(np.diff(t2) <= 0) and abs(power.slope_embedded - power.slope_raw) <= 0.3
                    and max(power.type1_embedded) <= ci and max(power.type1_raw) <= ci)
    status["mmd_power"] = power_ok

    summary = "".join(f"{k}={'PASS' if v else 'FAIL'}\n" for k, v in status.items())
    summary += f"slope_raw={power.slope_raw:.17g}\nslope_embedded={power.slope_embedded:.17g}\n"
    out.text("verify.txt", summary)
    out.manifest()
    print(summary, end="")
    return 0 if all(status.values()) else 1


def cmd_experiment(cfg: RunConfig, args) -> int:
    model, _ = load(_checkpoint(cfg, args))
    out = Outputs(cfg, f"experiment_{args.kind}")
    train_s, val_s, test_s = splits(cfg)
    if args.kind == "dynamics":
        res = dynamics_experiment(model, test_s.values, test_s.labels, cfg.window)
        out.text("dynamics.csv", res.to_csv())
        if not args.no_plots:
            path = cfg.out_dir / "dynamics.svg"
            plots.plot_curve(res.offsets, res.similarity, path, "window start", "cosine similarity",
                             f"{res.n_used} change points", vline=res.shared - cfg.window)
            out.add(path)
        print(f"dynamics over {res.n_used} change points ({res.n_skipped} skipped)")
    else:
        det = detect_and_evaluate(cfg, model)
        margin = cfg.margins[0]
        fit_pairs = (make_window_pairs(train_s.values, cfg.window, cfg.stride)
                     + make_window_pairs(val_s.values, cfg.window, cfg.stride))
        test_pairs = make_window_pairs(test_s.values, cfg.window, cfg.stride)
        labels = evaluable_labels(det.test.split_indices, test_s.labels, margin)
        res = rejection_curve(pair_embeddings(fit_pairs, model), pair_embeddings(test_pairs, model),
                              det.test.split_indices, det.test.alarms, labels, margin, cfg.stride,
                              threshold=det.test.threshold)
        out.text("rejection.csv", res.to_csv())
        if not args.no_plots:
            path = cfg.out_dir / "rejection.svg"
            xs = [1.0] + [k for k, _ in res.points]
            ys = [res.baseline_f1] + [f for _, f in res.points]
            plots.plot_curve(xs, ys, path, "fraction kept", "F1", "rejection curve", invert_x=True)
            out.add(path)
        print(f"rejection curve: {len(res.points)} points, baseline f1={res.baseline_f1:.4f}")
    out.manifest()
    return 0


# -- argument parsing ------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--margin", type=int, action="append", help="detection margin (repeatable)")
    p.add_argument("--statistic", choices=["cos", "mmd"])
    p.add_argument("--window", type=int)
    p.add_argument("--cap-c", type=float, dest="cap_c")
    p.add_argument("--data", help="CSV path or 'synthetic'")
    p.add_argument("--family", help="sn-ts2vec | ts2vec | sn-byol | ts-byol")
    p.add_argument("--epochs", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--checkpoint")
    p.add_argument("--no-plots", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sncpd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [("train", "train an encoder"), ("detect", "score val/test and tune thresholds"),
                           ("evaluate", "margin F1 of a trace"), ("verify", "run the theory checks"),
                           ("experiment", "dynamics or rejection-curve experiment")]:
        p = sub.add_parser(name, help=helptext)
        _common(p)
        if name == "evaluate":
            p.add_argument("--trace")
            p.add_argument("--val-trace", dest="val_trace")
            p.add_argument("--use-alarms", action="store_true",
                           help="use the trace's alarm column instead of re-tuning on val")
        if name == "experiment":
            p.add_argument("kind", choices=["dynamics", "rejection"])
    return parser


def config_from_args(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip().replace("-", "_")] = val
    for key in ("seed", "out", "statistic", "window", "cap_c", "data", "family", "epochs"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val
    if args.margin:
        overrides["margins"] = tuple(args.margin)
    return build_config(args.config, overrides)


COMMANDS = {"train": cmd_train, "detect": cmd_detect, "evaluate": cmd_evaluate,
            "verify": cmd_verify, "experiment": cmd_experiment}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        return COMMANDS[args.command](cfg, args)
    except SncpdError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]


if __name__ == "__main__":
    sys.exit(main())
