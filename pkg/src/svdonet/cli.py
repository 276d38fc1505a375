"""``svdonet`` command line: gen | svd | train | eval | compare | report.

Exit status: 0 on success, 2 on usage errors (bad flags, unknown case or
architecture, missing or malformed input files, case mismatch between a
model and the requested data), 1 on numerical failures.
"""

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import bench
from .casegen import (
    CASES,
    assemble_scenario_matrix,
    load_snapshot_csv,
    make_case,
    write_snapshot_csv,
)
from .decomposition import center_scale, cumulative_energy, energy_curve, reconstruct, svd, truncate
from .decomposition import principal_components, principal_directions
from .exceptions import NumericalFailure, ParseError, SvdonetError
from .operators import FlexDeepONet, alignment_diagnostics
from .persistence import load_model, read_envelope, save_model

log = logging.getLogger("svdonet")

MODEL_FILE = "model.svdonet"


class UsageError(SvdonetError):
    pass


def _fmt(v):
    return format(float(v), ".10g")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([x if isinstance(x, str) else _fmt(x) for x in r])
    return path


def _parse_sets(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = bench._coerce(v.strip())
    return out


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args):
    out = _out_dir(args.out)
    data = make_case(args.case, seed=args.seed, **_parse_sets(args.set))
    (out / "manifest.yaml").write_text(yaml.safe_dump(_plain(data.manifest), sort_keys=True))
    for split in ("train", "test"):
        ds = getattr(data, split)
        header = list(ds.input_names or []) + list(ds.coord_names or []) + list(ds.variables)
        if len(header) != ds.X.shape[1] + ds.Y.shape[1]:
            header = [f"c{i}" for i in range(ds.X.shape[1])] + list(ds.variables)
        np.savetxt(out / f"{split}.csv", np.hstack([ds.X, ds.Y]), delimiter=",",
                   header=",".join(header), comments="", fmt="%.17g")
        scen = getattr(data, f"{split}_scenarios")
        if scen is not None:
            for var in scen.variables:
                write_snapshot_csv(assemble_scenario_matrix(scen, var), out / f"{split}_{var}.csv",
                                   coord_names=scen.coord_names, meta_names=scen.input_names)
    snap = data.extra.get("test_snapshots")
    if snap is not None:
        write_snapshot_csv(snap, out / f"test_{snap.name}.csv", coord_names=["x", "y"])
    print(f"wrote {args.case} data to {out}")
    return 0


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# svd


def _snapshot_for(args):
    if args.data:
        return load_snapshot_csv(args.data)
    if args.case is None:
        raise UsageError("svd needs --case or --data")
    data = make_case(args.case, seed=args.seed, **_parse_sets(args.set))
    if data.train_scenarios is not None:
        var = args.variable or data.train_scenarios.variables[0]
        if var not in data.train_scenarios.variables:
            raise UsageError(f"unknown variable {var!r}; choose from {data.train_scenarios.variables}")
        return assemble_scenario_matrix(data.train_scenarios, var)
    return data.extra["test_snapshots"]


def cmd_svd(args):
    out = _out_dir(args.out)
    snap = _snapshot_for(args)
    Xp, prep = center_scale(snap, args.center, args.scale)
    dec = svd(Xp)
    cum = energy_curve(dec, args.energy)
    shares = np.diff(cum, prepend=0.0)
    name = snap.name
    _write_csv(out / f"energy_{name}.csv", ["k", "sigma", "energy", "cumulative_energy"],
               [(k + 1, s, e, c) for k, (s, e, c) in enumerate(zip(dec.sigma, shares, cum))])
    max_rank = min(args.max_rank, dec.rank)
    norm = np.linalg.norm(snap.values)
    rows = []
    for r in range(1, max_rank + 1):
        t = truncate(dec, r)
        rec = reconstruct(principal_components(t), principal_directions(t), prep)
        rows.append((r, np.linalg.norm(rec - snap.values) / norm))
    _write_csv(out / f"reconstruction_{name}.csv", ["r", "relative_error"], rows)
    k = min(args.k, dec.rank)
    print(f"variable={name} k={k} cumulative_energy={cumulative_energy(dec, k, args.energy):.10f}")
    return 0


# ---------------------------------------------------------------------------
# train / eval


def _config_from(args):
    if args.config:
        cfg = bench.ExperimentConfig.load(args.config)
        changes = {}
        if args.case:
            changes["case"] = args.case
        if args.arch:
            changes["arch"] = args.arch
        base = cfg.to_dict()
        base.update(changes)
        base.update(_parse_sets(args.set))
        cfg = bench.ExperimentConfig.from_dict(base)
    else:
        if not (args.case and args.arch):
            raise UsageError("train needs --config or both --case and --arch")
        cfg = bench.preset(args.case, args.arch, **_parse_sets(args.set))
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.p is not None:
        cfg = cfg.replace(p=args.p)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    return cfg


def _history_rows(est):
    hist = est.history_
    items = hist.items() if isinstance(hist, dict) else enumerate(hist)
    for key, h in items:
        label = "/".join(map(str, key)) if isinstance(key, tuple) else f"group{key}"
        for epoch, tr, va in h.to_rows():
            yield (label, epoch, tr, va)


def cmd_train(args):
    cfg = _config_from(args)
    out = _out_dir(args.out or cfg.output_dir)
    est, row, data = bench.run_experiment(cfg)
    meta = dict(case=cfg.case, manifest=_plain(data.manifest), config=cfg.to_dict())
    save_model(est, out / MODEL_FILE, metadata=meta)
    cfg.save(out / "config.yaml")
    _write_csv(out / "history.csv", ["model", "epoch", "train_loss", "val_loss"],
               _history_rows(est))
    bench.write_report([row], out / "report.csv")
    print(bench.format_table([row]))
    return 0


def _model_path(path):
    p = Path(path)
    if p.is_dir():
        p = p / MODEL_FILE
    if not p.exists():
        raise FileNotFoundError(f"model file not found: {p}")
    return p


def _load_for(args):
    path = _model_path(args.model)
    env = read_envelope(path)
    meta = env.get("metadata", {})
    trained_case = meta.get("case")
    if args.case and trained_case and args.case != trained_case:
        raise UsageError(f"model {path} was trained on case {trained_case!r}, not {args.case!r}")
    if "config" not in meta:
        raise UsageError(f"model {path} carries no experiment config")
    cfg = bench.ExperimentConfig.from_dict(meta["config"])
    return load_model(path), cfg


def _scenario_ids(U):
    _, ids = np.unique(U, axis=0, return_inverse=True)
    return ids.ravel()


def cmd_eval(args):
    est, cfg = _load_for(args)
    out = _out_dir(args.out)
    data = bench.load_case(cfg)
    test = data.test
    row, pred = bench.evaluate(est, test, cfg.arch, cfg.p)
    names = (list(test.input_names or []) + list(test.coord_names or []))
    if len(names) != test.X.shape[1]:
        names = [f"c{i}" for i in range(test.X.shape[1])]
    header = ["scenario"] + names + [f"{v}_true" for v in test.variables] + \
             [f"{v}_pred" for v in test.variables]
    ids = _scenario_ids(test.U)
    _write_csv(out / "predictions.csv", header,
               ([int(i)] + list(x) + list(t) + list(p)
                for i, x, t, p in zip(ids, test.X, test.Y, pred)))
    per = []
    for s in np.unique(ids):
        m = ids == s
        per.append([int(s)] + list(test.U[m][0]) +
                   [bench.rmse(pred[m, j], test.Y[m, j]) for j in range(len(test.variables))])
    _write_csv(out / "scenario_rmse.csv",
               ["scenario"] + names[:test.n_branch_inputs] + [f"rmse_{v}" for v in test.variables],
               per)
    bench.write_report([row], out / "report.csv")
    for v, r in row.rmse.items():
        print(f"rmse_{v}={r:.6e}")
    return 0


# ---------------------------------------------------------------------------
# compare / report


def cmd_compare(args):
    out = _out_dir(args.out)
    specs = [bench.parse_arch_spec(s) for s in args.archs.split(",") if s.strip()]
    if not specs:
        raise UsageError("--archs is empty")
    rows, _ = bench.compare(args.case, specs, seed=args.seed, base=_parse_sets(args.set))
    bench.write_report(rows, out / "report.csv")
    print(bench.format_table(rows))
    return 0


def cmd_report(args):
    out = _out_dir(args.out)
    if args.table:
        rows = bench.read_report(args.table)
        text = bench.format_table(rows)
        (out / "table.txt").write_text(text + "\n", encoding="utf-8")
        print(text)
        if not args.model:
            return 0
    if not args.model:
        raise UsageError("report needs --model and/or --table")
    est, cfg = _load_for(args)
    data = bench.load_case(cfg)
    test = data.test
    pred = est.predict(test.X).reshape(len(test), -1)
    ids = _scenario_ids(test.U)
    header = ["scenario"] + [f"u{i}" for i in range(test.n_branch_inputs)] + \
             [f"y{i}" for i in range(test.X.shape[1] - test.n_branch_inputs)]
    for j, v in enumerate(test.variables):
        _write_csv(out / f"curves_{v}.csv", header + ["true", "pred"],
                   ([int(i)] + list(x) + [t, p] for i, x, t, p in
                    zip(ids, test.X, test.Y[:, j], pred[:, j])))
    if isinstance(est, FlexDeepONet):
        inputs = np.unique(test.U, axis=0)
        diag = alignment_diagnostics(est, inputs)
        d = diag["shift"].shape[2]
        rows = []
        for s in range(inputs.shape[0]):
            rows.append(list(inputs[s]) + [diag["scale"][s, 0], diag["theta"][s, 0]]
                        + list(diag["shift_raw"][s, 0]))
        _write_csv(out / "alignment.csv",
                   [f"u{i}" for i in range(inputs.shape[1])] + ["scale", "theta"]
                   + [f"shift{i}" for i in range(d)], rows)
        if test.X.shape[1] - test.n_branch_inputs == 1:
            model = est.models_[0]
            yt = model.transformed_coords(test.U, test.coords) * model.frame_scale \
                + model.frame_shift
            _write_csv(out / "aligned_curves.csv", ["scenario", "y", "y_transformed", "value"],
                       ([int(i), y[0], t[0], v] for i, y, t, v in
                        zip(ids, test.coords, yt, test.Y[:, 0])))
    print(f"wrote report files to {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="svdonet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a benchmark dataset")
    g.add_argument("--case", required=True, choices=sorted(CASES))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="case option")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("svd", help="cumulative energy and reconstruction error tables")
    s.add_argument("--case", choices=sorted(CASES))
    s.add_argument("--data", help="snapshot CSV instead of a generated case")
    s.add_argument("--variable")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--center", choices=("mean", "none"), default="mean")
    s.add_argument("--scale", choices=("auto", "none"), default="auto")
    s.add_argument("--energy", choices=("variance", "amplitude"), default="variance")
    s.add_argument("--k", type=int, default=2, help="rank echoed on stdout")
    s.add_argument("--max-rank", type=int, default=32)
    s.add_argument("--out", default=".")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_svd)

    t = sub.add_parser("train", help="train one surrogate")
    t.add_argument("--config")
    t.add_argument("--case", choices=bench.CASE_IDS)
    t.add_argument("--arch", choices=bench.ARCHITECTURES)
    t.add_argument("--p", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained model on held-out data")
    e.add_argument("--model", required=True)
    e.add_argument("--case", choices=bench.CASE_IDS)
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="train and tabulate several architectures")
    c.add_argument("--case", required=True, choices=sorted(CASES))
    c.add_argument("--archs", required=True, help="e.g. vanilla:p=8,flex:p=1")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default=".")
    c.add_argument("--set", action="append", metavar="KEY=VALUE", help="applied to every arch")
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("report", help="plot-ready CSVs from a model or a report table")
    r.add_argument("--model")
    r.add_argument("--table")
    r.add_argument("--case", choices=bench.CASE_IDS)
    r.add_argument("--out", default=".")
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalFailure as exc:
        print(f"svdonet: numerical failure: {exc}", file=sys.stderr)
        return 1
    except (UsageError, ValueError, FileNotFoundError, ParseError, KeyError) as exc:
        print(f"svdonet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
