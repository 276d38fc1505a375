"""Experiment configuration, per-case presets, and comparison reports."""

import csv
import dataclasses
from dataclasses import dataclass, field
import time
from pathlib import Path

import numpy as np
import yaml

from ._validation import as_float_array
from .casegen import make_case, load_snapshot_csv, snapshots_to_dataset, CaseData
from .exceptions import InvalidData, InvalidShape
from .operators import FlexDeepONet, PODDeepONet, SVDDeepONet, VanillaDeepONet

__all__ = [
    "ARCHITECTURES",
    "PRESETS",
    "ExperimentConfig",
    "ReportRow",
    "rmse",
    "preset",
    "parse_arch_spec",
    "build_estimator",
    "load_case",
    "run_experiment",
    "compare",
    "write_report",
    "read_report",
]

ARCHITECTURES = ("vanilla", "pod", "svd", "svd-shared", "flex")
CASE_IDS = ("tc1", "tc2", "tc4", "external")


def rmse(pred, truth):
    """Root mean squared difference of two equal-length arrays."""
    pred = as_float_array(pred, "pred", allow_empty=True)
    truth = as_float_array(truth, "truth", allow_empty=True)
    if pred.size == 0 or truth.size == 0:
        raise InvalidData("rmse of empty input")
    if pred.shape != truth.shape:
        raise InvalidShape(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


@dataclass
class ExperimentConfig:
    """Everything needed to rebuild one training run.

    ``case_options`` are forwarded to :func:`svdonet.casegen.make_case`;
    for ``case="external"``, ``data`` maps ``"train"``/``"test"`` to lists
    of snapshot CSV paths (one per variable).
    """

    case: str = "tc1"
    arch: str = "vanilla"
    p: int = 2
    branch_hidden: tuple = (64,) * 6
    trunk_hidden: tuple = (64,) * 6
    activation: str = "tanh"
    trunk_output_activation: str = "identity"
    prenet_hidden: tuple = (16,)
    prenet_components: tuple = ("scale", "rotation", "shift")
    prenet_layout: str = "single"
    prenet_per_variable: bool = False
    training: str = "independent"
    epochs: int = 1000
    batch_size: int = 256
    learning_rate: list = field(default_factory=lambda: [(0, 1e-3)])
    lbfgs_iter: int = 0
    validation_fraction: float = 0.2
    seed: int = 0
    center: str = "mean"
    scale: str = "auto"
    case_options: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    output_dir: str = "runs"

    def __post_init__(self):
        if self.case not in CASE_IDS:
            raise ValueError(f"unknown case {self.case!r}; choose from {CASE_IDS}")
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; choose from {ARCHITECTURES}")
        for key in ("branch_hidden", "trunk_hidden", "prenet_hidden", "prenet_components"):
            setattr(self, key, tuple(getattr(self, key)))
        lr = self.learning_rate
        if np.isscalar(lr):
            lr = [(0, lr)]
        self.learning_rate = [(int(e), float(v)) for e, v in lr]
        self.p = int(self.p)

    def to_dict(self):
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = list(v)
            if f.name == "learning_rate":
                v = [[e, lr] for e, lr in v]
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_yaml(cls, text):
        d = yaml.safe_load(text) or {}
        if not isinstance(d, dict):
            raise ValueError("config must be a mapping")
        return cls.from_dict(d)

    def save(self, path):
        Path(path).write_text(self.to_yaml(), encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_yaml(Path(path).read_text(encoding="utf-8"))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


_SCHED = lambda e: [(0, 3e-3), (e // 2, 1e-3)]  # noqa: E731
_SVD_SCHED = [(0, 1e-2), (1000, 3e-3), (1500, 1e-3)]

# Per-case defaults.  Hidden sizes follow the layer counts recoverable from
# the reference architectures; optimiser settings were tuned on one core.
PRESETS = {
    ("tc1", "vanilla"): dict(p=2, branch_hidden=(32,) * 3, trunk_hidden=(32,) * 3, epochs=200,
                             batch_size=256, learning_rate=_SCHED(200), lbfgs_iter=1500),
    ("tc1", "pod"): dict(p=2, branch_hidden=(32,) * 3, trunk_hidden=(32,) * 3, epochs=200,
                         batch_size=256, learning_rate=_SCHED(200), lbfgs_iter=1500,
                         center="none", scale="none"),
    ("tc1", "svd"): dict(p=2, branch_hidden=(32,) * 3, trunk_hidden=(32,) * 3, epochs=2000,
                         batch_size=16, learning_rate=_SVD_SCHED, lbfgs_iter=5000),
    ("tc1", "svd-shared"): dict(p=2, branch_hidden=(32,) * 3, trunk_hidden=(32,) * 3,
                                epochs=2000, batch_size=16, learning_rate=_SVD_SCHED,
                                lbfgs_iter=5000),
    ("tc2", "vanilla"): dict(p=8, branch_hidden=(32,) * 3, trunk_hidden=(32,) * 3, epochs=400,
                             batch_size=256, learning_rate=[(0, 3e-3), (200, 1e-3), (300, 3e-4)]),
    ("tc2", "flex"): dict(p=1, branch_hidden=(), trunk_hidden=(), prenet_hidden=(),
                          prenet_components=("shift",), trunk_output_activation="tanh",
                          epochs=300, batch_size=500,
                          learning_rate=[(0, 1e-2), (150, 3e-3), (225, 1e-3)]),
    ("tc4", "vanilla"): dict(p=32, branch_hidden=(64,) * 3, trunk_hidden=(64,) * 3, epochs=300,
                             batch_size=512, learning_rate=[(0, 3e-3), (150, 1e-3), (225, 3e-4)]),
    # a 4-unit trunk with exp output can express the body as a product of tanh steps
    ("tc4", "flex"): dict(p=1, branch_hidden=(16,), trunk_hidden=(4,),
                          trunk_output_activation="exp", prenet_hidden=(32, 32),
                          prenet_layout="single", epochs=1500, batch_size=512,
                          learning_rate=[(0, 1e-2), (1000, 3e-3), (1300, 1e-3)]),
}


def preset(case, arch, **overrides):
    """``ExperimentConfig`` with the case/architecture defaults applied."""
    base = dict(PRESETS.get((case, arch), {}))
    if arch == "flex" and (case, arch) not in PRESETS:
        base.setdefault("branch_hidden", (32, 32))
        base.setdefault("trunk_hidden", (32, 32))
    base.update(overrides)
    return ExperimentConfig(case=case, arch=arch, **base)


def _coerce(text):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def parse_arch_spec(spec):
    """``"flex:p=1:epochs=10"`` style token -> ``("flex", {"p": 1, ...})``.

    Within one token, options are separated by ``:``; e.g.
    ``vanilla:p=8:epochs=100``.
    """
    parts = spec.strip().split(":")
    arch = parts[0]
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
    opts = {}
    for item in parts[1:]:
        if "=" not in item:
            raise ValueError(f"bad option {item!r} in {spec!r}; expected key=value")
        k, v = item.split("=", 1)
        opts[k.strip()] = _coerce(v.strip())
    return arch, opts


def build_estimator(cfg, n_branch_inputs):
    """Unfitted estimator described by ``cfg``."""
    common = dict(
        n_branch_inputs=n_branch_inputs, p=cfg.p, branch_hidden=cfg.branch_hidden,
        trunk_hidden=cfg.trunk_hidden, activation=cfg.activation, epochs=cfg.epochs,
        batch_size=cfg.batch_size, learning_rate=cfg.learning_rate, random_state=cfg.seed,
        lbfgs_iter=cfg.lbfgs_iter, validation_fraction=cfg.validation_fraction,
    )
    if cfg.arch == "vanilla":
        return VanillaDeepONet(trunk_output_activation=cfg.trunk_output_activation,
                               training=cfg.training, **common)
    if cfg.arch == "pod":
        return PODDeepONet(trunk_output_activation=cfg.trunk_output_activation,
                           training=cfg.training, center=cfg.center, scale=cfg.scale, **common)
    if cfg.arch in ("svd", "svd-shared"):
        return SVDDeepONet(shared_groups="all" if cfg.arch == "svd-shared" else None,
                           center=cfg.center, scale=cfg.scale, **common)
    return FlexDeepONet(trunk_output_activation=cfg.trunk_output_activation,
                        prenet_components=cfg.prenet_components, prenet_hidden=cfg.prenet_hidden,
                        prenet_layout=cfg.prenet_layout,
                        prenet_per_variable=cfg.prenet_per_variable, training=cfg.training,
                        **common)


def load_case(cfg):
    """Generate (or, for ``external``, read) the data a config refers to."""
    if cfg.case != "external":
        return make_case(cfg.case, seed=cfg.seed, **cfg.case_options)
    try:
        train_paths, test_paths = cfg.data["train"], cfg.data["test"]
    except KeyError:
        raise ValueError("external case needs data.train and data.test path lists") from None
    train = snapshots_to_dataset([load_snapshot_csv(p) for p in train_paths])
    test = snapshots_to_dataset([load_snapshot_csv(p) for p in test_paths])
    manifest = dict(case="external", train=list(map(str, train_paths)),
                    test=list(map(str, test_paths)))
    return CaseData("external", train, test, manifest)


@dataclass
class ReportRow:
    """One line of a comparison table; RMSE is on held-out data only."""

    architecture: str
    p: int
    param_count: int
    rmse: dict
    train_seconds: float = float("nan")
    predict_ms_per_10k: float = float("nan")

    def flat(self, variables=None):
        variables = variables or list(self.rmse)
        row = dict(architecture=self.architecture, p=self.p, param_count=self.param_count)
        for v in variables:
            row[f"rmse_{v}"] = self.rmse.get(v, float("nan"))
        row["train_seconds"] = self.train_seconds
        row["predict_ms_per_10k"] = self.predict_ms_per_10k
        return row


def evaluate(est, dataset, label=None, p=None):
    """Per-variable RMSE of ``est`` on ``dataset`` plus a prediction timing."""
    pred = est.predict(dataset.X)
    pred = pred.reshape(len(dataset), -1)
    scores = {v: rmse(pred[:, j], dataset.Y[:, j]) for j, v in enumerate(dataset.variables)}
    n = min(10_000, len(dataset))
    t0 = time.perf_counter()
    est.predict(dataset.X[:n])
    ms = (time.perf_counter() - t0) * 1e3 * 10_000 / n
    return ReportRow(label or type(est).__name__, int(p if p is not None else est.p_),
                     int(est.param_count_), scores, predict_ms_per_10k=ms), pred


def run_experiment(cfg, case_data=None):
    """Train per ``cfg`` and evaluate on held-out data.

    Returns ``(estimator, ReportRow, case_data)``.
    """
    data = case_data if case_data is not None else load_case(cfg)
    est = build_estimator(cfg, data.train.n_branch_inputs)
    t0 = time.perf_counter()
    est.fit(data.train.X, data.train.Y)
    elapsed = time.perf_counter() - t0
    row, _ = evaluate(est, data.test, cfg.arch, cfg.p)
    row.train_seconds = elapsed
    return est, row, data


def compare(case, specs, seed=0, case_options=None, base=None):
    """Train each ``(arch, overrides)`` in ``specs`` on one dataset.

    ``base`` (dict) is applied to every config before the per-spec
    overrides.  Returns ``(rows, estimators)``.
    """
    base = dict(base or {})
    case_options = dict(base.pop("case_options", {}), **(case_options or {}))
    data = None
    rows, models = [], []
    for arch, opts in specs:
        merged = dict(base)
        merged.update(opts)
        merged.setdefault("seed", seed)
        cfg = preset(case, arch, case_options=case_options, **merged)
        if data is None:
            data = load_case(cfg)
        est, row, _ = run_experiment(cfg, data)
        rows.append(row)
        models.append(est)
    return rows, models


def write_report(rows, path):
    """CSV with columns architecture, p, param_count, rmse_<var>..., timings."""
    variables = []
    for r in rows:
        variables.extend(v for v in r.rmse if v not in variables)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = None
        for r in rows:
            flat = r.flat(variables)
            if w is None:
                w = csv.DictWriter(fh, fieldnames=list(flat))
                w.writeheader()
            w.writerow(flat)
    return Path(path)


def read_report(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = []
        for rec in csv.DictReader(fh):
            scores = {k[5:]: float(v) for k, v in rec.items() if k.startswith("rmse_")}
            rows.append(ReportRow(rec["architecture"], int(rec["p"]), int(rec["param_count"]),
                                  scores, float(rec["train_seconds"]),
                                  float(rec["predict_ms_per_10k"])))
    return rows


def format_table(rows):
    """Plain-text table of report rows."""
    variables = []
    for r in rows:
        variables.extend(v for v in r.rmse if v not in variables)
    head = ["architecture", "p", "params"] + [f"rmse_{v}" for v in variables] + ["train_s"]
    lines = ["  ".join(f"{h:>12}" for h in head)]
    for r in rows:
        cells = [r.architecture, str(r.p), str(r.param_count)]
        cells += [f"{r.rmse.get(v, float('nan')):.3e}" for v in variables]
        cells.append(f"{r.train_seconds:.1f}")
        lines.append("  ".join(f"{c:>12}" for c in cells))
    return "\n".join(lines)
