"""Experiment orchestration and the ``skewbench`` command line.

A run is configured by a YAML/JSON file (see ``ExperimentConfig``).  The
strategy x rule matrix is evaluated per (rho, seed, strategy) cell; each
finished cell is appended to a JSONL result store whose first line pins the
config hash, so an interrupted run resumes where it stopped.
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
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from sklearn.linear_model import LogisticRegression

from . import __version__, datagen, inference, metrics, nncore, strategies
from .strategies import StrategyKind

log = logging.getLogger(__name__)

STORE_NAME = "results.jsonl"
STORE_FORMAT = 1

# rule reported per strategy in the rho-sweep summary
HEADLINE_RULES = {
    strategies.DOMAIN_DISCRIMINATIVE: "sum_joint_shifted",
    strategies.DOMAIN_INDEPENDENT: "sum_activations",
}


class ConfigError(ValueError):
    pass


class ResumeMismatch(RuntimeError):
    pass


# ---------------------------------------------------------------- config schema

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SyntheticBlock(_Strict):
    n_classes: int = Field(10, ge=2)
    feature_dim: int = Field(16, ge=2)
    shared_scale: float = Field(4.0, gt=0)
    channel_scale: float = Field(1.25, ge=0)
    sigma: float = Field(1.0, gt=0)
    train_per_class: int = Field(1000, gt=0)
    val_per_class: int = Field(200, gt=0)
    test_per_class: int = Field(500, gt=0)
    means_seed: int = 0


class DatasetBlock(_Strict):
    kind: Literal["synthetic", "cifar10s"] = "synthetic"
    synthetic: SyntheticBlock = SyntheticBlock()
    cifar_dir: Optional[str] = None
    rho: Union[float, list[float]] = 0.95

    @field_validator("rho")
    @classmethod
    def _rho_range(cls, v):
        for r in (v if isinstance(v, list) else [v]):
            if not 0.5 <= r <= 1.0:
                raise ValueError(f"rho must lie in [0.5, 1], got {r}")
        if isinstance(v, list) and not v:
            raise ValueError("rho list is empty")
        return v

    @property
    def rhos(self):
        return list(self.rho) if isinstance(self.rho, list) else [self.rho]


class StrategyBlock(_Strict):
    kind: Literal[strategies.KINDS] = strategies.BASELINE
    beta: float = Field(0.9, ge=0, lt=1)
    adv_weight: float = Field(1.0, ge=0)
    adv_attach: Literal["penultimate", "final"] = "penultimate"
    adv_steps: int = Field(1, ge=1)
    adv_hidden: tuple[int, ...] = ()

    def build(self) -> StrategyKind:
        return StrategyKind(**self.model_dump())


class OptimBlock(_Strict):
    lr: float = Field(0.1, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)
    lr_drop: float = Field(0.1, gt=0)
    drop_every: int = Field(10, ge=1)
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(128, ge=1)

    def build(self) -> nncore.OptimConfig:
        return nncore.OptimConfig(**self.model_dump())


class RbaBlock(_Strict):
    target_bias: float = Field(0.0, ge=0, le=0.5)
    epsilon: float = Field(0.05, ge=0)
    step_size: float = Field(1.0, gt=0)
    max_iters: int = Field(500, ge=1)
    use_known_domains: bool = True

    def build(self):
        return inference.RbaConfig(self.target_bias, self.epsilon, self.step_size, self.max_iters)


class ExperimentConfig(_Strict):
    dataset: DatasetBlock = DatasetBlock()
    strategies: list[Union[StrategyBlock, str]] = Field(min_length=1)
    rules: list[str] = Field(min_length=1)
    seeds: list[int] = Field([0, 1, 2, 3, 4], min_length=1)
    optim: OptimBlock = OptimBlock()
    trunk: list[tuple[int, Literal["relu", "identity"]]] = [(64, "relu"), (64, "relu")]
    precision: Literal["float64", "float32"] = "float64"
    rba: RbaBlock = RbaBlock()
    probe: bool = True
    output_dir: str = "runs/default"

    @field_validator("strategies")
    @classmethod
    def _strategy_blocks(cls, v):
        return [StrategyBlock(kind=s) if isinstance(s, str) else s for s in v]

    @field_validator("rules")
    @classmethod
    def _known_rules(cls, v):
        for r in v:
            if r not in inference.RULES + inference.RBA_RULES:
                raise ValueError(f"unknown rule {r!r}")
        return v

    def strategy_kinds(self):
        return [s.build() for s in self.strategies]

    def hash(self):
        """Digest of everything that affects results (the output location does not)."""
        body = self.model_dump(mode="json", exclude={"output_dir"})
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def _field_errors(err: ValidationError):
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "\n".join(lines)


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError("invalid experiment config:\n" + _field_errors(e)) from None


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)  # JSON is valid YAML
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML/JSON: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data)


# ---------------------------------------------------------------- data & models

_TAG_DATA = 101


def data_seed(seed):
    return [int(seed), _TAG_DATA]


@lru_cache(maxsize=4)
def _cached_data(dataset_json, rho, seed):
    block = DatasetBlock.model_validate_json(dataset_json)
    return build_data(block, rho, seed)


def build_data(block: DatasetBlock, rho, seed):
    """{train, val, test} for one rho; test concatenates the per-domain copies."""
    if block.kind == "cifar10s":
        if not block.cifar_dir:
            raise ConfigError("dataset.cifar_dir: required for cifar10s")
        parts = datagen.build_cifar10s(block.cifar_dir, datagen.SkewSpec.half_split(rho, 10), data_seed(seed))
        test = datagen.concat([parts["test_color"], parts["test_gray"]], "test")
        return {"train": parts["train"], "val": None, "test": test}
    cfg = datagen.SyntheticConfig(**block.synthetic.model_dump())
    parts = datagen.build_synthetic(cfg, datagen.SkewSpec.half_split(rho, cfg.n_classes), data_seed(seed))
    test = datagen.concat([parts["test_d0"], parts["test_d1"]], "test")
    return {"train": parts["train"], "val": parts["val"], "test": test}


def score_table(model: strategies.TrainedModel, ds: datagen.Dataset, domain_probs=None):
    return inference.ScoreTable(ds.ids, model.head_layout, model.activations(ds.features),
                                y_true=ds.y, d_true=ds.d, domain_probs=domain_probs)


def domain_posterior(model, train: datagen.Dataset, test: datagen.Dataset, seed=0):
    """P(d|x) from a logistic domain head fit on frozen training features."""
    clf = LogisticRegression(max_iter=2000, random_state=seed)
    clf.fit(model.features(train.features), train.d)
    return clf.predict_proba(model.features(test.features))


def apply_rule(table, rule, prior, rba: RbaBlock):
    """Predictions for one rule, or raise IncompatibleRule."""
    if rule in inference.RBA_RULES:
        inference.check_rule(table.layout, rule, True, True, False)
        res = inference.rba_solve(table, rba.build(),
                                  known_domains=table.d_true if rba.use_known_domains else None,
                                  prior=prior if rule == "rba_shifted" else None)
        return res.predictions, {"rba_feasible": float(res.feasible)}
    return inference.decide(table, rule, prior), {}


def evaluate(pred, ds: datagen.Dataset):
    acc_d = metrics.domain_accuracies(pred, ds.y, ds.d, ds.n_classes, ds.n_domains)
    out = {"mean_acc": 100 * metrics.mean_class_domain_accuracy(pred, ds.y, ds.d, ds.n_classes, ds.n_domains)}
    for k, a in enumerate(acc_d):
        out[f"acc_d{k}"] = 100 * float(a)
    if ds.n_domains == 2:
        out["bias"] = metrics.bias_amplification(pred, ds.d, ds.n_classes)
    return out


def run_cell(cfg: ExperimentConfig, rho, seed, strategy: StrategyKind):
    """Train one strategy on one (rho, seed) and evaluate every rule.  Returns store rows."""
    data = _cached_data(cfg.dataset.model_dump_json(), rho, seed)
    train, test = data["train"], data["test"]
    dtype = np.float64 if cfg.precision == "float64" else np.float32
    key = {"rho": rho, "seed": seed, "strategy": strategy.label}
    try:
        model = strategies.train(train, strategy, cfg.optim.build(), seed,
                                 trunk=tuple(map(tuple, cfg.trunk)), dtype=dtype)
    except nncore.NonFiniteError as e:
        return [{**key, "rule": rule, "status": "failed", "reason": str(e)} for rule in cfg.rules]
    dom_probs = None
    if "domain_weighted_conditional" in cfg.rules and model.head_layout == strategies.PER_DOMAIN:
        dom_probs = domain_posterior(model, train, test, seed)
    table = score_table(model, test, dom_probs)
    extra = {}
    if cfg.probe:
        extra["probe_acc"] = 100 * metrics.domain_probe(model.features(test.features), test.d, seed)
    rows = []
    for rule in cfg.rules:
        try:
            pred, info = apply_rule(table, rule, model.train_prior, cfg.rba)
        except inference.IncompatibleRule as e:
            rows.append({**key, "rule": rule, "status": "incompatible", "reason": str(e)})
            continue
        vals = {**evaluate(pred, test), **extra, **info}
        rows.append({**key, "rule": rule, "status": "ok", "metrics": vals})
    return rows


# ---------------------------------------------------------------- result store

def environment_stamp(cfg: ExperimentConfig):
    return {"skewbench": __version__, "numpy": np.__version__, "precision": cfg.precision}


def _cell_key(row):
    return (row["rho"], row["seed"], row["strategy"])


def read_store(path):
    """(header, rows, completed cell keys).  A torn final line is ignored."""
    header, rows, done = None, [], set()
    with open(path) as f:
        lines = f.read().split("\n")
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            if lineno >= len(lines) - 1:
                log.warning("%s: ignoring torn last line", path)
                break
            raise ValueError(f"{path}:{lineno}: corrupt record") from None
        if rec.get("type") == "header":
            header = rec
        elif rec.get("type") == "cell":
            done.add((rec["rho"], rec["seed"], rec["strategy"]))
            rows.extend(rec["rows"])
    if header is None:
        raise ValueError(f"{path}: missing header")
    return header, rows, done


def _append(path, records):
    with open(path, "a") as f:
        f.write("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
        f.flush()
        os.fsync(f.fileno())


def _repair_tail(path):
    # drop a partially written last line so new appends start on a fresh line
    data = Path(path).read_bytes()
    if data and not data.endswith(b"\n"):
        Path(path).write_bytes(data[:data.rfind(b"\n") + 1])


def _cell_job(args):
    cfg_json, rho, seed, strat = args
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    return run_cell(cfg, rho, seed, StrategyKind(**strat))


def run_matrix(cfg: ExperimentConfig, out_dir=None, resume=False, max_cells=None, workers=None):
    """Evaluate every (rho, seed, strategy) cell not yet in the store.

    Cells are committed in a fixed order whatever the worker count, so the
    store is identical across runs.  ``max_cells`` stops early (used to
    exercise resume).  Returns the store path.
    """
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    store = out / STORE_NAME
    h = cfg.hash()
    done = set()
    if store.exists():
        if not resume:
            raise FileExistsError(f"{store} exists; pass --resume to continue it")
        _repair_tail(store)
        header, _, done = read_store(store)
        if header["config_hash"] != h:
            raise ResumeMismatch(f"{store} was written for config {header['config_hash']}, not {h}")
    else:
        _append(store, [{"type": "header", "format": STORE_FORMAT, "config_hash": h,
                         "config": cfg.model_dump(mode="json"), "env": environment_stamp(cfg)}])

    todo = [(rho, seed, s) for rho in cfg.dataset.rhos for seed in cfg.seeds for s in cfg.strategy_kinds()
            if (rho, seed, s.label) not in done]
    if max_cells is not None:
        todo = todo[:max_cells]
    if workers is None:
        workers = max(1, int(os.environ.get("SKEWBENCH_THREADS", "1")))
    jobs = [(cfg.model_dump_json(), rho, seed, s.to_dict()) for rho, seed, s in todo]

    def commit(job, rows):
        _, rho, seed, strat = job
        _append(store, [{"type": "cell", "rho": rho, "seed": seed,
                         "strategy": StrategyKind(**strat).label, "rows": rows}])
        log.info("cell rho=%s seed=%s %s done", rho, seed, StrategyKind(**strat).label)

    if workers == 1 or len(jobs) <= 1:
        for job in jobs:
            commit(job, _cell_job(job))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            # map yields in submission order: a single writer, canonical order
            for job, rows in zip(jobs, pool.map(_cell_job, jobs)):
                commit(job, rows)
    return store


# ---------------------------------------------------------------- report

CSV_FIELDS = ["rho", "strategy", "rule", "metric", "mean", "two_sigma", "n_seeds"]


def _fmt(x):
    return f"{x:.6f}"


def aggregate(rows):
    """{(rho, strategy, rule): {metric: (mean, two_sigma, n)}} over seeds, plus skipped pairs."""
    groups, skipped = {}, {}
    for r in rows:
        k = (r["rho"], r["strategy"], r["rule"])
        if r["status"] != "ok":
            skipped[k] = r["status"]
            continue
        for m, v in r["metrics"].items():
            groups.setdefault(k, {}).setdefault(m, []).append((r["seed"], v))
    agg = {}
    for k, ms in groups.items():
        agg[k] = {m: metrics.mean_two_sigma([v for _, v in sorted(vs)]) + (len(vs),) for m, vs in ms.items()}
    return agg, skipped


def _order(rows):
    strat_order, rule_order = {}, {}
    for r in rows:
        strat_order.setdefault(r["strategy"], len(strat_order))
        rule_order.setdefault(r["rule"], len(rule_order))
    return lambda k: (k[0], strat_order[k[1]], rule_order[k[2]])


def render_table(agg, skipped, rows):
    """Plain-text table: bias, per-domain accuracy, mean +/- 2 sigma."""
    key = _order(rows)
    header = ["rho", "strategy", "rule", "bias", "acc_d0", "acc_d1", "mean_acc", "probe_acc", "seeds"]
    body = []
    for k in sorted(agg, key=key):
        m = agg[k]

        def cell(name, digits=1):
            if name not in m:
                return "-"
            mean, spread, _ = m[name]
            return f"{mean:.{digits}f} ± {spread:.{digits}f}"

        body.append([f"{k[0]:g}", k[1], k[2], cell("bias", 3), cell("acc_d0"), cell("acc_d1"),
                     cell("mean_acc"), cell("probe_acc"), str(m["mean_acc"][2])])
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    line = lambda r: "  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip()
    out = [line(header), line(["-" * w for w in widths])] + [line(r) for r in body]
    if skipped:
        by_pair = {}
        for k, v in sorted(skipped.items(), key=lambda kv: key(kv[0])):
            by_pair.setdefault((k[1], v), []).append(k[2])
        out += ["", "skipped (strategy: rules):"]
        out += [f"  {s} [{v}]: {', '.join(dict.fromkeys(rules))}" for (s, v), rules in by_pair.items()]
    return "\n".join(out) + "\n"


def sweep_summary(agg, rows):
    """One row per (rho, strategy) at that strategy's headline rule."""
    key = _order(rows)
    out = []
    for k in sorted(agg, key=key):
        rho, strat, rule = k
        kind = strat.split("(")[0]
        if rule != HEADLINE_RULES.get(kind, "argmax"):
            continue
        mean, spread, n = agg[k]["mean_acc"]
        out.append({"rho": rho, "strategy": strat, "rule": rule, "mean_acc": mean, "two_sigma": spread, "n_seeds": n})
    return out


def report(store_path, out_dir=None):
    """Write results.csv, results.txt and (for rho sweeps) sweep.csv/sweep.txt."""
    store_path = Path(store_path)
    out = Path(out_dir) if out_dir else store_path.parent
    out.mkdir(parents=True, exist_ok=True)
    _, rows, _ = read_store(store_path)
    if not rows:
        raise ValueError(f"{store_path}: store has no results")
    agg, skipped = aggregate(rows)
    key = _order(rows)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for k in sorted(agg, key=key):
        for m in sorted(agg[k]):
            mean, spread, n = agg[k][m]
            w.writerow([f"{k[0]:g}", k[1], k[2], m, _fmt(mean), _fmt(spread), n])
    paths = {"csv": out / "results.csv", "table": out / "results.txt"}
    paths["csv"].write_text(buf.getvalue())
    paths["table"].write_text(render_table(agg, skipped, rows))

    rhos = sorted({r["rho"] for r in rows})
    if len(rhos) > 1:
        summ = sweep_summary(agg, rows)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rho", "strategy", "rule", "mean_acc", "two_sigma", "n_seeds"])
        for s in summ:
            w.writerow([f"{s['rho']:g}", s["strategy"], s["rule"], _fmt(s["mean_acc"]), _fmt(s["two_sigma"]), s["n_seeds"]])
        paths["sweep_csv"] = out / "sweep.csv"
        paths["sweep_csv"].write_text(buf.getvalue())
        lines = [f"{'rho':>5}  {'strategy':<28} {'rule':<18} mean_acc"]
        lines += [f"{s['rho']:>5g}  {s['strategy']:<28} {s['rule']:<18} {s['mean_acc']:.1f} ± {s['two_sigma']:.1f}"
                  for s in summ]
        paths["sweep_table"] = out / "sweep.txt"
        paths["sweep_table"].write_text("\n".join(lines) + "\n")
    return paths


# ---------------------------------------------------------------- command line

def _sidecar_path(ckpt):
    return Path(str(ckpt) + ".json")


def _load_model(ckpt) -> strategies.TrainedModel:
    meta = json.loads(_sidecar_path(ckpt).read_text())
    s = meta["strategy"]
    s["adv_hidden"] = tuple(s.get("adv_hidden", ()))
    return strategies.TrainedModel(nncore.load_checkpoint(ckpt), StrategyKind(**s),
                                   np.asarray(meta["train_prior"], dtype=float), meta.get("history", []),
                                   meta.get("aborted", False))


def _load_prior(arg, table):
    if arg is None:
        return None
    if arg == "uniform":
        n_c, n_d = table.n_classes, table.n_domains or 1
        return np.full((n_c, n_d), 1.0 / (n_c * n_d))
    data = json.loads(Path(arg).read_text())
    if isinstance(data, dict):
        data = data["train_prior"]
    return np.asarray(data, dtype=float)


def _pick_strategy(cfg: ExperimentConfig, name):
    kinds = cfg.strategy_kinds()
    for s in kinds:
        if name in (s.label, s.kind):
            return s
    if name in strategies.KINDS:
        return StrategyKind(name)
    raise ConfigError(f"strategy {name!r} not in config ({', '.join(s.label for s in kinds)})")


def cmd_gen_data(a):
    cfg = load_config(a.config)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for rho in cfg.dataset.rhos:
        data = build_data(cfg.dataset, rho, a.seed)
        sub = out if len(cfg.dataset.rhos) == 1 else out / f"rho{rho:g}"
        sub.mkdir(parents=True, exist_ok=True)
        for split, ds in data.items():
            if ds is not None:
                datagen.write_dataset(ds, sub / f"{split}.skb")
                print(f"wrote {sub / f'{split}.skb'} ({len(ds)} examples)")


def cmd_train(a):
    cfg = load_config(a.config)
    strat = _pick_strategy(cfg, a.strategy)
    if a.data:
        train = datagen.read_dataset(a.data, "train")
    else:
        train = build_data(cfg.dataset, cfg.dataset.rhos[0], a.seed)["train"]
    dtype = np.float64 if cfg.precision == "float64" else np.float32
    model = strategies.train(train, strat, cfg.optim.build(), a.seed, trunk=tuple(map(tuple, cfg.trunk)), dtype=dtype)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    nncore.save_checkpoint(model.network, out)
    meta = {**model.metadata(), "seed": a.seed, "history": model.history, "config_hash": cfg.hash()}
    _sidecar_path(out).write_text(json.dumps(meta, indent=2) + "\n")
    print(f"wrote {out} and {_sidecar_path(out)}; final loss {model.history[-1] if model.history else float('nan'):.4f}")


def cmd_score(a):
    model = _load_model(a.model)
    ds = datagen.read_dataset(a.data)
    inference.write_scores(score_table(model, ds), a.out)
    print(f"wrote {a.out} ({len(ds)} rows, layout {model.head_layout})")


def cmd_infer(a):
    table = inference.read_scores(a.scores)
    prior = _load_prior(a.prior, table)
    if a.rule in inference.RBA_RULES:
        cfg = inference.RbaConfig(epsilon=a.rba_eps)
        res = inference.rba_solve(table, cfg, known_domains=table.d_true,
                                  prior=prior if a.rule == "rba_shifted" else None)
        pred = res.predictions
        if not res.feasible:
            print(f"warning: constraints not met at epsilon {a.rba_eps}; violation {res.violation:.3g}", file=sys.stderr)
    else:
        pred = inference.decide(table, a.rule, prior)
    lines = ["id,pred"] + [f"{i},{p}" for i, p in zip(table.ids, pred)]
    text = "\n".join(lines) + "\n"
    if a.out:
        Path(a.out).write_text(text)
        print(f"wrote {a.out}")
    else:
        sys.stdout.write(text)


def _read_predictions(path):
    with open(path) as f:
        rows = list(csv.DictReader(f))
    return {int(r["id"]): int(r["pred"]) for r in rows}


def cmd_eval(a):
    table = inference.read_scores(a.scores)
    if table.y_true is None or table.d_true is None:
        raise ConfigError(f"{a.scores}: score file lacks y_true/d_true")
    preds = _read_predictions(a.predictions)
    missing = [int(i) for i in table.ids if int(i) not in preds]
    if missing:
        raise ConfigError(f"{len(missing)} score ids have no prediction (first: {missing[0]})")
    pred = np.array([preds[int(i)] for i in table.ids])
    n_d = table.n_domains or int(table.d_true.max()) + 1
    ds = datagen.Dataset(np.zeros((len(pred), 1)), table.y_true, table.d_true, table.n_classes, n_d, "test", table.ids)
    print(json.dumps(evaluate(pred, ds), indent=2, sort_keys=True))


def cmd_run_matrix(a):
    cfg = load_config(a.config)
    store = run_matrix(cfg, a.out, resume=a.resume)
    paths = report(store)
    print(f"store {store}")
    print(Path(paths["table"]).read_text(), end="")


def cmd_report(a):
    store = Path(a.store)
    if store.is_dir():
        store = store / STORE_NAME
    paths = report(store, a.out)
    print(Path(paths["table"]).read_text(), end="")
    if "sweep_table" in paths:
        print()
        print(Path(paths["sweep_table"]).read_text(), end="")


def build_parser():
    p = argparse.ArgumentParser(prog="skewbench", description="Skewed class/domain benchmark.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="build datasets from a config and write .skb files")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train one strategy; writes a checkpoint and JSON sidecar")
    s.add_argument("--config", required=True)
    s.add_argument("--strategy", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--data", help="training split (.skb); built from the config if omitted")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="write raw activations of a model on a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("infer", help="apply a decision rule to a score file")
    s.add_argument("--scores", required=True)
    s.add_argument("--rule", required=True, choices=inference.RULES + inference.RBA_RULES)
    s.add_argument("--prior", help="'uniform' or a JSON file (matrix or model sidecar)")
    s.add_argument("--rba-eps", type=float, default=0.05)
    s.add_argument("--out")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="metrics for predictions against a score file's labels")
    s.add_argument("--scores", required=True)
    s.add_argument("--predictions", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("run-matrix", help="run the strategy x rule matrix over seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="output directory (default: config output_dir)")
    s.add_argument("--resume", action="store_true")
    s.set_defaults(func=cmd_run_matrix)

    s = sub.add_parser("report", help="tables from a result store")
    s.add_argument("--store", required=True, help="results.jsonl or its directory")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, ResumeMismatch, FileExistsError, datagen.IngestionError, datagen.FormatError,
            inference.IncompatibleRule) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
