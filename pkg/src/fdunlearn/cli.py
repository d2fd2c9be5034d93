"""Command-line pipeline: gen-data, train, unlearn, analyze, verify, mia, report."""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import itertools
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .fedsim import FLConfig, default_spec, evaluate_per_domain, load_trace, save_trace, train_federated
from .model import ModelCheckpoint, accuracy
from .records import MetricRecord, read_records, write_records
from .tensorio import generate_domains, load_domains, save_domains, split_train_test
from .unlearn import DEFAULT_PARAMS, METHODS, UnlearnRequest, run_unlearning

EXIT_OK, EXIT_COMPUTE, EXIT_USAGE = 0, 1, 2


class PrerequisiteError(Exception):
    """A required earlier stage has not been run."""


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run directory


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


class RunDir:
    def __init__(self, path):
        self.path = Path(path)

    @property
    def manifest_path(self) -> Path:
        return self.path / "manifest.json"

    def manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {"run_id": "", "config": {}, "stages": {}, "tool_version": __version__}
        return json.loads(self.manifest_path.read_text())

    def save_manifest(self, m: dict) -> None:
        _write_json(self.manifest_path, m)

    @contextlib.contextmanager
    def lock(self):
        self.path.mkdir(parents=True, exist_ok=True)
        lock = self.path / ".lock"
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(f"{self.path} is locked by another writer (remove {lock} if stale)") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            lock.unlink(missing_ok=True)

    def stage(self, name: str) -> dict | None:
        return self.manifest()["stages"].get(name)

    def require(self, *names: str) -> None:
        for name in names:
            st = self.stage(name)
            if not st or not st.get("done"):
                raise PrerequisiteError(f"stage '{name}' has not been run for {self.path}; run `fdunlearn {name}` first")
            missing = [a for a in st.get("artifacts", []) if not (self.path / a).exists()]
            if missing:
                raise PrerequisiteError(f"stage '{name}' is missing artifacts {missing}; re-run `fdunlearn {name} --force`")

    def up_to_date(self, name: str, cfg: dict) -> bool:
        st = self.stage(name)
        if not st or not st.get("done") or st.get("config_hash") != config_hash(cfg):
            return False
        return all((self.path / a).exists() for a in st.get("artifacts", []))

    def mark_done(self, name: str, cfg: dict, artifacts: list[str]) -> None:
        m = self.manifest()
        m["stages"][name] = {"done": True, "config": cfg, "config_hash": config_hash(cfg), "artifacts": sorted(artifacts)}
        m["tool_version"] = __version__
        self.save_manifest(m)

    def train_sets(self):
        return load_domains(self.path / "data" / "train")

    def test_sets(self):
        return load_domains(self.path / "data" / "test")

    def full_model(self) -> ModelCheckpoint:
        return load_trace(self.path).final


# ---------------------------------------------------------------------------
# helpers


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_params(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--param expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def _float_list(text) -> list[float]:
    if isinstance(text, (int, float)):
        return [float(text)]
    if isinstance(text, list):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _accuracy_records(ckpt, test_sets, run_id, method, k=None) -> list[MetricRecord]:
    recs = evaluate_per_domain(ckpt, test_sets, run_id, method)
    return [MetricRecord(**{**r.__dict__, "k": k}) for r in recs]


def _done_methods(run: RunDir) -> list[str]:
    return [m for m in METHODS if (run.stage(f"unlearn_{m}") or {}).get("done")]


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    cfg = {
        "seed": args.seed,
        "domains": args.domains,
        "classes": args.classes,
        "per_domain": args.per_domain,
        "test_fraction": args.test_fraction,
        "image_size": list(args.image_size),
    }
    marker = out / "data.json"
    if marker.exists() and not args.force and json.loads(marker.read_text()).get("config") == cfg:
        _say(f"data in {out} is up to date")
        return EXIT_OK
    domains = generate_domains(args.seed, args.domains, args.classes, args.per_domain, tuple(args.image_size))
    splits = [split_train_test(d, args.test_fraction, args.seed) for d in domains]
    save_domains(domains, out / "full")
    save_domains([a for a, _ in splits], out / "train")
    save_domains([b for _, b in splits], out / "test")
    _write_json(marker, {"config": cfg, "domains": [d.domain_id for d in domains]})
    _say(f"wrote {len(domains)} domains to {out}")
    return EXIT_OK


def _resolve_data(data: Path, test_fraction: float, seed: int):
    """Train/test lists from a gen-data directory or a flat directory of domain archives."""
    if (data / "train").is_dir() and (data / "test").is_dir():
        return load_domains(data / "train"), load_domains(data / "test")
    domains = load_domains(data)
    splits = [split_train_test(d, test_fraction, seed) for d in domains]
    return [a for a, _ in splits], [b for _, b in splits]


def cmd_train(args) -> int:
    run = RunDir(args.out)
    fl = FLConfig(
        rounds=args.rounds,
        local_epochs=args.local_epochs,
        lr=args.lr,
        momentum=args.momentum,
        batch_size=args.batch,
        seed=args.seed,
    )
    data = Path(args.data)
    train_sets, test_sets = _resolve_data(data, args.test_fraction, args.seed)
    data_digest = hashlib.sha256(b"".join(d.images.tobytes() + d.labels.tobytes() for d in train_sets + test_sets))
    cfg = {"fl": fl.to_dict(), "data_digest": data_digest.hexdigest()[:16]}
    with run.lock():
        if run.up_to_date("train", cfg) and not args.force:
            _say(f"train stage in {run.path} is up to date")
            return EXIT_OK
        run_id = "run-" + config_hash(cfg)
        save_domains(train_sets, run.path / "data" / "train")
        save_domains(test_sets, run.path / "data" / "test")
        spec = default_spec(train_sets)
        ckpt, trace = train_federated(
            train_sets, fl, spec=spec,
            progress=(lambda t, g: _say(f"round {t + 1}/{fl.rounds}")) if args.verbose else None,
        )
        save_trace(trace, run.path)
        recs = _accuracy_records(ckpt, test_sets, run_id, "full")
        write_records(run.path / "analysis" / "accuracy_full.csv", recs)
        m = run.manifest()
        # a new training run invalidates every downstream stage
        m.update(run_id=run_id, config={"train": cfg}, stages={})
        run.save_manifest(m)
        artifacts = ["config.json", "correctness.bin", f"round_{fl.rounds:04d}/global.tar", "analysis/accuracy_full.csv"]
        run.mark_done("train", cfg, artifacts)
    for r in recs:
        _say(f"{r.domain}: test_acc={r.value:.4f}")
    return EXIT_OK


def cmd_unlearn(args) -> int:
    run = RunDir(args.run)
    run.require("train")
    if args.out and Path(args.out).resolve() != run.path.resolve():
        raise UsageError("--out must name the same run directory as --run")
    params = _parse_params(args.param)
    try:
        req = UnlearnRequest(args.target, args.method, params, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    cfg = {"target": args.target, "method": args.method, "params": req.params()}
    stage = f"unlearn_{args.method}"
    with run.lock():
        if run.up_to_date(stage, cfg) and not args.force:
            _say(f"{stage} is up to date")
            return EXIT_OK
        trace = load_trace(run.path)
        train_sets, test_sets = run.train_sets(), run.test_sets()
        report = run_unlearning(req, trace.final, trace, train_sets, test_sets, trace.cfg)
        out = run.path / stage
        report.unlearned.save(out / "model.tar")
        _write_json(out / "report.json", {**report.to_json(), "target": args.target, "params": req.params()})
        run_id = run.manifest()["run_id"]
        recs = _accuracy_records(report.unlearned, test_sets, run_id, args.method, k=args.target)
        recs.append(MetricRecord("target_train_acc", report.target_train_acc, run_id, args.method,
                                 train_sets[args.target].domain_id, k=args.target))
        write_records(run.path / "analysis" / f"accuracy_{args.method}.csv", recs)
        run.mark_done(stage, cfg, [f"{stage}/model.tar", f"{stage}/report.json", f"analysis/accuracy_{args.method}.csv"])
    _say(f"{args.method}: target_train_acc={report.target_train_acc:.4f} rounds_used={report.rounds_used}")
    return EXIT_OK


def _model_for(run: RunDir, name: str) -> ModelCheckpoint:
    if name == "full":
        return run.full_model()
    run.require(f"unlearn_{name}")
    return ModelCheckpoint.load(run.path / f"unlearn_{name}" / "model.tar")


def _unlearn_target(run: RunDir, method: str) -> int | None:
    st = run.stage(f"unlearn_{method}")
    return None if not st else st["config"]["target"]


def cmd_analyze(args) -> int:
    from .repanalysis import ProbeSet, layerwise_report

    run = RunDir(args.run)
    run.require("train")
    compare = args.compare or _done_methods(run)
    if not compare:
        raise PrerequisiteError("no unlearned model to compare; run `fdunlearn unlearn` first")
    test_sets = run.test_sets()
    cfg = {"baseline": args.baseline, "compare": compare, "probe": args.probe, "k": args.k,
           "denominator": args.cka_denominator}
    with run.lock():
        if run.up_to_date("analyze", cfg) and not args.force:
            _say("analyze is up to date")
            return EXIT_OK
        run_id = run.manifest()["run_id"]
        base = _model_for(run, args.baseline)
        artifacts = []
        for method in compare:
            other = _model_for(run, method)
            probe_idx = args.probe if args.probe is not None else _unlearn_target(run, method)
            if probe_idx is None:
                raise UsageError("--probe is required when the compared model is not an unlearned one")
            probe_ds = test_sets[int(probe_idx)]
            probe = ProbeSet(probe_ds.images, probe_ds.domain_id)
            recs = layerwise_report(base, other, probe, args.k, run_id=run_id, method=method,
                                    denominator=args.cka_denominator)
            name = f"analysis/repr_{args.baseline}_vs_{method}.csv"
            write_records(run.path / name, recs)
            artifacts.append(name)
            for r in recs:
                if r.metric == "cka":
                    _say(f"{method} {r.layer}: cka={r.value:.4f}")
        run.mark_done("analyze", cfg, artifacts)
    return EXIT_OK


def _verify_configs(args) -> list[dict]:
    combos = itertools.product(_float_list(args.epsilon), _float_list(args.mu), _float_list(args.lam))
    return [{"epsilon": e, "mu": m, "lam": lam} for e, m, lam in combos]


def cmd_verify(args) -> int:
    from .unlearn import retrain
    from .verifier import VerificationConfig, backdoor_baseline, run_injected_training, verify_accuracy

    run = RunDir(args.run)
    run.require("train")
    methods = args.methods if args.methods is not None else _done_methods(run)
    combos = _verify_configs(args)
    cfg = {"target": args.target, "tau": args.tau, "inject_rounds": args.inject_rounds, "y_T": args.y_t,
           "combos": combos, "methods": methods, "baseline": args.baseline,
           "poison_fraction": args.poison_fraction, "generator_steps": args.generator_steps}
    with run.lock():
        if run.up_to_date("verify", cfg) and not args.force:
            _say("verify is up to date")
            return EXIT_OK
        run_id = run.manifest()["run_id"]
        clean = load_trace(run.path)
        train_sets, test_sets = run.train_sets(), run.test_sets()
        k = args.target
        domain = train_sets[k].domain_id
        rows, recs = [], []

        def emit(method, acc, ckpt, tag, extra):
            clean_acc = {d.domain_id: accuracy(ckpt, d.images, d.labels) for d in test_sets}
            rows.append({"method": method, "domain": domain, "marker_acc": acc, "clean_acc_per_domain": clean_acc,
                         "tau": args.tau, "tag": tag, **extra})
            flags = f"tag={tag}"
            recs.append(MetricRecord("marker_acc", acc, run_id, method, domain, k=k, flags=flags))
            for d, v in clean_acc.items():
                recs.append(MetricRecord("clean_test_acc", v, run_id, method, d, k=k, flags=flags))

        retrain_ckpt = None
        if "retrain" in methods and _unlearn_target(run, "retrain") == k:
            retrain_ckpt = ModelCheckpoint.load(run.path / "unlearn_retrain" / "model.tar")
        for combo in combos:
            vcfg = VerificationConfig(tau=args.tau, mu=combo["mu"], lam=combo["lam"], epsilon=combo["epsilon"],
                                      inject_rounds=args.inject_rounds, y_T=args.y_t,
                                      generator_steps=args.generator_steps)
            tag = f"eps={combo['epsilon']},mu={combo['mu']},lam={combo['lam']}"
            extra = {"epsilon": vcfg.epsilon, "mu": vcfg.mu, "lambda": vcfg.lam}
            res = run_injected_training(clean, train_sets, k, vcfg)
            res.generator.save(run.path / "verify" / f"generator_{len(rows):02d}.tar")
            emit("full", verify_accuracy(res.final, res.marked, vcfg.y_T), res.final, tag, extra)
            for method in methods:
                if method == "retrain":
                    if retrain_ckpt is None:
                        retrain_ckpt = retrain(train_sets, k, clean.cfg, spec=clean.final.spec).unlearned
                    ck = retrain_ckpt
                else:
                    params = run.stage(f"unlearn_{method}")["config"]["params"] if run.stage(f"unlearn_{method}") else {}
                    req = UnlearnRequest(k, method, params)
                    ck = run_unlearning(req, res.final, res.trace, train_sets, test_sets, clean.cfg).unlearned
                emit(method, verify_accuracy(ck, res.marked, vcfg.y_T), ck, tag, extra)
        if args.baseline == "backdoor":
            bd = backdoor_baseline(train_sets, k, clean.cfg, y_T=args.y_t, poison_fraction=args.poison_fraction,
                                   spec=clean.final.spec)
            extra = {"poison_fraction": args.poison_fraction}
            emit("backdoor:full", bd.accuracy_fn(bd.final), bd.final, "backdoor", extra)
            if "retrain" in methods or retrain_ckpt is not None:
                if retrain_ckpt is None:
                    retrain_ckpt = retrain(train_sets, k, clean.cfg, spec=clean.final.spec).unlearned
                emit("backdoor:retrain", bd.accuracy_fn(retrain_ckpt), retrain_ckpt, "backdoor", extra)
        _write_json(run.path / "verify_report.json", rows)
        write_records(run.path / "analysis" / "verify.csv", recs)
        run.mark_done("verify", cfg, ["verify_report.json", "analysis/verify.csv"])
    for r in rows:
        _say(f"{r['tag']} {r['method']}: marker_acc={r['marker_acc']:.4f}")
    return EXIT_OK


def cmd_mia(args) -> int:
    from .mia import build_attack_set, evaluate_attack, train_attack_model, train_shadows

    run = RunDir(args.run)
    run.require("train")
    victims = ["full"] + _done_methods(run)
    cfg = {"target": args.target, "shadows": args.shadows, "victims": victims}
    with run.lock():
        if run.up_to_date("mia", cfg) and not args.force:
            _say("mia is up to date")
            return EXIT_OK
        run_id = run.manifest()["run_id"]
        trace = load_trace(run.path)
        train_sets, test_sets = run.train_sets(), run.test_sets()
        shadows = train_shadows(train_sets, test_sets, trace.cfg, args.shadows, seed=trace.cfg.seed,
                                spec=trace.final.spec)
        attack = train_attack_model(build_attack_set(shadows, trace.cfg.seed), trace.cfg.seed)
        k = args.target
        domain = train_sets[k].domain_id
        rows, recs = [], []
        for victim in victims:
            met = evaluate_attack(attack, _model_for(run, victim), train_sets[k], test_sets[k], seed=trace.cfg.seed)
            rows.append({"victim": victim, "domain": domain, "precision": met.precision, "recall": met.recall,
                         "num_shadows": args.shadows, "flags": met.flags})
            recs.append(MetricRecord("mia_precision", met.precision, run_id, victim, domain, k=k, flags=met.flags))
            recs.append(MetricRecord("mia_recall", met.recall, run_id, victim, domain, k=k, flags=met.flags))
        _write_json(run.path / "mia_report.json", rows)
        write_records(run.path / "analysis" / "mia.csv", recs)
        run.mark_done("mia", cfg, ["mia_report.json", "analysis/mia.csv"])
    for r in rows:
        _say(f"{r['victim']}: precision={r['precision']:.4f} recall={r['recall']:.4f}")
    return EXIT_OK


REPORT_PREREQUISITES = ("train", "verify")


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = RunDir(args.run)
    run.require(*REPORT_PREREQUISITES)
    out = Path(args.out) if args.out else run.path / "report"
    if not out.is_absolute() and args.out:
        out = Path.cwd() / out
    out.mkdir(parents=True, exist_ok=True)
    an = run.path / "analysis"

    acc = read_records(an / "accuracy_full.csv")
    for method in _done_methods(run):
        acc += [r for r in read_records(an / f"accuracy_{method}.csv") if r.metric == "test_acc"]
    write_records(out / "accuracy.csv", acc)
    domains = sorted({r.domain for r in acc})
    methods = list(dict.fromkeys(r.method for r in acc))
    fig, ax = plt.subplots(figsize=(8, 4))
    width = 0.8 / max(len(methods), 1)
    for j, m in enumerate(methods):
        vals = {r.domain: r.value for r in acc if r.method == m}
        ax.bar(np.arange(len(domains)) + j * width, [vals.get(d, 0.0) for d in domains], width, label=m)
    ax.set_xticks(np.arange(len(domains)) + 0.4 - width / 2, domains, rotation=20)
    ax.set_ylabel("test accuracy")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "accuracy.png", dpi=100)
    plt.close(fig)

    repr_files = sorted(an.glob("repr_*.csv"))
    if repr_files:
        recs = [r for f in repr_files for r in read_records(f)]
        write_records(out / "representation.csv", recs)
        for metric, fname in (("cka", "cka.png"), ("subspace_sim", "subspace.png")):
            fig, ax = plt.subplots(figsize=(6, 4))
            for m in dict.fromkeys(r.method for r in recs):
                rows = [r for r in recs if r.method == m and r.metric == metric]
                ax.plot([r.layer for r in rows], [r.value for r in rows], marker="o", label=m)
            ax.set_ylabel(metric)
            ax.set_ylim(0, 1.05)
            ax.legend(fontsize=7)
            fig.tight_layout()
            fig.savefig(out / fname, dpi=100)
            plt.close(fig)

    write_records(out / "verification.csv", [r for r in read_records(an / "verify.csv") if r.metric == "marker_acc"])
    if (an / "mia.csv").exists():
        write_records(out / "mia.csv", read_records(an / "mia.csv"))
    _say(f"report written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fdunlearn", description="Federated domain unlearning toolkit")
    p.add_argument("--config", help="JSON file of option defaults; explicit flags override it")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate procedural multi-domain data")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--domains", type=int, default=4)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--per-domain", type=int, default=500)
    g.add_argument("--test-fraction", type=float, default=0.2)
    g.add_argument("--image-size", type=int, nargs=3, default=[3, 32, 32], metavar=("C", "H", "W"))
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    desk = FLConfig.desk()
    t = sub.add_parser("train", help="federated training with full trace logging")
    t.add_argument("--data", required=True)
    t.add_argument("--rounds", type=int, default=desk.rounds)
    t.add_argument("--local-epochs", type=int, default=desk.local_epochs)
    t.add_argument("--lr", type=float, default=desk.lr)
    t.add_argument("--momentum", type=float, default=desk.momentum)
    t.add_argument("--batch", type=int, default=desk.batch_size)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--test-fraction", type=float, default=0.2, help="used only for flat data directories")
    t.add_argument("--out", required=True)
    t.add_argument("--force", action="store_true")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    u = sub.add_parser("unlearn", help="remove one client's domain")
    u.add_argument("--run", required=True)
    u.add_argument("--target", type=int, required=True)
    u.add_argument("--method", choices=METHODS, required=True)
    u.add_argument("--param", action="append", metavar="KEY=VALUE",
                   help="method parameter; known keys: " + "; ".join(f"{m}: {','.join(v) or '-'}" for m, v in DEFAULT_PARAMS.items()))
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--out")
    u.add_argument("--force", action="store_true")
    u.set_defaults(func=cmd_unlearn)

    a = sub.add_parser("analyze", help="layer-wise CKA and subspace similarity")
    a.add_argument("--run", required=True)
    a.add_argument("--baseline", default="full")
    a.add_argument("--compare", action="append", help="unlearning method to compare (repeatable; default: all done)")
    a.add_argument("--probe", type=int, help="domain index of the probe test split (default: the unlearned target)")
    a.add_argument("--k", type=int, default=10)
    a.add_argument("--cka-denominator", choices=("standard", "as-printed"), default="standard")
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("verify", help="marker injection and verification accuracy")
    v.add_argument("--run", required=True)
    v.add_argument("--target", type=int, required=True)
    v.add_argument("--tau", type=float, default=-1.0)
    v.add_argument("--mu", default="0.5", help="value or comma-separated sweep")
    v.add_argument("--lambda", dest="lam", default="0.5", help="value or comma-separated sweep")
    v.add_argument("--epsilon", default="0.3", help="value or comma-separated sweep")
    v.add_argument("--inject-rounds", type=int, default=10)
    v.add_argument("--y-t", type=int, default=0)
    v.add_argument("--generator-steps", type=int, default=100)
    v.add_argument("--methods", nargs="*", choices=METHODS, help="unlearning methods to re-run on the injected model")
    v.add_argument("--baseline", choices=("backdoor",))
    v.add_argument("--poison-fraction", type=float, default=0.1)
    v.add_argument("--force", action="store_true")
    v.set_defaults(func=cmd_verify)

    m = sub.add_parser("mia", help="shadow-model membership inference")
    m.add_argument("--run", required=True)
    m.add_argument("--target", type=int, required=True)
    m.add_argument("--shadows", type=int, default=3)
    m.add_argument("--force", action="store_true")
    m.set_defaults(func=cmd_mia)

    r = sub.add_parser("report", help="tables and charts from persisted records")
    r.add_argument("--run", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        values = json.loads(Path(known.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {known.config}: {exc}") from exc
    if not isinstance(values, dict):
        raise UsageError("config file must hold a JSON object")
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, sp in subparsers.choices.items():
        section = values.get(name, {})
        flat = {k: v for k, v in values.items() if not isinstance(v, dict)}
        merged = {k.replace("-", "_"): v for k, v in {**flat, **section}.items()}
        dests = {a.dest for a in sp._actions}
        sp.set_defaults(**{k: v for k, v in merged.items() if k in dests})
        for action in sp._actions:
            if action.dest in merged and action.required:
                action.required = False


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (PrerequisiteError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
