"""Command-line pipeline: gen -> select -> tune -> explain / attack -> eval, plus factor and sweep-k.

Exit codes:
    0  success
    2  validation error, missing upstream artifact or unreadable tensor file
    3  candidate generation error (missing stub, failed endpoint, empty pool)
    4  training error (non-finite loss)
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import plotting
from .attribution import (
    CorrelationRow,
    accuracy,
    attribute,
    concept_correlation,
    write_correlation_csv,
    write_correlation_json,
)
from .candidate_gen import DEFAULT_TEMPLATES, generate_candidates, make_client
from .decomposer import (
    Decomposition,
    TuneConfig,
    causal_attack,
    cd_tune,
    concept_matrix,
    explain,
    find_bad_cases,
    frobenius_fit,
)
from .embedding_store import (
    CandidatePool,
    load_dataset,
    load_embeddings,
    make_encoder,
    save_embeddings,
    to_f32_grid,
)
from .errors import (
    CDError,
    EmptyPool,
    EmptyReport,
    GenerationError,
    InvalidInput,
    StubMissingError,
    TrainingError,
)
from .numerics import svd, tail_energy
from .optim import TrainConfig
from .submodular import SelectedSet, SelectionConfig, select_all
from .toy_transformer import ModelConfig, ToyTransformer, p_tune

logger = logging.getLogger("cdprompt")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_GENERATION = 3
EXIT_TRAINING = 4

DEFAULT_SEEDS = [1, 42, 100, 999, 1756]
SHOT_CHOICES = ("4", "8", "16", "32", "full")
FIXTURE_FILES = ("config.json", "train.jsonl", "test.jsonl", "stub.jsonl", "probes.jsonl")


class StageMissing(CDError):
    """An upstream artifact is absent; the message names the stage to rerun."""


def exit_code_for(exc):
    if isinstance(exc, (GenerationError, StubMissingError, EmptyPool)):
        return EXIT_GENERATION
    if isinstance(exc, TrainingError):
        return EXIT_TRAINING
    return EXIT_VALIDATION


# ---------------------------------------------------------------------------
# Config and run context
# ---------------------------------------------------------------------------

def _dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _git_describe():
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


class RunContext:
    def __init__(self, config_path, out=None, seed=None, shot=None):
        self.config_path = Path(config_path)
        try:
            self.raw = json.loads(self.config_path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InvalidInput(f"config file not found: {self.config_path}") from None
        except json.JSONDecodeError as exc:
            raise InvalidInput(f"{self.config_path}: invalid JSON ({exc.msg})") from None
        self.base = self.config_path.parent
        for key in ("classes", "train", "test"):
            if key not in self.raw:
                raise InvalidInput(f"config is missing {key!r}")
        self.classes = [str(c) for c in self.raw["classes"]]
        if len(self.classes) < 2 or len(set(self.classes)) != len(self.classes):
            raise InvalidInput("config needs at least two distinct classes")
        self.seeds = [int(seed)] if seed is not None else \
            [int(s) for s in self.raw.get("seeds", DEFAULT_SEEDS)]
        if not self.seeds:
            raise InvalidInput("seed list is empty")
        shots = [str(shot)] if shot is not None else [str(s) for s in self.raw.get("shots", ["full"])]
        for s in shots:
            if s not in SHOT_CHOICES:
                raise InvalidInput(f"shot setting {s!r} not in {SHOT_CHOICES}")
        self.shots = shots
        for key in ("train", "test"):
            if not self.path(self.raw[key]).is_file():
                raise InvalidInput(f"{key} file not found: {self.path(self.raw[key])}")
        self.out = Path(out) if out is not None else self.path(self.raw.get("out", "runs"))
        self.out.mkdir(parents=True, exist_ok=True)
        self.label_index = {c: i for i, c in enumerate(self.classes)}
        self._model = None
        self._encoder = None
        self._data = {}

    def path(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    @property
    def config_hash(self):
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()

    @property
    def model(self):
        if self._model is None:
            if "model_dir" in self.raw:
                self._model = ToyTransformer.load(self.path(self.raw["model_dir"]))
            else:
                self._model = ToyTransformer(ModelConfig.from_dict(self.raw.get("model", {})))
            if self._model.config.n_classes != len(self.classes):
                raise InvalidInput("model n_classes does not match the class list")
        return self._model

    @property
    def encoder(self):
        if self._encoder is None:
            self._encoder = make_encoder(self.raw.get("encoder", {"mode": "model"}),
                                         self.model, self.base)
        return self._encoder

    def records(self, split):
        if split not in self._data:
            self._data[split] = load_dataset(self.path(self.raw[split]), self.classes)
            if not self._data[split]:
                raise InvalidInput(f"{split} set is empty")
        return self._data[split]

    def batch(self, records):
        return self.model.encode(records, label_index=self.label_index)

    def shot_subset(self, shot, seed):
        """Deterministic class-stratified subsample of the training set."""
        recs = self.records("train")
        if shot == "full":
            return recs
        n = int(shot)
        rng = np.random.default_rng(seed)
        keep = []
        for y in self.classes:
            idx = [i for i, r in enumerate(recs) if r.label == y]
            if len(idx) < n:
                raise InvalidInput(f"class {y!r} has {len(idx)} examples, fewer than {n} shots")
            keep.extend(int(i) for i in rng.choice(idx, size=n, replace=False))
        return [recs[i] for i in sorted(keep)]

    def run_dir(self, shot, seed):
        return self.out / f"shot-{shot}" / f"seed-{seed}"

    # -- upstream artifacts ------------------------------------------------

    def require(self, path, stage):
        if not Path(path).exists():
            raise StageMissing(f"missing {path}; run `{stage}` first")
        return Path(path)

    def pool(self):
        path = self.require(self.out / "candidates.jsonl", "gen")
        return CandidatePool.load(path, self.classes, self.encoder)

    def selected(self):
        path = self.require(self.out / "selected.json", "select")
        obj = json.loads(path.read_text(encoding="utf-8"))
        return {s["class"]: SelectedSet.from_json(s) for s in obj["sets"]}

    def decomposition(self, shot, seed):
        return Decomposition.load(self.require(self.run_dir(shot, seed) / "decomposition", "tune"))

    # -- manifest ---------------------------------------------------------

    def record(self, stage, seconds, artifacts):
        path = self.out / "run_manifest.json"
        manifest = json.loads(path.read_text()) if path.exists() else {"stages": {}}
        rel = sorted(str(Path(a).relative_to(self.out)) for a in artifacts)
        manifest["config_hash"] = self.config_hash
        manifest["config_path"] = str(self.config_path)
        manifest["git_describe"] = _git_describe()
        manifest["stages"][stage] = {"seconds": round(seconds, 4), "artifacts": rel}
        manifest["artifacts"] = sorted({a for s in manifest["stages"].values() for a in s["artifacts"]})
        _dump(manifest, path)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_gen(ctx, args):
    spec = ctx.raw.get("generator")
    if spec is None:
        raise InvalidInput("config has no 'generator' section")
    client = make_client(spec, ctx.base)
    names = ctx.raw.get("class_names", {})
    pairs = [(y, names.get(y, y)) for y in ctx.classes]
    pool = generate_candidates(client, ctx.raw.get("templates", DEFAULT_TEMPLATES), pairs,
                               ctx.raw.get("leak_terms"), ctx.raw.get("leak_patterns", ()))
    path = ctx.out / "candidates.jsonl"
    pool.save(path)
    for y in ctx.classes:
        print(f"{y}\t{len(pool.candidates(y))}")
    return [path]


def _selection_config(ctx, k=None):
    d = dict(ctx.raw.get("selection", {}))
    if k is not None:
        d["k"] = k
    return SelectionConfig.from_dict(d)


def stage_select(ctx, args):
    pool = ctx.pool()
    cfg = _selection_config(ctx, getattr(args, "k", None))
    sets = select_all(pool, ctx.records("train"), cfg)
    path = ctx.out / "selected.json"
    _dump({"k": cfg.k, "lambda": cfg.lam, "temperature": cfg.temperature,
           "sets": [sets[y].to_json() for y in ctx.classes]}, path)
    for y in ctx.classes:
        print(f"{y}\t{' '.join(sets[y].ids)}")
    return [path]


def _tune_one(ctx, pool, selected, shot, seed):
    model = ctx.model
    run = ctx.run_dir(shot, seed)
    run.mkdir(parents=True, exist_ok=True)
    train = ctx.batch(ctx.shot_subset(shot, seed))
    test = ctx.batch(ctx.records("test"))
    n_prompt = int(ctx.raw.get("n_prompt", 1))
    pcfg = TrainConfig.from_dict({**ctx.raw.get("ptune", {}), "seed": seed})
    P, phist = p_tune(model, train, n_prompt, pcfg)
    P = to_f32_grid(P)
    C0, ids = concept_matrix(selected, pool, ctx.classes)
    tcfg = TuneConfig.from_dict({**ctx.raw.get("tune", {}), "seed": seed})
    dec, thist = cd_tune(model, P, C0, ids, train, tcfg, classes=ctx.classes)
    dec.C, dec.Q = to_f32_grid(dec.C), to_f32_grid(dec.Q)
    dec.meta.update({"shot": shot, "n_prompt": n_prompt})
    save_embeddings(run / "prompt.cdem", P)
    dec.save(run / "decomposition")
    _dump(phist.to_json(), run / "ptune_history.json")
    _dump(thist.to_json(), run / "cd_history.json")
    metrics = {"seed": seed, "shot": shot, "n_prompt": n_prompt, "mu": tcfg.mu,
               "acc_ptune": accuracy(model, P, test), "acc_cd": accuracy(model, dec, test),
               "final_kl": dec.meta["final_kl"], "initial_loss": dec.meta["initial_loss"],
               "final_loss": dec.meta["final_loss"]}
    _dump(metrics, run / "metrics.json")
    print(f"shot={shot} seed={seed} acc_ptune={metrics['acc_ptune']:.4f} "
          f"acc_cd={metrics['acc_cd']:.4f} kl={metrics['final_kl']:.3g}")
    return [run / "prompt.cdem", run / "decomposition" / "C.cdem", run / "decomposition" / "Q.cdem",
            run / "decomposition" / "decomposition.json", run / "ptune_history.json",
            run / "cd_history.json", run / "metrics.json"]


def stage_tune(ctx, args):
    pool = ctx.pool()
    selected = ctx.selected()
    out = []
    for shot in ctx.shots:
        for seed in ctx.seeds:
            out += _tune_one(ctx, pool, selected, shot, seed)
    return out


def stage_explain(ctx, args):
    pool = ctx.pool()
    selected = ctx.selected()
    k = int(ctx.raw.get("explain", {}).get("k", 3))
    out = []
    for shot in ctx.shots:
        for seed in ctx.seeds:
            dec = ctx.decomposition(shot, seed)
            path = ctx.run_dir(shot, seed) / "explanations.jsonl"
            with open(path, "w", encoding="utf-8") as fh:
                for i, rec in enumerate(ctx.records("test")):
                    rep = explain(ctx.model, dec, rec, selected, pool, k, input_id=f"test-{i:04d}")
                    fh.write(json.dumps(rep.to_json(), sort_keys=True) + "\n")
            out.append(path)
    return out


def stage_attack(ctx, args):
    pool = ctx.pool()
    selected = ctx.selected()
    acfg = ctx.raw.get("attack", {})
    probes = []
    if "probes" in acfg:
        probes = load_dataset(ctx.path(acfg["probes"]), ctx.classes)
    out = []
    for shot in ctx.shots:
        for seed in ctx.seeds:
            dec = ctx.decomposition(shot, seed)
            run = ctx.run_dir(shot, seed)
            cases = [(f"test-{int(i):04d}", r) for i, r in
                     find_bad_cases(ctx.model, dec, ctx.records("test"), ctx.classes)]
            if probes:
                cases += [(f"probe-{int(i):04d}", r) for i, r in
                          find_bad_cases(ctx.model, dec, probes, ctx.classes)]
            try:
                rep = causal_attack(ctx.model, dec, cases, selected, pool,
                                    acfg.get("rule", "runner_up"), int(acfg.get("k", 3)),
                                    ctx.classes).to_json()
            except EmptyReport:
                rep = {"rule": acfg.get("rule", "runner_up"), "k": int(acfg.get("k", 3)),
                       "n_cases": 0, "cases": [], "status": "no bad cases"}
            _dump(rep, run / "attack.json")
            out.append(run / "attack.json")
            if rep["n_cases"]:
                out.append(plotting.plot_attack(rep, run / "attack.png"))
                print(f"shot={shot} seed={seed} cases={rep['n_cases']} "
                      f"pre={rep['mean_pre_similarity']:.4f} post={rep['mean_post_similarity']:.4f}")
            else:
                print(f"shot={shot} seed={seed} no bad cases")
    return out


def _rho_per_seed(ctx, dec, methods, top_ks, max_inputs, ig_steps):
    recs = ctx.records("test")[:max_inputs]
    vals = {}
    for method in methods:
        per_input = {k: [] for k in top_ks}
        for rec in recs:
            scores = attribute(ctx.model, dec, rec.text, method, steps=ig_steps)
            for k in top_ks:
                rho = concept_correlation(dec, scores, min(k, dec.n_concepts))
                if rho is not None:
                    per_input[k].append(rho)
        for k in top_ks:
            vals[(method, k)] = float(np.mean(per_input[k])) if per_input[k] else None
    return vals


def _fmt(x):
    return "n/a" if x is None else f"{x:.6f}"


def stage_eval(ctx, args):
    acfg = ctx.raw.get("attribution", {})
    methods = list(acfg.get("methods", ["grad", "ig"]))
    top_ks = [int(k) for k in acfg.get("top_k", [3, 5, 10])]
    max_inputs = int(acfg.get("max_inputs", 20))
    ig_steps = int(acfg.get("ig_steps", 32))
    rho_cols = [f"rho_{m}@{k}" for m in methods for k in top_ks]
    header = ["shot", "seed", "acc_ptune", "acc_cd"] + rho_cols
    table, plot_rows, corr = [], [], []
    for shot in ctx.shots:
        per_seed = []
        corr_vals = {(m, k): [] for m in methods for k in top_ks}
        for seed in ctx.seeds:
            run = ctx.run_dir(shot, seed)
            metrics = json.loads(ctx.require(run / "metrics.json", "tune").read_text())
            dec = ctx.decomposition(shot, seed)
            rhos = _rho_per_seed(ctx, dec, methods, top_ks, max_inputs, ig_steps)
            for key, v in rhos.items():
                corr_vals[key].append(v)
            row = [metrics["acc_ptune"], metrics["acc_cd"]] + [rhos[(m, k)] for m in methods for k in top_ks]
            per_seed.append(row)
            table.append([shot, seed] + [_fmt(v) for v in row])
            plot_rows.append({"seed": f"{shot}/{seed}", "acc_ptune": metrics["acc_ptune"],
                              "acc_cd": metrics["acc_cd"]})
        cols = list(zip(*per_seed))
        avg, var = [], []
        for col in cols:
            vals = [v for v in col if v is not None]
            avg.append(_fmt(float(np.mean(vals))) if vals else "n/a")
            var.append(_fmt(float(np.var(vals))) if vals else "n/a")
        table.append([shot, "Avg"] + avg)
        table.append([shot, "σ²"] + var)
        corr += [CorrelationRow(f"{ctx.raw.get('name', 'dataset')}/shot-{shot}", m, k, corr_vals[(m, k)])
                 for m in methods for k in top_ks]
    paths = [ctx.out / "eval.csv", ctx.out / "eval.json", ctx.out / "correlation.csv",
             ctx.out / "correlation.json", ctx.out / "eval.png"]
    _write_csv(paths[0], header, table)
    _dump({"columns": header, "rows": table}, paths[1])
    write_correlation_csv(paths[2], corr)
    write_correlation_json(paths[3], corr)
    plotting.plot_eval(plot_rows, paths[4])
    print("\t".join(header))
    for row in table:
        print("\t".join(str(x) for x in row))
    return paths


def stage_factor(ctx, args):
    if args.prompt:
        src = Path(args.prompt)
        if not src.is_file():
            raise InvalidInput(f"prompt tensor not found: {src}")
        dest = ctx.out
    else:
        dest = ctx.run_dir(ctx.shots[0], ctx.seeds[0])
        src = ctx.require(dest / "prompt.cdem", "tune")
    P = load_embeddings(src)
    d, nq = P.shape
    s = svd(P).singular_values
    rows = []
    for nc in range(1, min(d, nq) + 1):
        dec = frobenius_fit(P, nc, epsilon=float(ctx.raw.get("factor_epsilon", 1e-10)))
        rows.append({"n_concepts": nc, "residual": dec.meta["residual"],
                     "residual_sq": dec.meta["residual_sq"], "svd_bound_sq": tail_energy(s, nc) ** 2,
                     "within_epsilon": dec.meta["within_epsilon"]})
    paths = [dest / "factor.csv", dest / "factor.json", dest / "factor.png"]
    _write_csv(paths[0], ["n_concepts", "residual", "residual_sq", "svd_bound_sq", "within_epsilon"],
               [[r["n_concepts"], f"{r['residual']:.6e}", f"{r['residual_sq']:.6e}",
                 f"{r['svd_bound_sq']:.6e}", r["within_epsilon"]] for r in rows])
    _dump({"prompt": src.name, "shape": [d, nq], "rows": rows}, paths[1])
    plotting.plot_factor(rows, paths[2])
    for r in rows:
        print(f"N_c={r['n_concepts']}\tresidual^2={r['residual_sq']:.3e}\tbound={r['svd_bound_sq']:.3e}")
    return paths


def stage_sweep_k(ctx, args):
    ks = [int(k) for k in (args.ks.split(",") if args.ks else ctx.raw.get("sweep_k", [1, 5, 10, 15, 20]))]
    pool = ctx.pool()
    shot, seed = ctx.shots[0], ctx.seeds[0]
    run = ctx.run_dir(shot, seed)
    P = load_embeddings(ctx.require(run / "prompt.cdem", "tune"))
    train = ctx.batch(ctx.shot_subset(shot, seed))
    test = ctx.batch(ctx.records("test"))
    tcfg = TuneConfig.from_dict({**ctx.raw.get("tune", {}), "seed": seed})
    rows = []
    for k in ks:
        sel = select_all(pool, ctx.records("train"), _selection_config(ctx, k))
        C0, ids = concept_matrix(sel, pool, ctx.classes)
        dec, _ = cd_tune(ctx.model, P, C0, ids, train, tcfg, classes=ctx.classes)
        dec.C, dec.Q = to_f32_grid(dec.C), to_f32_grid(dec.Q)
        rows.append({"k": k, "n_concepts": dec.n_concepts, "accuracy": accuracy(ctx.model, dec, test),
                     "final_kl": dec.meta["final_kl"]})
        print(f"k={k}\tN_c={dec.n_concepts}\taccuracy={rows[-1]['accuracy']:.4f}")
    paths = [run / "sweep_k.csv", run / "sweep_k.json", run / "sweep_k.png"]
    _write_csv(paths[0], ["k", "n_concepts", "accuracy", "final_kl"],
               [[r["k"], r["n_concepts"], f"{r['accuracy']:.6f}", f"{r['final_kl']:.6e}"] for r in rows])
    _dump({"shot": shot, "seed": seed, "rows": rows}, paths[1])
    plotting.plot_sweep(rows, paths[2])
    return paths


PIPELINE = ("gen", "select", "tune", "explain", "attack", "eval")
STAGES = {"gen": stage_gen, "select": stage_select, "tune": stage_tune, "explain": stage_explain,
          "attack": stage_attack, "eval": stage_eval, "factor": stage_factor,
          "sweep-k": stage_sweep_k}


def run_stage(ctx, name, args):
    t0 = time.perf_counter()
    artifacts = STAGES[name](ctx, args)
    ctx.record(name, time.perf_counter() - t0, artifacts)


def cmd_fixture(args):
    """Copy the bundled synthetic fixture (data + config) into ``--out``."""
    src = Path(__file__).parent / "data" / "fixture"
    dest = Path(args.out or "fixture")
    dest.mkdir(parents=True, exist_ok=True)
    for name in FIXTURE_FILES:
        shutil.copyfile(src / name, dest / name)
    print(dest / "config.json")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON (paths resolve relative to it)")
    common.add_argument("--seed", type=int, help="run a single seed instead of the config list")
    common.add_argument("--shot", choices=SHOT_CHOICES, help="run a single shot setting")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cdprompt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate the concept candidate pool")
    p = sub.add_parser("select", parents=[common], help="submodular concept selection")
    p.add_argument("--k", type=int, help="concepts per class")
    sub.add_parser("tune", parents=[common], help="P-tuning then concept-decomposition tuning")
    sub.add_parser("explain", parents=[common], help="top-k concept explanations for the test set")
    sub.add_parser("attack", parents=[common], help="causal attack on misclassified inputs")
    sub.add_parser("eval", parents=[common], help="accuracy and concept correlation tables")
    p = sub.add_parser("factor", parents=[common], help="CQ factorization residual sweep")
    p.add_argument("--prompt", help="CDEM prompt file (default: the tuned prompt of the first seed)")
    p = sub.add_parser("sweep-k", parents=[common], help="accuracy against concepts per class")
    p.add_argument("--ks", help="comma-separated k values")
    sub.add_parser("run", parents=[common], help="gen, select, tune, explain, attack and eval")
    sub.add_parser("fixture", parents=[common], help="write the bundled synthetic fixture to --out")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "fixture":
            return cmd_fixture(args)
        if not args.config:
            raise InvalidInput("--config is required")
        ctx = RunContext(args.config, args.out, args.seed, args.shot)
        for name in (PIPELINE if args.command == "run" else (args.command,)):
            run_stage(ctx, name, args)
    except CDError as exc:
        code = exit_code_for(exc)
        print(f"cdprompt {args.command}: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
