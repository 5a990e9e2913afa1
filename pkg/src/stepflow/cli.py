"""Command-line entry point: one subcommand per pipeline stage.

Every stage reads and writes artifacts in ``--out-dir`` and draws its
randomness from a stream derived from the run seed and the stage name, so
reruns with the same config are bitwise identical.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from typing import Optional

import numpy as np

from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("stepflow")

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_RUNTIME = 0, 2, 3, 4

LABELED = "labeled.jsonl"
ROLLOUTS = "rollouts.jsonl"
CHECKPOINT = "datagen_checkpoint.json"
AUGMENTED = "augmented.jsonl"
PRM_WEIGHTS = "prm.npz"
GFN_POLICY = "gfn_policy.npz"
GFN_METRICS = "gfn_metrics.csv"
BASELINE_POLICY = "baseline_policy.npz"
BASELINE_METRICS = "baseline_metrics.csv"
SOLUTIONS = "solutions.jsonl"
SEARCH_ACCURACY = "search_accuracy.csv"
EVAL_JSON = "eval.json"
EVAL_ROWS = "eval_problems.csv"
REPORT_DIR = "report"


class StageDependencyError(RuntimeError):
    """An upstream artifact or external service a stage needs is missing."""


# --- shared plumbing ----------------------------------------------------------------


class Run:
    def __init__(self, cfg: RunConfig):
        from .envs import make_env

        self.cfg = cfg
        self.out = cfg.out_dir
        os.makedirs(self.out, exist_ok=True)
        self.env = make_env(cfg.env.spec())
        self.problems = self.env.problems()

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def require(self, name: str, stage: str) -> str:
        p = self.path(name)
        if not os.path.exists(p):
            raise StageDependencyError(f"missing artifact {p}; run `stepflow {stage}` first")
        return p

    def rng(self, stage: str, *extra: int):
        return np.random.default_rng(self.cfg.stage_seed(stage) + list(extra))

    def int_seed(self, stage: str) -> int:
        return int(self.rng(stage).integers(1 << 31))

    def generator(self):
        g = self.cfg.generator
        if g.kind == "env":
            from .envs import EnvGenerator

            return EnvGenerator(self.env, max_steps=self.cfg.datagen.max_depth)
        from .llm_gateway import GatewayConfig, LLMClient, LLMGenerator

        gw = GatewayConfig.from_env(
            endpoint=g.endpoint, timeout=g.timeout, attempts=g.attempts, backoff=g.backoff, max_in_flight=g.max_in_flight
        )
        if not gw.endpoint:
            raise StageDependencyError("generator.kind is 'llm' but no endpoint is configured (STEPFLOW_LLM_ENDPOINT)")
        return LLMGenerator(LLMClient(gw), max_tokens=g.max_tokens)

    def scorer(self):
        from .prm import FeaturizedScorer

        m = self.cfg.prm_model
        return FeaturizedScorer(m.dim, m.hash_seed, m.ngram, self.env if m.env_features else None, m.mask_numbers)

    def load_scorer(self, stage: str):
        from .prm import FeaturizedScorer

        m = self.cfg.prm_model
        path = self.require(PRM_WEIGHTS, "train-prm")
        return FeaturizedScorer.load(path, self.env if m.env_features else None, expect_hash_seed=m.hash_seed)

    def oracle(self):
        from .prm import OraclePRM

        return OraclePRM(self.env)

    def policy(self):
        from .gfn import PolicyModel

        p = self.cfg.policy
        return PolicyModel(self.env, p.hash_dim, p.ngram, p.hash_seed, temperature=self.cfg.gfn.temperature)

    def reward(self):
        from .gfn import GridReward, PRMReward

        if hasattr(self.env, "cell"):
            return GridReward(self.env)
        prm = self.oracle() if self.cfg.policy.reward == "oracle" else self.load_scorer("train-gfn")
        gamma = self.cfg.gfn.gamma
        return PRMReward(prm, gamma, self.policy() if gamma else None)


def _write_csv(path: str, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- stages ---------------------------------------------------------------------------


def cmd_datagen(run: Run) -> None:
    from .core import write_jsonl, write_labeled_steps
    from .mcts_datagen import rollout_rows, run_datagen

    params = dataclasses.replace(run.cfg.datagen, workers=run.cfg.workers)
    trees, records = run_datagen(run.problems, run.generator(), params, run.cfg.seed, run.path(CHECKPOINT))
    write_labeled_steps(run.path(LABELED), records)
    write_jsonl(run.path(ROLLOUTS), rollout_rows(records))
    _write_json(
        run.path("datagen_summary.json"),
        {
            "problems": len(trees),
            "records": len(records),
            "rollouts_used": sum(t.rollouts_used for t in trees),
            "zero_valued": sum(r.value == 0 for r in records),
        },
    )
    log.info("datagen: %d records from %d problems", len(records), len(trees))


def cmd_augment(run: Run) -> None:
    from .augment import augment_dataset, summary
    from .core import read_jsonl, read_labeled_steps, write_labeled_steps
    from .mcts_datagen import attach_rollouts

    records = read_labeled_steps(run.require(LABELED, "datagen"))
    rows = list(read_jsonl(run.require(ROLLOUTS, "datagen")))
    out = augment_dataset(attach_rollouts(records, rows), run.cfg.augment)
    write_labeled_steps(run.path(AUGMENTED), out)
    _write_json(run.path("augment_summary.json"), summary(out))
    log.info("augment: %d -> %d records", len(records), len(out))


def cmd_train_prm(run: Run) -> None:
    from .core import read_labeled_steps
    from .prm import roc_auc, train_prm

    src = run.path(AUGMENTED) if os.path.exists(run.path(AUGMENTED)) else run.require(LABELED, "datagen")
    data = read_labeled_steps(src)
    cfg = dataclasses.replace(run.cfg.prm, seed=run.int_seed("train-prm"))
    scorer = train_prm(data, cfg, run.scorer())
    scorer.save(run.path(PRM_WEIGHTS))
    preds = [scorer.score(r.question, r.prefix, r.step) for r in data]
    labels = [r.value > 0 for r in data]
    metrics = {"dataset": os.path.basename(src), "records": len(data), "loss_history": scorer.loss_history}
    if 0 < sum(labels) < len(labels):
        metrics["train_auc_nonzero"] = roc_auc(preds, labels)
    _write_json(run.path("prm_metrics.json"), metrics)


def cmd_train_gfn(run: Run) -> None:
    from .gfn import train_gfn, write_metrics

    policy = run.policy()
    reward = run.reward()
    policy, metrics = train_gfn(run.problems, policy, reward, run.cfg.gfn, rng=run.rng("train-gfn"))
    policy.save(run.path(GFN_POLICY))
    write_metrics(run.path(GFN_METRICS), metrics)
    log.info("train-gfn: final loss %.4g", metrics[-1]["subtb_loss"] if metrics else float("nan"))


def cmd_train_baseline(run: Run) -> None:
    from .gfn import train_baseline_maximizer

    policy = run.policy()
    policy.temperature = run.cfg.baseline.temperature
    policy, metrics = train_baseline_maximizer(
        run.problems, policy, run.reward(), run.cfg.baseline, rng=run.rng("train-baseline")
    )
    policy.save(run.path(BASELINE_POLICY))
    cols = ("iteration", "objective", "mean_return", "entropy", "grad_norm")
    _write_csv(run.path(BASELINE_METRICS), cols, ([m[c] for c in cols] for m in metrics))


def _problem_subset(problems, n: Optional[int]):
    return problems if n is None else problems[:n]


def cmd_guided_search(run: Run) -> None:
    from .core import extract_final_answer, write_jsonl
    from .search_eval import answer_judge, guided_search

    s = run.cfg.search
    prm = run.oracle() if s.prm == "oracle" else run.load_scorer("guided-search")
    gen = run.generator()
    problems = _problem_subset(run.problems, s.n_problems)
    rows, acc = [], []
    for k in s.k_values:
        hits = 0
        for i, p in enumerate(problems):
            res = guided_search(p, gen, prm, int(k), s.temperature, s.max_steps, run.rng("guided-search", i))
            ok = answer_judge(p, res.text)
            hits += ok
            rows.append(
                {
                    "problem_id": p.id,
                    "k": int(k),
                    "solution": res.text,
                    "answer": extract_final_answer(res.text) if res.text else None,
                    "correct": bool(ok),
                    "error": res.error,
                    "scores": res.scores,
                }
            )
        acc.append((int(k), hits / len(problems), len(problems)))
    write_jsonl(run.path(SOLUTIONS), rows)
    _write_csv(run.path(SEARCH_ACCURACY), ("k", "accuracy", "problems"), acc)


def _load_policy(run: Run, name: str):
    p = run.policy()
    p.load_theta(run.path(name))
    return p


def cmd_eval(run: Run) -> None:
    from .gfn import entropy, l1_distance, sample_trajectory, terminal_distribution
    from .search_eval import HashedEmbedder, answer_judge, diversity_report

    e = run.cfg.eval
    run.require(GFN_POLICY, "train-gfn")
    policies = {"gfn": _load_policy(run, GFN_POLICY)}
    if os.path.exists(run.path(BASELINE_POLICY)):
        policies["baseline"] = _load_policy(run, BASELINE_POLICY)
    policies["reference"] = run.policy()
    for p in policies.values():
        p.temperature = 1.0
    problems = _problem_subset(run.problems, e.n_problems)
    max_depth = run.cfg.gfn.max_depth

    samples: dict = {}

    def sampler(name):
        pol = policies[name]

        def sample(problem, rng):
            rec = sample_trajectory(pol, run.env, problem, None, rng, max_depth=max_depth)
            samples.setdefault(name, []).append((problem, rec.solution_text()))
            return rec.solution_text()

        return sample

    embedder = HashedEmbedder(e.embed_dim, e.embed_seed)
    reports = diversity_report(
        {n: sampler(n) for n in policies}, problems, e.samples_per_problem, embedder, seed=run.int_seed("eval")
    )
    out: dict = {"policies": {}}
    rows = []
    graded = run.env.supports_success_probability
    for name, rep in reports.items():
        entry = {"mean_similarity": rep.corpus_mean, "solutions": rep.n_solutions}
        if graded:
            per = {}
            for prob, text in samples[name]:
                per.setdefault(prob.id, []).append(answer_judge(prob, text))
            entry["sample_accuracy"] = float(np.mean([v for vs in per.values() for v in vs]))
        else:
            per = {}
        if hasattr(run.env, "target_distribution"):
            target = run.env.target_distribution()
            dist = terminal_distribution(policies[name], run.env, problems[0])
            entry["terminal_l1_to_target"] = l1_distance(dist, target)
            entry["terminal_entropy_ratio"] = entropy(dist) / entropy(target)
        out["policies"][name] = entry
        for pid, sim in rep.per_problem.items():
            accs = per.get(pid)
            rows.append((name, pid, sim, float(np.mean(accs)) if accs else ""))
    if os.path.exists(run.path(GFN_METRICS)):
        m = _read_csv(run.path(GFN_METRICS))
        if m:
            out["final_proportionality_gap"] = float(m[-1]["proportionality_gap"])
            out["initial_proportionality_gap"] = float(m[0]["proportionality_gap"])
    _write_json(run.path(EVAL_JSON), out)
    _write_csv(run.path(EVAL_ROWS), ("policy", "problem_id", "similarity", "accuracy"), rows)


def smooth(values, window: int) -> list[float]:
    """Trailing moving average, ignoring NaNs."""
    v = np.asarray(values, dtype=float)
    out = []
    for i in range(len(v)):
        w = v[max(0, i - window + 1) : i + 1]
        w = w[np.isfinite(w)]
        out.append(float(w.mean()) if w.size else float("nan"))
    return out


FIG4_PANELS = ("subtb_loss", "mean_reward", "proportionality_gap")


def cmd_report(run: Run) -> None:
    metrics = _read_csv(run.require(GFN_METRICS, "train-gfn"))
    rdir = run.path(REPORT_DIR)
    os.makedirs(rdir, exist_ok=True)
    it = [int(float(m["iteration"])) for m in metrics]
    window = max(1, len(metrics) // 20)
    for col in FIG4_PANELS:
        vals = [float(m[col]) for m in metrics]
        _write_csv(
            os.path.join(rdir, f"fig4_{col}.csv"),
            ("iteration", col, "smoothed"),
            zip(it, vals, smooth(vals, window)),
        )
    if os.path.exists(run.path(SEARCH_ACCURACY)):
        acc = _read_csv(run.path(SEARCH_ACCURACY))
        _write_csv(
            os.path.join(rdir, "fig2_accuracy_vs_k.csv"),
            ("k", "accuracy"),
            ((int(a["k"]), float(a["accuracy"])) for a in acc),
        )
    if os.path.exists(run.path(EVAL_JSON)):
        with open(run.path(EVAL_JSON)) as fh:
            ev = json.load(fh)
        _write_csv(
            os.path.join(rdir, "table3_similarity.csv"),
            ("policy", "mean_similarity"),
            ((k, v["mean_similarity"]) for k, v in sorted(ev["policies"].items())),
        )


COMMANDS = {
    "datagen": cmd_datagen,
    "augment": cmd_augment,
    "train-prm": cmd_train_prm,
    "train-gfn": cmd_train_gfn,
    "train-baseline": cmd_train_baseline,
    "guided-search": cmd_guided_search,
    "eval": cmd_eval,
    "report": cmd_report,
}


HELP = {
    "datagen": "MCTS step-label generation -> labeled.jsonl, rollouts.jsonl",
    "augment": "rollout reuse with similarity grouping -> augmented.jsonl",
    "train-prm": "fit the step scorer -> prm.npz",
    "train-gfn": "GFlowNet fine-tuning with SubTB -> gfn_policy.npz, gfn_metrics.csv",
    "train-baseline": "reward-maximising baseline -> baseline_policy.npz",
    "guided-search": "PRM-guided best-of-k step search -> solutions.jsonl, search_accuracy.csv",
    "eval": "accuracy, diversity and terminal-distribution metrics -> eval.json",
    "report": "plot-ready CSVs under report/",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stepflow", description="Step-level PRM data generation and GFlowNet training.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="YAML or JSON run config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--workers", type=int, help="cap on concurrent workers")
        p.add_argument("--out-dir", help="artifact directory (overrides the config)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    cfg.validate()
    return cfg


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = resolve_config(args)
        run = Run(cfg)
        COMMANDS[args.command](run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageDependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except Exception as exc:  # every other failure is a runtime error with a message, not a traceback
        log.debug("stage failed", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
