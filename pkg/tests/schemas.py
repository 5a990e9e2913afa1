"""JSON schemas for run artifacts and a helper that checks a whole run directory."""
import csv
import json
import os

import jsonschema

from stepflow.core import LABELED_STEP_SCHEMA

NUM = {"type": "number"}

ROLLOUT_ROW = {
    "type": "object",
    "required": ["node_id", "rollout_steps", "correct"],
    "properties": {
        "node_id": {"type": "integer", "minimum": 0},
        "rollout_steps": {"type": "array", "items": {"type": "string"}},
        "correct": {"type": "boolean"},
    },
    "additionalProperties": False,
}

SOLUTION_ROW = {
    "type": "object",
    "required": ["problem_id", "k", "solution", "answer", "correct", "error", "scores"],
    "properties": {
        "problem_id": {"type": "string"},
        "k": {"type": "integer", "minimum": 1},
        "solution": {"type": "string"},
        "answer": {"type": ["string", "null"]},
        "correct": {"type": "boolean"},
        "error": {"type": ["string", "null"]},
        "scores": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
    },
}

POLICY_ENTRY = {
    "type": "object",
    "required": ["mean_similarity", "solutions"],
    "properties": {
        "mean_similarity": {"type": "number", "minimum": -1, "maximum": 1},
        "solutions": {"type": "integer", "minimum": 2},
        "sample_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "terminal_l1_to_target": {"type": "number", "minimum": 0, "maximum": 2},
        "terminal_entropy_ratio": {"type": "number", "minimum": 0},
    },
}

EVAL = {
    "type": "object",
    "required": ["policies"],
    "properties": {
        "policies": {"type": "object", "required": ["gfn", "reference"], "additionalProperties": POLICY_ENTRY},
        "initial_proportionality_gap": NUM,
        "final_proportionality_gap": NUM,
    },
}

PRM_METRICS = {
    "type": "object",
    "required": ["dataset", "records", "loss_history"],
    "properties": {
        "dataset": {"type": "string"},
        "records": {"type": "integer", "minimum": 1},
        "loss_history": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "train_auc_nonzero": {"type": "number", "minimum": 0, "maximum": 1},
    },
}

CSV_HEADERS = {
    "gfn_metrics.csv": ["iteration", "subtb_loss", "mean_reward", "proportionality_gap", "buffer_size", "grad_norm"],
    "baseline_metrics.csv": ["iteration", "objective", "mean_return", "entropy", "grad_norm"],
    "search_accuracy.csv": ["k", "accuracy", "problems"],
    "eval_problems.csv": ["policy", "problem_id", "similarity", "accuracy"],
    "report/fig4_subtb_loss.csv": ["iteration", "subtb_loss", "smoothed"],
    "report/fig4_mean_reward.csv": ["iteration", "mean_reward", "smoothed"],
    "report/fig4_proportionality_gap.csv": ["iteration", "proportionality_gap", "smoothed"],
    "report/fig2_accuracy_vs_k.csv": ["k", "accuracy"],
    "report/table3_similarity.csv": ["policy", "mean_similarity"],
}

JSONL = {"labeled.jsonl": LABELED_STEP_SCHEMA, "augmented.jsonl": LABELED_STEP_SCHEMA, "rollouts.jsonl": ROLLOUT_ROW, "solutions.jsonl": SOLUTION_ROW}
JSON = {"eval.json": EVAL, "prm_metrics.json": PRM_METRICS}


def _csv_numeric(rows, skip=("policy", "problem_id")):
    for row in rows:
        for k, v in row.items():
            if k not in skip and v != "":
                float(v)


def validate_run_dir(out: str) -> list[str]:
    """Validate every artifact present; returns the names checked."""
    checked = []
    for name, schema in JSONL.items():
        path = os.path.join(out, name)
        if os.path.exists(path):
            with open(path) as fh:
                rows = [json.loads(line) for line in fh]
            assert rows, f"{name} is empty"
            for row in rows:
                jsonschema.validate(row, schema)
            checked.append(name)
    for name, schema in JSON.items():
        path = os.path.join(out, name)
        if os.path.exists(path):
            with open(path) as fh:
                jsonschema.validate(json.load(fh), schema)
            checked.append(name)
    for name, header in CSV_HEADERS.items():
        path = os.path.join(out, name)
        if os.path.exists(path):
            with open(path, newline="") as fh:
                reader = csv.DictReader(fh)
                assert reader.fieldnames == header, f"{name}: header {reader.fieldnames}"
                rows = list(reader)
            assert rows, f"{name} has no rows"
            _csv_numeric(rows)
            checked.append(name)
    return checked
