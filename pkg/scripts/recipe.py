"""Run the whole seeded recipe through the CLI: data, models, scores, tables, charts.

    python scripts/recipe.py OUT_DIR [--scale full|small] [--seed N]

Every stage lands in OUT_DIR/<stage>; the final SVG charts are in OUT_DIR/report.
"""
import argparse
import sys
from pathlib import Path

from halluguard.cli import EXIT_OK, run

SCALES = {
    "full": {
        "data": [],
        "model": [],
        "encoder": [],
        "records": '{"Correct": 50, "Error": 30, "Undertranslation": 30, '
                   '"StronglyDetached": 30, "Oscillatory": 30, "FullyDetached": 30}',
        "gen": [],
        "sweep": "1,5,10,20",
    },
    "small": {
        "data": ["--vocab-size", "12", "--min-len", "3", "--max-len", "5",
                 "--n-train", "80", "--n-dev", "10", "--n-eval", "40"],
        "model": ["--steps", "30", "--batch-size", "8", "--warmup", "5", "--eval-every", "10",
                  "--vocab-size", "12", "--d-model", "8", "--n-heads", "2", "--n-enc-layers", "1",
                  "--n-dec-layers", "1", "--d-ffn", "16"],
        "encoder": ["--steps", "20", "--batch-size", "8", "--warmup", "5", "--vocab-size", "12",
                    "--dim", "8"],
        "records": '{"Correct": 6, "StronglyDetached": 4, "Oscillatory": 4, "FullyDetached": 6}',
        "gen": ["--n", "3", "--beam-size", "3"],
        "sweep": "1,3",
    },
}


def recipe(out: Path, scale: str = "full", seed: int = 0) -> Path:
    s = SCALES[scale]
    out = Path(out)

    def step(name, *argv):
        code = run([*argv, "--seed", str(seed), "--out-dir", str(out), "--run-name", name])
        if code != EXIT_OK:
            raise SystemExit(f"stage {name} failed with exit code {code}")
        return out / name

    data = step("data", "gen-data", *s["data"], "--stratified", s["records"])
    model = step("model", "train", "--data", str(data), *s["model"]) / "model.ckpt"
    encoder = step("encoder", "train-encoder", "--data", str(data), *s["encoder"]) / "encoder.ckpt"
    scored = step("score", "score", "--input", str(data / "eval_records.jsonl"), "--model", str(model),
                  "--encoder", str(encoder), "--detectors", "seq_logprob,alti,dual_cos,chrf_pp")
    evaluation = step("evaluate", "evaluate", "--input", str(scored / "scored.jsonl"))
    mitigation = step("mitigate", "mitigate", "--input", str(scored / "scored.jsonl"), "--model", str(model),
                      "--fraction", "0.5", "--reranker", "alti", *s["gen"], "--sweep", s["sweep"])
    return step("report", "report", "--input", f"{evaluation},{mitigation}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    ap.add_argument("--scale", choices=sorted(SCALES), default="full")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print(recipe(args.out, args.scale, args.seed))


if __name__ == "__main__":
    sys.exit(main())
